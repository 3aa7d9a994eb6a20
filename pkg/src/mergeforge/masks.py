"""Per-task consistency masks over a merged task vector and their interference statistics."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .merge import MergedVector
from .task_vectors import TaskVector, check_lineage
from .tensor import NamedTensorMap, TensorError

DEFAULT_LAMBDA = 0.6


@dataclass(frozen=True)
class TaskMask:
    masks: NamedTensorMap
    lam: float
    task_id: str

    def to_map(self) -> NamedTensorMap:
        return self.masks.with_metadata(kind="task_mask", task_id=self.task_id, **{"lambda": repr(float(self.lam))})

    @classmethod
    def from_map(cls, tmap: NamedTensorMap) -> "TaskMask":
        meta = tmap.metadata
        if meta.get("kind") != "task_mask":
            raise ValueError(f"expected kind=task_mask, got {meta.get('kind')!r}")
        return cls(NamedTensorMap(tmap), float(meta["lambda"]), meta.get("task_id", ""))


@dataclass
class MaskStats:
    selfish_ratio: float
    per_component_active_ratio: dict[str, float]
    per_task_active_ratio: dict[str, float]
    M: int
    N: int
    per_task_component_active_ratio: dict[tuple[str, str], float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, str, float]]:
        """Long-format rows ``(metric, task_id, component, value)`` in a stable order."""
        out = [("selfish_ratio", "", "", self.selfish_ratio),
               ("num_tasks", "", "", float(self.M)),
               ("num_positions", "", "", float(self.N))]
        out += [("active_ratio", t, "", v) for t, v in self.per_task_active_ratio.items()]
        out += [("active_ratio", t, c, v) for (t, c), v in self.per_task_component_active_ratio.items()]
        out += [("active_ratio", "", c, v) for c, v in self.per_component_active_ratio.items()]
        return out


def build_mask(tau_m: TaskVector, tau_merge: MergedVector, lam: float = DEFAULT_LAMBDA) -> TaskMask:
    """S_m = 1[|tau_m| > lam * |tau_merge - tau_m|], evaluated in float32 with a strict inequality."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if tau_merge.base_fingerprint and tau_m.base_fingerprint != tau_merge.base_fingerprint:
        raise TensorError("task vector and merged vector come from different bases")
    lam32 = np.float32(lam)
    out = []
    for name, t in tau_m.delta.items():
        if name not in tau_merge.tau_merge:
            raise TensorError(f"{name}: missing from merged vector")
        tm = tau_merge.tau_merge[name]
        if tm.shape != t.shape:
            raise TensorError(f"{name}: shape {list(t.shape)} vs merged {list(tm.shape)}")
        residual = np.abs(tm - t)
        out.append((name, (np.abs(t) > lam32 * residual).astype(np.float32)))
    return TaskMask(NamedTensorMap(out), float(lam), tau_m.task_id)


def apply_mask(theta_0: NamedTensorMap, tau_merge: MergedVector, mask: TaskMask) -> NamedTensorMap:
    """theta_0 + S_m * tau_merge; unmasked positions keep the base value bit-for-bit."""
    if tau_merge.base_fingerprint:
        check_lineage(theta_0, tau_merge.base_fingerprint)
    updates = {}
    for name, tm in tau_merge.tau_merge.items():
        if name not in mask.masks:
            raise TensorError(f"{name}: no mask entry")
        s, base = mask.masks[name], theta_0[name]
        if s.shape != tm.shape or base.shape != tm.shape:
            raise TensorError(f"{name}: shape mismatch base {list(base.shape)}, mask {list(s.shape)}, delta {list(tm.shape)}")
        updates[name] = np.where(s > 0, base + tm, base)
    return theta_0.replace(updates)


def _check_same_shapes(masks: Sequence[TaskMask]) -> None:
    if not masks:
        raise ValueError("need at least one mask")
    ref = masks[0].masks.shapes()
    for m in masks[1:]:
        if m.masks.shapes() != ref:
            raise TensorError(f"mask for {m.task_id!r} has different tensor shapes")


def selfish_ratio(masks: Sequence[TaskMask]) -> float:
    """Fraction of positions retained by exactly one task mask."""
    _check_same_shapes(masks)
    selfish = 0
    total = 0
    for name in masks[0].masks:
        counts = np.zeros(masks[0].masks[name].shape, dtype=np.int64)
        for m in masks:
            counts += m.masks[name] > 0
        selfish += int(np.count_nonzero(counts == 1))
        total += counts.size
    return selfish / total


def active_ratio(mask: TaskMask, component_filter: str | None = None) -> float:
    names = [n for n in mask.masks if component_filter is None or n.startswith(component_filter)]
    if not names:
        raise KeyError(f"no mask tensor matches prefix {component_filter!r}")
    active = sum(int(np.count_nonzero(mask.masks[n] > 0)) for n in names)
    return active / sum(mask.masks[n].size for n in names)


def component_of(name: str) -> str:
    return name.split(".", 1)[0]


def mask_stats(masks: Sequence[TaskMask]) -> MaskStats:
    _check_same_shapes(masks)
    components = list(dict.fromkeys(component_of(n) for n in masks[0].masks))
    per_task = {m.task_id: active_ratio(m) for m in masks}
    per_tc = {}
    for m in masks:
        for c in components:
            names = [n for n in m.masks if component_of(n) == c]
            per_tc[(m.task_id, c)] = active_ratio(TaskMask(m.masks.select(names), m.lam, m.task_id))
    per_comp = {c: float(np.mean([per_tc[(m.task_id, c)] for m in masks])) for c in components}
    return MaskStats(selfish_ratio(masks), per_comp, per_task, len(masks), masks[0].masks.num_elements(), per_tc)
