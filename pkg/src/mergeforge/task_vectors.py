"""Task vectors: extraction from finetuned checkpoints, low-rank materialization, application."""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from .tensor import NamedTensorMap, TensorError, ew, fingerprint


class LineageError(ValueError):
    """Raised when vectors built on different base checkpoints are combined."""


@dataclass(frozen=True)
class TaskVector:
    delta: NamedTensorMap
    base_fingerprint: str
    task_id: str

    def to_map(self) -> NamedTensorMap:
        return self.delta.with_metadata(kind="task_vector", base_fingerprint=self.base_fingerprint, task_id=self.task_id)

    @classmethod
    def from_map(cls, tmap: NamedTensorMap) -> "TaskVector":
        meta = tmap.metadata
        if meta.get("kind") != "task_vector":
            raise ValueError(f"expected kind=task_vector, got {meta.get('kind')!r}")
        return cls(NamedTensorMap(tmap), meta["base_fingerprint"], meta.get("task_id", ""))


@dataclass(frozen=True)
class LowRankUpdate:
    down: np.ndarray  # r x d_in
    up: np.ndarray  # d_out x r
    scaling: float
    target_name: str

    def __post_init__(self):
        if self.scaling < 0:
            raise ValueError("scaling must be non-negative")


def extract(theta_m: NamedTensorMap, theta_0: NamedTensorMap, task_id: str = "",
            only: Iterable[str] | None = None) -> TaskVector:
    """tau = theta_m - theta_0 over the shared names (optionally restricted to ``only``).

    Names present in only one of the maps are treated as frozen and skipped.
    """
    names = [n for n in theta_m if n in theta_0]
    if only is not None:
        keep = set(only)
        missing = keep - set(names)
        if missing:
            raise TensorError(f"requested tensors not in both checkpoints: {sorted(missing)}")
        names = [n for n in names if n in keep]
    delta = []
    for name in names:
        if theta_m[name].shape != theta_0[name].shape:
            raise TensorError(f"{name}: shape {list(theta_m[name].shape)} vs base {list(theta_0[name].shape)}")
        delta.append((name, ew("sub", theta_m[name], theta_0[name])))
    tid = task_id or theta_m.metadata.get("task_id", "")
    return TaskVector(NamedTensorMap(delta), fingerprint(theta_0), tid)


def materialize(lr: LowRankUpdate) -> np.ndarray:
    down = np.asarray(lr.down, dtype=np.float64)
    up = np.asarray(lr.up, dtype=np.float64)
    if down.ndim != 2 or up.ndim != 2 or up.shape[1] != down.shape[0]:
        raise TensorError(f"{lr.target_name}: inner dimension mismatch, up {list(up.shape)} @ down {list(down.shape)}")
    if down.shape[0] > min(down.shape[1], up.shape[0]):
        raise TensorError(f"{lr.target_name}: rank {down.shape[0]} exceeds min(d_in, d_out)")
    return (lr.scaling * (up @ down)).astype(np.float32)


def check_lineage(theta_0: NamedTensorMap, base_fingerprint: str) -> None:
    fp = fingerprint(theta_0)
    if fp != base_fingerprint:
        raise LineageError(f"base fingerprint mismatch: checkpoint {fp[:16]} vs delta {base_fingerprint[:16]}")


def apply(theta_0: NamedTensorMap, tau, alpha: float = 1.0) -> NamedTensorMap:
    """theta_0 + alpha * delta for every tensor in the delta; the rest pass through.

    ``tau`` is anything with ``delta`` and ``base_fingerprint`` attributes
    (TaskVector, MergedVector).
    """
    check_lineage(theta_0, tau.base_fingerprint)
    updates = {}
    for name, d in tau.delta.items():
        if name not in theta_0:
            raise TensorError(f"delta tensor {name!r} not present in base")
        if d.shape != theta_0[name].shape:
            raise TensorError(f"{name}: delta shape {list(d.shape)} vs base {list(theta_0[name].shape)}")
        if alpha == 0.0:
            continue  # keeps signed zeros of the base intact
        step = d if alpha == 1.0 else ew("scale", d, alpha)
        updates[name] = ew("add", theta_0[name], step)
    return theta_0.replace(updates)
