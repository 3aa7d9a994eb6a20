"""Training-free test-time task routing over value-projection subspaces."""

from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .expert import ActionExpert, ExpertHead, SharedExpert, assemble
from .masks import TaskMask, apply_mask
from .merge import MergedVector
from .tensor import NamedTensorMap, load_checkpoint, save_checkpoint

KINDS = ("V", "K", "K_and_V")
DEFAULT_K_R = 8


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class RouterSubspace:
    P_T: np.ndarray  # k_r x d_model
    P_A: np.ndarray
    k_r: int
    source_block: int
    kind: str = "V"
    crossed: bool = True

    def to_dict(self) -> dict:
        return {"k_r": self.k_r, "source_block": self.source_block, "kind": self.kind, "crossed": self.crossed}


@dataclass(frozen=True)
class RoutingDecision:
    scores: np.ndarray
    probs: np.ndarray
    selected: int
    r_T: np.ndarray
    r_A: np.ndarray


def top_right_singular(mat: np.ndarray, k_r: int, rtol: float = 1e-10) -> np.ndarray:
    """First ``k_r`` rows of R^T in mat = L S R^T, sign-canonicalized (first nonzero entry positive)."""
    mat = np.asarray(mat, dtype=np.float64)
    if not 1 <= k_r <= mat.shape[1]:
        raise RoutingError(f"k_r={k_r} must be in [1, {mat.shape[1]}]")
    try:
        _, s, vt = np.linalg.svd(mat, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise RoutingError(f"SVD did not converge: {exc}") from exc
    rank = int(np.sum(s > rtol * (s[0] if s.size else 0.0))) if s.size and s[0] > 0 else 0
    if k_r > rank:
        raise RoutingError(f"k_r={k_r} exceeds the numerical rank {rank}")
    rows = vt[:k_r].copy()
    for row in rows:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return rows


def _projection(block: dict[str, np.ndarray], path: str, kind: str, prefix: str) -> np.ndarray:
    v = np.asarray(block[f"{prefix}{path}.v"], dtype=np.float64)
    k = np.asarray(block[f"{prefix}{path}.k"], dtype=np.float64)
    if kind == "V":
        return v
    if kind == "K":
        return k
    return np.vstack([k, v])


def extract_subspace(merged_expert, block_index: int | None = None, k_r: int = DEFAULT_K_R,
                     kind: str = "V", crossed: bool = True) -> RouterSubspace:
    """Top-k_r right singular vectors of the task/action path projections of one block.

    ``merged_expert`` is a :class:`SharedExpert` or an :class:`ActionExpert`;
    ``block_index`` defaults to ``head_start_l - 1`` (resp. ``L - 1``).
    ``kind='K_and_V'`` decomposes the row-stacked ``[K; V]``.
    """
    if kind not in KINDS:
        raise RoutingError(f"unknown subspace kind {kind!r}; expected one of {KINDS}")
    if block_index is None:
        block_index = (merged_expert.head_start_l if isinstance(merged_expert, SharedExpert)
                       else merged_expert.config.num_blocks) - 1
    if block_index < 1:
        raise RoutingError("no merged block precedes the expert head (head_start_l must be >= 2 for routing)")
    try:
        block = merged_expert.block_params(block_index)
    except Exception as exc:
        raise RoutingError(str(exc)) from exc
    if not block:
        raise RoutingError(f"block {block_index} does not exist")
    prefix = f"blocks.{block_index}."
    P_T = top_right_singular(_projection(block, "task_attn", kind, prefix), k_r)
    P_A = top_right_singular(_projection(block, "act_attn", kind, prefix), k_r)
    return RouterSubspace(P_T, P_A, k_r, block_index, kind, crossed)


def activation_strength(subspace: RouterSubspace, h_T: np.ndarray, h_A: np.ndarray) -> tuple[float, float]:
    """r_T = ||P_T h_A||, r_A = ||P_A h_T|| (crossed pairing); matched pairing when ``crossed`` is False."""
    h_T = np.asarray(h_T, dtype=np.float64)
    h_A = np.asarray(h_A, dtype=np.float64)
    d = subspace.P_T.shape[1]
    if h_T.shape != (d,) or h_A.shape != (d,):
        raise RoutingError(f"pooled hidden states must have shape ({d},), got {h_T.shape} and {h_A.shape}")
    if subspace.crossed:
        return float(np.linalg.norm(subspace.P_T @ h_A)), float(np.linalg.norm(subspace.P_A @ h_T))
    return float(np.linalg.norm(subspace.P_T @ h_T)), float(np.linalg.norm(subspace.P_A @ h_A))


def softmax(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    e = np.exp(r - r.max())
    return e / e.sum()


def decide(r_T: Sequence[float], r_A: Sequence[float]) -> RoutingDecision:
    r_T = np.asarray(r_T, dtype=np.float64)
    r_A = np.asarray(r_A, dtype=np.float64)
    if r_T.size == 0:
        raise RoutingError("empty task set")
    scores = 0.5 * (r_T + r_A)
    probs = softmax(scores)
    # softmax is monotone, so argmax over scores is argmax over probs; lowest index wins ties
    return RoutingDecision(scores, probs, int(np.argmax(scores)), r_T, r_A)


def _pool(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return h.mean(axis=0) if h.ndim == 2 else h


@dataclass
class RouterBundle:
    base: NamedTensorMap
    tau_merge: MergedVector
    masks: list[TaskMask]
    shared: SharedExpert
    heads: list[ExpertHead]
    subspace: RouterSubspace

    def __post_init__(self):
        mask_ids = [m.task_id for m in self.masks]
        head_ids = [h.task_id for h in self.heads]
        if mask_ids != head_ids:
            raise RoutingError(f"task ids of masks {mask_ids} and heads {head_ids} disagree")
        if not mask_ids:
            raise RoutingError("empty task set")

    @property
    def task_ids(self) -> list[str]:
        return [m.task_id for m in self.masks]

    def masked_variant(self, m: int) -> NamedTensorMap:
        return apply_mask(self.base, self.tau_merge, self.masks[m])

    def expert_for(self, m: int) -> ActionExpert:
        return assemble(self.shared, self.heads[m])

    # -- bundle directory ----------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        (d / "masks").mkdir(parents=True, exist_ok=True)
        (d / "heads").mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.base, d / "base.ntm")
        save_checkpoint(self.tau_merge.to_map(), d / "tau_merge.ntm")
        save_checkpoint(self.shared.to_map(), d / "shared_expert.ntm")
        for i, (m, h) in enumerate(zip(self.masks, self.heads)):
            save_checkpoint(m.to_map(), d / "masks" / f"{i:03d}_{m.task_id}.ntm")
            save_checkpoint(h.to_map(), d / "heads" / f"{i:03d}_{h.task_id}.ntm")
        meta = dict(self.subspace.to_dict(), task_ids=self.task_ids)
        (d / "router.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "RouterBundle":
        d = Path(directory)
        meta = json.loads((d / "router.json").read_text())
        masks = [TaskMask.from_map(load_checkpoint(p)) for p in sorted((d / "masks").glob("*.ntm"))]
        heads = [ExpertHead.from_map(load_checkpoint(p)) for p in sorted((d / "heads").glob("*.ntm"))]
        shared = SharedExpert.from_map(load_checkpoint(d / "shared_expert.ntm"))
        subspace = extract_subspace(shared, meta["source_block"], meta["k_r"], meta.get("kind", "V"),
                                    meta.get("crossed", True))
        return cls(load_checkpoint(d / "base.ntm"), MergedVector.from_map(load_checkpoint(d / "tau_merge.ntm")),
                   masks, shared, heads, subspace)


Encoder = Callable[[NamedTensorMap], tuple[np.ndarray, np.ndarray]]


def route(bundle: RouterBundle, encoder: Encoder) -> RoutingDecision:
    """Score every masked backbone variant on one observation and pick the strongest.

    ``encoder(theta)`` runs the backbone with weights ``theta`` on the
    observation and returns the block-(l-1) task and action hidden states,
    either as token sequences ``(n, d)`` (mean-pooled here) or pooled vectors.
    """
    r_T, r_A = [], []
    for m, tid in enumerate(bundle.task_ids):
        theta = bundle.masked_variant(m)
        try:
            h_T, h_A = encoder(theta)
        except Exception as exc:
            raise RoutingError(f"encoder failed for task {tid!r}: {exc}") from exc
        rt, ra = activation_strength(bundle.subspace, _pool(h_T), _pool(h_A))
        r_T.append(rt)
        r_A.append(ra)
    return decide(r_T, r_A)


@dataclass(frozen=True)
class EpisodeSelection:
    decision: RoutingDecision
    task_id: str
    mask: TaskMask
    head: ExpertHead
    backbone: NamedTensorMap
    expert: ActionExpert


def route_episode(bundle: RouterBundle, encoder: Encoder) -> EpisodeSelection:
    """Route once on the initial observation; the returned components stay fixed for the episode."""
    decision = route(bundle, encoder)
    m = decision.selected
    return EpisodeSelection(decision, bundle.task_ids[m], bundle.masks[m], bundle.heads[m],
                            bundle.masked_variant(m), bundle.expert_for(m))


def decision_rows(decision: RoutingDecision, task_ids: Sequence[str]) -> list[tuple]:
    """CSV rows ``(task_id, r_T, r_A, r, p, selected)``."""
    return [(t, decision.r_T[i], decision.r_A[i], decision.scores[i], decision.probs[i], int(i == decision.selected))
            for i, t in enumerate(task_ids)]

