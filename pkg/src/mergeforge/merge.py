"""Data-free merge kernels: weight averaging, Task Arithmetic and TIES.

Reductions over tasks run on values sorted along the task axis and are
accumulated in float64 before rounding to float32, so every kernel is exactly
invariant to the order in which task vectors are passed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .task_vectors import LineageError, TaskVector
from .tensor import NamedTensorMap, TensorError, ew

METHODS = ("average", "task_arithmetic", "ties")


class UnknownMethodError(ValueError):
    pass


@dataclass(frozen=True)
class MergeRecipe:
    task_ids: tuple[str, ...]
    method: str = "task_arithmetic"
    alpha: float = 1.0
    ties_keep_fraction: float = 0.2
    lam: float = 0.6
    head_start_l: int | None = None  # None -> L (only the final block is a head)

    def __post_init__(self):
        object.__setattr__(self, "task_ids", tuple(self.task_ids))
        if not self.task_ids:
            raise ValueError("task_ids must be non-empty")
        if len(set(self.task_ids)) != len(self.task_ids):
            raise ValueError(f"task_ids must be unique: {list(self.task_ids)}")
        if self.method not in METHODS:
            raise UnknownMethodError(f"unknown merge method {self.method!r}; expected one of {', '.join(METHODS)}")
        if not 0.0 < self.ties_keep_fraction <= 1.0:
            raise ValueError(f"ties_keep_fraction must be in (0, 1], got {self.ties_keep_fraction}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.head_start_l is not None and self.head_start_l < 1:
            raise ValueError("head_start_l must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_ids"] = list(self.task_ids)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MergeRecipe":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - {"task_ids", "method", "alpha", "ties_keep_fraction", "lam", "head_start_l"}
        if unknown:
            raise ValueError(f"unknown recipe keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MergeRecipe":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class MergedVector:
    tau_merge: NamedTensorMap
    recipe: MergeRecipe | None
    source_task_ids: tuple[str, ...]
    base_fingerprint: str = field(default="")

    @property
    def delta(self) -> NamedTensorMap:
        return self.tau_merge

    def to_map(self) -> NamedTensorMap:
        meta = {"kind": "merged_vector", "base_fingerprint": self.base_fingerprint,
                "source_task_ids": json.dumps(list(self.source_task_ids))}
        if self.recipe is not None:
            meta["recipe"] = json.dumps(self.recipe.to_dict(), sort_keys=True)
        return self.tau_merge.with_metadata(**meta)

    @classmethod
    def from_map(cls, tmap: NamedTensorMap) -> "MergedVector":
        meta = tmap.metadata
        recipe = MergeRecipe.from_json(meta["recipe"]) if "recipe" in meta else None
        return cls(NamedTensorMap(tmap), recipe, tuple(json.loads(meta.get("source_task_ids", "[]"))),
                   meta.get("base_fingerprint", ""))


def _stack(vectors: list[TaskVector]) -> dict[str, np.ndarray]:
    """Per tensor name, a (M, ...) float32 stack; validates lineage and shapes."""
    if not vectors:
        raise ValueError("need at least one task vector")
    ref = vectors[0]
    for v in vectors[1:]:
        if v.base_fingerprint != ref.base_fingerprint:
            raise LineageError(f"task {v.task_id!r} has base fingerprint {v.base_fingerprint[:16]}, "
                               f"task {ref.task_id!r} has {ref.base_fingerprint[:16]}")
        if v.delta.shapes() != ref.delta.shapes() or list(v.delta) != list(ref.delta):
            raise TensorError(f"task {v.task_id!r} tensor names/shapes differ from task {ref.task_id!r}")
    return {name: np.stack([v.delta[name] for v in vectors]) for name in ref.delta}


def _ordered_sum(stack: np.ndarray) -> np.ndarray:
    return np.sort(stack, axis=0).astype(np.float64).sum(axis=0)


def _wrap(out: dict, vectors: list[TaskVector], recipe=None) -> MergedVector:
    return MergedVector(NamedTensorMap(out), recipe, tuple(v.task_id for v in vectors), vectors[0].base_fingerprint)


def merge_average(vectors: list[TaskVector]) -> MergedVector:
    stacks = _stack(vectors)
    out = {n: (_ordered_sum(s) / s.shape[0]).astype(np.float32) for n, s in stacks.items()}
    return _wrap(out, vectors)


def merge_ta(vectors: list[TaskVector]) -> MergedVector:
    """Unweighted sum of task vectors; scaling by alpha happens in :func:`merge`."""
    stacks = _stack(vectors)
    return _wrap({n: _ordered_sum(s).astype(np.float32) for n, s in stacks.items()}, vectors)


def trim_top_fraction(x: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero entries whose magnitude is below the k-th largest, k = ceil(keep * n).

    Entries tied with the threshold magnitude are all kept.
    """
    mags = np.abs(x).ravel()
    k = max(1, math.ceil(keep_fraction * mags.size - 1e-9))
    if k >= mags.size:
        return x.copy()
    threshold = np.partition(mags, mags.size - k)[mags.size - k]
    return np.where(np.abs(x) >= threshold, x, np.float32(0)).astype(np.float32)


def merge_ties(vectors: list[TaskVector], keep_fraction: float = 0.2) -> MergedVector:
    """TIES: trim each task vector per tensor, elect a sign per position, disjoint mean.

    A zero sign sum elects the positive sign.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    stacks = _stack(vectors)
    out = {}
    for name, s in stacks.items():
        trimmed = np.stack([trim_top_fraction(t, keep_fraction) for t in s])
        total = _ordered_sum(trimmed)
        elected = np.where(total >= 0, 1.0, -1.0)
        agree = (trimmed != 0) & (np.sign(trimmed) == elected)
        contrib = np.where(agree, trimmed, np.float32(0))
        count = agree.sum(axis=0)
        merged = np.where(count > 0, _ordered_sum(contrib) / np.maximum(count, 1), 0.0)
        out[name] = merged.astype(np.float32)
    return _wrap(out, vectors)


def merge(recipe: MergeRecipe, vectors: list[TaskVector]) -> MergedVector:
    """tau_merge = alpha * R({tau_m}) with R chosen by ``recipe.method``."""
    if recipe.method not in METHODS:
        raise UnknownMethodError(f"unknown merge method {recipe.method!r}")
    ids = [v.task_id for v in vectors]
    if sorted(ids) != sorted(recipe.task_ids):
        raise ValueError(f"recipe tasks {list(recipe.task_ids)} do not match vectors {ids}")
    by_id = {v.task_id: v for v in vectors}
    vectors = [by_id[t] for t in recipe.task_ids]
    if recipe.method == "average":
        raw = merge_average(vectors)
    elif recipe.method == "task_arithmetic":
        raw = merge_ta(vectors)
    else:
        raw = merge_ties(vectors, recipe.ties_keep_fraction)
    scaled = raw.tau_merge
    if recipe.alpha != 1.0:
        scaled = NamedTensorMap((n, ew("scale", t, recipe.alpha)) for n, t in scaled.items())
    return MergedVector(scaled, recipe, raw.source_task_ids, raw.base_fingerprint)
