"""Task-vector merging, consistency masks, action experts and subspace routing."""

from importlib import import_module

__version__ = "0.1.0"

# name -> submodule; resolved on first access so ``mergeforge.cli`` can set
# BLAS thread variables before numpy is imported
_EXPORTS = {
    "ActionExpert": "expert", "ExpertConfig": "expert", "ExpertHead": "expert", "SharedExpert": "expert",
    "block_distance": "expert", "merge_experts": "expert",
    "TaskMask": "masks", "apply_mask": "masks", "build_mask": "masks", "mask_stats": "masks",
    "selfish_ratio": "masks",
    "MergedVector": "merge", "MergeRecipe": "merge",
    "RouterBundle": "router", "extract_subspace": "router", "route": "router", "route_episode": "router",
    "LowRankUpdate": "task_vectors", "TaskVector": "task_vectors", "apply": "task_vectors",
    "extract": "task_vectors", "materialize": "task_vectors",
    "NamedTensorMap": "tensor", "fingerprint": "tensor", "load_checkpoint": "tensor", "save_checkpoint": "tensor",
}

__all__ = list(_EXPORTS)


def __getattr__(name):
    if name not in _EXPORTS:
        raise AttributeError(f"module 'mergeforge' has no attribute {name!r}")
    value = getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    globals()[name] = value
    return value
