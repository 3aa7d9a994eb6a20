"""``mergeforge`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 domain error (one line on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

PROG = "mergeforge"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class CliError(Exception):
    """Domain failure reported as ``mergeforge: error: <stage>: <message>``."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")


def _ids_from(maps, paths):
    ids = []
    for tmap, p in zip(maps, paths):
        ids.append(tmap.metadata.get("task_id") or Path(p).stem)
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids {ids}; set task_id metadata or use distinct file names")
    return ids


def _task_vectors(base, paths, only=None):
    """Task vectors from finetuned checkpoints or already-extracted task-vector files."""
    from .task_vectors import TaskVector, check_lineage, extract
    from .tensor import fingerprint, load_checkpoint

    maps = [load_checkpoint(p) for p in paths]
    ids = _ids_from(maps, paths)
    out = []
    for tmap, tid in zip(maps, ids):
        if tmap.metadata.get("kind") == "task_vector":
            tv = TaskVector.from_map(tmap)
            check_lineage(base, tv.base_fingerprint)
            out.append(TaskVector(tv.delta, tv.base_fingerprint or fingerprint(base), tid))
        else:
            out.append(extract(tmap, base, tid, only=only))
    return out


def _load_recipe(path, task_ids):
    from .merge import MergeRecipe

    if path is None:
        return MergeRecipe(tuple(task_ids))
    d = json.loads(Path(path).read_text())
    d.setdefault("task_ids", list(task_ids))
    return MergeRecipe.from_dict(d)


def _write_csv(path, header, rows):
    from .toy import to_csv

    text = to_csv(header, rows)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MERGEFORGE_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise CliError("config", f"MERGEFORGE_SEED must be an integer, got {env!r}") from None


# -- subcommands ---------------------------------------------------------------

def cmd_extract(args):
    from .task_vectors import extract
    from .tensor import load_checkpoint, save_checkpoint

    base = load_checkpoint(args.base)
    model = load_checkpoint(args.model)
    tid = args.task_id or model.metadata.get("task_id") or Path(args.model).stem
    tv = extract(model, base, tid, only=args.only)
    save_checkpoint(tv.to_map(), args.out)


def cmd_merge(args):
    from .merge import merge
    from .tensor import load_checkpoint, save_checkpoint

    base = load_checkpoint(args.base)
    vectors = _task_vectors(base, args.tasks, args.only)
    recipe = _load_recipe(args.recipe, [v.task_id for v in vectors])
    save_checkpoint(merge(recipe, vectors).to_map(), args.out)


def cmd_mask(args):
    from .masks import build_mask
    from .merge import merge
    from .tensor import load_checkpoint, save_checkpoint

    base = load_checkpoint(args.base)
    vectors = _task_vectors(base, args.tasks, args.only)
    recipe = _load_recipe(args.recipe, [v.task_id for v in vectors])
    tau = merge(recipe, vectors)
    lam = recipe.lam if args.lam is None else args.lam
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(vectors):
        save_checkpoint(build_mask(v, tau, lam).to_map(), out / f"{i:03d}_{v.task_id}.ntm")
    if args.merged_out:
        save_checkpoint(tau.to_map(), args.merged_out)


def cmd_apply(args):
    from .masks import TaskMask, apply_mask
    from .merge import MergedVector
    from .task_vectors import TaskVector, apply
    from .tensor import load_checkpoint, save_checkpoint

    base = load_checkpoint(args.base)
    delta = load_checkpoint(args.delta)
    kind = delta.metadata.get("kind")
    if args.mask:
        if kind != "merged_vector":
            raise ValueError("--mask requires a merged vector as --delta")
        theta = apply_mask(base, MergedVector.from_map(delta), TaskMask.from_map(load_checkpoint(args.mask)))
    elif kind == "merged_vector":
        theta = apply(base, MergedVector.from_map(delta), args.alpha)
    else:
        theta = apply(base, TaskVector.from_map(delta), args.alpha)
    save_checkpoint(theta, args.out)


def cmd_merge_experts(args):
    from .expert import ActionExpert, block_distance, merge_experts
    from .tensor import load_checkpoint, save_checkpoint

    maps = [load_checkpoint(p) for p in args.experts]
    ids = _ids_from(maps, args.experts)
    experts = [ActionExpert.from_map(m) for m in maps]
    shared, heads = merge_experts(experts, args.head_start_l, ids)
    out = Path(args.out_dir)
    (out / "heads").mkdir(parents=True, exist_ok=True)
    save_checkpoint(shared.to_map(), out / "shared_expert.ntm")
    for i, h in enumerate(heads):
        save_checkpoint(h.to_map(), out / "heads" / f"{i:03d}_{h.task_id}.ntm")
    if args.csv and len(experts) >= 2:
        _write_csv(args.csv, ["block", "distance"], list(enumerate(block_distance(experts), start=1)))


def cmd_route(args):
    from .router import RouterBundle, decision_rows, route_episode
    from .tensor import load_checkpoint
    from .toy import ToyBackbone

    bundle = RouterBundle.load(args.bundle)
    if bundle.base.metadata.get("kind") != "toy_backbone":
        raise ValueError("route needs a base checkpoint with kind=toy_backbone to encode observations")
    obs_map = load_checkpoint(args.obs)
    if "obs" not in obs_map:
        raise ValueError(f"{args.obs}: expected a tensor named 'obs'")
    obs = obs_map["obs"].reshape(-1, obs_map["obs"].shape[-1])[0]
    cfg = ToyBackbone.from_map(bundle.base).config
    block = bundle.subspace.source_block

    def encoder(theta):
        h_T, h_A = ToyBackbone(cfg, dict(theta)).streams(obs[None])
        return h_T[block - 1][0], h_A[block - 1][0]

    sel = route_episode(bundle, encoder)
    d = sel.decision
    print("r " + " ".join(repr(float(x)) for x in d.scores))
    print("p " + " ".join(repr(float(x)) for x in d.probs))
    print(f"m* {d.selected} {sel.task_id}")
    if args.csv:
        _write_csv(args.csv, ["task_id", "r_T", "r_A", "r", "p", "selected"], decision_rows(d, bundle.task_ids))


def cmd_analyze(args):
    from .masks import TaskMask, mask_stats
    from .tensor import load_checkpoint

    paths = sorted(Path(args.masks).glob("*.ntm"))
    if not paths:
        raise ValueError(f"no .ntm files in {args.masks}")
    stats = mask_stats([TaskMask.from_map(load_checkpoint(p)) for p in paths])
    _write_csv(args.csv, ["metric", "task_id", "component", "value"], stats.rows())


def _toy_config(args):
    from .toy import ToyConfig

    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(d, dict):
        raise ValueError("toy config must be a JSON object")
    recipe = d.pop("recipe", None)
    seed = _seed(args)
    if seed is not None:
        d["seed"] = seed
    return ToyConfig.from_dict(d), recipe


def _recipe_for(cfg, recipe_dict):
    from .merge import MergeRecipe

    ids = [f"task{i}" for i in range(cfg.num_tasks)]
    d = dict(recipe_dict or {})
    d.setdefault("task_ids", ids)
    return MergeRecipe.from_dict(d)


def cmd_toy_run(args):
    from .toy import build_bundle, run_pipeline, train_family

    cfg, recipe_dict = _toy_config(args)
    recipe = _recipe_for(cfg, recipe_dict)
    family = train_family(cfg)
    report = run_pipeline(cfg, recipe, family)
    report.write(args.out)
    if args.bundle:
        build_bundle(family, recipe, "V").save(args.bundle)


def cmd_progressive(args):
    from .toy import progressive_merge_eval, train_family

    cfg, _ = _toy_config(args)
    family = train_family(cfg)
    ks = args.k if args.k is not None else list(range(cfg.num_blocks + 1))
    rows = progressive_merge_eval(family, ks, args.reference)
    _write_csv(args.csv, ["k", "mse"], rows)


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=PROG, description="Merge task-specialized models and route between them.")
    p.add_argument("--seed", type=int, default=None, help="seed for any randomness (fallback: MERGEFORGE_SEED)")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("extract", help="task vector = finetuned - base")
    s.add_argument("--base", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--task-id", default=None)
    s.add_argument("--only", nargs="+", default=None, help="restrict to these tensor names")
    s.set_defaults(func=cmd_extract, stage="extract")

    for name, func, stage in (("merge", cmd_merge, "merge"), ("mask", cmd_mask, "mask")):
        s = sub.add_parser(name, help="merge task vectors" if name == "merge" else "build per-task masks")
        s.add_argument("--base", required=True)
        s.add_argument("--tasks", nargs="+", required=True, help="finetuned checkpoints or task-vector files")
        s.add_argument("--recipe", default=None, help="MergeRecipe JSON (default: task arithmetic, alpha=1)")
        s.add_argument("--only", nargs="+", default=None, help="restrict to these tensor names")
        if name == "merge":
            s.add_argument("--out", required=True)
        else:
            s.add_argument("--out-dir", required=True)
            s.add_argument("--lambda", dest="lam", type=float, default=None)
            s.add_argument("--merged-out", default=None, help="also write the merged vector here")
        s.set_defaults(func=func, stage=stage)

    s = sub.add_parser("apply", help="base + alpha * delta, or base + mask * merged")
    s.add_argument("--base", required=True)
    s.add_argument("--delta", required=True, help="task vector or merged vector")
    s.add_argument("--mask", default=None)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_apply, stage="apply")

    s = sub.add_parser("merge-experts", help="average shallow expert blocks, keep per-task heads")
    s.add_argument("--experts", nargs="+", required=True)
    s.add_argument("--head-start-l", type=int, default=None)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--csv", default=None, help="write per-block distances here")
    s.set_defaults(func=cmd_merge_experts, stage="merge-experts")

    s = sub.add_parser("route", help="route one observation through a bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--csv", default=None)
    s.set_defaults(func=cmd_route, stage="route")

    s = sub.add_parser("analyze", help="mask statistics as CSV")
    s.add_argument("masks", help="directory of task-mask .ntm files")
    s.add_argument("--csv", default="-")
    s.set_defaults(func=cmd_analyze, stage="analyze")

    s = sub.add_parser("toy", help="synthetic harness")
    toy = s.add_subparsers(dest="toy_command", metavar="TOYCOMMAND")
    toy.required = True
    t = toy.add_parser("run", help="train, merge, route and evaluate the toy family")
    t.add_argument("--config", default=None, help="toy config JSON (see README)")
    t.add_argument("--out", required=True)
    t.add_argument("--bundle", default=None, help="also save the router bundle here")
    t.set_defaults(func=cmd_toy_run, stage="toy run")

    s = sub.add_parser("progressive", help="MSE vs number of averaged leading expert blocks")
    s.add_argument("--config", default=None)
    s.add_argument("--k", type=int, nargs="+", default=None)
    s.add_argument("--reference", type=int, default=None)
    s.add_argument("--csv", default="-")
    s.set_defaults(func=cmd_progressive, stage="progressive")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None:
        if args.threads < 1:
            parser.print_usage(sys.stderr)
            print(f"{PROG}: error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    try:
        args.func(args)
    except CliError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, RuntimeError, ArithmeticError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"{PROG}: error: {args.stage}: {type(exc).__name__}: {msg}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
