"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python tests/test_acceptance.py``).
The harness family is trained once per module and its training time is
charged to every criterion whose runtime budget covers the toy pipeline.
"""

import sys
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from mergeforge.expert import ActionExpert, ExpertConfig, merge_experts, param_shapes
from mergeforge.masks import active_ratio, apply_mask, build_mask
from mergeforge.merge import MergedVector, MergeRecipe, merge, merge_ta, merge_ties
from mergeforge.router import decide, extract_subspace, softmax, top_right_singular
from mergeforge.task_vectors import TaskVector, extract
from mergeforge.tensor import NamedTensorMap, load_checkpoint, save_checkpoint
from mergeforge.toy import ADAPTED, ToyConfig, k_blind_pair, run_pipeline, selfish_ratio_by_M, train_family

from conftest import ACCEPTANCE_LINES, perturbed, random_map
from oracles import finite_difference_check, mask_loop, ta_loop, ties_explicit

CONFIG = ToyConfig()


@contextmanager
def criterion(n: int, name: str):
    """Record PASS if the body completes, FAIL with the reason otherwise."""
    note = {"detail": ""}
    try:
        yield note
    except BaseException as exc:
        line = f"FAIL {n:2d} {name}: {exc}".splitlines()[0]
        ACCEPTANCE_LINES.append((n, line))
        print(line)
        raise
    line = f"PASS {n:2d} {name}: {note['detail']}"
    ACCEPTANCE_LINES.append((n, line))
    print(line)


@pytest.fixture(scope="module")
def harness():
    t = time.perf_counter()
    family = train_family(CONFIG)
    train_s = time.perf_counter() - t
    t = time.perf_counter()
    report = run_pipeline(CONFIG, family=family)
    return family, report, train_s, time.perf_counter() - t


def _vectors(family, M=None):
    fts = family.finetuned[:M]
    return [extract(f.theta, family.theta_0, f.task.task_id, only=ADAPTED) for f in fts]


def test_01_mask_oracle():
    with criterion(1, "mask oracle equivalence") as c:
        t = time.perf_counter()
        for seed in range(100):
            rng = np.random.default_rng(seed)
            shape = tuple(int(s) for s in rng.integers(1, 7, rng.integers(1, 4)))
            tm = rng.standard_normal(shape).astype(np.float32)
            merged = (tm + rng.standard_normal(shape)).astype(np.float32)
            if seed % 5 == 0:
                merged.flat[0] = tm.flat[0]  # equality edge: |tau_merge - tau_m| = 0
            lam = float(rng.uniform(0.0, 2.0))
            got = build_mask(TaskVector(NamedTensorMap({"w": tm}), "", "t"),
                             MergedVector(NamedTensorMap({"w": merged}), None, ("t",)), lam).masks["w"]
            assert got.tobytes() == mask_loop(tm, merged, lam).tobytes(), f"pair {seed} differs"
        elapsed = time.perf_counter() - t
        assert elapsed < 5, f"{elapsed:.2f}s"
        c["detail"] = f"100 pairs bit-exact in {elapsed:.2f}s"


def _rel(got, want):
    return float(np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-12))


def test_02_merge_oracles():
    with criterion(2, "TA/TIES oracles") as c:
        t = time.perf_counter()
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(1, 12))
            arrays = [rng.standard_normal(n).astype(np.float32) for _ in range(1 + seed % 4)]
            tvs = [TaskVector(NamedTensorMap({"w": a}), "fp", f"t{i}") for i, a in enumerate(arrays)]
            keep = [0.1, 0.2, 0.5, 1.0][seed % 4]
            worst = max(worst, _rel(merge_ta(tvs).tau_merge["w"], ta_loop(arrays)),
                        _rel(merge_ties(tvs, keep).tau_merge["w"], ties_explicit(arrays, keep)))
        elapsed = time.perf_counter() - t
        assert worst <= 1e-6, f"max relative error {worst:.3g}"
        assert elapsed < 5, f"{elapsed:.2f}s"
        c["detail"] = f"max rel err {worst:.2g} over 100 vectors in {elapsed:.2f}s"


def test_03_identity_recovery():
    with criterion(3, "M=1 identity recovery") as c:
        for seed in range(20):
            rng = np.random.default_rng(seed)
            base = random_map(rng)
            ft = perturbed(base, rng)
            tv = extract(ft, base, "t")
            tau = merge(MergeRecipe(("t",), "task_arithmetic", alpha=1.0), [tv])
            theta = apply_mask(base, tau, build_mask(tv, tau))
            assert all(theta[k].tobytes() == ft[k].tobytes() for k in ft), f"library seed {seed}"
        rep = run_pipeline(replace(CONFIG, num_tasks=1))
        a, b = rep.mse["finetuned"], rep.mse["masked_routed"]
        assert a == b, f"toy (b) {b} != (a) {a}"
        c["detail"] = f"20 library cases exact; toy (b) == (a) == {a['task0']:.4f}"


def test_04_lambda_monotonicity(harness):
    family, _, _, _ = harness
    with criterion(4, "lambda monotonicity") as c:
        vs = _vectors(family)
        tau = merge(MergeRecipe(tuple(v.task_id for v in vs)), vs)
        grid = [round(0.2 + 0.1 * i, 1) for i in range(8)]
        ratios = np.array([[active_ratio(build_mask(v, tau, lam)) for lam in grid] for v in vs])
        assert np.all(np.diff(ratios, axis=1) <= 0), "active ratio increases somewhere"
        mean = ratios.mean(0)
        assert np.any(np.diff(mean) < 0), "no strict decrease"
        c["detail"] = "mean active ratio " + " ".join(f"{x:.4f}" for x in mean)


def test_05_selfish_trend(harness):
    family, _, train_s, _ = harness
    with criterion(5, "selfish-ratio trend") as c:
        t = time.perf_counter()
        r = selfish_ratio_by_M(family)
        elapsed = train_s + time.perf_counter() - t
        assert r[2] <= r[3] <= r[4], f"ratios {r}"
        assert elapsed < 120, f"{elapsed:.1f}s including training"
        c["detail"] = f"M=2,3,4: {r[2]:.3f} {r[3]:.3f} {r[4]:.3f}; {elapsed:.0f}s including training"


def test_06_gradient_check():
    with criterion(6, "gradient check") as c:
        t = time.perf_counter()
        cfg = ExpertConfig(num_blocks=2, d_model=8, n_heads=2, d_ff=16, action_dim=2, horizon=2, n_queries=3)
        rng = np.random.default_rng(0)
        e = ActionExpert.init(cfg, 0)
        e = ActionExpert(cfg, {k: v.astype(np.float64) + 0.05 * rng.standard_normal(v.shape)
                               for k, v in e.params.items()})
        hT = [rng.standard_normal((2, 3, 8)) for _ in range(2)]
        hA = [rng.standard_normal((2, 3, 8)) for _ in range(2)]
        errors = finite_difference_check(e, hT, hA, rng.standard_normal((2, 2, 2)))
        elapsed = time.perf_counter() - t
        assert set(errors) == set(param_shapes(cfg))
        worst = max(errors, key=errors.get)
        assert errors[worst] <= 1e-3, f"{worst}: {errors[worst]:.3g}"
        assert elapsed < 60, f"{elapsed:.1f}s"
        c["detail"] = f"{len(errors)} groups, every entry, max rel err {errors[worst]:.2g} in {elapsed:.1f}s"


def test_07_svd_validity(harness):
    family, _, _, _ = harness
    with criterion(7, "SVD validity") as c:
        shared, _ = merge_experts([f.expert for f in family.finetuned], CONFIG.num_blocks)
        b = CONFIG.num_blocks - 1
        mats = [np.asarray(shared.params[f"blocks.{b}.{p}.{w}"], np.float64)
                for p in ("task_attn", "act_attn") for w in ("k", "v")]
        mats += [np.random.default_rng(s).standard_normal((8, 8)) for s in range(20)]
        worst = {"recon": 0.0, "ortho": 0.0, "gram": 0.0}
        for V in mats:
            U, s, Vt = np.linalg.svd(V)
            worst["recon"] = max(worst["recon"], float(np.max(np.abs(U @ np.diag(s) @ Vt - V))))
            d = V.shape[1]
            P = top_right_singular(V, d)
            worst["ortho"] = max(worst["ortho"], float(np.max(np.abs(P @ P.T - np.eye(d)))))
            evals, evecs = np.linalg.eigh(V.T @ V)
            order = np.argsort(evals)[::-1]
            k = CONFIG.k_r if V.shape[1] > CONFIG.k_r else d
            for i in range(k):
                e = evecs[:, order[i]]
                worst["gram"] = max(worst["gram"], min(float(np.max(np.abs(P[i] - e))),
                                                       float(np.max(np.abs(P[i] + e)))))
        assert worst["recon"] <= 1e-5 and worst["ortho"] <= 1e-5 and worst["gram"] <= 1e-5, worst
        sub = extract_subspace(shared, b, CONFIG.k_r)
        assert np.max(np.abs(sub.P_T @ sub.P_T.T - np.eye(CONFIG.k_r))) <= 1e-5
        c["detail"] = (f"recon {worst['recon']:.1g}, orthonormality {worst['ortho']:.1g}, "
                       f"Gram eigvec (up to sign) {worst['gram']:.1g} over {len(mats)} matrices")


def test_08_router(harness):
    family, report, train_s, pipe_s = harness
    with criterion(8, "router correctness") as c:
        for seed in range(100):
            rng = np.random.default_rng(seed)
            r = rng.standard_normal(4) * 5
            shift = rng.standard_normal() * 100
            a, b = decide(r, r), decide(r + shift, r + shift)
            assert abs(a.probs.sum() - 1) <= 1e-6 and abs(softmax(r + shift).sum() - 1) <= 1e-6
            assert a.selected == b.selected
        rows = [row for row in report.routing if row[0] == "V"]
        acc = report.routing_accuracy["V"]
        elapsed = train_s + pipe_s
        assert len(rows) == 100, f"{len(rows)} episodes"
        assert acc >= 0.90, f"routing accuracy {acc:.2f}"
        assert elapsed < 300, f"{elapsed:.0f}s"
        c["detail"] = f"softmax/shift ok; M=4 routing {acc:.2f} over {len(rows)} initial observations; {elapsed:.0f}s"


def test_09_non_mergeability(harness):
    family, report, train_s, pipe_s = harness
    with criterion(9, "non-mergeability") as c:
        ids = report.task_ids
        a, b, n = (report.mse[v] for v in ("finetuned", "masked_routed", "naive"))
        naive = [n[t] / a[t] for t in ids]
        masked = [b[t] / a[t] for t in ids]
        elapsed = train_s + pipe_s
        assert min(naive) >= 5, f"naive/(a) {naive}"
        assert max(masked) <= 2, f"masked/(a) {masked}"
        assert elapsed < 600, f"{elapsed:.0f}s"
        c["detail"] = (f"naive/(a) >= {min(naive):.1f}x, masked+routed/(a) <= {max(masked):.2f}x; "
                       f"{elapsed:.0f}s")


def test_10_block_divergence(harness):
    _, report, _, _ = harness
    with criterion(10, "block-divergence trend") as c:
        d = report.block_distance
        assert d[-1] > np.mean(d[:-1]), f"distances {d}"
        c["detail"] = "block distances " + " ".join(f"{x:.4f}" for x in d)


def test_11_subspace_ablation(harness):
    family, _, _, _ = harness
    with criterion(11, "V vs K routing on adversarial pair") as c:
        acc = k_blind_pair(family)
        assert acc["V"] >= acc["K"], f"{acc}"
        c["detail"] = f"V {acc['V']:.2f} >= K {acc['K']:.2f}"


def test_12_determinism(harness, tmp_path):
    family, report, _, _ = harness
    with criterion(12, "determinism and round-trip") as c:
        again = run_pipeline(CONFIG, family=train_family(CONFIG))
        first = report.write(tmp_path / "a")
        second = again.write(tmp_path / "b")
        assert [p.read_bytes() for p in first] == [p.read_bytes() for p in second], "CSV outputs differ"
        for seed in range(100):
            rng = np.random.default_rng(seed)
            m = random_map(rng, n_tensors=int(rng.integers(1, 5)), scale=10.0 ** rng.integers(-3, 4))
            m = m.with_metadata(task_id=f"t{seed}", note="x" * int(seed))
            save_checkpoint(m, tmp_path / "m.ntm")
            back = load_checkpoint(tmp_path / "m.ntm")
            assert back == m and all(back[k].tobytes() == m[k].tobytes() for k in m), f"map {seed}"
        c["detail"] = f"{len(first)} CSVs byte-identical across retraining; 100 maps round-trip bit-exactly"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
