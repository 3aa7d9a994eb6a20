import numpy as np
import pytest

from mergeforge.masks import TaskMask, active_ratio, apply_mask, build_mask, mask_stats, selfish_ratio
from mergeforge.merge import MergeRecipe, merge
from mergeforge.task_vectors import TaskVector, extract
from mergeforge.tensor import NamedTensorMap

from conftest import perturbed, random_map
from oracles import mask_loop


def _setup(rng, m=3, alpha=1.0):
    base = random_map(rng)
    fts = [perturbed(base, rng, task_id=f"t{i}") for i in range(m)]
    vs = [extract(f, base) for f in fts]
    tau = merge(MergeRecipe(tuple(v.task_id for v in vs), alpha=alpha), vs)
    return base, fts, vs, tau


def _mask(arr, tid="t", lam=0.6):
    return TaskMask(NamedTensorMap({"w": arr}), lam, tid)


def test_matches_elementwise_oracle_bit_exact():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        tm = rng.standard_normal((4, 5)).astype(np.float32)
        merged = (tm + rng.standard_normal((4, 5))).astype(np.float32)
        lam = float(rng.uniform(0.0, 2.0))
        tv = TaskVector(NamedTensorMap({"w": tm}), "", "t")
        from mergeforge.merge import MergedVector
        mv = MergedVector(NamedTensorMap({"w": merged}), None, ("t",))
        got = build_mask(tv, mv, lam).masks["w"]
        want = mask_loop(tm, merged, lam)
        assert got.dtype == np.float32 and got.tobytes() == want.tobytes()


def test_strict_inequality_at_equality():
    from mergeforge.merge import MergedVector
    tv = TaskVector(NamedTensorMap({"w": [0.0, 1.0]}), "", "t")
    mv = MergedVector(NamedTensorMap({"w": [0.0, 1.0]}), None, ("t",))
    assert build_mask(tv, mv, 0.6).masks["w"].tolist() == [0.0, 1.0]


def test_single_task_keeps_every_nonzero(rng):
    _, _, vs, tau = _setup(rng, 1)
    mask = build_mask(vs[0], tau)
    assert all(np.all(mask.masks[n] == (vs[0].delta[n] != 0)) for n in mask.masks)


def test_identity_recovery_m1(rng):
    for seed in range(20):
        base, fts, vs, tau = _setup(np.random.default_rng(seed), 1)
        theta = apply_mask(base, tau, build_mask(vs[0], tau))
        assert theta == NamedTensorMap(fts[0])


def test_all_zero_mask_gives_base(rng):
    base, _, vs, tau = _setup(rng, 2)
    zero = TaskMask(NamedTensorMap({n: np.zeros(s) for n, s in base.shapes().items()}), 0.6, "z")
    assert apply_mask(base, tau, zero) == base


def test_active_ratio_monotone_in_lambda(rng):
    _, _, vs, tau = _setup(rng, 4)
    ratios = [active_ratio(build_mask(vs[0], tau, lam)) for lam in np.arange(0.2, 0.95, 0.1)]
    assert all(a >= b for a, b in zip(ratios, ratios[1:]))


def test_selfish_ratio_examples():
    a = _mask(np.array([1, 0, 1, 0], np.float32), "a")
    b = _mask(np.array([0, 1, 1, 0], np.float32), "b")
    assert selfish_ratio([a, b]) == 0.5
    assert selfish_ratio([a, _mask(np.ones(4, np.float32), "c")]) == 0.5
    assert selfish_ratio([_mask(np.zeros(4, np.float32))]) == 0.0


def test_disjoint_masks_are_all_selfish():
    masks = [_mask(np.eye(4, dtype=np.float32)[i], f"t{i}") for i in range(4)]
    assert selfish_ratio(masks) == 1.0


def test_component_filter():
    m = TaskMask(NamedTensorMap({"enc.w": np.ones(4), "dec.w": np.zeros(4)}), 0.6, "t")
    assert active_ratio(m, "enc") == 1.0 and active_ratio(m, "dec") == 0.0 and active_ratio(m) == 0.5
    with pytest.raises(KeyError):
        active_ratio(m, "mlp")


def test_mask_stats_rows(rng):
    _, _, vs, tau = _setup(rng, 3)
    masks = [build_mask(v, tau) for v in vs]
    stats = mask_stats(masks)
    assert stats.M == 3 and stats.N == masks[0].masks.num_elements()
    assert stats.selfish_ratio == selfish_ratio(masks)
    assert stats.rows()[0] == ("selfish_ratio", "", "", stats.selfish_ratio)
    assert set(stats.per_task_active_ratio) == {"t0", "t1", "t2"}


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        selfish_ratio([_mask(np.ones(3, np.float32)), _mask(np.ones(4, np.float32))])


def test_serialization_keeps_lambda(rng):
    _, _, vs, tau = _setup(rng, 2)
    m = build_mask(vs[0], tau, 0.35)
    back = TaskMask.from_map(m.to_map())
    assert back.lam == 0.35 and back.task_id == "t0" and back.masks == m.masks
