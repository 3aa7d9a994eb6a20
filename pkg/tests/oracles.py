"""Straight-line reference implementations used as test oracles."""

import math

import numpy as np


def ta_loop(deltas, alpha=1.0):
    """Position-by-position float64 sum."""
    out = np.zeros(deltas[0].shape, dtype=np.float64)
    for idx in np.ndindex(out.shape):
        acc = 0.0
        for d in deltas:
            acc += float(d[idx])
        out[idx] = alpha * acc
    return out


def ties_explicit(deltas, keep):
    """Trim (top ceil(keep*n) magnitudes, ties kept), elect sign by mass, disjoint mean."""
    n = deltas[0].size
    k = max(1, math.ceil(keep * n - 1e-9))
    trimmed = []
    for d in deltas:
        flat = [abs(float(x)) for x in d.ravel()]
        thr = sorted(flat, reverse=True)[k - 1]
        trimmed.append(np.array([float(x) if abs(float(x)) >= thr else 0.0 for x in d.ravel()]))
    out = np.zeros(n)
    for i in range(n):
        total = sum(t[i] for t in trimmed)
        sign = 1.0 if total >= 0 else -1.0
        picked = [t[i] for t in trimmed if t[i] != 0 and math.copysign(1.0, t[i]) == sign]
        out[i] = sum(picked) / len(picked) if picked else 0.0
    return out.reshape(deltas[0].shape)


def mask_loop(tau_m, tau_merge, lam):
    """1[|tau_m| > lam * |tau_merge - tau_m|], one float32 element at a time."""
    out = np.zeros(tau_m.shape, dtype=np.float32)
    lam = np.float32(lam)
    for idx in np.ndindex(tau_m.shape):
        a = np.float32(tau_m[idx])
        b = np.float32(tau_merge[idx])
        out[idx] = np.float32(1.0) if abs(a) > lam * abs(np.float32(b - a)) else np.float32(0.0)
    return out


def finite_difference_check(expert, h_T, h_A, target, eps=1e-3, max_entries=None, rng=None):
    """Per parameter group, max |analytic - central FD| / max(|analytic|_inf, |FD|_inf).

    ``max_entries`` samples that many coordinates per group (all when None).
    """
    _, grads, _, _ = expert.loss_and_grad(h_T, h_A, target)
    out = {}
    for name, g in grads.items():
        p = expert.params[name]
        flat_idx = range(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = sorted(rng.choice(p.size, max_entries, replace=False))
        fd, an = [], []
        for j in flat_idx:
            idx = np.unravel_index(j, p.shape)
            old = p[idx]
            p[idx] = old + eps
            lp = expert.loss_and_grad(h_T, h_A, target)[0]
            p[idx] = old - eps
            lm = expert.loss_and_grad(h_T, h_A, target)[0]
            p[idx] = old
            fd.append((lp - lm) / (2 * eps))
            an.append(g[idx])
        fd, an = np.array(fd), np.array(an)
        scale = max(np.abs(fd).max(), np.abs(an).max(), 1e-12)
        out[name] = float(np.abs(fd - an).max() / scale)
    return out
