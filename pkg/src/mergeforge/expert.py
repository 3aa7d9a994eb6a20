"""Cross-attention-only action expert with sigmoid task gating.

Each block, in order:

    g   = sigmoid(h_T)                       # gated task stream
    x  += CrossAttn(LN(x), g)                # task path   (Q_T, K_T, V_T, O_T)
    x  += CrossAttn(LN(x), h_A)              # action path (Q_A, K_A, V_A, O_A)
    x  += W2 gelu(W1 LN(x) + b1) + b2

The running state ``x`` starts from learned action-query tokens; the head
normalizes it, mean-pools over query tokens and maps to a
``horizon x action_dim`` chunk. There is no self-attention anywhere.

Projection matrices are stored ``(out, in)`` and applied as ``x @ W.T``.
Blocks are numbered 1..L in names and in the public API.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np

from .tensor import NamedTensorMap

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ExpertError(ValueError):
    pass


@dataclass(frozen=True)
class ExpertConfig:
    num_blocks: int = 4
    d_model: int = 16
    n_heads: int = 2
    d_ff: int = 32
    action_dim: int = 2
    horizon: int = 4
    n_queries: int = 4
    query_positional: bool = True

    def __post_init__(self):
        for f in ("num_blocks", "d_model", "n_heads", "d_ff", "action_dim", "horizon", "n_queries"):
            if getattr(self, f) < 1:
                raise ExpertError(f"{f} must be positive")
        if self.d_model % self.n_heads:
            raise ExpertError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExpertConfig":
        return cls(**json.loads(text))


def block_prefix(i: int) -> str:
    return f"blocks.{i}."


def param_shapes(cfg: ExpertConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"query_embed": (cfg.n_queries if cfg.query_positional else 1, d)}
    for i in range(1, cfg.num_blocks + 1):
        p = block_prefix(i)
        for path in ("task_attn", "act_attn"):
            shapes[f"{p}{path}.norm.scale"] = (d,)
            shapes[f"{p}{path}.norm.offset"] = (d,)
            for w in "qkvo":
                shapes[f"{p}{path}.{w}"] = (d, d)
        shapes[f"{p}ffn.norm.scale"] = (d,)
        shapes[f"{p}ffn.norm.offset"] = (d,)
        shapes[f"{p}ffn.w1"] = (f, d)
        shapes[f"{p}ffn.b1"] = (f,)
        shapes[f"{p}ffn.w2"] = (d, f)
        shapes[f"{p}ffn.b2"] = (d,)
    out = cfg.horizon * cfg.action_dim
    shapes["head.norm.scale"] = (d,)
    shapes["head.norm.offset"] = (d,)
    shapes["head.out.weight"] = (out, d)
    shapes["head.out.bias"] = (out,)
    return shapes


def init_params(cfg: ExpertConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm.scale"):
            params[name] = np.ones(shape)
        elif name.endswith(("norm.offset", ".b1", ".b2", ".bias")):
            params[name] = np.zeros(shape)
        elif name == "query_embed":
            params[name] = rng.uniform(-1.0, 1.0, shape)
        else:
            bound = 1.0 / math.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, shape)
    return params


# -- primitives --------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _ln_fwd(x, scale, offset):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * scale + offset, (xhat, inv, scale)


def _ln_bwd(dy, cache):
    xhat, inv, scale = cache
    red = tuple(range(dy.ndim - 1))
    dscale = (dy * xhat).sum(red)
    doffset = dy.sum(red)
    dxhat = dy * scale
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dscale, doffset


def _outer_sum(a, b):
    """sum over leading axes of a[..., i] * b[..., j]"""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _split(x, h):
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _join(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _attn_fwd(xq, kv, wq, wk, wv, wo, n_heads):
    dh = xq.shape[-1] // n_heads
    q, k, v = _split(xq @ wq.T, n_heads), _split(kv @ wk.T, n_heads), _split(kv @ wv.T, n_heads)
    s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    s = s - s.max(-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(-1, keepdims=True)
    o = _join(a @ v)
    return o @ wo.T, (xq, kv, q, k, v, a, o)


def _attn_bwd(dy, cache, wq, wk, wv, wo, n_heads):
    xq, kv, q, k, v, a, o = cache
    dh = xq.shape[-1] // n_heads
    dwo = _outer_sum(dy, o)
    do = _split(dy @ wo, n_heads)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(-1, keepdims=True)) / math.sqrt(dh)
    dq = _join(ds @ k)
    dk = _join(ds.transpose(0, 1, 3, 2) @ q)
    dv = _join(dv)
    dwq = _outer_sum(dq, xq)
    dwk = _outer_sum(dk, kv)
    dwv = _outer_sum(dv, kv)
    return dq @ wq, dk @ wk + dv @ wv, dwq, dwk, dwv, dwo


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _as_streams(h, cfg: ExpertConfig, what: str) -> list[np.ndarray]:
    """Normalize per-block streams to a list of L arrays shaped (B, n, d)."""
    seq = [np.asarray(x, dtype=np.float64) for x in h]
    if len(seq) != cfg.num_blocks:
        raise ExpertError(f"{what}: expected {cfg.num_blocks} per-block streams, got {len(seq)}")
    out = []
    for i, x in enumerate(seq, 1):
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != cfg.d_model:
            raise ExpertError(f"{what}: block {i} stream has shape {list(x.shape)}, expected (B, n, {cfg.d_model})")
        out.append(x)
    return out


class ActionExpert:
    """Parameters plus forward/backward for the cross-attention-only expert."""

    def __init__(self, config: ExpertConfig, params: dict[str, np.ndarray]):
        shapes = param_shapes(config)
        if set(params) != set(shapes):
            missing, extra = set(shapes) - set(params), set(params) - set(shapes)
            raise ExpertError(f"parameter set mismatch; missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
        for name, shape in shapes.items():
            if tuple(np.shape(params[name])) != shape:
                raise ExpertError(f"{name}: shape {list(np.shape(params[name]))}, expected {list(shape)}")
        self.config = config
        self.params = {name: np.asarray(params[name]) for name in shapes}

    @classmethod
    def init(cls, config: ExpertConfig, seed: int) -> "ActionExpert":
        return cls(config, init_params(config, np.random.default_rng(seed)))

    def copy(self) -> "ActionExpert":
        return ActionExpert(self.config, {k: v.copy() for k, v in self.params.items()})

    def rounded(self) -> "ActionExpert":
        """Copy with parameters rounded to float32, the storage precision."""
        return ActionExpert(self.config, {k: v.astype(np.float32) for k, v in self.params.items()})

    def block_params(self, i: int) -> dict[str, np.ndarray]:
        p = block_prefix(i)
        return {k: v for k, v in self.params.items() if k.startswith(p)}

    # -- forward / backward --------------------------------------------------

    def _run(self, h_T, h_A, keep_cache: bool):
        cfg = self.config
        P = {k: v.astype(np.float64, copy=False) for k, v in self.params.items()}
        hT = _as_streams(h_T, cfg, "h_T")
        hA = _as_streams(h_A, cfg, "h_A")
        batch = hT[0].shape[0]
        if any(x.shape[0] != batch for x in hT + hA):
            raise ExpertError("conditioning streams disagree on batch size")
        x = np.broadcast_to(P["query_embed"], (batch, cfg.n_queries, cfg.d_model)).copy()
        caches = []
        for i in range(1, cfg.num_blocks + 1):
            p = block_prefix(i)
            gate = sigmoid(hT[i - 1])
            bc = {"gate": gate}
            for path, kv in (("task_attn", gate), ("act_attn", hA[i - 1])):
                xn, ln_c = _ln_fwd(x, P[f"{p}{path}.norm.scale"], P[f"{p}{path}.norm.offset"])
                y, at_c = _attn_fwd(xn, kv, P[f"{p}{path}.q"], P[f"{p}{path}.k"], P[f"{p}{path}.v"],
                                    P[f"{p}{path}.o"], cfg.n_heads)
                x = x + y
                bc[path] = (ln_c, at_c)
            xn, ln_c = _ln_fwd(x, P[f"{p}ffn.norm.scale"], P[f"{p}ffn.norm.offset"])
            u = xn @ P[f"{p}ffn.w1"].T + P[f"{p}ffn.b1"]
            g, t = _gelu(u)
            x = x + g @ P[f"{p}ffn.w2"].T + P[f"{p}ffn.b2"]
            bc["ffn"] = (ln_c, xn, u, t, g)
            if not np.all(np.isfinite(x)):
                raise ExpertError(f"non-finite activations in block {i}")
            if keep_cache:
                caches.append(bc)
        xn, ln_c = _ln_fwd(x, P["head.norm.scale"], P["head.norm.offset"])
        pooled = xn.mean(axis=1)
        out = pooled @ P["head.out.weight"].T + P["head.out.bias"]
        if not np.all(np.isfinite(out)):
            raise ExpertError("non-finite activations in output head")
        return out.reshape(batch, cfg.horizon, cfg.action_dim), (P, caches, ln_c, pooled, hT, hA)

    def forward(self, h_T, h_A) -> np.ndarray:
        """Action chunk ``(horizon, action_dim)``, or ``(B, horizon, action_dim)`` for batched streams."""
        out, _ = self._run(h_T, h_A, keep_cache=False)
        batched = np.asarray(h_T[0]).ndim == 3
        return out if batched else out[0]

    def loss_and_grad(self, h_T, h_A, target):
        """MSE loss, parameter gradients, and gradients w.r.t. the input streams.

        Returns ``(loss, grads, dh_T, dh_A)``; ``dh_T``/``dh_A`` are lists of
        per-block arrays shaped like the (batched) inputs.
        """
        cfg = self.config
        pred, (P, caches, head_ln, pooled, hT, hA) = self._run(h_T, h_A, keep_cache=True)
        target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
        err = pred - target
        loss = float(np.mean(err * err))
        batch = pred.shape[0]
        dout = (2.0 / err.size) * err.reshape(batch, -1)

        G = {}
        G["head.out.weight"] = dout.T @ pooled
        G["head.out.bias"] = dout.sum(0)
        dpooled = dout @ P["head.out.weight"]
        dxn = np.broadcast_to(dpooled[:, None, :] / cfg.n_queries, (batch, cfg.n_queries, cfg.d_model))
        dx, G["head.norm.scale"], G["head.norm.offset"] = _ln_bwd(dxn, head_ln)

        dhT = [None] * cfg.num_blocks
        dhA = [None] * cfg.num_blocks
        for i in range(cfg.num_blocks, 0, -1):
            p = block_prefix(i)
            bc = caches[i - 1]
            ln_c, xn, u, t, g = bc["ffn"]
            G[f"{p}ffn.b2"] = dx.sum((0, 1))
            G[f"{p}ffn.w2"] = _outer_sum(dx, g)
            du = (dx @ P[f"{p}ffn.w2"]) * _gelu_grad(u, t)
            G[f"{p}ffn.b1"] = du.sum((0, 1))
            G[f"{p}ffn.w1"] = _outer_sum(du, xn)
            dres, G[f"{p}ffn.norm.scale"], G[f"{p}ffn.norm.offset"] = _ln_bwd(du @ P[f"{p}ffn.w1"], ln_c)
            dx = dx + dres
            for path in ("act_attn", "task_attn"):
                ln_c, at_c = bc[path]
                dxq, dkv, *dws = _attn_bwd(dx, at_c, P[f"{p}{path}.q"], P[f"{p}{path}.k"], P[f"{p}{path}.v"],
                                           P[f"{p}{path}.o"], cfg.n_heads)
                for w, dw in zip("qkvo", dws):
                    G[f"{p}{path}.{w}"] = dw
                dres, G[f"{p}{path}.norm.scale"], G[f"{p}{path}.norm.offset"] = _ln_bwd(dxq, ln_c)
                dx = dx + dres
                if path == "act_attn":
                    dhA[i - 1] = dkv
                else:
                    gate = bc["gate"]
                    dhT[i - 1] = dkv * gate * (1.0 - gate)
        dq = dx.sum(0)
        G["query_embed"] = dq if cfg.query_positional else dq.sum(0, keepdims=True)
        return loss, G, dhT, dhA

    # -- serialization -------------------------------------------------------

    def to_map(self, task_id: str = "") -> NamedTensorMap:
        meta = {"kind": "action_expert", "config": self.config.to_json()}
        if task_id:
            meta["task_id"] = task_id
        return NamedTensorMap(((k, self.params[k]) for k in param_shapes(self.config)), meta)

    @classmethod
    def from_map(cls, tmap: NamedTensorMap) -> "ActionExpert":
        if tmap.metadata.get("kind") != "action_expert" or "head_start_l" in tmap.metadata:
            raise ExpertError(f"expected a full action expert, got kind={tmap.metadata.get('kind')!r}")
        return cls(ExpertConfig.from_json(tmap.metadata["config"]), dict(tmap))


# -- merging -----------------------------------------------------------------

@dataclass
class ExpertHead:
    """Blocks ``start_block..L`` plus the output head of one task's expert."""

    start_block: int
    params: dict[str, np.ndarray]
    task_id: str
    config: ExpertConfig

    def to_map(self) -> NamedTensorMap:
        meta = {"kind": "expert_head", "head_start_l": str(self.start_block), "task_id": self.task_id,
                "config": self.config.to_json()}
        return NamedTensorMap(self.params, meta)

    @classmethod
    def from_map(cls, tmap: NamedTensorMap) -> "ExpertHead":
        meta = tmap.metadata
        if meta.get("kind") != "expert_head":
            raise ExpertError(f"expected kind=expert_head, got {meta.get('kind')!r}")
        return cls(int(meta["head_start_l"]), dict(tmap), meta.get("task_id", ""),
                   ExpertConfig.from_json(meta["config"]))


@dataclass
class SharedExpert:
    """Merged query embedding and blocks ``1..head_start_l-1``."""

    head_start_l: int
    params: dict[str, np.ndarray]
    config: ExpertConfig

    def to_map(self) -> NamedTensorMap:
        meta = {"kind": "action_expert", "head_start_l": str(self.head_start_l), "config": self.config.to_json()}
        return NamedTensorMap(self.params, meta)

    @classmethod
    def from_map(cls, tmap: NamedTensorMap) -> "SharedExpert":
        meta = tmap.metadata
        if meta.get("kind") != "action_expert" or "head_start_l" not in meta:
            raise ExpertError("expected a shared expert checkpoint (kind=action_expert with head_start_l)")
        return cls(int(meta["head_start_l"]), dict(tmap), ExpertConfig.from_json(meta["config"]))

    def block_params(self, i: int) -> dict[str, np.ndarray]:
        if not 1 <= i < self.head_start_l:
            raise ExpertError(f"block {i} is not part of the shared trunk (blocks 1..{self.head_start_l - 1})")
        p = block_prefix(i)
        return {k: v for k, v in self.params.items() if k.startswith(p)}


def _is_head_param(name: str, l: int) -> bool:
    if name.startswith("head."):
        return True
    if name.startswith("blocks."):
        return int(name.split(".")[1]) >= l
    return False


def _check_configs(experts: Sequence[ActionExpert]) -> ExpertConfig:
    if not experts:
        raise ExpertError("need at least one expert")
    cfg = experts[0].config
    for e in experts[1:]:
        if e.config != cfg:
            raise ExpertError(f"expert config mismatch: {e.config} vs {cfg}")
    return cfg


def average_params(experts: Sequence[ActionExpert], names) -> dict[str, np.ndarray]:
    """Elementwise float32 mean, order-invariant (sorted float64 accumulation)."""
    out = {}
    for n in names:
        stack = np.stack([np.asarray(e.params[n], dtype=np.float32) for e in experts])
        out[n] = (np.sort(stack, axis=0).astype(np.float64).sum(0) / len(experts)).astype(np.float32)
    return out


def average_experts(experts: Sequence[ActionExpert]) -> ActionExpert:
    """Naive merge: every parameter (heads included) averaged."""
    cfg = _check_configs(experts)
    return ActionExpert(cfg, average_params(experts, param_shapes(cfg)))


def merge_experts(experts: Sequence[ActionExpert], head_start_l: int | None = None,
                  task_ids: Sequence[str] | None = None) -> tuple[SharedExpert, list[ExpertHead]]:
    """Average blocks ``1..l-1`` (and the query embedding); keep blocks ``l..L`` per task."""
    cfg = _check_configs(experts)
    l = cfg.num_blocks if head_start_l is None else head_start_l
    if not 1 <= l <= cfg.num_blocks:
        raise ExpertError(f"head_start_l must be in [1, {cfg.num_blocks}], got {l}")
    task_ids = list(task_ids) if task_ids is not None else [str(i) for i in range(len(experts))]
    names = list(param_shapes(cfg))
    shared_names = [n for n in names if not _is_head_param(n, l)]
    shared = SharedExpert(l, average_params(experts, shared_names), cfg)
    heads = [ExpertHead(l, {n: np.asarray(e.params[n], dtype=np.float32) for n in names if _is_head_param(n, l)}, t, cfg)
             for e, t in zip(experts, task_ids)]
    return shared, heads


def assemble(shared: SharedExpert, head: ExpertHead) -> ActionExpert:
    if shared.head_start_l != head.start_block or shared.config != head.config:
        raise ExpertError("shared trunk and head disagree on head_start_l or config")
    return ActionExpert(shared.config, {**shared.params, **head.params})


def block_distance(experts: Sequence[ActionExpert]) -> list[float]:
    """Per block, mean over expert pairs of ||a - b|| / (0.5 ||a|| + 0.5 ||b||)."""
    cfg = _check_configs(experts)
    if len(experts) < 2:
        raise ExpertError("block_distance needs at least two experts")
    series = []
    for i in range(1, cfg.num_blocks + 1):
        flat = [np.concatenate([np.asarray(v, dtype=np.float64).ravel() for _, v in sorted(e.block_params(i).items())])
                for e in experts]
        dists = []
        for a, b in combinations(flat, 2):
            denom = 0.5 * np.linalg.norm(a) + 0.5 * np.linalg.norm(b)
            dists.append(np.linalg.norm(a - b) / denom if denom > 0 else 0.0)
        series.append(float(np.mean(dists)))
    return series


def progressive_merge(experts: Sequence[ActionExpert], k: int, reference: int) -> ActionExpert:
    """Average blocks 1..k (with the query embedding when k >= 1); everything else from ``reference``."""
    cfg = _check_configs(experts)
    if not 0 <= k <= cfg.num_blocks:
        raise ExpertError(f"k must be in [0, {cfg.num_blocks}], got {k}")
    params = {n: np.asarray(v, dtype=np.float32) for n, v in experts[reference].params.items()}
    if k >= 1:
        names = [n for n in params if n == "query_embed" or (n.startswith("blocks.") and int(n.split(".")[1]) <= k)]
        params.update(average_params(experts, names))
    return ActionExpert(cfg, params)
