"""Synthetic multi-task harness: tiny backbone + low-rank adapters + action experts.

Task family. The observation is split into equal slots and task ``m`` owns
slot ``m``: its observations have unit noise on the owned slot and small
noise elsewhere. The action chunk is a linear-plus-sinusoid map of the owned
coordinates plus a task offset and Gaussian label noise. Map coefficients are
a family-wide draw plus a per-task perturbation, so tasks are related but
distinguishable.

Backbone. Two input projections (``task_in``, ``act_in``) turn an observation
into task and action token sequences, then ``L`` residual tanh blocks refine
each sequence; the state after block ``i`` is the stream that expert block
``i`` consumes. Pretraining reconstructs the observation from the pooled last
streams. Finetuning adds rank-r adapters on both input projections (the two
largest tensors) while the expert trains from a shared initialization.
"""

from __future__ import annotations

import csv
import io
import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .expert import (ActionExpert, ExpertConfig, ExpertError, _outer_sum, average_experts, block_distance, merge_experts,
                     progressive_merge)
from .masks import build_mask, mask_stats, selfish_ratio
from .merge import MergeRecipe, merge
from .router import EpisodeSelection, RouterBundle, decide, extract_subspace, route_episode
from .task_vectors import LowRankUpdate, apply, extract, materialize
from .tensor import NamedTensorMap, fingerprint

ADAPTED = ("task_in.weight", "act_in.weight")


class HarnessError(RuntimeError):
    pass


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Independent, seed-derived RNG stream per component."""
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


# stream ids
_TASK, _BACKBONE_INIT, _PRETRAIN, _EXPERT_INIT, _LORA_INIT, _FINETUNE, _EVAL, _HELDOUT, _HEAD_INIT, _CALIB = range(1, 11)
_FAMILY = 10**6  # task-stream index of the family-wide coefficient draw


@dataclass(frozen=True)
class ToyConfig:
    num_tasks: int = 4
    seed: int = 0
    # task family
    d_obs: int = 16
    obs_block: int = 4
    mean_scale: float = 0.0
    in_std: float = 1.0
    out_std: float = 0.02
    task_spread: float = 0.2
    offset_scale: float = 1.0
    target_noise: float = 0.1
    goal_floor: float = 1.0
    # backbone
    d_model: int = 32
    n_task_tokens: int = 4
    n_act_tokens: int = 4
    tie_slots: bool = True
    # expert
    num_blocks: int = 3
    n_heads: int = 4
    d_ff: int = 64
    action_dim: int = 2
    horizon: int = 4
    n_queries: int = 4
    # training
    batch: int = 64
    pretrain_steps: int = 600
    pretrain_lr: float = 3e-3
    finetune_steps: int = 1200
    expert_lr: float = 2.5e-3
    expert_optimizer: str = "sgd"
    trunk_lr_scale: float = 0.3
    lora_optimizer: str = "sgd"
    lora_lr: float = 0.25
    lora_rank: int = 4
    lora_scaling: float = 1.0
    zero_head: bool = True
    head_bias_init: bool = True
    common_random_numbers: bool = True
    # evaluation
    episodes_per_task: int = 25
    episode_len: int = 5
    episode_rho: float = 0.9
    success_threshold: float = 0.1
    k_r: int = 8
    progressive_reference: int = 0
    progressive_episodes: int = 50

    def expert_config(self) -> ExpertConfig:
        return ExpertConfig(self.num_blocks, self.d_model, self.n_heads, self.d_ff, self.action_dim,
                            self.horizon, self.n_queries, True)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown toy config keys: {sorted(unknown)}")
        return cls(**d)

    def __post_init__(self):
        if self.d_obs % self.obs_block:
            raise ValueError("d_obs must be a multiple of obs_block")
        for name in ("expert_optimizer", "lora_optimizer"):
            if getattr(self, name) not in ("sgd", "adam"):
                raise ValueError(f"{name} must be 'sgd' or 'adam'")


# -- tasks -------------------------------------------------------------------

@dataclass(frozen=True)
class ToyTask:
    task_id: str
    index: int
    block: tuple[int, ...]
    mean: np.ndarray
    std: np.ndarray
    lin: np.ndarray  # (H*A, |block|)
    freq: np.ndarray  # (H*A, |block|)
    offset: np.ndarray  # (H*A,)
    action_dim: int
    horizon: int
    target_noise: float

    def goal_vector(self) -> np.ndarray:
        return np.concatenate([self.lin.ravel(), self.freq.ravel(), self.offset])

    def clean_target(self, obs: np.ndarray) -> np.ndarray:
        z = obs[..., list(self.block)]
        y = z @ self.lin.T + 0.5 * np.sin(z @ self.freq.T) + self.offset
        return y.reshape(*obs.shape[:-1], self.horizon, self.action_dim)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        obs = self.mean + self.std * rng.standard_normal((n, self.mean.size))
        y = self.clean_target(obs)
        return obs, y + self.target_noise * rng.standard_normal(y.shape)

    def episode(self, rng: np.random.Generator, length: int, rho: float) -> tuple[np.ndarray, np.ndarray]:
        """AR(1) observation trajectory that stays on the task's stationary distribution."""
        eps = rng.standard_normal(self.mean.size)
        obs = []
        for _ in range(length):
            obs.append(self.mean + self.std * eps)
            eps = rho * eps + math.sqrt(1.0 - rho * rho) * rng.standard_normal(self.mean.size)
        obs = np.array(obs)
        y = self.clean_target(obs)
        return obs, y + self.target_noise * rng.standard_normal(y.shape)


def _make_task(cfg: ToyConfig, index: int, attempt: int) -> ToyTask:
    rng = rng_for(cfg.seed, _TASK, index, attempt)
    out, b = cfg.horizon * cfg.action_dim, cfg.obs_block
    family = rng_for(cfg.seed, _TASK, _FAMILY)
    lin0 = family.standard_normal((out, b)) / math.sqrt(b)
    freq0 = family.standard_normal((out, b))
    start = (index % (cfg.d_obs // b)) * b
    block = tuple(range(start, start + b))
    mean = np.zeros(cfg.d_obs)
    direction = rng.standard_normal(b)
    mean[list(block)] = cfg.mean_scale * direction / np.linalg.norm(direction) * math.sqrt(b) / 2
    std = np.full(cfg.d_obs, cfg.out_std)
    std[list(block)] = cfg.in_std
    lin = lin0 + cfg.task_spread * rng.standard_normal((out, b)) / math.sqrt(b)
    freq = freq0 + cfg.task_spread * rng.standard_normal((out, b))
    offset = cfg.offset_scale * rng.standard_normal(out)
    return ToyTask(f"task{index}", index, block, mean, std, lin, freq, offset, cfg.action_dim, cfg.horizon,
                   cfg.target_noise)


def gen_tasks(M: int, seed: int = 0, config: ToyConfig | None = None) -> list[ToyTask]:
    """M tasks, regenerated deterministically from (seed, index); goals pairwise >= goal_floor apart."""
    if M < 1:
        raise ValueError("M must be >= 1")
    cfg = replace(config or ToyConfig(), seed=seed)
    tasks: list[ToyTask] = []
    for m in range(M):
        for attempt in range(100):
            t = _make_task(cfg, m, attempt)
            if all(np.linalg.norm(t.goal_vector() - o.goal_vector()) >= cfg.goal_floor for o in tasks):
                break
        else:
            raise HarnessError(f"could not place task {m} at least {cfg.goal_floor} from the others")
        tasks.append(t)
    return tasks


# -- backbone ----------------------------------------------------------------

@dataclass(frozen=True)
class BackboneConfig:
    d_obs: int
    d_model: int
    n_task_tokens: int
    n_act_tokens: int
    num_blocks: int
    tie_block: int = 0  # > 0: input-projection columns are shared across observation slots of this width

    @classmethod
    def from_toy(cls, cfg: ToyConfig) -> "BackboneConfig":
        return cls(cfg.d_obs, cfg.d_model, cfg.n_task_tokens, cfg.n_act_tokens, cfg.num_blocks,
                   cfg.obs_block if cfg.tie_slots else 0)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d = self.d_model
        s = {"task_in.weight": (self.n_task_tokens * d, self.d_obs), "task_in.bias": (self.n_task_tokens * d,),
             "act_in.weight": (self.n_act_tokens * d, self.d_obs), "act_in.bias": (self.n_act_tokens * d,)}
        for i in range(1, self.num_blocks + 1):
            for path in ("task", "act"):
                s[f"blocks.{i}.{path}.weight"] = (d, d)
                s[f"blocks.{i}.{path}.bias"] = (d,)
        s["decoder.weight"] = (self.d_obs, 2 * d)
        s["decoder.bias"] = (self.d_obs,)
        return s


class ToyBackbone:
    """Observation -> per-block (h_T, h_A) token streams."""

    def __init__(self, config: BackboneConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = {k: np.asarray(params[k]) for k in config.shapes()}

    @classmethod
    def init(cls, config: BackboneConfig, rng: np.random.Generator) -> "ToyBackbone":
        params = {}
        for name, shape in config.shapes().items():
            if name.endswith("bias"):
                params[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(shape[1])
                params[name] = rng.uniform(-bound, bound, shape)
        bb = cls(config, params)
        bb._tie(bb.params)
        return bb

    def _tie(self, tensors: dict[str, np.ndarray]) -> None:
        """Replace every slot's input-projection columns by the slot average (in place)."""
        b = self.config.tie_block
        if b <= 0:
            return
        for name in ADAPTED:
            W = tensors[name]
            slots = W.reshape(W.shape[0], -1, b)
            W[...] = np.broadcast_to(slots.mean(1, keepdims=True), slots.shape).reshape(W.shape)

    def to_map(self) -> NamedTensorMap:
        meta = {"kind": "toy_backbone", "config": json.dumps(asdict(self.config), sort_keys=True)}
        return NamedTensorMap(((k, self.params[k]) for k in self.config.shapes()), meta)

    @classmethod
    def from_map(cls, tmap: NamedTensorMap) -> "ToyBackbone":
        return cls(BackboneConfig(**json.loads(tmap.metadata["config"])), dict(tmap))

    def run(self, obs: np.ndarray, weights: dict[str, np.ndarray] | None = None):
        """Streams plus a backward cache. ``weights`` overrides input-projection matrices."""
        c = self.config
        P = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}
        if weights:
            P.update(weights)
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        streams, cache = {}, {"obs": obs}
        for path, n in (("task", c.n_task_tokens), ("act", c.n_act_tokens)):
            z = (obs @ P[f"{path}_in.weight"].T + P[f"{path}_in.bias"]).reshape(len(obs), n, c.d_model)
            zs, ts = [], []
            for i in range(1, c.num_blocks + 1):
                t = np.tanh(z @ P[f"blocks.{i}.{path}.weight"].T + P[f"blocks.{i}.{path}.bias"])
                zs.append(z)
                ts.append(t)
                z = z + t
                streams.setdefault(path, []).append(z)
            cache[path] = (zs, ts)
        cache["P"] = P
        return streams["task"], streams["act"], cache

    def streams(self, obs, weights=None):
        h_T, h_A, _ = self.run(obs, weights)
        return h_T, h_A

    def backward(self, dh_T, dh_A, cache) -> dict[str, np.ndarray]:
        """Gradients of every backbone tensor (decoder excluded) given stream gradients."""
        c, P, obs = self.config, cache["P"], cache["obs"]
        G = {}
        for path, dh, n in (("task", dh_T, c.n_task_tokens), ("act", dh_A, c.n_act_tokens)):
            zs, ts = cache[path]
            dz = np.zeros_like(zs[0])
            for i in range(c.num_blocks, 0, -1):
                if dh[i - 1] is not None:
                    dz = dz + dh[i - 1]
                dpre = dz * (1.0 - ts[i - 1] ** 2)
                G[f"blocks.{i}.{path}.weight"] = _outer_sum(dpre, zs[i - 1])
                G[f"blocks.{i}.{path}.bias"] = dpre.sum((0, 1))
                dz = dz + dpre @ P[f"blocks.{i}.{path}.weight"]
            flat = dz.reshape(len(obs), n * c.d_model)
            G[f"{path}_in.weight"] = flat.T @ obs
            G[f"{path}_in.bias"] = flat.sum(0)
        return G

    def reconstruction_loss_and_grad(self, obs):
        c = self.config
        h_T, h_A, cache = self.run(obs)
        P = cache["P"]
        feat = np.concatenate([h_T[-1].mean(1), h_A[-1].mean(1)], axis=1)
        err = feat @ P["decoder.weight"].T + P["decoder.bias"] - cache["obs"]
        loss = float(np.mean(err * err))
        dpred = 2.0 * err / err.size
        G_dec = {"decoder.weight": dpred.T @ feat, "decoder.bias": dpred.sum(0)}
        dfeat = dpred @ P["decoder.weight"]
        none = [None] * (c.num_blocks - 1)
        dT = none + [np.repeat(dfeat[:, None, :c.d_model] / c.n_task_tokens, c.n_task_tokens, axis=1)]
        dA = none + [np.repeat(dfeat[:, None, c.d_model:] / c.n_act_tokens, c.n_act_tokens, axis=1)]
        G = self.backward(dT, dA, cache)
        G.update(G_dec)
        self._tie(G)
        return loss, G


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr, self.mu = lr, momentum
        self.buf: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            b = self.buf.setdefault(k, np.zeros_like(g))
            b *= self.mu
            b += g
            params[k] -= self.lr * b


def _mixture_batch(tasks, rng, n):
    idx = rng.integers(0, len(tasks), n)
    obs = np.empty((n, tasks[0].mean.size))
    for m in range(len(tasks)):
        sel = idx == m
        if sel.any():
            obs[sel] = tasks[m].sample(rng, int(sel.sum()))[0]
    return obs


def pretrain_backbone(tasks: list[ToyTask], steps: int, seed: int, config: ToyConfig | None = None):
    """Train the backbone on observation reconstruction over the task mixture.

    Returns ``(backbone, losses)`` where ``losses`` holds the held-out
    reconstruction loss before and after training.
    """
    if not tasks:
        raise ValueError("tasks must be non-empty")
    cfg = config or ToyConfig()
    bb = ToyBackbone.init(BackboneConfig.from_toy(cfg), rng_for(seed, _BACKBONE_INIT))
    held = _mixture_batch(tasks, rng_for(seed, _HELDOUT, 0), 512)
    before = bb.reconstruction_loss_and_grad(held)[0]
    rng = rng_for(seed, _PRETRAIN)
    opt = Adam(cfg.pretrain_lr)
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is caught through the loss below
        for step in range(steps):
            loss, G = bb.reconstruction_loss_and_grad(_mixture_batch(tasks, rng, cfg.batch))
            if not math.isfinite(loss):
                raise HarnessError(f"pretraining diverged at step {step}")
            opt.step(bb.params, G)
    bb = ToyBackbone(bb.config, {k: v.astype(np.float32) for k, v in bb.params.items()})
    after = bb.reconstruction_loss_and_grad(held)[0]
    return bb, {"before": before, "after": after}


# -- finetuning --------------------------------------------------------------

@dataclass
class Finetuned:
    task: ToyTask
    theta: NamedTensorMap
    expert: ActionExpert
    adapters: list[LowRankUpdate]
    eval_mse: float
    initial_mse: float


def eval_mse(backbone: ToyBackbone, expert: ActionExpert, obs: np.ndarray, targets: np.ndarray) -> float:
    h_T, h_A = backbone.streams(obs)
    pred = expert.forward(h_T, h_A)
    return float(np.mean((pred - targets) ** 2))


def finetune_task(theta_0: ToyBackbone, task: ToyTask, expert_config: ExpertConfig, steps: int, seed: int,
                  config: ToyConfig | None = None) -> Finetuned:
    """Train rank-r adapters on the input projections plus an expert from the shared initialization."""
    cfg = config or ToyConfig()
    expert = ActionExpert.init(expert_config, int(rng_for(seed, _EXPERT_INIT).integers(2**31)))
    expert = ActionExpert(expert_config, {k: v.astype(np.float64) for k, v in expert.params.items()})
    # common random numbers: every task draws adapter init, minibatch noise and
    # bias calibration from the same streams, so finetunes differ only through
    # the task itself
    task_key = () if cfg.common_random_numbers else (task.index,)
    if cfg.zero_head:
        expert.params["head.out.weight"][:] = 0.0
    if cfg.head_bias_init:
        y = task.sample(rng_for(seed, _HEAD_INIT, *task_key), 512)[1]
        expert.params["head.out.bias"] = y.reshape(len(y), -1).mean(0)
    lrng = rng_for(seed, _LORA_INIT, *task_key)
    lora = {}
    for name in ADAPTED:
        d_out, d_in = theta_0.params[name].shape
        lora[name + ".up"] = lrng.uniform(-1, 1, (d_out, cfg.lora_rank)) / math.sqrt(cfg.lora_rank)
        lora[name + ".down"] = np.zeros((cfg.lora_rank, d_in))
    base = {k: np.asarray(v, dtype=np.float64) for k, v in theta_0.params.items()}
    s = cfg.lora_scaling

    def effective():
        return {n: base[n] + s * lora[n + ".up"] @ lora[n + ".down"] for n in ADAPTED}

    held_obs, held_y = task.sample(rng_for(seed, _HELDOUT, 1, task.index), 512)
    initial = eval_mse(theta_0, expert, held_obs, held_y)
    rng = rng_for(seed, _FINETUNE, *task_key)
    make = SGD if cfg.expert_optimizer == "sgd" else Adam
    # the trunk (query embedding and blocks 1..L-1) is what merging averages
    trunk = {n for n in expert.params if n == "query_embed"
             or (n.startswith("blocks.") and int(n.split(".")[1]) < expert_config.num_blocks)}
    opt_t, opt_h = make(cfg.expert_lr * cfg.trunk_lr_scale), make(cfg.expert_lr)
    opt_l = SGD(cfg.lora_lr) if cfg.lora_optimizer == "sgd" else Adam(cfg.lora_lr)
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            obs, y = task.sample(rng, cfg.batch)
            h_T, h_A, cache = theta_0.run(obs, effective())
            try:
                loss, G, dT, dA = expert.loss_and_grad(h_T, h_A, y)
            except ExpertError:
                loss = math.nan
            if not math.isfinite(loss):
                raise HarnessError(f"finetuning {task.task_id} diverged at step {step}")
            Gb = theta_0.backward(dT, dA, cache)
            Gl = {}
            for n in ADAPTED:
                Gl[n + ".up"] = s * Gb[n] @ lora[n + ".down"].T
                Gl[n + ".down"] = s * lora[n + ".up"].T @ Gb[n]
            opt_t.step(expert.params, {n: g for n, g in G.items() if n in trunk})
            opt_h.step(expert.params, {n: g for n, g in G.items() if n not in trunk})
            opt_l.step(lora, Gl)

    adapters = [LowRankUpdate(lora[n + ".down"].astype(np.float32), lora[n + ".up"].astype(np.float32), s, n)
                for n in ADAPTED]
    updates = {a.target_name: theta_0.params[a.target_name] + materialize(a) for a in adapters}
    theta = theta_0.to_map().replace(updates).with_metadata(task_id=task.task_id)
    expert = expert.rounded()
    mse = eval_mse(ToyBackbone.from_map(theta), expert, held_obs, held_y)
    return Finetuned(task, theta, expert, adapters, mse, initial)


# -- pipeline ----------------------------------------------------------------

@dataclass
class Family:
    config: ToyConfig
    tasks: list[ToyTask]
    backbone: ToyBackbone
    pretrain_losses: dict
    finetuned: list[Finetuned]

    @property
    def theta_0(self) -> NamedTensorMap:
        return self.backbone.to_map()


def train_family(config: ToyConfig) -> Family:
    tasks = gen_tasks(config.num_tasks, config.seed, config)
    bb, losses = pretrain_backbone(tasks, config.pretrain_steps, config.seed, config)
    ft = [finetune_task(bb, t, config.expert_config(), config.finetune_steps, config.seed, config) for t in tasks]
    return Family(config, tasks, bb, losses, ft)


@dataclass
class PipelineReport:
    task_ids: list[str]
    mse: dict[str, dict[str, float]]  # variant -> task -> mse
    success: dict[str, dict[str, float]]
    routing: list[tuple]  # (kind, episode, true, selected, correct, max_prob)
    routing_accuracy: dict[str, float]
    mask_rows: list[tuple]
    selfish_ratio: float
    block_distance: list[float]
    progressive: list[tuple[int, float]]
    extras: dict = field(default_factory=dict)
    episodes: list = field(default_factory=list)  # EpisodeRecord per evaluation episode, masked + routed

    def tables(self) -> dict[str, tuple[list[str], list[tuple]]]:
        metrics = [(v, t, self.mse[v][t], self.success[v][t]) for v in self.mse for t in self.task_ids]
        metrics += [("routing_accuracy_" + k, "", a, "") for k, a in self.routing_accuracy.items()]
        return {
            "metrics.csv": (["variant", "task_id", "mse", "success_rate"], metrics),
            "routing.csv": (["kind", "episode", "true_task", "selected_task", "correct", "max_prob"], self.routing),
            "mask_stats.csv": (["metric", "task_id", "component", "value"], self.mask_rows),
            "block_distance.csv": (["block", "distance"], [(i + 1, d) for i, d in enumerate(self.block_distance)]),
            "progressive.csv": (["k", "mse"], self.progressive),
        }

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, (header, rows) in self.tables().items():
            (out / name).write_text(to_csv(header, rows))
            paths.append(out / name)
        return paths


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _encoder(backbone_cfg: BackboneConfig, obs: np.ndarray, block: int):
    def encode(theta: NamedTensorMap):
        h_T, h_A = ToyBackbone(backbone_cfg, dict(theta)).streams(obs[None])
        return h_T[block - 1][0], h_A[block - 1][0]
    return encode


def _rollout(theta: NamedTensorMap, expert: ActionExpert, obs: np.ndarray) -> np.ndarray:
    return expert.forward(*ToyBackbone.from_map(theta).streams(obs))


def build_bundle(family: Family, recipe: MergeRecipe, kind: str = "V", task_subset=None) -> RouterBundle:
    fts = family.finetuned if task_subset is None else [family.finetuned[i] for i in task_subset]
    theta_0 = family.theta_0
    vectors = [extract(f.theta, theta_0, f.task.task_id, only=ADAPTED) for f in fts]
    tau = merge(recipe, vectors)
    masks = [build_mask(v, tau, recipe.lam) for v in vectors]
    shared, heads = merge_experts([f.expert for f in fts], recipe.head_start_l, [f.task.task_id for f in fts])
    if len(fts) == 1 and shared.head_start_l == 1:
        sub = None
    else:
        sub = extract_subspace(shared, shared.head_start_l - 1, family.config.k_r, kind)
    return RouterBundle(theta_0, tau, masks, shared, heads, sub)


def eval_episodes(family: Family) -> list[tuple[int, np.ndarray, np.ndarray]]:
    cfg = family.config
    eps = []
    for t in family.tasks:
        rng = rng_for(cfg.seed, _EVAL, t.index)
        for _ in range(cfg.episodes_per_task):
            obs, y = t.episode(rng, cfg.episode_len, cfg.episode_rho)
            eps.append((t.index, obs, y))
    return eps


@dataclass
class EpisodeRecord:
    task_id: str
    routed_task_id: str
    observations: np.ndarray  # (T, d_obs)
    predicted: np.ndarray  # (T, horizon, action_dim)
    targets: np.ndarray  # (T, horizon, action_dim)
    mse: float


@contextmanager
def _stage(name: str):
    try:
        yield
    except HarnessError:
        raise
    except Exception as exc:
        raise HarnessError(f"{name}: {type(exc).__name__}: {exc}") from exc


def run_pipeline(config: ToyConfig, recipe: MergeRecipe | None = None, family: Family | None = None,
                 route_kinds=("V", "K", "K_and_V")) -> PipelineReport:
    """extract -> merge -> masks -> expert merge -> subspace -> routed rollouts, plus diagnostics.

    A failing stage raises :class:`HarnessError` prefixed with the stage name.
    """
    with _stage("train"):
        family = family or train_family(config)
    ids = [t.task_id for t in family.tasks]
    recipe = recipe or MergeRecipe(tuple(ids))
    M = len(ids)
    with _stage("merge"):
        bundle = build_bundle(family, recipe, "V")
        naive_theta = apply(family.theta_0, bundle.tau_merge, 1.0)
        naive_expert = average_experts([f.expert for f in family.finetuned])
    bcfg = family.backbone.config
    with _stage("subspace"):
        subspaces = {}
        for kind in route_kinds:
            if bundle.subspace is None:
                subspaces[kind] = None
            else:
                subspaces[kind] = extract_subspace(bundle.shared, bundle.subspace.source_block, config.k_r, kind)

    sq = {v: {t: [] for t in ids} for v in ("finetuned", "masked_routed", "naive")}
    routing, correct, records = [], {}, []
    with _stage("rollout"):
        for e, (m, obs, y) in enumerate(eval_episodes(family)):
            tid = ids[m]
            ft = family.finetuned[m]
            sq["finetuned"][tid].append(np.mean((_rollout(ft.theta, ft.expert, obs) - y) ** 2))
            sq["naive"][tid].append(np.mean((_rollout(naive_theta, naive_expert, obs) - y) ** 2))
            for kind in route_kinds:
                b = bundle if kind == "V" else replace(bundle, subspace=subspaces[kind])
                if b.subspace is None:
                    sel = _single_task_selection(b)
                else:
                    sel = route_episode(b, _encoder(bcfg, obs[0], b.subspace.source_block))
                ok = int(sel.task_id == tid)
                correct.setdefault(kind, []).append(ok)
                routing.append((kind, e, tid, sel.task_id, ok, float(sel.decision.probs.max())))
                if kind == "V":
                    pred = _rollout(sel.backbone, sel.expert, obs)
                    err = float(np.mean((pred - y) ** 2))
                    sq["masked_routed"][tid].append(err)
                    records.append(EpisodeRecord(tid, sel.task_id, obs, pred, y, err))

    mse = {v: {t: float(np.mean(x)) for t, x in d.items()} for v, d in sq.items()}
    success = {v: {t: float(np.mean(np.array(x) < config.success_threshold)) for t, x in d.items()}
               for v, d in sq.items()}
    with _stage("analysis"):
        stats = mask_stats(bundle.masks)
        dist = block_distance([f.expert for f in family.finetuned]) if M >= 2 else []
        prog = progressive_merge_eval(family, range(config.num_blocks + 1)) if M >= 2 else []
    return PipelineReport(ids, mse, success, routing, {k: float(np.mean(v)) for k, v in correct.items()},
                          stats.rows(), stats.selfish_ratio, dist, prog,
                          {"pretrain_losses": family.pretrain_losses}, records)


def _single_task_selection(bundle: RouterBundle):
    decision = decide([0.0], [0.0])
    return EpisodeSelection(decision, bundle.task_ids[0], bundle.masks[0], bundle.heads[0],
                            bundle.masked_variant(0), bundle.expert_for(0))


def progressive_merge_eval(family: Family, ks, reference: int | None = None) -> list[tuple[int, float]]:
    """MSE on the reference task when blocks 1..k are averaged across all task experts."""
    cfg = family.config
    ref = cfg.progressive_reference if reference is None else reference
    ft = family.finetuned[ref]
    experts = [f.expert for f in family.finetuned]
    task = family.tasks[ref]
    obs, y = task.sample(rng_for(cfg.seed, _HELDOUT, 2, ref), cfg.progressive_episodes * cfg.episode_len)
    bb = ToyBackbone.from_map(ft.theta)
    rows = []
    for k in ks:
        rows.append((int(k), eval_mse(bb, progressive_merge(experts, int(k), ref), obs, y)))
    return rows


def selfish_ratio_by_M(family: Family, recipe_kwargs: dict | None = None, Ms=(2, 3, 4)) -> dict[int, float]:
    """Selfish ratio of the masks built from the first M tasks of one trained family."""
    out = {}
    for M in Ms:
        ids = tuple(t.task_id for t in family.tasks[:M])
        recipe = MergeRecipe(ids, **(recipe_kwargs or {}))
        theta_0 = family.theta_0
        vectors = [extract(f.theta, theta_0, f.task.task_id, only=ADAPTED) for f in family.finetuned[:M]]
        tau = merge(recipe, vectors)
        out[M] = selfish_ratio([build_mask(v, tau, recipe.lam) for v in vectors])
    return out


def base_fingerprint(family: Family) -> str:
    return fingerprint(family.theta_0)


def _pooled_streams(theta: NamedTensorMap, cfg: BackboneConfig, obs: np.ndarray, block: int):
    h_T, h_A = ToyBackbone(cfg, dict(theta)).streams(obs)
    return h_T[block - 1].mean(1), h_A[block - 1].mean(1)


def _blind(W: np.ndarray, diffs: np.ndarray, energy: float, keep_rank: int) -> np.ndarray:
    """Remove from the row space of W the principal directions of ``diffs`` holding ``energy`` of its mass."""
    _, s, Vt = np.linalg.svd(diffs, full_matrices=False)
    cum = np.cumsum(s * s) / max(float(np.sum(s * s)), 1e-300)
    n = min(int(np.searchsorted(cum, energy)) + 1, W.shape[1] - keep_rank)
    Q = Vt[:n].T
    return W - (W @ Q) @ Q.T


def k_blind_pair(family: Family, pair=(0, 1), recipe: MergeRecipe | None = None, n_calib: int = 256,
                 energy: float = 0.999) -> dict:
    """V- vs K-routing accuracy on a task pair made adversarial for K-routing.

    The two masked backbone variants are run on calibration observations from
    both tasks; the principal directions along which their pooled streams
    differ are projected out of the source block's key matrices (action-stream
    differences out of the task-path keys and vice versa, following the
    crossed pairing). Key subspaces then barely see what separates the
    variants, while the value projections are untouched.
    """
    cfg = family.config
    sub = list(pair)
    ids = tuple(family.tasks[i].task_id for i in sub)
    recipe = replace(recipe, task_ids=ids) if recipe else MergeRecipe(ids)
    bundle = build_bundle(family, recipe, "V", sub)
    block = bundle.subspace.source_block
    bcfg = family.backbone.config
    crng = rng_for(cfg.seed, _CALIB)
    obs = np.concatenate([family.tasks[i].sample(crng, n_calib)[0] for i in sub])
    (t0, a0), (t1, a1) = (_pooled_streams(bundle.masked_variant(m), bcfg, obs, block) for m in range(2))
    params = dict(bundle.shared.params)
    p = f"blocks.{block}."
    params[p + "task_attn.k"] = _blind(np.asarray(params[p + "task_attn.k"], np.float64), a0 - a1, energy, cfg.k_r)
    params[p + "act_attn.k"] = _blind(np.asarray(params[p + "act_attn.k"], np.float64), t0 - t1, energy, cfg.k_r)
    shared = replace(bundle.shared, params=params)
    acc = {}
    for kind in ("V", "K"):
        b = replace(bundle, shared=shared, subspace=extract_subspace(shared, block, cfg.k_r, kind))
        hits = [int(route_episode(b, _encoder(bcfg, obs_ep[0], block)).task_id == family.tasks[m].task_id)
                for m, obs_ep, _ in eval_episodes(family) if m in sub]
        acc[kind] = float(np.mean(hits))
    return acc
