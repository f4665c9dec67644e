"""Contrastive policy optimisation on a forked group.

The policy over the ``G`` candidates of a group is a softmax over negative
scaled squared distances between an anchor, recomputed by the current
parameters, and the stored old-policy candidates.  Ratios of these surrogate
probabilities feed the usual clipped GRPO objective.

Anchors are drawn from the candidates themselves, so their stored inputs are
reused and no extra rollouts are needed.  The old-policy probabilities for an
anchor are computed by running ``old_params`` through exactly the same batched
forward pass as the current parameters, which makes the ratios exactly one
when the two coincide.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable

import numpy as np

from . import numerics as nx
from .errors import InvalidArgument, NumericFailure
from .numerics import RngStream, gaussian, sample_without_replacement, softmax_neg_scaled
from .toygen import ModelParams, SamplerConfig, denoise, rollout_rows

if TYPE_CHECKING:
    from .neighborhood import NoisePlan
    from .rollout import ReplayEntry


@dataclass(frozen=True)
class CopoConfig:
    clip_eps: float = 1e-4
    tau: float | None = None  # x_t-space temperature (flow sampler)
    tau0: float | None = None  # x0-space temperature (consistency sampler)
    learning_rate: float = 1e-5
    group_size: int = 12
    sigma: float = 0.5
    anchor_batch: int = 4
    update_steps: int = 2
    degenerate_std_threshold: float = 1e-8
    optimizer: str = "sgd"
    clip_enabled: bool = True
    objective_steps: tuple[int, ...] | None = None  # 0-based denoising steps; None = all

    def __post_init__(self):
        if not self.clip_eps > 0:
            raise InvalidArgument("clip_eps must be positive")
        if self.group_size < 2:
            raise InvalidArgument("group_size must be >= 2")
        if not 1 <= self.anchor_batch <= self.group_size:
            raise InvalidArgument("anchor_batch must lie in 1..group_size")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidArgument(f"unknown optimizer {self.optimizer!r}")
        for t in (self.tau, self.tau0):
            if t is not None and not t > 0:
                raise InvalidArgument("temperatures must be positive")


# --------------------------------------------------------------------------
# advantages


@dataclass(frozen=True, eq=False)
class RewardGroup:
    rewards: np.ndarray
    mean: float
    std: float

    @classmethod
    def of(cls, rewards) -> "RewardGroup":
        r = np.asarray(rewards, dtype=np.float64)
        return cls(r, float(r.mean()), float(r.std()))


def group_advantages(rewards, threshold: float = 1e-8) -> np.ndarray:
    """``(r - mean) / std`` with the population std; zeros for a flat group."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise InvalidArgument("a group needs at least 2 rewards")
    if not np.all(np.isfinite(r)):
        raise InvalidArgument("rewards must be finite")
    # measuring from the first reward makes any exactly-representable shift
    # cancel before the mean is taken, so the result is bit-for-bit shift invariant
    rel = r - r[0]
    centred = rel - rel.mean()
    std = float(np.sqrt(np.mean(centred * centred)))
    if std < threshold:
        return np.zeros_like(r)
    return centred / std


# --------------------------------------------------------------------------
# surrogate policies


@dataclass(frozen=True, eq=False)
class SurrogatePolicy:
    probs: np.ndarray
    distances: np.ndarray
    tau: float
    space: str  # "x_t" or "x0"


def squared_distances(candidates, anchors):
    """``||c_i - a_j||^2`` as an (A, G) array; ``anchors`` may be a tape variable."""
    c = np.asarray(candidates, dtype=np.float64)
    if isinstance(anchors, nx.Var):
        a = anchors
        if a.ndim != 2 or a.shape[1] != c.shape[1]:
            raise InvalidArgument("anchor and candidate dimensions differ")
        diff = a.reshape(a.shape[0], 1, a.shape[1]) - c[None]
        return (diff * diff).sum(axis=2)
    a = np.asarray(anchors, dtype=np.float64)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if c.ndim != 2 or a.shape[1] != c.shape[1]:
        raise InvalidArgument("anchor and candidate dimensions differ")
    diff = a[:, None, :] - c[None]
    d = np.einsum("agd,agd->ag", diff, diff)
    return d[0] if single else d


def _surrogate(candidates, anchor, tau, space) -> SurrogatePolicy:
    d = squared_distances(candidates, anchor)
    return SurrogatePolicy(softmax_neg_scaled(d, tau), d, tau, space)


def surrogate_fm(candidates, anchor, tau: float) -> SurrogatePolicy:
    """Policy from distances between an anchor latent ``x_t`` and candidate latents."""
    return _surrogate(candidates, anchor, tau, "x_t")


def surrogate_cm(candidate_x0_old, anchor_x0_current, tau0: float) -> SurrogatePolicy:
    """Policy from distances in ``x0_hat`` space (old candidates vs current anchor)."""
    return _surrogate(candidate_x0_old, anchor_x0_current, tau0, "x0")


# --------------------------------------------------------------------------
# clipped objective


def clipped_terms(pi_new, pi_old, advantages, clip_eps: float, clip: bool = True):
    pi_old = np.asarray(pi_old, dtype=np.float64)
    if np.any(pi_old <= 0):
        raise NumericFailure("old policy assigns zero probability; ratio undefined")
    return ratio_terms(pi_new / pi_old, advantages, clip_eps, clip)


def ratio_terms(ratio, advantages, clip_eps: float, clip: bool = True):
    adv = np.asarray(advantages, dtype=np.float64)
    if not clip:
        return ratio * adv
    return nx.minimum(ratio * adv, nx.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def clipped_objective(pi_new, pi_old, advantages, clip_eps: float, clip: bool = True):
    """Mean over candidates (and any leading anchor axes) of the clipped terms."""
    terms = clipped_terms(pi_new, pi_old, advantages, clip_eps, clip)
    return terms.mean() if isinstance(terms, nx.Var) else float(np.mean(terms))


def clipped_mask(ratio: np.ndarray, advantages: np.ndarray, clip_eps: float) -> np.ndarray:
    """Terms where the clipped branch is active (zero gradient)."""
    return ((advantages > 0) & (ratio > 1 + clip_eps)) | ((advantages < 0) & (ratio < 1 - clip_eps))


# --------------------------------------------------------------------------
# pivot-chunk update


@dataclass
class UpdateStats:
    objective: float
    ratio_mean: float
    ratio_max: float
    clip_frac: float
    grad_norm: float
    tau: float
    anchors: list[int]
    per_step: list[dict] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "objective": self.objective,
            "ratio_mean": self.ratio_mean,
            "ratio_max": self.ratio_max,
            "clip_frac": self.clip_frac,
            "grad_norm": self.grad_norm,
            "tau": self.tau,
            "anchors": list(self.anchors),
        }


class Optimizer:
    """Gradient ascent, plain or Adam; one instance per training run."""

    def __init__(self, kind: str, lr: float):
        self.kind, self.lr = kind, lr
        self.t = 0
        self.state: dict = {}

    def step(self, leaves: dict, grads: dict) -> dict:
        if self.lr == 0.0:
            return leaves
        self.t += 1
        if self.kind == "sgd":
            return {k: leaves[k] + self.lr * grads[k] for k in leaves}
        out = {}
        b1, b2 = 0.9, 0.999
        for k, g in grads.items():
            m, v = self.state.get(k, (np.zeros_like(g), np.zeros_like(g)))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.state[k] = (m, v)
            step = (m / (1 - b1**self.t)) / (np.sqrt(v / (1 - b2**self.t)) + 1e-8)
            out[k] = leaves[k] + self.lr * step
        return out


def _next_states(x, pred, t, t_next):
    # one Euler step of the flow sampler; t_next = 0 lands on pred
    return x + (t_next - t) * (x - pred) * (1.0 / t)


def _step_indices(entry: "ReplayEntry", cfg: CopoConfig) -> list[int]:
    T = entry.inputs.shape[1]
    steps = list(range(T)) if cfg.objective_steps is None else list(cfg.objective_steps)
    if not steps or any(not 0 <= k < T for k in steps):
        raise InvalidArgument(f"objective steps {cfg.objective_steps} outside 0..{T - 1}")
    return steps


def _candidate_targets(entry: "ReplayEntry", k: int) -> np.ndarray:
    if entry.sampler.kind == "consistency":
        return entry.preds[:, k]
    T = entry.inputs.shape[1]
    return entry.inputs[:, k + 1] if k + 1 < T else entry.preds[:, k]


def _anchor_outputs(weights, entry: "ReplayEntry", anchors: list[int], steps: list[int]):
    """Anchor predictions (consistency) or next states (flow) for every step, stacked."""
    ts = entry.sampler.timesteps
    xs = np.concatenate([entry.inputs[anchors, k] for k in steps], axis=0)
    tcol = np.concatenate([np.full((len(anchors), 1), ts[k]) for k in steps], axis=0)
    h = np.broadcast_to(entry.context.h, (xs.shape[0], entry.context.h.shape[-1]))
    pred = denoise(weights, xs, h, tcol)
    if entry.sampler.kind == "consistency":
        return pred
    t_next = np.concatenate([np.full((len(anchors), 1), ts[k + 1] if k + 1 < len(ts) else 0.0) for k in steps], axis=0)
    return _next_states(xs, pred, tcol, t_next)


def _pooled_distances(entry: "ReplayEntry", cfg: CopoConfig) -> np.ndarray:
    ds = []
    for k in _step_indices(entry, cfg):
        c = _candidate_targets(entry, k)
        d = squared_distances(c, c)
        ds.append(d[~np.eye(len(c), dtype=bool)])
    return np.concatenate(ds)


def resolve_tau(entries, cfg: CopoConfig) -> float:
    """Configured temperature, or the mean off-diagonal candidate distance pooled
    over ``entries`` (one entry or a calibration list)."""
    if not isinstance(entries, (list, tuple)):
        entries = [entries]
    kind = entries[0].sampler.kind
    tau = cfg.tau0 if kind == "consistency" else cfg.tau
    if tau is not None:
        return tau
    tau = float(np.mean(np.concatenate([_pooled_distances(e, cfg) for e in entries])))
    return tau if tau > 0 else 1.0


def copo_objective(weights, old_weights, entry: "ReplayEntry", anchors: list[int], tau: float, cfg: CopoConfig, advantages=None):
    """Objective averaged over anchors and stored steps; returns (J, ratio array).

    ``weights`` may hold tape variables; ``old_weights`` are plain arrays.
    """
    steps = _step_indices(entry, cfg)
    adv = group_advantages(entry.rewards, cfg.degenerate_std_threshold) if advantages is None else advantages
    cur = _anchor_outputs(weights, entry, anchors, steps)
    old = _anchor_outputs(old_weights, entry, anchors, steps)
    A = len(anchors)
    d_new, d_old = [], []
    for j, k in enumerate(steps):
        c = _candidate_targets(entry, k)
        d_new.append(squared_distances(c, cur[j * A : (j + 1) * A]))
        d_old.append(squared_distances(c, old[j * A : (j + 1) * A]))
    dn = nx.concat(d_new, axis=0)
    do = np.concatenate(d_old, axis=0)
    # ratios through log-probabilities: far candidates underflow in probability space
    log_ratio = nx.log_softmax_neg_scaled(dn, tau) - nx.log_softmax_neg_scaled(do, tau)
    ratio = nx.exp(log_ratio)
    J = ratio_terms(ratio, adv, cfg.clip_eps, clip=cfg.clip_enabled).mean()
    return J, nx.value_of(ratio)


def pick_anchors(entry: "ReplayEntry", cfg: CopoConfig, stream: RngStream | None = None) -> list[int]:
    G = len(entry.rewards)
    if stream is None:
        stream = RngStream(entry.provenance[0], (entry.provenance[1], "anchors"))
    anchors, _ = sample_without_replacement(stream, G, min(cfg.anchor_batch, G))
    return anchors


def _check_entry(params, entry: "ReplayEntry") -> None:
    dims = params.effective().dims
    if entry.inputs.shape[2] != dims.chunk_dim or entry.context.h.shape[-1] != dims.context_dim:
        raise InvalidArgument("replay entry does not match the model dimensions")
    if entry.inputs.shape[0] != len(entry.rewards):
        raise InvalidArgument("replay entry has inconsistent group size")


def copo_loss(params, entry: "ReplayEntry", old_params: ModelParams, cfg: CopoConfig, anchors: list[int], tau: float | None = None):
    """The objective ``copo_update`` ascends, as a function of ``params.trainable()`` leaves."""
    tau = resolve_tau(entry, cfg) if tau is None else tau
    adv = group_advantages(entry.rewards, cfg.degenerate_std_threshold)
    old_w = old_params.weights

    def loss(leaves):
        return copo_objective(params.materialize(leaves), old_w, entry, anchors, tau, cfg, adv)[0]

    return loss


def copo_update(
    params,
    entry: "ReplayEntry",
    old_params: ModelParams,
    cfg: CopoConfig,
    stream: RngStream | None = None,
    anchors: list[int] | None = None,
    optimizer: Optimizer | None = None,
):
    """Ascend the clipped contrastive objective on the pivot chunk of ``entry``.

    ``params`` is anything with the trainer protocol (``trainable``,
    ``materialize``, ``with_trainable``, ``effective``): a plain
    :class:`ModelParams` or an adapted model.  Returns the updated object of
    the same type and an :class:`UpdateStats`.
    """
    _check_entry(params, entry)
    _check_entry(old_params, entry)
    if anchors is None:
        anchors = pick_anchors(entry, cfg, stream)
    tau = resolve_tau(entry, cfg)
    adv = group_advantages(entry.rewards, cfg.degenerate_std_threshold)
    opt = optimizer or Optimizer(cfg.optimizer, cfg.learning_rate)
    per_step = []
    leaves = params.trainable()
    old_w = old_params.weights
    loss = copo_loss(params, entry, old_params, cfg, anchors, tau)
    for _ in range(cfg.update_steps):
        g = nx.grad(loss, leaves)
        J, ratio = copo_objective(params.materialize(leaves), old_w, entry, anchors, tau, cfg, adv)
        mask = clipped_mask(ratio, np.broadcast_to(adv, ratio.shape), cfg.clip_eps) if cfg.clip_enabled else np.zeros(ratio.shape, bool)
        gnorm = float(np.sqrt(sum(float(np.sum(v * v)) for v in g.values())))
        per_step.append(
            {
                "objective": float(J),
                "ratio_mean": float(ratio.mean()),
                "ratio_max": float(ratio.max()),
                "ratio_min": float(ratio.min()),
                "clip_frac": float(mask.mean()),
                "grad_norm": gnorm,
            }
        )
        if not np.isfinite(J) or not np.isfinite(gnorm):
            raise NumericFailure("non-finite objective or gradient in copo_update")
        if gnorm > 0.0:
            leaves = opt.step(leaves, g)
        params = params.with_trainable(leaves)
    stats = UpdateStats(
        objective=float(np.mean([s["objective"] for s in per_step])),
        ratio_mean=float(np.mean([s["ratio_mean"] for s in per_step])),
        ratio_max=float(np.max([s["ratio_max"] for s in per_step])),
        clip_frac=float(np.mean([s["clip_frac"] for s in per_step])),
        grad_norm=per_step[0]["grad_norm"],
        tau=tau,
        anchors=list(anchors),
        per_step=per_step,
    )
    return params, stats


# --------------------------------------------------------------------------
# SDE-GRPO baseline


@dataclass(frozen=True, eq=False)
class SdeGroup:
    """Rollouts of one SDE-GRPO iteration: shared initial noise, per-branch solver noise."""

    contexts: np.ndarray  # (G, L, context_dim)
    inputs: np.ndarray  # (G, L, T, d)
    chunks: np.ndarray  # (G, L, d)
    rewards: np.ndarray  # (G,)
    timesteps: tuple[float, ...]


def sde_rollouts(
    params: ModelParams,
    h0: np.ndarray,
    plan: "NoisePlan",
    reward_fn: Callable[[np.ndarray, int], float],
    cfg: CopoConfig,
    sampler: SamplerConfig,
    stream: RngStream,
    force_shared_solver: bool = False,
) -> SdeGroup:
    if sampler.kind != "consistency":
        raise InvalidArgument("the SDE baseline needs the consistency sampler")
    if sampler.T < 2:
        raise InvalidArgument("T=1 leaves no solver noise to act on")
    G, L, d = cfg.group_size, plan.L, plan.chunk_dim
    init = np.broadcast_to(plan.init_noises, (G, L, d)).copy()
    if force_shared_solver:
        solver = np.broadcast_to(plan.solver_noises, (G, L, sampler.T - 1, d)).copy()
    else:
        n = L * (sampler.T - 1) * d
        solver = np.stack([gaussian(stream.child(f"branch.{i}"), n)[0].reshape(L, sampler.T - 1, d) for i in range(G)])
    chunks, inputs, _, ctxs = rollout_rows(params, np.broadcast_to(h0, (G, h0.shape[-1])), init, solver, sampler)
    rewards = np.array([reward_fn(chunks[i], i) for i in range(G)])
    return SdeGroup(ctxs, inputs, chunks, rewards, sampler.timesteps)


def sde_log_probs(weights, group: SdeGroup):
    """Gaussian log-density (up to a constant) of every re-noise transition, shape (G, L*(T-1))."""
    G, L, T, d = group.inputs.shape
    ts = group.timesteps
    xs, hs, tt, nxt, var = [], [], [], [], []
    for q in range(L):
        for k in range(T - 1):
            xs.append(group.inputs[:, q, k])
            hs.append(group.contexts[:, q])
            tt.append(np.full((G, 1), ts[k]))
            nxt.append(group.inputs[:, q, k + 1])
            var.append(np.full((G, 1), ts[k + 1] ** 2))
    mean = denoise(weights, np.concatenate(xs), np.concatenate(hs), np.concatenate(tt))
    diff = np.concatenate(nxt) - mean
    lp = (diff * diff).sum(axis=1) * (-0.5 / np.concatenate(var)[:, 0])
    # rows are (transition, branch); regroup to (branch, transition)
    return lp.reshape(L * (T - 1), G).T


def sde_objective(weights, old_lp: np.ndarray, group: SdeGroup, adv: np.ndarray, cfg: CopoConfig):
    lp = sde_log_probs(weights, group)
    ratio = nx.exp(lp - old_lp)
    A = np.broadcast_to(adv[:, None], old_lp.shape)
    J = nx.minimum(ratio * A, nx.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * A).mean()
    return J, nx.value_of(ratio)


def sde_ascent(params, group: SdeGroup, cfg: CopoConfig, optimizer: Optimizer | None = None):
    """Clipped GRPO steps on a finished SDE group."""
    adv = group_advantages(group.rewards, cfg.degenerate_std_threshold)
    old_lp = sde_log_probs(params.effective().weights, group)
    opt = optimizer or Optimizer(cfg.optimizer, cfg.learning_rate)
    leaves = params.trainable()
    per_step = []
    for _ in range(cfg.update_steps):

        def loss(p):
            return sde_objective(params.materialize(p), old_lp, group, adv, cfg)[0]

        g = nx.grad(loss, leaves)
        J, ratio = sde_objective(params.materialize(leaves), old_lp, group, adv, cfg)
        A = np.broadcast_to(adv[:, None], ratio.shape)
        gnorm = float(np.sqrt(sum(float(np.sum(v * v)) for v in g.values())))
        per_step.append(
            {
                "objective": float(J),
                "ratio_mean": float(ratio.mean()),
                "ratio_max": float(ratio.max()),
                "ratio_min": float(ratio.min()),
                "clip_frac": float(clipped_mask(ratio, A, cfg.clip_eps).mean()),
                "grad_norm": gnorm,
            }
        )
        if not np.isfinite(gnorm):
            raise NumericFailure("non-finite gradient in SDE update")
        if gnorm > 0.0:
            leaves = opt.step(leaves, g)
        params = params.with_trainable(leaves)
    stats = UpdateStats(
        objective=float(np.mean([s["objective"] for s in per_step])),
        ratio_mean=float(np.mean([s["ratio_mean"] for s in per_step])),
        ratio_max=float(np.max([s["ratio_max"] for s in per_step])),
        clip_frac=float(np.mean([s["clip_frac"] for s in per_step])),
        grad_norm=per_step[0]["grad_norm"],
        tau=float("nan"),
        anchors=[],
        per_step=per_step,
    )
    return params, stats


def sde_grpo_update(
    params,
    plan: "NoisePlan",
    reward_fn: Callable[[np.ndarray, int], float],
    cfg: CopoConfig,
    sampler: SamplerConfig,
    h0: np.ndarray,
    stream: RngStream,
    force_shared_solver: bool = False,
    optimizer: Optimizer | None = None,
):
    """One SDE-GRPO iteration: roll out ``G`` branches that share ``plan``'s
    initial noises but draw their own solver noises, then ascend the clipped
    objective whose ratios come from the re-noise transition densities.

    Returns ``(params', stats, group)``.
    """
    group = sde_rollouts(params.effective(), h0, plan, reward_fn, cfg, sampler, stream, force_shared_solver)
    params, stats = sde_ascent(params, group, cfg, optimizer)
    return params, stats, group


def with_tau(cfg: CopoConfig, tau: float, kind: str) -> CopoConfig:
    return replace(cfg, tau0=tau) if kind == "consistency" else replace(cfg, tau=tau)
