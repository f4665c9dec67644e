"""One forked AR-CoPO iteration and the on-policy / SDE training loops.

An iteration never touches parameters: it returns a :class:`ReplayEntry` that
an update step consumes immediately (on-policy) or that a buffer keeps for
later (semi-on-policy).
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .copo import CopoConfig, Optimizer, copo_update, group_advantages, resolve_tau, sde_grpo_update, with_tau
from .errors import InvalidArgument, NumericFailure
from .neighborhood import fork, make_plan, perturb
from .numerics import RngStream, integers
from .rewards import PromptSpec, RewardSpec, eval_reward
from .toygen import ContextCache, ModelParams, SamplerConfig, encode, initial_context, rollout_rows

CSV_COLUMNS = ("iter", "pivot", "reward_mean", "reward_std", "objective", "clip_frac")


@dataclass(frozen=True)
class ArcopoConfig:
    copo: CopoConfig = CopoConfig()
    sampler: SamplerConfig = SamplerConfig()
    reward: RewardSpec = RewardSpec()
    L: int = 6

    def __post_init__(self):
        if self.L < 1:
            raise InvalidArgument("L must be >= 1")


@dataclass(frozen=True, eq=False)
class ReplayEntry:
    """The pivot-chunk group of one iteration.

    ``inputs``/``preds`` are (G, T, d): the per-step noisy inputs and the
    old-policy predictions of every candidate; ``clean`` is (G, d).
    """

    pivot: int
    context: ContextCache
    base_noise: np.ndarray
    member_noises: np.ndarray
    inputs: np.ndarray
    preds: np.ndarray
    clean: np.ndarray
    rewards: np.ndarray
    prompt: PromptSpec
    provenance: tuple[int, str]
    sampler: SamplerConfig
    sequences: np.ndarray | None = None  # (G, L, d) completed branches

    @property
    def G(self) -> int:
        return len(self.rewards)

    def equal(self, other: "ReplayEntry") -> bool:
        arrays = ("base_noise", "member_noises", "inputs", "preds", "clean", "rewards")
        return (
            self.pivot == other.pivot
            and self.provenance == other.provenance
            and self.sampler == other.sampler
            and self.prompt.prompt_seed == other.prompt.prompt_seed
            and np.array_equal(self.context.h, other.context.h)
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
        )


@dataclass
class IterationRecord:
    iteration: int
    pivot: int
    prompt_seed: int
    rewards: list[float]
    advantages: list[float]
    objective: float | None = None
    ratio_mean: float | None = None
    ratio_max: float | None = None
    clip_frac: float | None = None
    wall_time: float | None = None
    error: str | None = None

    @property
    def reward_mean(self) -> float:
        return float(np.mean(self.rewards))

    @property
    def reward_std(self) -> float:
        return float(np.std(self.rewards))

    def to_record(self, include_time: bool = False) -> dict:
        rec = asdict(self)
        rec["reward_mean"] = self.reward_mean
        rec["reward_std"] = self.reward_std
        if not include_time:
            rec.pop("wall_time")
        return rec


def sample_pivot(stream: RngStream, L: int) -> int:
    p, _ = integers(stream.child("pivot"), 1, L)
    return int(p[0]) + 1


def arcopo_iteration(
    params: ModelParams,
    old_params: ModelParams,
    prompt: PromptSpec,
    cfg: ArcopoConfig,
    stream: RngStream,
    pivot: int | None = None,
) -> tuple[ReplayEntry, IterationRecord]:
    """Roll out one forked group with ``old_params`` (the behaviour policy).

    Pivot sampling, the base plan, the neighbour deltas and (for the random
    reward) the reward draws all come from labelled children of ``stream``.
    """
    if params.dims != old_params.dims:
        raise InvalidArgument("params and old_params have different dimensions")
    t0 = time.perf_counter()
    L, s, c = cfg.L, cfg.sampler, cfg.copo
    d = old_params.dims.chunk_dim
    p = sample_pivot(stream, L) if pivot is None else pivot
    plan = make_plan(stream.child("plan"), L, s.T, d)
    ctx0 = initial_context(prompt, old_params.dims)

    # shared prefix: chunks 1..p-1 from the base plan
    h = ctx0.h[None]
    if p > 1:
        pre_chunks, _, _, pre_ctx = rollout_rows(old_params, h, plan.init_noises[None, : p - 1], plan.solver_noises[None, : p - 1], s)
        h = encode(old_params.weights, pre_ctx[:, -1], pre_chunks[:, -1])
    else:
        pre_chunks = np.zeros((1, 0, d))
    context = ContextCache(h[0].copy(), p - 1)

    hood = perturb(plan.init_noises[p - 1], c.sigma, c.group_size, stream.child("neighbors"))
    branches = fork(plan, p, hood)
    G = c.group_size
    init = np.stack([bp.init_noises[p - 1 :] for bp in branches.plans])
    solver = np.stack([bp.solver_noises[p - 1 :] for bp in branches.plans])
    chunks, inputs, preds, _ = rollout_rows(old_params, np.repeat(h, G, axis=0), init, solver, s)
    seqs = np.concatenate([np.repeat(pre_chunks, G, axis=0), chunks], axis=1)

    rewards = np.array(
        [eval_reward(seqs[i], prompt, cfg.reward, stream.child("reward", str(i)), length=L) for i in range(G)]
    )
    adv = group_advantages(rewards, c.degenerate_std_threshold)
    entry = ReplayEntry(
        pivot=p,
        context=context,
        base_noise=hood.base.copy(),
        member_noises=hood.members.copy(),
        inputs=inputs[:, 0].copy(),
        preds=preds[:, 0].copy(),
        clean=chunks[:, 0].copy(),
        rewards=rewards,
        prompt=prompt,
        provenance=(stream.root_seed, stream.path),
        sampler=s,
        sequences=seqs,
    )
    record = IterationRecord(
        iteration=-1,
        pivot=p,
        prompt_seed=prompt.prompt_seed,
        rewards=[float(r) for r in rewards],
        advantages=[float(a) for a in adv],
        wall_time=time.perf_counter() - t0,
    )
    return entry, record


def calibrate_tau(params: ModelParams, prompts: Sequence[PromptSpec], cfg: ArcopoConfig, stream: RngStream, n: int = 8) -> float:
    """Temperature from ``n`` calibration groups (configured value wins)."""
    configured = cfg.copo.tau0 if cfg.sampler.kind == "consistency" else cfg.copo.tau
    if configured is not None:
        return configured
    entries = [arcopo_iteration(params, params, _cycle(prompts, j), cfg, stream.child(str(j)))[0] for j in range(max(n, 1))]
    return resolve_tau(entries, cfg.copo)


class TrainingAborted(NumericFailure):
    def __init__(self, message: str, curve: list):
        super().__init__(message)
        self.curve = curve


def _cycle(prompts: Sequence[PromptSpec], i: int) -> PromptSpec:
    if not prompts:
        raise InvalidArgument("empty prompt set")
    return prompts[i % len(prompts)]


def train_on_policy(
    init_params,
    prompts: Sequence[PromptSpec],
    reward_spec: RewardSpec,
    cfg: ArcopoConfig,
    iters: int,
    root_seed: int,
    label: str = "on_policy",
    tau_calibration: int = 8,
):
    """Fresh rollouts from the evolving policy each iteration, then ``copo_update``.

    ``init_params`` is a :class:`ModelParams` or an adapted model.  The
    temperature, when not configured, is fixed before the first update from
    ``tau_calibration`` groups rolled out by the initial policy.
    """
    if iters < 0:
        raise InvalidArgument("iters must be >= 0")
    cfg = replace(cfg, reward=reward_spec)
    params = init_params
    opt = Optimizer(cfg.copo.optimizer, cfg.copo.learning_rate)
    copo_cfg = cfg.copo
    curve: list[IterationRecord] = []
    root = RngStream(root_seed, (label,))
    if iters:
        tau = calibrate_tau(params.effective(), prompts, cfg, root.child("tau"), tau_calibration)
        copo_cfg = with_tau(copo_cfg, tau, cfg.sampler.kind)
    for i in range(iters):
        t0 = time.perf_counter()
        current = params.effective()
        entry, rec = arcopo_iteration(current, current, _cycle(prompts, i), cfg, root.child(f"iter.{i}"))
        rec.iteration = i
        try:
            params, stats = copo_update(params, entry, current, copo_cfg, optimizer=opt)
        except NumericFailure as exc:
            rec.error = str(exc)
            curve.append(rec)
            raise TrainingAborted(f"iteration {i}: {exc}", curve) from exc
        rec.objective, rec.ratio_mean, rec.ratio_max, rec.clip_frac = (
            stats.objective,
            stats.ratio_mean,
            stats.ratio_max,
            stats.clip_frac,
        )
        rec.wall_time = time.perf_counter() - t0
        curve.append(rec)
    return params, curve


def train_sde(
    init_params,
    prompts: Sequence[PromptSpec],
    reward_spec: RewardSpec,
    cfg: ArcopoConfig,
    iters: int,
    root_seed: int,
    label: str = "sde",
):
    """SDE-GRPO baseline loop: frozen initial noise, solver noises as actions."""
    params = init_params
    opt = Optimizer(cfg.copo.optimizer, cfg.copo.learning_rate)
    curve: list[IterationRecord] = []
    root = RngStream(root_seed, (label,))
    for i in range(iters):
        t0 = time.perf_counter()
        prompt = _cycle(prompts, i)
        stream = root.child(f"iter.{i}")
        plan = make_plan(stream.child("plan"), cfg.L, cfg.sampler.T, params.effective().dims.chunk_dim)
        h0 = initial_context(prompt, params.effective().dims).h

        def reward_fn(x, j, prompt=prompt, stream=stream):
            return eval_reward(x, prompt, reward_spec, stream.child("reward", str(j)), length=cfg.L)

        try:
            params, stats, group = sde_grpo_update(params, plan, reward_fn, cfg.copo, cfg.sampler, h0, stream.child("sde"), optimizer=opt)
        except NumericFailure as exc:
            curve.append(IterationRecord(i, 0, prompt.prompt_seed, [], [], error=str(exc)))
            raise TrainingAborted(f"iteration {i}: {exc}", curve) from exc
        adv = group_advantages(group.rewards, cfg.copo.degenerate_std_threshold)
        curve.append(
            IterationRecord(
                iteration=i,
                pivot=0,
                prompt_seed=prompt.prompt_seed,
                rewards=[float(r) for r in group.rewards],
                advantages=[float(a) for a in adv],
                objective=stats.objective,
                ratio_mean=stats.ratio_mean,
                ratio_max=stats.ratio_max,
                clip_frac=stats.clip_frac,
                wall_time=time.perf_counter() - t0,
            )
        )
    return params, curve


def evaluate_policy(
    params: ModelParams,
    prompts: Sequence[PromptSpec],
    reward_spec: RewardSpec,
    cfg: ArcopoConfig,
    seed: int,
    plans_per_prompt: int = 4,
) -> float:
    """Mean reward over fixed evaluation plans; identical plans for every model."""
    vals = [
        eval_reward(x, prompt, reward_spec, RngStream(seed, ("eval-reward", str(prompt.prompt_seed), str(j % plans_per_prompt))))
        for j, (prompt, x) in enumerate(sample_sequences(params, prompts, cfg, seed, plans_per_prompt))
    ]
    return float(np.mean(vals))


def evaluate_metrics(
    params: ModelParams,
    prompts: Sequence[PromptSpec],
    specs: dict,
    cfg: ArcopoConfig,
    seed: int,
    plans_per_prompt: int = 4,
) -> dict:
    """Like :func:`evaluate_policy` for several reward specs over one set of samples."""
    vals = {name: [] for name in specs}
    for j, (prompt, x) in enumerate(sample_sequences(params, prompts, cfg, seed, plans_per_prompt)):
        for name, spec in specs.items():
            stream = RngStream(seed, ("eval-reward", str(prompt.prompt_seed), str(j % plans_per_prompt)))
            vals[name].append(eval_reward(x, prompt, spec, stream))
    return {name: float(np.mean(v)) for name, v in vals.items()}


def sample_sequences(params: ModelParams, prompts: Sequence[PromptSpec], cfg: ArcopoConfig, seed: int, plans_per_prompt: int = 4):
    """Yield ``(prompt, chunks)`` for the same fixed plans used by ``evaluate_policy``."""
    for prompt in prompts:
        ctx0 = initial_context(prompt, params.dims)
        plans = [make_plan(RngStream(seed, ("eval", str(prompt.prompt_seed), str(j))), cfg.L, cfg.sampler.T, params.dims.chunk_dim) for j in range(plans_per_prompt)]
        init = np.stack([p.init_noises for p in plans])
        solver = np.stack([p.solver_noises for p in plans])
        chunks, _, _, _ = rollout_rows(params, np.repeat(ctx0.h[None], len(plans), axis=0), init, solver, cfg.sampler)
        for j in range(len(plans)):
            yield prompt, chunks[j]


# --------------------------------------------------------------------------
# curve export


def curves_jsonl(curve: Sequence[IterationRecord], header: dict | None = None, include_time: bool = False) -> str:
    lines = [json.dumps(header, sort_keys=True)] if header else []
    lines += [json.dumps(r.to_record(include_time), sort_keys=True) for r in curve]
    return "".join(line + "\n" for line in lines)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def curves_csv(curve: Sequence[IterationRecord], header: dict | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write("# " + " ".join(f"{k}={v}" for k, v in sorted(header.items())) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in curve:
        w.writerow([r.iteration, r.pivot, _fmt(r.reward_mean), _fmt(r.reward_std), _fmt(r.objective), _fmt(r.clip_frac)])
    return buf.getvalue()


def window_mean(curve: Sequence[IterationRecord], start: int, stop: int) -> float | None:
    """Mean group reward over ``curve[start:stop]``; None for an empty window."""
    window = [r.reward_mean for r in curve[start:stop]]
    return float(np.mean(window)) if window else None


def linear_trend(values: Sequence[float]) -> float:
    y = np.asarray(values, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    return float(np.polyfit(x, y, 1)[0]) if len(y) > 1 else 0.0
