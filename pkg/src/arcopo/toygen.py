"""Toy chunk-wise autoregressive few-step generator.

A 2-hidden-layer tanh MLP ``F(x_t, h, t) -> x0_hat`` predicts the clean chunk
from a noisy chunk, a context vector and the raw timestep.  A one-layer tanh
encoder folds each finished chunk into the context, standing in for a KV cache.

Two samplers share the network:

* ``consistency``: predict, then re-noise at the next level,
  ``x_{k+1} = x0_hat + t_{k+1} * zeta_k``.  The re-noise scale shrinks with
  ``t`` which makes the output depend mostly on the initial chunk noise.  The
  schedule is a construction for this toy, not taken from any released model.
* ``flow_ode``: deterministic Euler steps along ``v = (x_t - x0_hat) / t``,
  the last step landing on ``t = 0``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from . import numerics as nx
from .errors import InvalidArgument, NumericFailure
from .numerics import RngStream, gaussian, integers
from .rewards import PromptSpec

if TYPE_CHECKING:
    from .neighborhood import NoisePlan

WEIGHT_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "We", "be")
CKPT_MAGIC = b"ARCOPO-CKPT-1\n"


@dataclass(frozen=True)
class ModelDims:
    chunk_dim: int = 8
    context_dim: int = 16
    hidden: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if self.context_dim < self.chunk_dim:
            raise InvalidArgument("context_dim must be >= chunk_dim (the prompt is packed into the context)")

    @property
    def input_dim(self) -> int:
        return self.chunk_dim + self.context_dim + 1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h1, h2 = self.hidden
        c, k = self.chunk_dim, self.context_dim
        return {
            "W1": (h1, self.input_dim),
            "b1": (h1,),
            "W2": (h2, h1),
            "b2": (h2,),
            "W3": (c, h2),
            "b3": (c,),
            "We": (k, k + c),
            "be": (k,),
        }


@dataclass(frozen=True, eq=False)
class ModelParams:
    dims: ModelDims
    weights: dict[str, np.ndarray]

    def __post_init__(self):
        for name, shape in self.dims.shapes().items():
            w = self.weights.get(name)
            if w is None or w.shape != shape:
                raise InvalidArgument(f"weight {name} should have shape {shape}")
            if not np.all(np.isfinite(w)):
                raise NumericFailure(f"weight {name} is not finite")

    @classmethod
    def zeros(cls, dims: ModelDims = ModelDims()) -> "ModelParams":
        return cls(dims, {k: np.zeros(s) for k, s in dims.shapes().items()})

    @classmethod
    def init(cls, stream: RngStream, dims: ModelDims = ModelDims(), out_scale: float = 0.1) -> "ModelParams":
        weights = {}
        for name, shape in dims.shapes().items():
            if name.startswith("b"):
                weights[name] = np.zeros(shape)
                continue
            z, _ = gaussian(stream.child(name), int(np.prod(shape)))
            w = z.reshape(shape) / np.sqrt(shape[1])
            weights[name] = w * out_scale if name == "W3" else w
        return cls(dims, weights)

    def num_params(self) -> int:
        return sum(w.size for w in self.weights.values())

    def replace(self, **updates: np.ndarray) -> "ModelParams":
        return ModelParams(self.dims, {**self.weights, **updates})

    # the trainer protocol shared with adapted models
    def trainable(self) -> dict[str, np.ndarray]:
        return dict(self.weights)

    def materialize(self, leaves):
        return leaves

    def with_trainable(self, leaves: dict[str, np.ndarray]) -> "ModelParams":
        return self.replace(**leaves)

    def effective(self) -> "ModelParams":
        return self

    def equal(self, other: "ModelParams") -> bool:
        return self.dims == other.dims and all(np.array_equal(self.weights[k], other.weights[k]) for k in WEIGHT_NAMES)


@dataclass(frozen=True, eq=False)
class ContextCache:
    h: np.ndarray
    chunk_index: int = 0


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "consistency"
    timesteps: tuple[float, ...] = (1.0, 0.6, 0.3)

    def __post_init__(self):
        if self.kind not in ("consistency", "flow_ode"):
            raise InvalidArgument(f"unknown sampler kind {self.kind!r}")
        ts = self.timesteps
        if len(ts) < 1 or any(t <= 0 for t in ts) or any(a <= b for a, b in zip(ts, ts[1:])):
            raise InvalidArgument("timesteps must be positive and strictly decreasing")

    @property
    def T(self) -> int:
        return len(self.timesteps)

    @property
    def n_solver_noises(self) -> int:
        return self.T - 1 if self.kind == "consistency" else 0


@dataclass(frozen=True, eq=False)
class ChunkTrajectory:
    """Per-step inputs ``x_{t_k}`` and predictions ``x0_hat`` of one chunk."""

    times: np.ndarray  # (T,)
    inputs: np.ndarray  # (T, chunk_dim)
    preds: np.ndarray  # (T, chunk_dim)
    clean: np.ndarray  # (chunk_dim,)

    @property
    def T(self) -> int:
        return len(self.times)


@dataclass(frozen=True, eq=False)
class SequenceLatents:
    chunks: np.ndarray  # (L, chunk_dim)
    trajectories: list[ChunkTrajectory] = field(default_factory=list)
    contexts: list[ContextCache] = field(default_factory=list)  # context before each chunk


# --------------------------------------------------------------------------
# network


def denoise(w, x, h, t):
    """Batched forward pass on arrays or tape variables.

    ``x``: (B, chunk_dim), ``h``: (B, context_dim), ``t``: (B, 1).
    """
    inp = nx.concat([x, h, t], axis=1)
    a1 = nx.tanh(inp @ w["W1"].T + w["b1"])
    a2 = nx.tanh(a1 @ w["W2"].T + w["b2"])
    return a2 @ w["W3"].T + w["b3"]


def encode(w, h, chunk):
    """Context update ``tanh(We [h; chunk] + be)``, batched like ``denoise``."""
    return nx.tanh(nx.concat([h, chunk], axis=1) @ w["We"].T + w["be"])


def _rows(x, width: int, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != width:
        raise InvalidArgument(f"{name} should have trailing dimension {width}, got shape {np.shape(x)}")
    return a


def _time_column(t, batch: int) -> np.ndarray:
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (batch, 1))
    if np.any(tt <= 0):
        raise InvalidArgument("timestep must be positive")
    return np.ascontiguousarray(tt)


def predict_x0(params: ModelParams, x_t, ctx: ContextCache, t) -> np.ndarray:
    d = params.dims
    single = np.ndim(x_t) == 1
    x = _rows(x_t, d.chunk_dim, "x_t")
    h = _rows(ctx.h, d.context_dim, "context")
    if h.shape[0] == 1 and x.shape[0] > 1:
        h = np.broadcast_to(h, (x.shape[0], d.context_dim))
    if h.shape[0] != x.shape[0]:
        raise InvalidArgument("batch mismatch between x_t and context")
    out = denoise(params.weights, x, h, _time_column(t, x.shape[0]))
    return out[0] if single else out


def extend_context(ctx: ContextCache, clean_chunk, params: ModelParams) -> ContextCache:
    d = params.dims
    h = _rows(ctx.h, d.context_dim, "context")
    c = _rows(clean_chunk, d.chunk_dim, "chunk")
    out = encode(params.weights, h, c)
    return ContextCache(out[0] if np.ndim(ctx.h) == 1 and np.ndim(clean_chunk) == 1 else out, ctx.chunk_index + 1)


def initial_context(prompt: PromptSpec, dims: ModelDims) -> ContextCache:
    h = np.zeros(dims.context_dim)
    h[: dims.chunk_dim] = prompt.target
    return ContextCache(h, 0)


# --------------------------------------------------------------------------
# samplers


def _sample_rows(weights, h, init, solver, cfg: SamplerConfig):
    """Run one chunk for a batch of rows; returns inputs, preds (B, T, d) and clean (B, d)."""
    B, d = init.shape
    ts = cfg.timesteps
    inputs = np.empty((B, cfg.T, d))
    preds = np.empty((B, cfg.T, d))
    x = init
    for k, t in enumerate(ts):
        inputs[:, k] = x
        x0 = denoise(weights, x, h, np.full((B, 1), t))
        preds[:, k] = x0
        if k + 1 < cfg.T:
            t_next = ts[k + 1]
            if cfg.kind == "consistency":
                x = x0 + t_next * solver[:, k]
            else:
                x = x + (t_next - t) * (x - x0) / t
    # the last flow step integrates to t=0, which lands exactly on x0_hat
    return inputs, preds, preds[:, -1].copy()


def _check_solver(solver_noises, cfg: SamplerConfig, d: int) -> np.ndarray:
    if cfg.kind == "flow_ode":
        return np.zeros((cfg.T - 1, d))
    s = np.asarray(solver_noises, dtype=np.float64).reshape(-1, d) if len(solver_noises) else np.zeros((0, d))
    if s.shape[0] != cfg.T - 1:
        raise InvalidArgument(f"consistency sampler needs {cfg.T - 1} solver noises, got {s.shape[0]}")
    return s


def sample_chunk(
    params: ModelParams,
    ctx: ContextCache,
    init_noise,
    solver_noises: Sequence,
    cfg: SamplerConfig,
) -> ChunkTrajectory:
    d = params.dims.chunk_dim
    init = _rows(init_noise, d, "init_noise")
    solver = _check_solver(solver_noises, cfg, d)
    h = _rows(ctx.h, params.dims.context_dim, "context")
    inputs, preds, clean = _sample_rows(params.weights, h, init, solver[None], cfg)
    return ChunkTrajectory(np.array(cfg.timesteps), inputs[0], preds[0], clean[0])


def rollout_rows(
    params: ModelParams,
    h0: np.ndarray,
    init_noises: np.ndarray,
    solver_noises: np.ndarray,
    cfg: SamplerConfig,
):
    """Batched autoregressive rollout.

    ``h0``: (B, context_dim); ``init_noises``: (B, L, d); ``solver_noises``:
    (B, L, T-1, d).  Returns chunks (B, L, d), inputs and preds (B, L, T, d) and
    the contexts seen by each chunk (B, L, context_dim).
    """
    B, L, d = init_noises.shape
    h = h0
    chunks = np.empty((B, L, d))
    inputs = np.empty((B, L, cfg.T, d))
    preds = np.empty((B, L, cfg.T, d))
    ctxs = np.empty((B, L, h0.shape[1]))
    for q in range(L):
        ctxs[:, q] = h
        solver = solver_noises[:, q] if cfg.kind == "consistency" else None
        inputs[:, q], preds[:, q], chunks[:, q] = _sample_rows(params.weights, h, init_noises[:, q], solver, cfg)
        if q + 1 < L:
            h = encode(params.weights, h, chunks[:, q])
    return chunks, inputs, preds, ctxs


def _plan_arrays(plan: "NoisePlan", cfg: SamplerConfig, L: int, d: int):
    init = np.asarray(plan.init_noises, dtype=np.float64)
    solver = np.asarray(plan.solver_noises, dtype=np.float64)
    if init.shape != (L, d):
        raise InvalidArgument(f"plan has init noises of shape {init.shape}, expected {(L, d)}")
    if cfg.kind == "consistency" and solver.shape != (L, cfg.T - 1, d):
        raise InvalidArgument(f"plan has solver noises of shape {solver.shape}, expected {(L, cfg.T - 1, d)}")
    if cfg.kind == "flow_ode":
        solver = np.zeros((L, max(cfg.T - 1, 0), d))
    return init, solver


def rollout_sequence(
    params: ModelParams,
    prompt: PromptSpec,
    plan: "NoisePlan",
    cfg: SamplerConfig,
    L: int,
) -> SequenceLatents:
    d = params.dims
    init, solver = _plan_arrays(plan, cfg, L, d.chunk_dim)
    ctx0 = initial_context(prompt, d)
    chunks, inputs, preds, ctxs = rollout_rows(params, ctx0.h[None], init[None], solver[None], cfg)
    times = np.array(cfg.timesteps)
    trajs = [ChunkTrajectory(times, inputs[0, q], preds[0, q], chunks[0, q]) for q in range(L)]
    contexts = [ContextCache(ctxs[0, q], q) for q in range(L)]
    return SequenceLatents(chunks[0], trajs, contexts)


# --------------------------------------------------------------------------
# reference pretraining


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    batch: int = 64
    L: int = 6
    lr: float = 3e-3
    ar_coef: float = 0.7
    mode_scale: float = 2.5
    innovation_std: float = 0.15
    first_innovation_std: float = 0.5
    target_norm: float = 2.0


def _adam(params: dict, grads: dict, state: dict, lr: float, step: int, b1=0.9, b2=0.999, eps=1e-8) -> dict:
    out = {}
    for k, g in grads.items():
        m, v = state.get(k, (np.zeros_like(g), np.zeros_like(g)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state[k] = (m, v)
        mh = m / (1 - b1**step)
        vh = v / (1 - b2**step)
        out[k] = params[k] - lr * mh / (np.sqrt(vh) + eps)
    return out


def mode_direction(dims: ModelDims) -> np.ndarray:
    z, _ = gaussian(RngStream(0, ("modes",)), dims.chunk_dim)
    return z / np.linalg.norm(z)


def innovation_from_noise(eps: np.ndarray, m: np.ndarray, mode_scale: float, std) -> np.ndarray:
    """Measure-preserving map from ``N(0, I)`` noise to the two-mode innovation.

    The sign of the noise along ``m`` picks the mode; its magnitude is mapped
    from a half-normal back to a full normal, so the result is exactly an equal
    mixture of ``N(+-mode_scale * m, std^2 I)``.
    """
    e_m = eps @ m
    sign = np.where(e_m >= 0.0, 1.0, -1.0)
    z_m = ndtri(np.clip(2.0 * ndtr(np.abs(e_m)) - 1.0, 1e-300, 1.0 - 2**-53))
    perp = eps - e_m[..., None] * m
    return sign[..., None] * mode_scale * m + std[..., None] * (perp + z_m[..., None] * m)


def sample_data(stream: RngStream, dims: ModelDims, pcfg: PretrainConfig, n: int):
    """Draw ``n`` sequences of the synthetic target process with their chunk noises.

    ``x_0`` is the prompt target and ``x_p = a * x_{p-1} + u_p`` where ``u_p`` is
    a two-Gaussian mixture coupled to the chunk noise ``eps_p``.  The first chunk,
    which only sees the prompt, has a wider spread within its mode.
    Returns targets (n, d), noises (n, L, d) and chunks (n, L, d).
    """
    d, L = dims.chunk_dim, pcfg.L
    z, _ = gaussian(stream.child("targets"), n * d)
    targets = z.reshape(n, d)
    targets *= pcfg.target_norm / np.linalg.norm(targets, axis=1, keepdims=True)
    z, _ = gaussian(stream.child("noise"), n * L * d)
    noise = z.reshape(n, L, d)
    std = np.full((n, L), pcfg.innovation_std)
    std[:, 0] = pcfg.first_innovation_std
    innov = innovation_from_noise(noise, mode_direction(dims), pcfg.mode_scale, std)
    chunks = np.empty((n, L, d))
    prev = targets
    for q in range(L):
        prev = pcfg.ar_coef * prev + innov[:, q]
        chunks[:, q] = prev
    return targets, noise, chunks


def _pretrain_batch(stream: RngStream, dims: ModelDims, pcfg: PretrainConfig, times: tuple[float, ...]):
    targets, noise, chunks = sample_data(stream, dims, pcfg, pcfg.batch)
    n, L, d = chunks.shape
    k_idx, _ = integers(stream.child("t"), n * L, len(times))
    t = np.asarray(times)[k_idx].reshape(n, L, 1)
    eps, _ = gaussian(stream.child("eps"), n * L * d)
    eps = eps.reshape(n, L, d)
    # first step: the sampler feeds the raw chunk noise, which the data map couples
    # to the clean chunk; later steps denoise x0 + t * eps
    noisy = np.where(k_idx.reshape(n, L, 1) == 0, noise, chunks + t * eps)
    h0 = np.zeros((n, dims.context_dim))
    h0[:, :d] = targets
    return h0, chunks, noisy, t


def denoising_loss(w, h0, chunks, noisy, t):
    n, L, d = chunks.shape
    h = h0
    total = 0.0
    for q in range(L):
        pred = denoise(w, noisy[:, q], h, t[:, q])
        diff = pred - chunks[:, q]
        total = total + (diff * diff).sum() * (1.0 / (n * L * d))
        if q + 1 < L:
            h = encode(w, h, chunks[:, q])
    return total


def pretrain_reference(
    data_seed: int,
    steps: int,
    dims: ModelDims = ModelDims(),
    pcfg: PretrainConfig = PretrainConfig(),
    sampler: SamplerConfig = SamplerConfig(),
    init_seed: int | None = None,
) -> tuple[ModelParams, list[float]]:
    """Regress ``F`` onto clean chunks of the synthetic process.

    Returns the parameters and the per-step training loss.  ``steps=0`` returns
    the initialisation unchanged.
    """
    if steps < 0:
        raise InvalidArgument("steps must be >= 0")
    root = RngStream(data_seed, ("pretrain",))
    params = ModelParams.init(RngStream(data_seed if init_seed is None else init_seed, ("init",)), dims)
    w = params.trainable()
    state: dict = {}
    curve = []
    for step in range(1, steps + 1):
        batch = _pretrain_batch(root.child(f"step.{step}"), dims, pcfg, sampler.timesteps)
        loss_fn = lambda p: denoising_loss(p, *batch)  # noqa: E731
        g = nx.grad(loss_fn, w)
        loss = float(denoising_loss(w, *batch))
        if not np.isfinite(loss):
            raise NumericFailure(f"pretraining diverged at step {step}")
        curve.append(loss)
        w = _adam(w, g, state, pcfg.lr, step)
    return ModelParams(dims, w), curve


def eval_denoising_mse(params: ModelParams, seed: int, pcfg: PretrainConfig = PretrainConfig(), sampler: SamplerConfig = SamplerConfig(), batches: int = 4) -> float:
    vals = []
    for b in range(batches):
        batch = _pretrain_batch(RngStream(seed, ("eval-mse", str(b))), params.dims, pcfg, sampler.timesteps)
        vals.append(float(denoising_loss(params.weights, *batch)))
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# checkpoints


def params_to_bytes(params: ModelParams, meta: str = "") -> bytes:
    d = params.dims
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<4q", d.chunk_dim, d.context_dim, d.hidden[0], d.hidden[1]))
    m = meta.encode("utf-8")
    buf.write(struct.pack("<q", len(m)))
    buf.write(m)
    for name in WEIGHT_NAMES:
        buf.write(np.ascontiguousarray(params.weights[name], dtype="<f8").tobytes(order="C"))
    return buf.getvalue()


def params_from_bytes(raw: bytes, expect: ModelDims | None = None) -> tuple[ModelParams, str]:
    if not raw.startswith(CKPT_MAGIC):
        raise InvalidArgument("not an ARCOPO-CKPT-1 checkpoint")
    off = len(CKPT_MAGIC)
    c, k, h1, h2 = struct.unpack_from("<4q", raw, off)
    off += 32
    dims = ModelDims(c, k, (h1, h2))
    if expect is not None and dims != expect:
        raise InvalidArgument(f"checkpoint dimensions {dims} do not match expected {expect}")
    (mlen,) = struct.unpack_from("<q", raw, off)
    off += 8
    meta = raw[off : off + mlen].decode("utf-8")
    off += mlen
    weights = {}
    for name, shape in dims.shapes().items():
        n = int(np.prod(shape))
        weights[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise InvalidArgument("trailing bytes in checkpoint")
    return ModelParams(dims, weights), meta


def save_params(path, params: ModelParams, meta: str = "") -> None:
    with open(path, "wb") as f:
        f.write(params_to_bytes(params, meta))


def load_params(path, expect: ModelDims | None = None) -> ModelParams:
    with open(path, "rb") as f:
        return params_from_bytes(f.read(), expect)[0]
