"""Frozen reference-rollout buffer and the semi-on-policy trainer.

Training here never draws rollout noise.  The only randomness is which buffer
entry each step consumes, so staleness is controlled by the ratio clip alone
(or not at all, in the off-policy ablation).
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .copo import Optimizer, copo_update, group_advantages, resolve_tau, with_tau
from .errors import InvalidArgument, NotFound, NumericFailure
from .numerics import RngStream, integers
from .rewards import PromptSpec
from .rollout import (
    ArcopoConfig,
    IterationRecord,
    ReplayEntry,
    TrainingAborted,
    _cycle,
    arcopo_iteration,
)
from .toygen import ContextCache, ModelParams, SamplerConfig, params_to_bytes

BUF_MAGIC = b"ARCOPO-BUF-1\n"
DEFAULT_CAPACITY = 100


def checkpoint_id(params: ModelParams) -> str:
    """Short content hash of the serialized weights."""
    return hashlib.sha256(params_to_bytes(params)).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class ReplayBuffer:
    entries: tuple[ReplayEntry, ...]
    checkpoint_id: str

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def equal(self, other: "ReplayBuffer") -> bool:
        return (
            self.checkpoint_id == other.checkpoint_id
            and len(self) == len(other)
            and all(a.equal(b) for a, b in zip(self.entries, other.entries))
        )


def collect_buffer(
    ref_params: ModelParams,
    prompts: Sequence[PromptSpec],
    cfg: ArcopoConfig,
    n_groups: int = DEFAULT_CAPACITY,
    root_seed: int = 0,
    label: str = "buffer",
) -> ReplayBuffer:
    """``n_groups`` forked groups rolled out by the reference policy.

    Group ``j`` uses stream ``(root_seed, (label, "group.j"))`` and prompt
    ``j mod len(prompts)``.
    """
    if n_groups < 1:
        raise InvalidArgument("n_groups must be >= 1")
    root = RngStream(root_seed, (label,))
    entries = []
    for j in range(n_groups):
        entry, _ = arcopo_iteration(ref_params, ref_params, _cycle(prompts, j), cfg, root.child(f"group.{j}"))
        entries.append(entry)
    return ReplayBuffer(tuple(entries), checkpoint_id(ref_params))


def buffer_tau(buffer: ReplayBuffer, cfg: ArcopoConfig, n: int = 8) -> float:
    configured = cfg.copo.tau0 if cfg.sampler.kind == "consistency" else cfg.copo.tau
    if configured is not None:
        return configured
    return resolve_tau(list(buffer.entries[: max(n, 1)]), cfg.copo)


def train_semi(
    init_params,
    buffer: ReplayBuffer,
    cfg: ArcopoConfig,
    steps: int,
    clip_enabled: bool = True,
    root_seed: int = 0,
    label: str = "semi",
    ref_params: ModelParams | None = None,
    tau_calibration: int = 8,
):
    """Optimize the contrastive objective over buffer entries, one entry per step.

    The old policy is always the buffer's reference model; by default that is
    ``init_params.effective()``, which must hash to the buffer's checkpoint id.
    ``clip_enabled=False`` keeps the ratios but drops the clip.
    """
    if len(buffer) == 0:
        raise InvalidArgument("empty replay buffer")
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    ref = init_params.effective() if ref_params is None else ref_params
    if checkpoint_id(ref) != buffer.checkpoint_id:
        raise InvalidArgument("reference parameters do not match the buffer's checkpoint id")
    copo_cfg = replace(cfg.copo, clip_enabled=clip_enabled)
    copo_cfg = with_tau(copo_cfg, buffer_tau(buffer, cfg, tau_calibration), cfg.sampler.kind)
    opt = Optimizer(copo_cfg.optimizer, copo_cfg.learning_rate)
    picks, _ = integers(RngStream(root_seed, (label, "batch")), steps, len(buffer))
    params = init_params
    curve: list[IterationRecord] = []
    for i, j in enumerate(picks):
        t0 = time.perf_counter()
        entry = buffer.entries[int(j)]
        adv = group_advantages(entry.rewards, copo_cfg.degenerate_std_threshold)
        rec = IterationRecord(i, entry.pivot, entry.prompt.prompt_seed, [float(r) for r in entry.rewards], [float(a) for a in adv])
        try:
            params, stats = copo_update(params, entry, ref, copo_cfg, optimizer=opt)
        except NumericFailure as exc:
            rec.error = str(exc)
            curve.append(rec)
            raise TrainingAborted(f"step {i}: {exc}", curve) from exc
        rec.objective, rec.ratio_mean, rec.ratio_max, rec.clip_frac = (
            stats.objective,
            stats.ratio_mean,
            stats.ratio_max,
            stats.clip_frac,
        )
        rec.wall_time = time.perf_counter() - t0
        curve.append(rec)
    return params, curve


def displacement(params: ModelParams, ref: ModelParams) -> float:
    """L2 norm of the flattened weight difference."""
    return float(np.sqrt(sum(float(np.sum((params.weights[k] - ref.weights[k]) ** 2)) for k in ref.weights)))


# --------------------------------------------------------------------------
# persistence


def _arr(buf: io.BytesIO, a: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C"))


def buffer_to_bytes(buffer: ReplayBuffer, header: dict | None = None) -> bytes:
    out = io.BytesIO()
    out.write(BUF_MAGIC)
    heads = []
    for e in buffer.entries:
        heads.append(
            {
                "pivot": e.pivot,
                "chunk_index": e.context.chunk_index,
                "prompt_seed": e.prompt.prompt_seed,
                "provenance": [e.provenance[0], e.provenance[1]],
                "sampler": [e.sampler.kind, list(e.sampler.timesteps)],
                "G": e.G,
                "T": e.inputs.shape[1],
                "d": e.inputs.shape[2],
                "ctx": e.context.h.shape[-1],
                "L": None if e.sequences is None else e.sequences.shape[1],
            }
        )
    meta = json.dumps({"checkpoint_id": buffer.checkpoint_id, "entries": heads, "header": header or {}}, sort_keys=True).encode("utf-8")
    out.write(struct.pack("<q", len(meta)))
    out.write(meta)
    for e in buffer.entries:
        for a in (e.prompt.target, e.context.h, e.base_noise, e.member_noises, e.inputs, e.preds, e.clean, e.rewards):
            _arr(out, a)
        if e.sequences is not None:
            _arr(out, e.sequences)
    return out.getvalue()


def buffer_from_bytes(raw: bytes, expect_checkpoint: str | None = None) -> ReplayBuffer:
    if not raw.startswith(BUF_MAGIC):
        raise InvalidArgument("not an ARCOPO-BUF-1 buffer")
    off = len(BUF_MAGIC)
    (mlen,) = struct.unpack_from("<q", raw, off)
    off += 8
    meta = json.loads(raw[off : off + mlen].decode("utf-8"))
    off += mlen
    if expect_checkpoint is not None and meta["checkpoint_id"] != expect_checkpoint:
        raise InvalidArgument(f"buffer was collected by checkpoint {meta['checkpoint_id']}, expected {expect_checkpoint}")

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
        return a

    entries = []
    for h in meta["entries"]:
        G, T, d = h["G"], h["T"], h["d"]
        target = take((d,))
        ctx = take((h["ctx"],))
        base = take((d,))
        members = take((G, d))
        inputs = take((G, T, d))
        preds = take((G, T, d))
        clean = take((G, d))
        rewards = take((G,))
        seqs = take((G, h["L"], d)) if h["L"] is not None else None
        entries.append(
            ReplayEntry(
                pivot=h["pivot"],
                context=ContextCache(ctx, h["chunk_index"]),
                base_noise=base,
                member_noises=members,
                inputs=inputs,
                preds=preds,
                clean=clean,
                rewards=rewards,
                prompt=PromptSpec(h["prompt_seed"], target),
                provenance=(h["provenance"][0], h["provenance"][1]),
                sampler=SamplerConfig(h["sampler"][0], tuple(h["sampler"][1])),
                sequences=seqs,
            )
        )
    if off != len(raw):
        raise InvalidArgument("trailing bytes in buffer file")
    return ReplayBuffer(tuple(entries), meta["checkpoint_id"])


def save_buffer(path, buffer: ReplayBuffer, header: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(buffer_to_bytes(buffer, header))


def load_buffer(path, expect_checkpoint: str | None = None) -> ReplayBuffer:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError as exc:
        raise NotFound(f"no buffer at {path}") from exc
    return buffer_from_bytes(raw, expect_checkpoint)
