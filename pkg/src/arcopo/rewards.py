"""Synthetic sequence-level rewards.

Every reward is ``<= 0`` with its maximum at a known configuration, so reward
curves have a ceiling and the non-optimised kinds can be used as monitors for
reward hacking while another kind is trained.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .numerics import RngStream, gaussian

KINDS = ("align", "motion", "quality", "composite", "random")


@dataclass(frozen=True, eq=False)
class PromptSpec:
    prompt_seed: int
    target: np.ndarray

    @classmethod
    def from_seed(cls, prompt_seed: int, chunk_dim: int = 8, target_norm: float = 2.0) -> "PromptSpec":
        z, _ = gaussian(RngStream(prompt_seed, ("prompt",)), chunk_dim)
        return cls(prompt_seed, z * (target_norm / np.linalg.norm(z)))


def prompt_set(first_seed: int, n: int, chunk_dim: int = 8, target_norm: float = 2.0) -> list[PromptSpec]:
    return [PromptSpec.from_seed(first_seed + i, chunk_dim, target_norm) for i in range(n)]


@dataclass(frozen=True)
class RewardSpec:
    kind: str = "align"
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # align, motion, quality
    step_target: float = 1.0
    norm_target: float = 1.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown reward kind {self.kind!r}")
        if not all(np.isfinite(w) for w in self.weights):
            raise InvalidArgument("composite weights must be finite")


def _chunks(seq) -> np.ndarray:
    x = np.asarray(getattr(seq, "chunks", seq), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidArgument("reward needs an (L, chunk_dim) sequence")
    return x


def align_reward(x: np.ndarray, target: np.ndarray) -> float:
    d = x.mean(axis=0) - target
    return -float(d @ d)


def motion_reward(x: np.ndarray, step_target: float) -> float:
    steps = np.linalg.norm(np.diff(x, axis=0), axis=1)
    return -float(np.sum((steps - step_target) ** 2))


def quality_reward(x: np.ndarray, norm_target: float) -> float:
    return -float(np.sum((np.linalg.norm(x, axis=1) - norm_target) ** 2))


def eval_reward(
    seq,
    prompt: PromptSpec,
    spec: RewardSpec,
    stream: RngStream | None = None,
    length: int | None = None,
) -> float:
    """Score one completed sequence.

    ``length`` (when given) is the expected chunk count; a shorter sequence is an
    error.  ``kind="random"`` ignores the sequence and needs ``stream``.
    """
    x = _chunks(seq)
    if length is not None and x.shape[0] != length:
        raise InvalidArgument(f"incomplete sequence: {x.shape[0]} of {length} chunks")
    if spec.kind == "align":
        return align_reward(x, prompt.target)
    if spec.kind == "motion":
        return motion_reward(x, spec.step_target)
    if spec.kind == "quality":
        return quality_reward(x, spec.norm_target)
    if spec.kind == "composite":
        wa, wm, wq = spec.weights
        return (
            wa * align_reward(x, prompt.target)
            + wm * motion_reward(x, spec.step_target)
            + wq * quality_reward(x, spec.norm_target)
        )
    if stream is None:
        raise InvalidArgument("random reward needs a stream")
    z, _ = gaussian(stream, 1)
    return -abs(float(z[0]))


@dataclass(frozen=True)
class MonitorScores:
    align: float
    motion: float
    quality: float


def monitors(seq, prompt: PromptSpec, spec: RewardSpec) -> MonitorScores:
    x = _chunks(seq)
    return MonitorScores(
        align_reward(x, prompt.target),
        motion_reward(x, spec.step_target),
        quality_reward(x, spec.norm_target),
    )
