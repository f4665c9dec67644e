"""Noise plans, neighbour perturbation and branch forking.

A :class:`NoisePlan` holds every random draw a rollout consumes.  Forking a plan
at chunk ``p`` swaps only ``init_noises[p]`` per branch, so sibling branches
share all other draws bit-for-bit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument
from .numerics import RngStream, gaussian
from .rewards import PromptSpec
from .toygen import ModelParams, SamplerConfig, rollout_sequence


@dataclass(frozen=True, eq=False)
class NoisePlan:
    init_noises: np.ndarray  # (L, d)
    solver_noises: np.ndarray  # (L, T-1, d)
    provenance: tuple[int, str] = (0, "")

    @property
    def L(self) -> int:
        return self.init_noises.shape[0]

    @property
    def T(self) -> int:
        return self.solver_noises.shape[1] + 1

    @property
    def chunk_dim(self) -> int:
        return self.init_noises.shape[1]

    def with_init(self, q: int, noise: np.ndarray, label: str = "") -> "NoisePlan":
        """Copy with chunk ``q`` (1-based) initial noise replaced."""
        init = self.init_noises.copy()
        init[q - 1] = noise
        return NoisePlan(init, self.solver_noises, (self.provenance[0], self.provenance[1] + label))

    def with_solver(self, q: int, k: int, noise: np.ndarray, label: str = "") -> "NoisePlan":
        """Copy with the solver noise of chunk ``q`` step ``k`` (both 1-based) replaced."""
        solver = self.solver_noises.copy()
        solver[q - 1, k - 1] = noise
        return NoisePlan(self.init_noises, solver, (self.provenance[0], self.provenance[1] + label))

    def equal(self, other: "NoisePlan") -> bool:
        return np.array_equal(self.init_noises, other.init_noises) and np.array_equal(self.solver_noises, other.solver_noises)


def make_plan(stream: RngStream, L: int, T: int, chunk_dim: int) -> NoisePlan:
    if L < 1 or T < 1:
        raise InvalidArgument("L and T must be >= 1")
    init = np.stack([gaussian(stream.child(f"init.{q}"), chunk_dim)[0] for q in range(1, L + 1)])
    solver = np.zeros((L, T - 1, chunk_dim))
    for q in range(1, L + 1):
        for k in range(1, T):
            solver[q - 1, k - 1] = gaussian(stream.child(f"solver.{q}.{k}"), chunk_dim)[0]
    return NoisePlan(init, solver, (stream.root_seed, stream.path))


@dataclass(frozen=True, eq=False)
class NoiseNeighborhood:
    base: np.ndarray
    sigma: float
    members: np.ndarray  # (G, d)
    deltas: np.ndarray  # (G, d)

    @property
    def G(self) -> int:
        return self.members.shape[0]


def neighbor_noise(base: np.ndarray, deltas: np.ndarray, sigma: float) -> np.ndarray:
    if not 0.0 <= sigma <= 1.0:
        raise InvalidArgument(f"sigma must lie in [0, 1], got {sigma}")
    if sigma == 0.0:
        return np.broadcast_to(base, deltas.shape).copy()
    if sigma == 1.0:
        return np.array(deltas, dtype=np.float64)
    return np.sqrt(1.0 - sigma * sigma) * base + sigma * deltas


def perturb(base, sigma: float, G: int, stream: RngStream) -> NoiseNeighborhood:
    """``G`` neighbours ``sqrt(1 - sigma^2) * base + sigma * delta_i`` with fresh deltas.

    The endpoints are exact: ``sigma=0`` copies ``base`` and ``sigma=1``
    returns the deltas themselves.
    """
    if not 0.0 <= sigma <= 1.0:
        raise InvalidArgument(f"sigma must lie in [0, 1], got {sigma}")
    if G < 2:
        raise InvalidArgument("a neighbourhood needs G >= 2 members")
    base = np.asarray(base, dtype=np.float64)
    d = base.shape[0]
    deltas = np.stack([gaussian(stream.child(f"delta.{i}"), d)[0] for i in range(G)])
    return NoiseNeighborhood(base, float(sigma), neighbor_noise(base, deltas, sigma), deltas)


@dataclass(frozen=True, eq=False)
class BranchPlans:
    pivot: int
    plans: list[NoisePlan]
    neighborhood: NoiseNeighborhood


def fork(plan: NoisePlan, p: int, hood: NoiseNeighborhood) -> BranchPlans:
    if not 1 <= p <= plan.L:
        raise InvalidArgument(f"pivot {p} outside 1..{plan.L}")
    if not np.array_equal(hood.base, plan.init_noises[p - 1]):
        raise InvalidArgument("neighbourhood base is not the plan's pivot noise")
    plans = [plan.with_init(p, m, f"/fork.{p}.{i}") for i, m in enumerate(hood.members)]
    return BranchPlans(p, plans, hood)


# --------------------------------------------------------------------------
# entropy-source substitution


def parse_site(site: Sequence) -> tuple:
    kind = site[0] if site else None
    if kind == "init" and len(site) == 2:
        return ("init", int(site[1]))
    if kind == "solver" and len(site) == 3:
        return ("solver", int(site[1]), int(site[2]))
    raise InvalidArgument(f"invalid substitution site {site!r}")


def site_label(site: tuple) -> str:
    return ".".join(str(s) for s in site)


@dataclass(frozen=True, eq=False)
class SiteDivergence:
    site: tuple
    per_chunk: np.ndarray  # (L,) mean L2 per chunk
    total: float  # mean L2 over the concatenated sequence
    trials: int

    def to_record(self) -> dict:
        return {
            "site": list(self.site),
            "per_chunk": [float(v) for v in self.per_chunk],
            "total": float(self.total),
            "trials": self.trials,
        }


@dataclass(frozen=True, eq=False)
class DivergenceReport:
    reference: np.ndarray  # (L, d)
    sites: list[SiteDivergence] = field(default_factory=list)

    def by_site(self) -> dict[tuple, SiteDivergence]:
        return {s.site: s for s in self.sites}

    def to_jsonl(self, header: dict | None = None) -> str:
        lines = [json.dumps(header, sort_keys=True)] if header else []
        lines += [json.dumps(s.to_record(), sort_keys=True) for s in self.sites]
        return "".join(line + "\n" for line in lines)


def _validate_site(site: tuple, L: int, T: int, kind: str) -> None:
    q = site[1]
    if not 1 <= q <= L:
        raise InvalidArgument(f"site {site} names chunk outside 1..{L}")
    if site[0] == "solver":
        if kind != "consistency":
            raise InvalidArgument("solver sites need the consistency sampler")
        if not 1 <= site[2] <= T - 1:
            raise InvalidArgument(f"site {site} names solver step outside 1..{T - 1}")


def substitution_study(
    params: ModelParams,
    plan: NoisePlan,
    cfg: SamplerConfig,
    sites: Iterable[Sequence],
    trials: int,
    prompt: PromptSpec,
    stream: RngStream,
    replacements: dict | None = None,
) -> DivergenceReport:
    """Redraw one noise site at a time and measure how far the output moves.

    ``replacements`` maps a site to explicit replacement noises (one per trial),
    bypassing the fresh draws; used to check the identity case.
    """
    if trials < 0:
        raise InvalidArgument("trials must be >= 0")
    parsed = [parse_site(s) for s in sites]
    for s in parsed:
        _validate_site(s, plan.L, plan.T, cfg.kind)
    ref = rollout_sequence(params, prompt, plan, cfg, plan.L).chunks
    out = []
    for site in parsed:
        if trials == 0:
            continue
        per_chunk = np.zeros(plan.L)
        total = 0.0
        for j in range(trials):
            if replacements and site in replacements:
                noise = np.asarray(replacements[site][j], dtype=np.float64)
            else:
                noise, _ = gaussian(stream.child(site_label(site), f"trial.{j}"), plan.chunk_dim)
            if site[0] == "init":
                alt = plan.with_init(site[1], noise)
            else:
                alt = plan.with_solver(site[1], site[2], noise)
            x = rollout_sequence(params, prompt, alt, cfg, plan.L).chunks
            diff = x - ref
            per_chunk += np.linalg.norm(diff, axis=1)
            total += float(np.linalg.norm(diff))
        out.append(SiteDivergence(site, per_chunk / trials, total / trials, trials))
    return DivergenceReport(ref, out)


def all_sites_for_chunk(q: int, T: int) -> list[tuple]:
    return [("init", q)] + [("solver", q, k) for k in range(1, T)]
