"""Low-rank adapters, scaled merging and the merge-scale sweep.

An adapter adds ``(alpha / r) * U @ V`` to each dense matrix of the base model.
``U`` starts at zero, so a fresh adapter leaves the model bit-unchanged.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .errors import InvalidArgument, NotFound
from .numerics import RngStream, gaussian
from .toygen import ModelDims, ModelParams

ADAPTED = ("W1", "W2", "W3", "We")
TAGS = ("on_policy", "semi")
ADAPTER_MAGIC = b"ARCOPO-LORA-1\n"


@dataclass(frozen=True, eq=False)
class LowRankAdapter:
    """Factor pairs keyed by weight name: ``U`` is (out, r), ``V`` is (r, in)."""

    U: dict
    V: dict
    rank: int = 4
    alpha: float = 8.0
    tag: str = "on_policy"

    def __post_init__(self):
        if self.tag not in TAGS:
            raise InvalidArgument(f"unknown adapter tag {self.tag!r}")
        if self.rank < 1:
            raise InvalidArgument("rank must be >= 1")
        if set(self.U) != set(self.V):
            raise InvalidArgument("U and V name different matrices")
        for k in self.U:
            if self.U[k].shape[1] != self.rank or self.V[k].shape[0] != self.rank:
                raise InvalidArgument(f"factor shapes for {k} do not match rank {self.rank}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def init(cls, dims: ModelDims, stream: RngStream, rank: int = 4, alpha: float | None = None, tag: str = "on_policy", names=ADAPTED):
        """Zero ``U``; ``V`` drawn N(0, 1/in)."""
        shapes = dims.shapes()
        U, V = {}, {}
        for k in names:
            out, inp = shapes[k]
            U[k] = np.zeros((out, rank))
            z, _ = gaussian(stream.child(k), rank * inp)
            V[k] = z.reshape(rank, inp) / np.sqrt(inp)
        return cls(U, V, rank, 2.0 * rank if alpha is None else alpha, tag)

    def delta(self, name: str) -> np.ndarray:
        return self.scaling * (self.U[name] @ self.V[name])

    def leaves(self) -> dict:
        out = {}
        for k in sorted(self.U):
            out[f"{k}.U"] = self.U[k]
            out[f"{k}.V"] = self.V[k]
        return out

    def with_leaves(self, leaves: dict) -> "LowRankAdapter":
        U = {k: np.asarray(leaves[f"{k}.U"], dtype=np.float64) for k in self.U}
        V = {k: np.asarray(leaves[f"{k}.V"], dtype=np.float64) for k in self.V}
        return LowRankAdapter(U, V, self.rank, self.alpha, self.tag)

    def equal(self, other: "LowRankAdapter") -> bool:
        return (
            self.rank == other.rank
            and self.alpha == other.alpha
            and self.tag == other.tag
            and set(self.U) == set(other.U)
            and all(np.array_equal(self.U[k], other.U[k]) and np.array_equal(self.V[k], other.V[k]) for k in self.U)
        )


def _check_shapes(base: ModelParams, adapter: LowRankAdapter) -> None:
    shapes = base.dims.shapes()
    for k in adapter.U:
        if k not in shapes or len(shapes[k]) != 2:
            raise InvalidArgument(f"adapter names {k!r}, which is not a base matrix")
        if (adapter.U[k].shape[0], adapter.V[k].shape[1]) != shapes[k]:
            raise InvalidArgument(f"adapter factors for {k} do not match base shape {shapes[k]}")


def effective_params(base: ModelParams, adapters: Sequence[tuple[LowRankAdapter, float]] = ()) -> ModelParams:
    """``base + sum_k s_k * (alpha/r) U_k V_k`` for every adapted matrix."""
    weights = dict(base.weights)
    for adapter, s in adapters:
        _check_shapes(base, adapter)
        for k in adapter.U:
            weights[k] = weights[k] + s * adapter.delta(k)
    return ModelParams(base.dims, weights)


@dataclass(frozen=True, eq=False)
class AdaptedModel:
    """Frozen base plus frozen scaled adapters plus one trainable adapter.

    Implements the trainer protocol, so ``copo_update`` only ever sees the
    trainable adapter's factors as leaves.
    """

    base: ModelParams
    adapter: LowRankAdapter
    others: tuple = ()  # ((LowRankAdapter, scale), ...)

    def __post_init__(self):
        _check_shapes(self.base, self.adapter)
        object.__setattr__(self, "others", tuple(self.others))
        for a, _ in self.others:
            _check_shapes(self.base, a)

    @property
    def dims(self) -> ModelDims:
        return self.base.dims

    def frozen(self) -> ModelParams:
        return effective_params(self.base, self.others)

    def trainable(self) -> dict:
        return self.adapter.leaves()

    def materialize(self, leaves):
        w = dict(self.frozen().weights)
        a = self.adapter
        for k in a.U:
            w[k] = nx.add(w[k], nx.mul(a.scaling, nx.matmul(leaves[f"{k}.U"], leaves[f"{k}.V"])))
        return w

    def with_trainable(self, leaves) -> "AdaptedModel":
        return AdaptedModel(self.base, self.adapter.with_leaves(leaves), self.others)

    def effective(self) -> ModelParams:
        return effective_params(self.base, list(self.others) + [(self.adapter, 1.0)])


# --------------------------------------------------------------------------
# persistence


def adapter_to_bytes(adapter: LowRankAdapter, meta: str = "") -> bytes:
    head = {
        "rank": adapter.rank,
        "alpha": adapter.alpha,
        "tag": adapter.tag,
        "names": sorted(adapter.U),
        "shapes": {k: [adapter.U[k].shape[0], adapter.V[k].shape[1]] for k in sorted(adapter.U)},
        "meta": meta,
    }
    raw = json.dumps(head, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(ADAPTER_MAGIC)
    out.write(struct.pack("<q", len(raw)))
    out.write(raw)
    for k in sorted(adapter.U):
        out.write(np.ascontiguousarray(adapter.U[k], dtype="<f8").tobytes())
        out.write(np.ascontiguousarray(adapter.V[k], dtype="<f8").tobytes())
    return out.getvalue()


def adapter_from_bytes(raw: bytes) -> tuple[LowRankAdapter, str]:
    if not raw.startswith(ADAPTER_MAGIC):
        raise InvalidArgument("not an ARCOPO-LORA-1 adapter")
    off = len(ADAPTER_MAGIC)
    (n,) = struct.unpack_from("<q", raw, off)
    off += 8
    head = json.loads(raw[off : off + n].decode("utf-8"))
    off += n
    r = head["rank"]
    U, V = {}, {}
    for k in head["names"]:
        out, inp = head["shapes"][k]
        U[k] = np.frombuffer(raw, "<f8", out * r, off).reshape(out, r).astype(np.float64)
        off += 8 * out * r
        V[k] = np.frombuffer(raw, "<f8", r * inp, off).reshape(r, inp).astype(np.float64)
        off += 8 * r * inp
    if off != len(raw):
        raise InvalidArgument("trailing bytes in adapter file")
    return LowRankAdapter(U, V, r, head["alpha"], head["tag"]), head["meta"]


def save_adapter(path, adapter: LowRankAdapter, meta: str = "") -> None:
    with open(path, "wb") as f:
        f.write(adapter_to_bytes(adapter, meta))


def load_adapter(path) -> LowRankAdapter:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError as exc:
        raise NotFound(f"no adapter at {path}") from exc
    return adapter_from_bytes(raw)[0]


# --------------------------------------------------------------------------
# merge-scale sweep


@dataclass(frozen=True)
class EvalSuite:
    """``in_domain(params) -> float`` and ``held_out(params) -> dict[str, float]``.

    Larger is better for every metric.
    """

    in_domain: Callable[[ModelParams], float]
    held_out: Callable[[ModelParams], dict]
    tolerance: float = 0.05  # relative slack on each held-out metric


@dataclass
class SweepReport:
    scales: list[float]
    in_domain: list[float]
    held_out: list[dict]
    selected: float
    improved: bool
    header: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for s, ind, held in zip(self.scales, self.in_domain, self.held_out):
            row = {"scale": s}
            row.update({f"held_{k}": v for k, v in sorted(held.items())})
            row["in_domain"] = ind
            row["selected"] = int(s == self.selected)
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.header:
            buf.write("# " + " ".join(f"{k}={v}" for k, v in sorted(self.header.items())) + "\n")
        buf.write(f"# selected_scale={self.selected!r} improved={int(self.improved)}\n")
        rows = self.rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()


def select_scale(scales, in_domain, held_out, reference_in, reference_held, tolerance) -> tuple[float, bool]:
    """Largest scale whose in-domain metric beats the reference and whose
    held-out metrics each stay within ``tolerance`` (relative) of it."""
    best = None
    for s, ind, held in zip(scales, in_domain, held_out):
        if s == 0 or ind <= reference_in:
            continue
        if all(held[k] >= reference_held[k] - tolerance * abs(reference_held[k]) for k in reference_held):
            best = s if best is None else max(best, s)
    return (0.0, False) if best is None else (best, True)


def scale_sweep(
    base: ModelParams,
    semi: LowRankAdapter,
    on: LowRankAdapter,
    scales: Sequence[float],
    suite: EvalSuite,
    header: dict | None = None,
) -> SweepReport:
    """Evaluate ``base + semi + s * on`` for each ``s``; the ``s=0`` model is the reference."""
    scales = [float(s) for s in scales]
    if not scales:
        raise InvalidArgument("scales must be non-empty")
    if any(not 0.0 <= s <= 1.0 for s in scales):
        raise InvalidArgument("scales must lie in [0, 1]")
    semi_model = effective_params(base, [(semi, 1.0)])
    ins, helds = [], []
    for s in scales:
        p = semi_model if s == 0.0 else effective_params(base, [(semi, 1.0), (on, s)])
        ins.append(float(suite.in_domain(p)))
        helds.append({k: float(v) for k, v in suite.held_out(p).items()})
    if 0.0 in scales:
        i0 = scales.index(0.0)
        ref_in, ref_held = ins[i0], helds[i0]
    else:
        ref_in = float(suite.in_domain(semi_model))
        ref_held = {k: float(v) for k, v in suite.held_out(semi_model).items()}
    selected, improved = select_scale(scales, ins, helds, ref_in, ref_held, suite.tolerance)
    return SweepReport(scales, ins, helds, selected, improved, dict(header or {}))
