"""Command-line experiment runner.

Config files are flat ``section.key = value`` text; every artifact written by a
command carries the config hash and the root seed in its header.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import AdaptedModel, EvalSuite, LowRankAdapter, load_adapter, save_adapter, scale_sweep, effective_params
from .copo import CopoConfig
from .errors import InvalidArgument, NotFound, NumericFailure
from .neighborhood import all_sites_for_chunk, make_plan, substitution_study
from .numerics import RngStream
from .rewards import RewardSpec, prompt_set
from .rollout import (
    ArcopoConfig,
    TrainingAborted,
    curves_csv,
    curves_jsonl,
    evaluate_metrics,
    train_on_policy,
    train_sde,
    window_mean,
)
from .semipolicy import checkpoint_id, collect_buffer, displacement, load_buffer, save_buffer, train_semi
from .toygen import ModelDims, PretrainConfig, SamplerConfig, eval_denoising_mse, load_params, pretrain_reference, save_params

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
MODES = {"on": "on_policy", "semi": "semi", "off": "off_policy", "sde": "sde"}


@dataclass(frozen=True)
class TrainSection:
    L: int = 6
    iters: int = 100
    prompt_first: int = 1000
    prompts: int = 16
    buffer_groups: int = 100
    semi_steps: int = 1000
    semi_learning_rate: float = 1e-3


@dataclass(frozen=True)
class EvalSection:
    seed: int = 7
    plans: int = 8
    held_out_first: int = 5000
    held_out_prompts: int = 64


@dataclass(frozen=True)
class AdapterSection:
    rank: int = 4
    alpha: float = 8.0


@dataclass(frozen=True)
class SweepSection:
    scales: tuple[float, ...] = (0.0, 0.4, 0.6, 0.8, 1.0)
    tolerance: float = 0.05


@dataclass(frozen=True)
class EntropySection:
    pivots: tuple[int, ...] = (1, 4)
    prompt_first: int = 100
    prompts: int = 16
    trials: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    model: ModelDims = ModelDims()
    sampler: SamplerConfig = SamplerConfig()
    pretrain: PretrainConfig = PretrainConfig()
    copo: CopoConfig = CopoConfig(learning_rate=3e-3)
    reward: RewardSpec = RewardSpec()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    adapters: AdapterSection = AdapterSection()
    sweep: SweepSection = SweepSection()
    entropy: EntropySection = EntropySection()

    def arcopo(self, learning_rate: float | None = None) -> ArcopoConfig:
        copo = self.copo if learning_rate is None else replace(self.copo, learning_rate=learning_rate)
        return ArcopoConfig(copo, self.sampler, self.reward, self.train.L)

    def to_text(self, with_seed: bool = True) -> str:
        lines = [f"seed = {self.seed}"] if with_seed else []
        for f in fields(self):
            section = getattr(self, f.name)
            if not is_dataclass(section):
                continue
            for sf in fields(section):
                lines.append(f"{f.name}.{sf.name} = {_format(getattr(section, sf.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Hash of every setting except the root seed."""
        return hashlib.sha256(self.to_text(with_seed=False).encode("utf-8")).hexdigest()[:12]

    def header(self, command: str) -> dict:
        return {"command": command, "config_hash": self.config_hash(), "seed": self.seed}


# --------------------------------------------------------------------------
# flat config text


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(text: str, hint):
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() == "none" and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        return _convert(text, hint)
    if origin is tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_convert(p, args[0]) for p in parts)
    if hint is bool:
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``key = value`` lines (``#`` comments) on top of ``base``."""
    values: dict[str, tuple[int, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise InvalidArgument(f"line {lineno}: duplicate key {key!r}")
        values[key] = (lineno, val)
    cfg = base or ExperimentConfig()
    top = {}
    hints = typing.get_type_hints(ExperimentConfig)
    for f in fields(ExperimentConfig):
        current = getattr(cfg, f.name)
        if not is_dataclass(current):
            if f.name in values:
                lineno, val = values.pop(f.name)
                top[f.name] = _parse_value(val, hints[f.name], f.name, lineno)
            continue
        sec_hints = typing.get_type_hints(type(current))
        updates = {}
        for sf in fields(current):
            key = f"{f.name}.{sf.name}"
            if key in values:
                lineno, val = values.pop(key)
                updates[sf.name] = _parse_value(val, sec_hints[sf.name], key, lineno)
        if updates:
            try:
                top[f.name] = replace(current, **updates)
            except (TypeError, ValueError) as exc:
                raise InvalidArgument(f"section {f.name}: {exc}") from exc
    if values:
        raise InvalidArgument(f"unknown config keys: {', '.join(sorted(values))}")
    return replace(cfg, **top)


def _parse_value(val: str, hint, key: str, lineno: int):
    try:
        return _convert(val, hint)
    except (ValueError, StopIteration) as exc:
        raise InvalidArgument(f"line {lineno}: bad value for {key}: {exc}") from exc


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise InvalidArgument(f"no config file at {path}") from exc
    return parse_config(text)


# --------------------------------------------------------------------------
# artifact helpers


def _csv_header(header: dict) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in sorted(header.items())) + "\n"


def _write(path: Path, data) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode) as f:
        f.write(data)


def _json_lines(header: dict, records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in [header, *records])


def _reference(out: Path):
    path = out / "reference.ckpt"
    if not path.exists():
        raise NotFound(f"no pretrained checkpoint at {path}; run 'pretrain' first")
    return load_params(path)


def _adapter(out: Path, name: str) -> LowRankAdapter:
    path = out / f"{name}.lora"
    if not path.exists():
        raise NotFound(f"no adapter at {path}; train it first")
    return load_adapter(path)


def _suite(cfg: ExperimentConfig) -> EvalSuite:
    train = prompt_set(cfg.train.prompt_first, cfg.train.prompts, cfg.model.chunk_dim, cfg.pretrain.target_norm)
    held = prompt_set(cfg.eval.held_out_first, cfg.eval.held_out_prompts, cfg.model.chunk_dim, cfg.pretrain.target_norm)
    arc = cfg.arcopo()
    r = cfg.reward
    monitors = {"reward": r, "motion": replace(r, kind="motion"), "quality": replace(r, kind="quality")}
    if r.kind == "random":
        monitors["reward"] = replace(r, kind="align")

    def in_domain(p):
        return evaluate_metrics(p, train, {"reward": monitors["reward"]}, arc, cfg.eval.seed, cfg.eval.plans)["reward"]

    def held_out(p):
        return evaluate_metrics(p, held, monitors, arc, cfg.eval.seed, cfg.eval.plans)

    return EvalSuite(in_domain, held_out, cfg.sweep.tolerance)


# --------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg: ExperimentConfig, out: Path) -> Path:
    header = cfg.header("pretrain")
    params, curve = pretrain_reference(cfg.seed, cfg.pretrain.steps, cfg.model, cfg.pretrain, cfg.sampler)
    init, _ = pretrain_reference(cfg.seed, 0, cfg.model, cfg.pretrain, cfg.sampler)
    mse0 = eval_denoising_mse(init, cfg.seed, cfg.pretrain, cfg.sampler)
    mse1 = eval_denoising_mse(params, cfg.seed, cfg.pretrain, cfg.sampler)
    path = out / "reference.ckpt"
    save_params(path, params, json.dumps(header, sort_keys=True))
    lines = [_csv_header(header), f"# eval_mse_initial={mse0!r} eval_mse_final={mse1!r}\n", "step,loss\n"]
    lines += [f"{i + 1},{v!r}\n" for i, v in enumerate(curve)]
    _write(out / "pretrain_curve.csv", "".join(lines))
    return path


def cmd_train(cfg: ExperimentConfig, out: Path, mode: str) -> dict:
    if mode not in MODES:
        raise InvalidArgument(f"unknown mode {mode!r}")
    name = MODES[mode]
    ref = _reference(out)
    header = {**cfg.header(f"train/{name}"), "reference": checkpoint_id(ref)}
    train = prompt_set(cfg.train.prompt_first, cfg.train.prompts, cfg.model.chunk_dim, cfg.pretrain.target_norm)
    ad = cfg.adapters
    if mode in ("on", "sde"):
        init = LowRankAdapter.init(ref.dims, RngStream(cfg.seed, ("lora", "on_policy")), ad.rank, ad.alpha, "on_policy")
        model = AdaptedModel(ref, init)
        if mode == "on":
            model, curve = train_on_policy(model, train, cfg.reward, cfg.arcopo(), cfg.train.iters, cfg.seed)
        else:
            model, curve = train_sde(model, train, cfg.reward, cfg.arcopo(), cfg.train.iters, cfg.seed)
    else:
        arc = cfg.arcopo(cfg.train.semi_learning_rate)
        buf_path = out / "buffer.bin"
        if buf_path.exists():
            buffer = load_buffer(buf_path, expect_checkpoint=checkpoint_id(ref))
        else:
            buffer = collect_buffer(ref, train, arc, cfg.train.buffer_groups, cfg.seed)
            save_buffer(buf_path, buffer, {**cfg.header("buffer"), "reference": buffer.checkpoint_id})
        init = LowRankAdapter.init(ref.dims, RngStream(cfg.seed, ("lora", "semi")), ad.rank, ad.alpha, "semi")
        model, curve = train_semi(AdaptedModel(ref, init), buffer, arc, cfg.train.semi_steps, mode == "semi", cfg.seed)
    save_adapter(out / f"{name}.lora", model.adapter, json.dumps(header, sort_keys=True))
    _write(out / f"curves_{name}.jsonl", curves_jsonl(curve, header))
    _write(out / f"curves_{name}.csv", curves_csv(curve, header))
    suite = _suite(cfg)
    eff = model.effective()
    n = len(curve)
    summary = {
        **header,
        "first10": window_mean(curve, 0, min(10, n)),
        "last10": window_mean(curve, max(0, n - 10), n),
        "in_domain": suite.in_domain(eff),
        "held_out": suite.held_out(eff),
        "displacement": displacement(eff, ref),
    }
    _write(out / f"summary_{name}.json", json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return summary


def entropy_records(params, cfg: ExperimentConfig) -> tuple[list[dict], list[dict]]:
    """Per-site mean divergences over several prompts and plans, plus per-pivot summaries."""
    s = cfg.sampler
    prompts = prompt_set(cfg.entropy.prompt_first, cfg.entropy.prompts, cfg.model.chunk_dim, cfg.pretrain.target_norm)
    sites_out, summary = [], []
    for q in cfg.entropy.pivots:
        sites = all_sites_for_chunk(q, s.T) if s.kind == "consistency" else [("init", q)]
        totals: dict[tuple, list] = {}
        chunks: dict[tuple, list] = {}
        for j, prompt in enumerate(prompts):
            plan = make_plan(RngStream(cfg.seed, ("entropy", "plan", str(j))), cfg.train.L, s.T, cfg.model.chunk_dim)
            rep = substitution_study(params, plan, s, sites, cfg.entropy.trials, prompt, RngStream(cfg.seed, ("entropy", "trials", str(q), str(j))))
            for sd in rep.sites:
                totals.setdefault(sd.site, []).append(sd.total)
                chunks.setdefault(sd.site, []).append(sd.per_chunk)
        for site in totals:
            sites_out.append(
                {
                    "pivot": q,
                    "site": list(site),
                    "total": float(np.mean(totals[site])),
                    "per_chunk": [float(v) for v in np.mean(chunks[site], axis=0)],
                    "trials": cfg.entropy.trials,
                    "prompts": len(prompts),
                }
            )
        init = [r["total"] for r in sites_out if r["pivot"] == q and r["site"][0] == "init"]
        solver = [r["total"] for r in sites_out if r["pivot"] == q and r["site"][0] == "solver"]
        if init and solver:
            summary.append({"pivot": q, "init": init[0], "max_solver": max(solver), "ratio": init[0] / max(solver)})
    return sites_out, summary


def cmd_entropy_study(cfg: ExperimentConfig, out: Path) -> Path:
    if cfg.entropy.trials < 0:
        raise InvalidArgument("entropy.trials must be >= 0")
    for q in cfg.entropy.pivots:
        if not 1 <= q <= cfg.train.L:
            raise InvalidArgument(f"entropy pivot {q} outside 1..{cfg.train.L}")
    ref = _reference(out)
    header = {**cfg.header("entropy-study"), "reference": checkpoint_id(ref)}
    sites, summary = entropy_records(ref, cfg)
    path = out / "entropy.jsonl"
    _write(path, _json_lines(header, sites + [{"summary": s} for s in summary]))
    return path


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> Path:
    ref = _reference(out)
    semi, on = _adapter(out, "semi"), _adapter(out, "on_policy")
    header = {**cfg.header("sweep"), "reference": checkpoint_id(ref)}
    rep = scale_sweep(ref, semi, on, cfg.sweep.scales, _suite(cfg), header)
    path = out / "sweep.csv"
    _write(path, rep.to_csv())
    return path


def _parse_adapter_arg(spec: str) -> tuple[str, float]:
    name, _, scale = spec.partition(":")
    try:
        return name, float(scale) if scale else 1.0
    except ValueError as exc:
        raise InvalidArgument(f"bad adapter spec {spec!r}") from exc


def cmd_eval(cfg: ExperimentConfig, out: Path, adapters: Sequence[str] = ()) -> Path:
    ref = _reference(out)
    header = {**cfg.header("eval"), "reference": checkpoint_id(ref)}
    suite = _suite(cfg)
    merged = [(name, s, _adapter(out, name)) for name, s in map(_parse_adapter_arg, adapters)]
    p = effective_params(ref, [(a, s) for _, s, a in merged])
    rec = {
        "adapters": [[name, s] for name, s, _ in merged],
        "in_domain": suite.in_domain(p),
        "held_out": suite.held_out(p),
        "displacement": displacement(p, ref),
    }
    path = out / "eval.jsonl"
    _write(path, _json_lines(header, [rec]))
    return path


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", default="runs", help="artifact directory")
    ap = argparse.ArgumentParser(prog="arcopo", parents=[common], description="toy AR-CoPO experiments")
    sub = ap.add_subparsers(dest="verb", required=True)
    sub.add_parser("pretrain", parents=[common], help="pretrain the reference generator")
    tr = sub.add_parser("train", parents=[common], help="train an adapter")
    tr.add_argument("--mode", choices=sorted(MODES), required=True)
    sub.add_parser("entropy-study", parents=[common], help="noise-substitution divergence study")
    sub.add_parser("sweep", parents=[common], help="merge-scale sweep of the two adapters")
    ev = sub.add_parser("eval", parents=[common], help="evaluate the reference plus adapters")
    ev.add_argument("--adapter", action="append", default=[], metavar="NAME[:SCALE]")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out = Path(args.out)
        if args.verb == "show-config":
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "config.txt", f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n" + cfg.to_text())
        if args.verb == "pretrain":
            cmd_pretrain(cfg, out)
        elif args.verb == "train":
            cmd_train(cfg, out, args.mode)
        elif args.verb == "entropy-study":
            cmd_entropy_study(cfg, out)
        elif args.verb == "sweep":
            cmd_sweep(cfg, out)
        elif args.verb == "eval":
            cmd_eval(cfg, out, args.adapter)
    except NotFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericFailure, TrainingAborted) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidArgument as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
