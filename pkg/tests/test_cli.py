import json
import re
from pathlib import Path

import numpy as np
import pytest

from arcopo.cli import ExperimentConfig, main, parse_config
from arcopo.errors import InvalidArgument
from arcopo.toygen import ModelParams, load_params, pretrain_reference
from arcopo.numerics import RngStream

from conftest import assert_params_equal

TINY = """
# a fast configuration
model.chunk_dim = 2
model.context_dim = 3
model.hidden = 4, 4
pretrain.steps = 20
pretrain.batch = 8
train.L = 3
train.iters = 3
train.prompts = 2
train.buffer_groups = 3
train.semi_steps = 4
copo.group_size = 4
copo.anchor_batch = 2
eval.plans = 2
eval.held_out_prompts = 2
entropy.prompts = 2
entropy.trials = 2
entropy.pivots = 1, 3
sweep.scales = 0, 0.5, 1
"""


def tiny_with(**over):
    lines = []
    for line in TINY.splitlines():
        key = line.split("=")[0].strip()
        lines.append(f"{key} = {over.pop(key)}" if key in over else line)
    return "\n".join(lines + [f"{k} = {v}" for k, v in over.items()]) + "\n"


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def run(*args):
    return main([str(a) for a in args])


def test_default_roundtrip():
    cfg = ExperimentConfig()
    assert parse_config(cfg.to_text()) == cfg
    assert cfg.copo.clip_eps == 1e-4 and cfg.sweep.scales == (0.0, 0.4, 0.6, 0.8, 1.0)


def test_parse_values():
    cfg = parse_config("seed = 4\ncopo.tau0 = 2.5\ncopo.clip_enabled = false\nsampler.timesteps = 1.0, 0.5\ncopo.objective_steps = 0, 1\n")
    assert cfg.seed == 4 and cfg.copo.tau0 == 2.5 and cfg.copo.clip_enabled is False
    assert cfg.sampler.timesteps == (1.0, 0.5) and cfg.copo.objective_steps == (0, 1)
    assert parse_config("copo.tau0 = none").copo.tau0 is None


def test_hash_ignores_seed_only():
    a = ExperimentConfig()
    assert parse_config("seed = 9").config_hash() == a.config_hash()
    assert parse_config("copo.sigma = 0.25").config_hash() != a.config_hash()


@pytest.mark.parametrize(
    "text",
    ["copo.nope = 1", "copo.sigma 0.5", "copo.group_size = many", "copo.group_size = 1", "seed = 1\nseed = 2", "copo.clip_enabled = maybe"],
)
def test_bad_config_raises(text):
    with pytest.raises(InvalidArgument):
        parse_config(text)


def test_exit_code_invalid_config(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("unknown.key = 3\n")
    assert run("pretrain", "--config", p, "--out", tmp_path / "o") == 2
    assert run("pretrain", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "o") == 2


def test_exit_code_missing_artifact(tmp_path, tiny):
    for verb in (["train", "--mode", "on"], ["entropy-study"], ["sweep"], ["eval"]):
        assert run(*verb, "--config", tiny, "--out", tmp_path / "empty") == 3


def test_exit_code_numeric_failure(tmp_path, tiny):
    p = tmp_path / "div.cfg"
    p.write_text(tiny_with(**{"copo.learning_rate": "1e300"}))
    assert run("pretrain", "--config", p, "--out", tmp_path / "o") == 0
    with np.errstate(all="ignore"):
        assert run("train", "--mode", "on", "--config", p, "--out", tmp_path / "o") == 4


def test_pipeline_and_headers(tmp_path, tiny):
    out = tmp_path / "run"
    assert run("pretrain", "--config", tiny, "--seed", 5, "--out", out) == 0
    for mode in ("semi", "off", "on", "sde"):
        assert run("train", "--mode", mode, "--config", tiny, "--seed", 5, "--out", out) == 0
    assert run("entropy-study", "--config", tiny, "--seed", 5, "--out", out) == 0
    assert run("sweep", "--config", tiny, "--seed", 5, "--out", out) == 0
    assert run("eval", "--adapter", "semi", "--adapter", "on_policy:0.5", "--config", tiny, "--seed", 5, "--out", out) == 0
    h = parse_config(TINY + "seed = 5\n").config_hash()
    for f in out.iterdir():
        if f.suffix == ".json":
            head = f.read_text()
        elif f.suffix in (".csv", ".jsonl", ".txt"):
            head = f.read_text().splitlines()[0]
        else:
            head = f.read_bytes()[:4096].decode("latin-1")
        assert h in head, f.name
        assert re.search(r"seed\W{1,6}5\b", head), f.name
    sweep = (out / "sweep.csv").read_text().splitlines()
    assert len(sweep) == 3 + 3
    recs = [json.loads(x) for x in (out / "entropy.jsonl").read_text().splitlines()]
    assert {r["pivot"] for r in recs[1:] if "pivot" in r} == {1, 3}


def test_pretrain_zero_steps_equals_init(tmp_path, tiny):
    p = tmp_path / "z.cfg"
    p.write_text(tiny_with(**{"pretrain.steps": 0}))
    assert run("pretrain", "--config", p, "--seed", 2, "--out", tmp_path / "z") == 0
    cfg = parse_config(TINY)
    init = ModelParams.init(RngStream(2, ("init",)), cfg.model)
    assert_params_equal(load_params(tmp_path / "z" / "reference.ckpt"), init)


def test_on_policy_zero_iterations_gives_zero_delta(tmp_path, tiny):
    p = tmp_path / "z.cfg"
    p.write_text(tiny_with(**{"train.iters": 0}))
    out = tmp_path / "z"
    assert run("pretrain", "--config", p, "--out", out) == 0
    assert run("train", "--mode", "on", "--config", p, "--out", out) == 0
    from arcopo.adapters import load_adapter

    a = load_adapter(out / "on_policy.lora")
    assert all(np.all(a.delta(k) == 0) for k in a.U)


def test_entropy_zero_trials(tmp_path, tiny):
    p = tmp_path / "z.cfg"
    p.write_text(tiny_with(**{"entropy.trials": 0}))
    out = tmp_path / "z"
    assert run("pretrain", "--config", p, "--out", out) == 0
    assert run("entropy-study", "--config", p, "--out", out) == 0
    lines = (out / "entropy.jsonl").read_text().splitlines()
    assert len(lines) == 1


def test_rerun_is_byte_identical(tmp_path, tiny):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert run("pretrain", "--config", tiny, "--out", out) == 0
        assert run("train", "--mode", "semi", "--config", tiny, "--out", out) == 0
        assert run("train", "--mode", "on", "--config", tiny, "--out", out) == 0
        assert run("sweep", "--config", tiny, "--out", out) == 0
    names = sorted(f.name for f in outs[0].iterdir())
    assert names == sorted(f.name for f in outs[1].iterdir())
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes(), n


def test_show_config(capsys):
    assert run("show-config", "--seed", 3) == 0
    assert "seed = 3" in capsys.readouterr().out


def test_example_config_lists_every_default():
    docs = Path(__file__).resolve().parent.parent / "docs"
    text = (docs / "example.cfg").read_text()
    assert parse_config(text) == ExperimentConfig()
    keys = {line.split("=")[0].strip() for line in text.splitlines() if line.strip() and not line.startswith("#")}
    assert keys == {line.split("=")[0].strip() for line in ExperimentConfig().to_text().splitlines()}
    assert parse_config((docs / "trade_off.cfg").read_text()).copo.learning_rate == 1e-2
