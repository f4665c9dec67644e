from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from arcopo.adapters import (
    ADAPTED,
    AdaptedModel,
    EvalSuite,
    LowRankAdapter,
    adapter_from_bytes,
    adapter_to_bytes,
    effective_params,
    load_adapter,
    save_adapter,
    scale_sweep,
    select_scale,
)
from arcopo.copo import copo_update
from arcopo.errors import InvalidArgument, NotFound
from arcopo.numerics import RngStream
from arcopo.rewards import prompt_set
from arcopo.rollout import arcopo_iteration
from arcopo.toygen import ModelDims, ModelParams

from conftest import SMALL, assert_params_equal


def trained(seed, tag="on_policy", dims=SMALL):
    a = LowRankAdapter.init(dims, RngStream(seed, ("a",)), tag=tag)
    U = {k: np.random.default_rng(seed).normal(size=u.shape) for k, u in a.U.items()}
    return LowRankAdapter(U, a.V, a.rank, a.alpha, tag)


def test_fresh_adapter_is_identity(small_params):
    a = LowRankAdapter.init(SMALL, RngStream(0))
    assert a.rank == 4 and a.alpha == 8.0 and a.scaling == 2.0
    for s in (0.0, 0.5, 3.0):
        assert_params_equal(effective_params(small_params, [(a, s)]), small_params)
    assert_params_equal(effective_params(small_params, []), small_params)


@given(s=st.floats(-4, 4).filter(lambda s: s == 0 or abs(s) > 1e-100))
def test_linearity(s):
    base = ModelParams.zeros(SMALL)
    a = trained(1)
    one = effective_params(base, [(a, s)])
    two = effective_params(base, [(a, 2 * s)])
    for k in ADAPTED:
        np.testing.assert_array_equal(two.weights[k], 2 * one.weights[k])


def test_delta_formula(small_params):
    a = trained(2)
    p = effective_params(small_params, [(a, 0.5)])
    for k in ADAPTED:
        np.testing.assert_allclose(p.weights[k], small_params.weights[k] + 0.5 * (8 / 4) * a.U[k] @ a.V[k], atol=1e-14)
    for k in ("b1", "b2", "b3", "be"):
        np.testing.assert_array_equal(p.weights[k], small_params.weights[k])


def test_shape_mismatch(small_params):
    with pytest.raises(InvalidArgument):
        effective_params(small_params, [(trained(0, dims=ModelDims()), 1.0)])
    with pytest.raises(InvalidArgument):
        LowRankAdapter({"W1": np.zeros((4, 2))}, {"W1": np.zeros((3, 6))})
    with pytest.raises(InvalidArgument):
        LowRankAdapter({}, {}, tag="other")


def test_scale_zero_is_semi_model_bitwise(small_params):
    semi, on = trained(3, "semi"), trained(4)
    a = effective_params(small_params, [(semi, 1.0), (on, 0.0)])
    b = AdaptedModel(small_params, semi).effective()
    assert_params_equal(a, b)


def test_training_touches_only_adapter(small_params, small_cfg, small_prompt):
    semi = trained(5, "semi")
    model = AdaptedModel(small_params, LowRankAdapter.init(SMALL, RngStream(6)), ((semi, 1.0),))
    base_before = {k: v.copy() for k, v in small_params.weights.items()}
    semi_before = {k: v.copy() for k, v in semi.leaves().items()}
    for i in range(3):
        cur = model.effective()
        entry, _ = arcopo_iteration(cur, cur, small_prompt, small_cfg, RngStream(i))
        model, _ = copo_update(model, entry, cur, small_cfg.copo)
    for k, v in base_before.items():
        np.testing.assert_array_equal(model.base.weights[k], v)
    for k, v in semi_before.items():
        np.testing.assert_array_equal(model.others[0][0].leaves()[k], v)
    assert any(np.any(u != 0) for u in model.adapter.U.values())
    assert set(model.trainable()) == {f"{k}.{f}" for k in ADAPTED for f in "UV"}


def test_adapter_roundtrip(tmp_path):
    a = trained(7, "semi")
    b, meta = adapter_from_bytes(adapter_to_bytes(a, "m"))
    assert b.equal(a) and meta == "m"
    save_adapter(tmp_path / "a.lora", a)
    assert load_adapter(tmp_path / "a.lora").equal(a)
    with pytest.raises(NotFound):
        load_adapter(tmp_path / "nope.lora")
    with pytest.raises(InvalidArgument):
        adapter_from_bytes(b"xx")


def _metric_suite(in_fn, held_fn, tol=0.05):
    return EvalSuite(in_fn, held_fn, tol)


def test_sweep_single_zero_row(small_params):
    semi, on = trained(8, "semi"), trained(9)
    suite = _metric_suite(lambda p: float(p.weights["b3"].sum()), lambda p: {"x": 1.0})
    rep = scale_sweep(small_params, semi, on, [0], suite)
    assert rep.scales == [0.0] and len(rep.rows()) == 1
    assert rep.selected == 0.0 and not rep.improved


def test_flat_metrics_fall_back_to_zero(small_params):
    semi = trained(8, "semi")
    fresh = LowRankAdapter.init(SMALL, RngStream(1))
    suite = _metric_suite(lambda p: float(np.sum(p.weights["W1"])), lambda p: {"h": float(np.sum(p.weights["W2"]))})
    rep = scale_sweep(small_params, semi, fresh, [0, 0.5, 1.0], suite)
    assert rep.selected == 0.0 and not rep.improved
    assert "improved=0" in rep.to_csv()


def test_selection_rule_trade_off():
    scales = [0.0, 0.4, 0.6, 0.8, 1.0]
    ins = [0.0, 1.0, 2.0, 3.0, 4.0]
    held = [{"m": -10.0}, {"m": -10.2}, {"m": -10.4}, {"m": -10.6}, {"m": -12.0}]
    assert select_scale(scales, ins, held, 0.0, {"m": -10.0}, 0.05) == (0.6, True)
    assert select_scale(scales, ins, held, 0.0, {"m": -10.0}, 0.01) == (0.0, False)


def test_sweep_validation(small_params):
    semi, on = trained(8, "semi"), trained(9)
    suite = _metric_suite(lambda p: 0.0, lambda p: {})
    with pytest.raises(InvalidArgument):
        scale_sweep(small_params, semi, on, [], suite)
    with pytest.raises(InvalidArgument):
        scale_sweep(small_params, semi, on, [1.5], suite)


def test_sweep_csv_layout(small_params):
    semi, on = trained(8, "semi"), trained(9)
    suite = _metric_suite(lambda p: float(np.sum(p.weights["W3"])), lambda p: {"a": 1.0, "b": 2.0})
    text = scale_sweep(small_params, semi, on, [0, 1], suite, {"config_hash": "h", "seed": 3}).to_csv()
    lines = text.splitlines()
    assert "config_hash=h" in lines[0] and "seed=3" in lines[0]
    assert lines[2] == "scale,held_a,held_b,in_domain,selected"
