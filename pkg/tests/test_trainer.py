import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgalab import tensor as T
from pgalab.errors import ConfigError, ContractError, NumericAbort
from pgalab.losses import LossWeights, assemble
from pgalab.nets import checkpoint_bytes, load_checkpoint
from pgalab.trainer import (METRIC_COLUMNS, OptimizerState, TrainConfig, apply_overrides, build_model,
                            emit_config, load_config, parse_config_text, sgd_momentum_step, train)


def tiny(**kw):
    base = dict(hidden=(8, 8), n_train=200, n_eval=50, eval_samples=50, steps=40, eval_every=10,
                batch_size=16)
    base.update(kw)
    return TrainConfig(**base)


# ---- optimizer ----------------------------------------------------------

def test_momentum_zero_is_vanilla_sgd():
    p = T.parameter(np.array([1.0, 2.0]))
    st_ = OptimizerState.zeros([p])
    sgd_momentum_step([p], [np.array([0.5, -1.0])], st_, lr=0.1, momentum=0.0)
    np.testing.assert_allclose(p.data, [0.95, 2.1])


def test_two_steps_constant_gradient():
    p = T.parameter(np.zeros(3))
    g = np.array([1.0, -2.0, 0.5])
    st_ = OptimizerState.zeros([p])
    sgd_momentum_step([p], [g], st_, 0.1, 0.9)
    np.testing.assert_allclose(p.data, -0.1 * g)
    sgd_momentum_step([p], [g], st_, 0.1, 0.9)
    np.testing.assert_allclose(p.data, -0.1 * g - 0.19 * g)


def test_zero_gradient_decays_geometrically():
    p = T.parameter(np.zeros(2))
    v0 = np.array([1.0, -1.0])
    st_ = OptimizerState([v0.copy()])
    moves = []
    for _ in range(5):
        before = p.data.copy()
        sgd_momentum_step([p], [np.zeros(2)], st_, 1.0, 0.5)
        moves.append(before - p.data)
    for k, m in enumerate(moves):
        np.testing.assert_allclose(m, v0 * 0.5 ** (k + 1))


def test_optimizer_shape_mismatch():
    p = T.parameter(np.zeros(2))
    with pytest.raises(ContractError):
        sgd_momentum_step([p], [np.zeros(3)], OptimizerState.zeros([p]), 0.1, 0.9)
    with pytest.raises(ContractError):
        sgd_momentum_step([p], [], OptimizerState.zeros([p]), 0.1, 0.9)


# ---- config -------------------------------------------------------------

def test_config_round_trip_default_and_custom():
    for cfg in (TrainConfig(), tiny(objective="LVPGA", gamma=0.123456789, hidden=(3,), image=True, seed=2 ** 62)):
        text = emit_config(cfg)
        again = parse_config_text(text)
        assert again == cfg
        assert emit_config(again) == text


@settings(max_examples=30, deadline=None)
@given(lr=st.floats(1e-8, 1.0), m=st.floats(0.0, 0.99), seed=st.integers(0, 2 ** 63 - 1),
       hidden=st.lists(st.integers(1, 512), min_size=0, max_size=4))
def test_config_round_trip_property(lr, m, seed, hidden):
    cfg = TrainConfig(learning_rate=lr, momentum=m, seed=seed, hidden=tuple(hidden))
    assert parse_config_text(emit_config(cfg)) == cfg


def test_config_comments_and_errors(tmp_path):
    cfg = parse_config_text("# header\nsteps = 7  # trailing\n\nobjective=VPGA\n")
    assert cfg.steps == 7 and cfg.objective == "VPGA"
    with pytest.raises(ConfigError, match="bogus"):
        parse_config_text("bogus = 1\n")
    with pytest.raises(ConfigError, match="steps"):
        parse_config_text("steps = 1\nsteps = 2\n")
    with pytest.raises(ConfigError, match="steps"):
        parse_config_text("steps = many\n")
    with pytest.raises(ConfigError):
        parse_config_text("just words\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError, match="gamma"):
        apply_overrides(TrainConfig(), {"gamma": "-1"}).validate()


def test_overrides_apply_after_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("steps = 5\nseed = 3\n")
    cfg = apply_overrides(load_config(path), {"steps": "9"})
    assert cfg.steps == 9 and cfg.seed == 3


# ---- training -----------------------------------------------------------

def test_steps_zero_checkpoint_is_init(tmp_path):
    cfg = tiny(steps=0)
    res = train(cfg, tmp_path)
    init = build_model(cfg, 2)
    model, _, step = load_checkpoint(tmp_path / cfg.checkpoint)
    assert step == 0
    assert checkpoint_bytes(model) == checkpoint_bytes(init)
    assert res.metrics == []


def test_metrics_rows_and_header(tmp_path):
    res = train(tiny(), tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert len(lines) - 1 == 40 // 10
    trace = (tmp_path / "trace.csv").read_text().splitlines()
    assert len(trace) - 1 == 40
    assert (tmp_path / "effective.cfg").read_text() == emit_config(tiny())
    assert all(math.isfinite(m["exact_nll"]) and math.isfinite(m["mmd"]) for m in res.metrics)


def test_metrics_average_trace_window(tmp_path):
    res = train(tiny(), tmp_path)
    window = [r["L_r"] for r in res.trace[10:20]]
    assert res.metrics[1]["L_r"] == pytest.approx(np.mean(window), rel=1e-15)


@pytest.mark.parametrize("objective", ["LPGA", "VPGA", "LVPGA"])
def test_determinism(tmp_path, objective):
    cfg = tiny(objective=objective, steps=20)
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    for name in ("metrics.csv", "trace.csv", cfg.checkpoint):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    full = tiny(steps=40)
    train(full, tmp_path / "full")
    train(tiny(steps=20), tmp_path / "part")
    train(full, tmp_path / "part", resume=True)
    for name in ("metrics.csv", "trace.csv", full.checkpoint):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_resume_architecture_mismatch(tmp_path):
    train(tiny(steps=0), tmp_path)
    with pytest.raises(ConfigError):
        train(tiny(latent_dim=3), tmp_path, resume=True)


def test_numeric_abort_names_term_and_keeps_checkpoint(tmp_path):
    cfg = tiny(learning_rate=1e6, steps=200)
    with pytest.raises(NumericAbort) as info:
        train(cfg, tmp_path)
    assert info.value.term in ("L_r", "L_lr_N", "L_lr_H", "L_nll_phi", "L_nll_theta", "total")
    model, _, step = load_checkpoint(tmp_path / cfg.checkpoint)
    assert step % cfg.eval_every == 0
    assert all(np.all(np.isfinite(p.data)) for p in model.parameters())


def test_isolated_term_updates_only_its_group():
    cfg = tiny()
    model = build_model(cfg, 2)
    rng = np.random.default_rng(0)
    x, zp = rng.normal(size=(16, 2)), rng.normal(size=(16, 2))
    bundle = assemble("LPGA", model, x, zp, LossWeights(), 1)
    theta_before = [p.data.copy() for p in model.theta]
    params = model.parameters()
    grads = T.backward(bundle["L_lr_N"], params)
    sgd_momentum_step(params, grads, OptimizerState.zeros(params), 0.1, 0.9)
    assert all(np.array_equal(a, p.data) for a, p in zip(theta_before, model.theta))


@pytest.mark.slow
@pytest.mark.parametrize("dataset", ["gauss2d", "ring8", "checkerboard", "manifold(8,2)"])
def test_totals_finite_over_long_runs(tmp_path, dataset):
    cfg = TrainConfig(dataset=dataset, steps=10_000, hidden=(64, 64), eval_every=5000,
                      eval_samples=200, n_train=5000, n_eval=500, trace=False)
    res = train(cfg, tmp_path)
    assert all(math.isfinite(m["total"]) for m in res.metrics)
