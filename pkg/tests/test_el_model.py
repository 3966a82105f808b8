import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import fd_grad
from signdyn.el_model import ConfigError, ELModel, SignedLinearCore
from signdyn.signs import (
    FREE, NONNEG, SignPattern, SignSet, check_sampled, powertrain_pattern, two_tank_pattern,
)
from signdyn.training import POWERTRAIN_ARCH, TWO_TANK_ARCH, make_model


def test_parameter_counts():
    rng = np.random.default_rng(0)
    assert make_model("el_signed", two_tank_pattern(), TWO_TANK_ARCH, rng).n_params == 26
    assert make_model("el_signed", powertrain_pattern(), POWERTRAIN_ARCH, rng).n_params == 372
    assert make_model("nn_baseline", two_tank_pattern(), TWO_TANK_ARCH, rng).n_params == 26
    assert make_model("nn_baseline", powertrain_pattern(), POWERTRAIN_ARCH, rng).n_params == 393
    assert make_model("linear_signed", two_tank_pattern(), TWO_TANK_ARCH, rng).n_params == 8


@pytest.mark.parametrize("text,raw,expected", [
    ("+", 0.5, 0.5 + 1e-3), ("+", -2.0, 1e-3),
    ("-", 0.5, -(0.5 + 1e-3)), ("-", -1.0, -1e-3),
    ("+0", 0.7, 0.7), ("+0", -0.7, 0.0),
    ("-0", 0.7, -0.7), ("-0", -0.7, 0.0),
    ("0", 3.0, 0.0),
    ("+-0", -0.4, -0.4),
    ("+-", 0.2, 0.2 + 1e-3), ("+-", -0.2, -0.2 - 1e-3),
])
def test_core_entry_reparameterization(text, raw, expected):
    s = SignSet.parse(text)
    pat = SignPattern([[s]], [[FREE]], [FREE])
    core = SignedLinearCore([[raw]], [[0.0]], [0.0], pat, eps=1e-3)
    assert core.effective().A[0, 0] == pytest.approx(expected)


@given(st.lists(st.floats(-5, 5), min_size=15, max_size=15))
def test_core_satisfies_pattern_for_any_raw(raws):
    pat = powertrain_pattern()
    r = np.array(raws)
    core = SignedLinearCore(r[:9], r[9:18] if len(r) >= 18 else np.resize(r, 9), np.resize(r, 3), pat)
    from signdyn.signs import check_linear
    assert check_linear(core.effective(), pat).passed


def _random_model(pattern, seed, conditioned=False):
    return ELModel.create(pattern, 2, 2, conditioned, rng=seed, random_layers=True)


def test_predict_formula():
    m = _random_model(two_tank_pattern(), 1)
    x, u = np.array([0.3, 0.2]), np.array([1.5])
    lin = m.core.effective()
    expected = m.phi.inverse(lin.A @ m.phi.forward(x) + lin.B @ m.psi.forward(u) + lin.c)
    np.testing.assert_allclose(m.predict(x, u), expected, rtol=1e-14)
    X = np.tile(x, (3, 1))
    U = np.tile(u, (3, 1))
    np.testing.assert_allclose(m.predict(X, U), np.tile(expected, (3, 1)), rtol=1e-14)


@pytest.mark.parametrize("conditioned", [False, True])
def test_jacobians_match_fd(conditioned):
    pat = SignPattern.free(3, 2) if conditioned else SignPattern.monotone(3, 2)
    m = ELModel.create(pat, 2, 2, conditioned, rng=3, random_layers=True)
    rng = np.random.default_rng(0)
    x, u = rng.uniform(-0.5, 0.5, 3), rng.uniform(-0.5, 0.5, 2)
    jx, ju = m.jacobians(x, u)
    h = 1e-6
    fx = np.stack([(m.predict(x + h * e, u) - m.predict(x - h * e, u)) / (2 * h) for e in np.eye(3)], 1)
    fu = np.stack([(m.predict(x, u + h * e) - m.predict(x, u - h * e)) / (2 * h) for e in np.eye(2)], 1)
    np.testing.assert_allclose(jx, fx, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(ju, fu, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("pattern,conditioned", [
    (two_tank_pattern(), False), (powertrain_pattern(), True), (SignPattern.free(2, 1), False),
])
def test_loss_gradient_matches_fd(pattern, conditioned):
    rng = np.random.default_rng(7)
    m = ELModel.create(pattern, 2, 2, conditioned, rng=rng, random_layers=True,
                       x_scale=np.full(pattern.n_x, 2.0), u_scale=np.full(pattern.n_u, 1.5))
    X = rng.uniform(0.0, 0.5, (8, pattern.n_x))
    U = rng.uniform(0.0, 0.5, (8, pattern.n_u))
    Xn = m.predict(X, U) + rng.normal(0, 0.05, X.shape)
    _, grads = m.loss_and_grad(X, U, Xn)
    params = m.params()
    assert set(grads) == set(params)
    keys = sorted(params)
    for _ in range(40):
        k = keys[rng.integers(len(keys))]
        idx = tuple(rng.integers(s) for s in params[k].shape)
        raw = params[k][idx]
        if "core" in k and abs(raw) < 1e-5:  # ReLU kink
            continue
        num = fd_grad(lambda: m.loss(X, U, Xn), params, k, idx)
        assert grads[k][idx] == pytest.approx(num, rel=1e-4, abs=1e-9), k


def test_structural_verification_passes_and_detects_breakage():
    m = _random_model(two_tank_pattern(), 2)
    assert m.verify_structural().passed
    m.phi.layers[0].eps = -1.0
    m.phi.layers[0].w_raw[:] = -1.0
    rep = m.verify_structural()
    assert not rep.passed and {v.role for v in rep.violations} == {"structure"}


def test_structural_against_stricter_pattern_fails():
    m = ELModel.create(SignPattern.free(2, 1), rng=0, random_layers=True)
    rep = m.verify_structural(SignPattern.monotone(2, 1))
    assert not rep.passed


def test_conditioned_requires_free_state_pattern():
    with pytest.raises(ConfigError):
        ELModel.create(two_tank_pattern(), 2, 2, conditioned=True, rng=0)


@pytest.mark.parametrize("pattern,conditioned", [(two_tank_pattern(), False),
                                                 (powertrain_pattern(), True)])
def test_sampled_signs_hold(pattern, conditioned):
    m = ELModel.create(pattern, 2, 2, conditioned, rng=5, random_layers=True)
    box = ((np.zeros(pattern.n_x), np.ones(pattern.n_x)), (np.zeros(pattern.n_u), np.ones(pattern.n_u)))
    assert check_sampled(m.predict, pattern, box, n_samples=500, batched=True).passed


def test_zero_input_maps_through_core_offset():
    pat = SignPattern.uniform(2, 1, NONNEG, NONNEG, NONNEG)
    m = _random_model(pat, 4)
    out = m.predict(np.zeros(2), np.zeros(1))
    np.testing.assert_allclose(out, m.phi.inverse(m.core.effective().c))
    assert np.all(out >= 0)


def test_save_load_roundtrip(tmp_path):
    m = ELModel.create(powertrain_pattern(), 3, 3, True, rng=1, random_layers=True)
    m.save(tmp_path / "m.json")
    m2 = ELModel.from_dict(json.loads((tmp_path / "m.json").read_text()))
    x, u = np.array([10.0, 3.0, 0.5]), np.array([50.0, -20.0, 10.0])
    np.testing.assert_array_equal(m.predict(x, u), m2.predict(x, u))
    with pytest.raises(ConfigError):
        ELModel.from_dict({"schema": "bogus"})
