import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import active_set_qp
from signdyn.el_model import ConfigError, ELModel
from signdyn.mpc import (
    MpcController, MpcSpec, PowertrainMpcConfig, build_qp, closed_loop, control_step,
    lipschitz_probe,
)
from signdyn.qp import QPSolver
from signdyn.signs import SignPattern, powertrain_pattern, two_tank_pattern


def _linear_model(seed=0):
    return ELModel.linear(two_tank_pattern(), np.random.default_rng(seed))


def _nonlinear_model(seed=0, conditioned=False):
    pat = powertrain_pattern() if conditioned else two_tank_pattern()
    return ELModel.create(pat, conditioned=conditioned, rng=seed, random_layers=True)


def condensed_oracle(m, spec, x0):
    """Input-only (condensed) QP in original coordinates for an identity-transform linear model."""
    lin = m.core.effective()
    N, n_x, n_u = spec.horizon, m.n_x, m.n_u
    # x(t) = F_t x0 + G_t U + h_t
    F, G, h = [np.eye(n_x)], [np.zeros((n_x, N * n_u))], [np.zeros(n_x)]
    for t in range(N):
        Gt = lin.A @ G[-1]
        Gt[:, t * n_u:(t + 1) * n_u] += lin.B
        F.append(lin.A @ F[-1])
        G.append(Gt)
        h.append(lin.A @ h[-1] + lin.c)
    P = np.zeros((N * n_u, N * n_u))
    q = np.zeros(N * n_u)
    for t in range(1, N):
        W = np.diag(spec.w_req)
        off = F[t] @ x0 + h[t] - spec.x_req[t]
        P += 2 * G[t].T @ W @ G[t]
        q += 2 * G[t].T @ W @ off
    P += 2 * np.diag(np.tile(spec.w_u, N))
    rows, lo, hi = [np.eye(N * n_u)], [spec.u_lo.ravel()], [spec.u_hi.ravel()]
    for t in range(1, N + 1):
        rows.append(G[t])
        off = F[t] @ x0 + h[t]
        lo.append(spec.x_lo[t] - off)
        hi.append(spec.x_hi[t] - off)
    A, l, u = np.vstack(rows), np.concatenate(lo), np.concatenate(hi)
    keep = np.isfinite(l) | np.isfinite(u)
    return active_set_qp(P, q, A[keep], l[keep], u[keep])


@pytest.mark.parametrize("seed", range(4))
def test_matches_condensed_oracle(seed):
    rng = np.random.default_rng(seed)
    m = _linear_model(seed)
    spec = MpcSpec(3, 2, 1, w_req=[0.0, 1.0], w_u=0.05, x_req=[0.0, rng.uniform(0.5, 2.0)],
                   u_lo=-1.0, u_hi=1.5, x_hi=[np.inf, 1.2])
    x0 = rng.uniform(0.0, 1.0, 2)
    ref = condensed_oracle(m, spec, x0)
    assert ref is not None
    u0, diag = control_step(m, spec, x0)
    assert diag.solved
    np.testing.assert_allclose(diag.predicted_u.ravel(), ref[0], atol=1e-6)
    np.testing.assert_allclose(u0, ref[0][:1], atol=1e-6)
    # with identity transforms the two cost evaluations coincide
    assert diag.cost_xi == pytest.approx(diag.cost_x, rel=1e-6, abs=1e-9)


def test_effort_only_gives_zero_input():
    m = _nonlinear_model(1)
    spec = MpcSpec(5, 2, 1, w_req=0.0, w_u=1.0, u_lo=-3.0, u_hi=3.0)
    u0, diag = control_step(m, spec, [0.2, 0.3])
    assert diag.solved
    np.testing.assert_allclose(u0, 0.0, atol=1e-7)


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.booleans())
def test_prediction_replays_on_model(seed, conditioned):
    rng = np.random.default_rng(seed)
    m = _nonlinear_model(seed % 50, conditioned)
    n_x, n_u = m.n_x, m.n_u
    spec = MpcSpec(4, n_x, n_u, w_req=1.0, w_u=0.1, x_req=rng.uniform(-0.5, 0.5, n_x),
                   u_lo=-2.0, u_hi=2.0)
    x0 = rng.uniform(-0.5, 0.5, n_x)
    u0, diag = control_step(m, spec, x0)
    assert diag.solved
    X = [x0]
    for t in range(spec.horizon):
        X.append(m.predict(X[-1], diag.predicted_u[t]))
    np.testing.assert_allclose(np.array(X), diag.predicted_x, atol=1e-8, rtol=1e-8)
    assert np.all(u0 >= -2.0) and np.all(u0 <= 2.0)


def test_warm_start_reaches_same_solution():
    m = _nonlinear_model(3)
    spec = MpcSpec(8, 2, 1, w_req=[0.0, 1.0], w_u=1e-3, x_req=[0.0, 0.4], u_lo=-1.0, u_hi=1.0)
    u_cold, d_cold = control_step(m, spec, [0.1, 0.1])
    ctl = MpcController(m, spec)
    ctl([0.3, -0.2])
    u_warm, d_warm = ctl([0.1, 0.1])
    np.testing.assert_allclose(u_warm, u_cold, atol=1e-6)
    np.testing.assert_allclose(d_warm.predicted_x, d_cold.predicted_x, atol=1e-6)
    ctl.reset()
    assert ctl.warm is None


def test_policy_is_lipschitz():
    m = _nonlinear_model(4)
    spec = MpcSpec(6, 2, 1, w_req=1.0, w_u=1e-2, x_req=[0.2, 0.2], u_lo=-1.0, u_hi=1.0)
    policy = lambda x: control_step(m, spec, x)[0]
    L_small = lipschitz_probe(policy, np.array([0.1, 0.1]), 1e-4, n=20)
    L_big = lipschitz_probe(policy, np.array([0.1, 0.1]), 1e-2, n=20)
    assert np.isfinite(L_small) and L_small < 1e3
    assert L_small <= 10 * max(L_big, 1e-6)


def test_soft_bound_weight_pulls_state_inside():
    m = _linear_model(5)
    viol = []
    for w in (0.0, 1.0, 1e4):
        spec = MpcSpec(6, 2, 1, w_req=[1.0, 0.0], w_u=1e-3, w_soft=[w, 0.0], x_req=[2.0, 0.0],
                       x_soft_hi=[1.0, np.inf], u_lo=-5, u_hi=5)
        _, diag = control_step(m, spec, [0.0, 0.0])
        assert diag.solved
        viol.append(np.max(np.maximum(diag.predicted_x[1:-1, 0] - 1.0, 0.0)))
    assert viol[0] > viol[1] > viol[2]
    assert viol[2] < 1e-3


def test_soft_lower_bound_at_initial_state_is_reported_not_infeasible():
    m = _linear_model(6)
    spec = MpcSpec(4, 2, 1, w_req=[0.0, 1.0], w_u=1e-3, w_soft=[1.0, 0.0], x_req=[0.0, 0.5],
                   x_soft_lo=[0.5, -np.inf], u_lo=-1, u_hi=1)
    _, diag = control_step(m, spec, [0.0, 0.0])  # starts below the soft bound
    assert diag.solved


def test_hard_state_bound_infeasible():
    m = _linear_model(7)
    spec = MpcSpec(2, 2, 1, w_u=1.0, u_lo=0.0, u_hi=0.0, x_lo=[5.0, 5.0])
    _, diag = control_step(m, spec, [0.0, 0.0])
    assert diag.status == "primal_infeasible"


def test_qp_validation_errors():
    m = _linear_model()
    with pytest.raises(ConfigError):
        build_qp(m, MpcSpec(3, 2, 1, w_req=0.0, w_u=0.0), [0, 0])
    with pytest.raises(ConfigError):
        build_qp(m, MpcSpec(3, 3, 1), [0, 0])
    with pytest.raises(ConfigError):
        MpcSpec(0, 2, 1)
    with pytest.raises(ConfigError):
        MpcSpec(3, 2, 1, u_lo=1.0, u_hi=0.0)
    with pytest.raises(ConfigError):
        MpcSpec(3, 2, 1, w_u=-1.0)
    with pytest.raises(ConfigError):
        MpcSpec(3, 2, 1, x_req=np.zeros((2, 2)))


def test_conditioned_input_bounds_only_first_stage():
    m = _nonlinear_model(8, conditioned=True)
    spec = MpcSpec(4, 3, 3, w_req=1.0, w_u=1e-3, u_lo=-1.0, u_hi=1.0)
    kinds = [k for k in build_qp(m, spec, [0.1, 0.2, 0.3]).row_kinds if k[0] == "ubound"]
    assert {k[1] for k in kinds} == {0}
    spec.psi_bound_fallback = True
    kinds = [k for k in build_qp(m, spec, [0.1, 0.2, 0.3]).row_kinds if k[0] == "ubound"]
    assert {k[1] for k in kinds} == {0, 1, 2, 3}


def test_spec_json_roundtrip(tmp_path):
    spec = PowertrainMpcConfig().spec(np.linspace(0, 10, 11))
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    back = MpcSpec.from_json(path)
    for name in ("x_req", "x_lo", "x_hi", "u_lo", "u_hi", "x_soft_lo", "w_u", "x_nonneg"):
        np.testing.assert_array_equal(getattr(back, name), getattr(spec, name))
    assert back.horizon == 10


def test_powertrain_spec_shapes():
    cfg = PowertrainMpcConfig()
    spec = cfg.spec(np.full(11, 20.0))
    assert spec.u_hi[0, 1] == pytest.approx(100.0)  # power limit 2 kW at 20 m/s
    assert spec.u_lo[0, 1] == pytest.approx(-100.0)
    assert spec.x_hi[0, 2] == 0.9 and spec.x_lo[0, 2] == 0.3
    with pytest.raises(ConfigError):
        cfg.spec(np.zeros(5))
    fn = cfg.spec_fn(np.arange(15.0))
    np.testing.assert_array_equal(fn(10).x_req[:, 1], [10, 11, 12, 13, 14] + [14] * 6)


def test_closed_loop_log_and_csv(tmp_path):
    m = _linear_model(9)
    spec = MpcSpec(5, 2, 1, w_req=[0.0, 1.0], w_u=1e-3, u_lo=-1, u_hi=1)
    ref = np.tile([0.0, 0.5], (20, 1))
    ctl = MpcController(m, spec, reference=ref, solver=QPSolver())
    log = closed_loop(lambda x, u: m.predict(x, u), ctl, [0.0, 0.0], 12)
    assert log.steps == 12 and log.states.shape == (13, 2) and log.error is None
    assert all(s == "solved" for s in log.status)
    log.to_csv(tmp_path / "cl.csv")
    lines = (tmp_path / "cl.csv").read_text().splitlines()
    assert lines[0] == "step,x_1,x_2,u_1,solver_status,primal_res,dual_res,solve_iterations"
    assert len(lines) == 13


def test_closed_loop_partial_log_on_plant_failure():
    m = _linear_model(10)
    spec = MpcSpec(3, 2, 1, w_u=1.0)
    calls = []

    def plant(x, u):
        calls.append(1)
        if len(calls) == 3:
            raise ValueError("negative level")
        return m.predict(x, u)

    log = closed_loop(plant, MpcController(m, spec), [0.1, 0.1], 10)
    assert log.steps == 2 and "negative level" in log.error
