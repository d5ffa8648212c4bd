"""
Element matrices against central finite differences of the element residuals.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from services.elements import (
    blood_vessel_contribution,
    blood_vessel_param_jacobian,
    flow_inlet_contribution,
    junction_contribution,
    junction_param_jacobian,
    windkessel_contribution,
)

RNG = np.random.default_rng(1234)


def vessel_residual(params, y, ydot):
    R, L, C, S = params
    return blood_vessel_contribution(R, L, C, S, y, ydot).residual(y, ydot)


def junction_residual(params, y, ydot, n):
    R, L, S = params[:n], params[n:2 * n], params[2 * n:]
    return junction_contribution(R, L, S, y, ydot).residual(y, ydot)


def random_state(size, rng):
    """States with flows away from zero, where |Q| is smooth"""
    y = rng.uniform(-100.0, 100.0, size)
    y[1::2] = rng.choice([-1.0, 1.0], size // 2) * rng.uniform(0.5, 20.0, size // 2)
    ydot = rng.uniform(-50.0, 50.0, size)
    return y, ydot


def central_difference(fn, x, h):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        cols.append((fn(xp) - fn(xm)) / (2.0 * step))
    return np.column_stack(cols)


def assert_close(analytic, numeric, rtol=1e-5):
    scale = max(np.max(np.abs(numeric)), 1.0)
    assert np.max(np.abs(analytic - numeric)) <= rtol * scale


@pytest.mark.parametrize("trial", range(200))
def test_vessel_state_jacobians_match_finite_differences(trial):
    params = RNG.uniform([1.0, 0.1, 1e-6, 0.0], [200.0, 30.0, 1e-3, 5.0])
    y, ydot = random_state(4, RNG)
    part = blood_vessel_contribution(*params, y, ydot)

    dy = central_difference(lambda v: vessel_residual(params, v, ydot), y, 1e-6)
    dydot = central_difference(lambda v: vessel_residual(params, y, v), ydot, 1e-6)
    assert_close(part.F + part.dc_dy, dy)
    assert_close(part.E + part.dc_dydot, dydot)


@pytest.mark.parametrize("trial", range(200))
def test_vessel_param_jacobian_matches_finite_differences(trial):
    params = RNG.uniform([1.0, 0.1, 1e-6, 0.0], [200.0, 30.0, 1e-3, 5.0])
    y, ydot = random_state(4, RNG)
    R, L, C, S = params
    J = blood_vessel_param_jacobian(R, C, S, y, ydot).J

    # analytic columns are ordered (R, C, L, S)
    numeric = central_difference(lambda p: vessel_residual(p, y, ydot), params, 1e-6)
    assert_close(J, numeric[:, [0, 2, 1, 3]])


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_junction_jacobians_match_finite_differences(n):
    for _ in range(100):
        params = RNG.uniform(0.0, 10.0, 3 * n)
        y, ydot = random_state(2 + 2 * n, RNG)
        part = junction_contribution(params[:n], params[n:2 * n], params[2 * n:], y, ydot)

        dy = central_difference(lambda v: junction_residual(params, v, ydot, n), y, 1e-6)
        dydot = central_difference(lambda v: junction_residual(params, y, v, n), ydot, 1e-6)
        assert_close(part.F + part.dc_dy, dy)
        assert_close(part.E + part.dc_dydot, dydot)

        J = junction_param_jacobian(y, ydot).J
        numeric = central_difference(lambda p: junction_residual(p, y, ydot, n), params, 1e-6)
        assert_close(J, numeric)


def test_junction_stenosis_derivative_sign():
    y = np.array([100.0, 3.0, 90.0, 3.0])
    part = junction_contribution([0.0], [0.0], [2.0], y, np.zeros(4))
    assert part.dc_dy[1, 3] == pytest.approx(-2.0 * 2.0 * 3.0)
    assert junction_param_jacobian(y, np.zeros(4)).J[1, 2] == pytest.approx(-9.0)


def test_zero_parameter_junction_is_plain_connection():
    y = np.array([80.0, 6.0, 80.0, 2.0, 80.0, 4.0])
    part = junction_contribution([0.0, 0.0], [0.0, 0.0], [0.0, 0.0], y, np.zeros(6))
    np.testing.assert_allclose(part.residual(y, np.zeros(6)), 0.0)


def test_vessel_param_jacobian_broadcasts_over_time():
    y = RNG.uniform(1.0, 10.0, (7, 4))
    ydot = RNG.uniform(-1.0, 1.0, (7, 4))
    J = blood_vessel_param_jacobian(10.0, 1e-4, 0.5, y, ydot).J
    assert J.shape == (7, 2, 4)
    single = blood_vessel_param_jacobian(10.0, 1e-4, 0.5, y[3], ydot[3]).J
    np.testing.assert_allclose(J[3], single)


@given(
    Rp=st.floats(0.0, 1e3),
    Rd=st.floats(1.0, 1e4),
    Q=st.floats(-50.0, 50.0),
    Pref=st.floats(-100.0, 100.0),
)
def test_windkessel_steady_pressure(Rp, Rd, Q, Pref):
    P = (Rp + Rd) * Q + Pref
    part = windkessel_contribution(Rp, Rd, 1e-3, Pref, np.array([P, Q]), np.zeros(2))
    r = part.residual(np.array([P, Q]), np.zeros(2))
    assert abs(r[0]) <= 1e-9 * max(1.0, abs(P))


@settings(max_examples=50)
@given(q=st.floats(-100.0, 100.0))
def test_flow_inlet_residual_vanishes_at_prescribed_flow(q):
    part = flow_inlet_contribution(q)
    assert part.residual(np.array([123.0, q]), np.zeros(2))[0] == pytest.approx(0.0, abs=1e-12)


def test_stenosis_sign_at_zero_flow():
    part = blood_vessel_contribution(10.0, 1.0, 1e-4, 3.0, np.array([1.0, 0.0, 1.0, 0.0]), np.array([0.0, 2.0, 0.0, 0.0]))
    assert part.dc_dy[0, 1] == 0.0
    assert part.dc_dy[1, 1] == 0.0
