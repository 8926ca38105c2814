import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import root

from apgtrack import autodiff as ad
from apgtrack.dynamics import (
    CartPoleDynamics,
    DragPerturbed,
    FixedWingDynamics,
    InvalidParameterError,
    InvalidStateError,
    QuadrotorDynamics,
    ResidualDynamics,
    ResidualModel,
    cartpole_step,
    drag_perturbed,
    fixedwing_step,
    hover_state,
    observation,
    quadrotor_step,
    residual_step,
)
from apgtrack.dynamics.fixedwing import airspeed, initial_state
from apgtrack.dynamics.quadrotor import orthonormality_error

from conftest import central_diff


# -- cartpole -----------------------------------------------------------

def test_cartpole_upright_is_fixed_point():
    assert np.array_equal(cartpole_step(np.zeros(4), 0.0), np.zeros(4))


def test_cartpole_tilted_pole_falls():
    s = cartpole_step(np.array([0.0, 0.0, 0.1, 0.0]), 0.0)
    assert s[3] > 0


def lagrange_accelerations(alpha, alpha_dot, force, mc=1.0, mp=0.1, l=0.5, g=9.81):
    """Solve the coupled cart / uniform-rod equations of motion as a 2x2 system."""
    m = mc + mp
    a = np.array([[m, mp * l * np.cos(alpha)],
                  [np.cos(alpha), 4.0 / 3.0 * l]])
    b = np.array([force + mp * l * alpha_dot ** 2 * np.sin(alpha), g * np.sin(alpha)])
    return np.linalg.solve(a, b)


@pytest.mark.parametrize("state,cmd", [
    ((0.0, 0.0, 0.0, 0.0), 1.0),
    ((0.3, -0.5, 0.2, 1.0), -0.4),
    ((0.0, 1.0, -0.7, -2.0), 0.8),
])
def test_cartpole_matches_lagrangian_oracle(state, cmd):
    dyn = CartPoleDynamics()
    x_acc, a_acc = dyn.accelerations(np.array(state), np.array([cmd]))
    ex, ea = lagrange_accelerations(state[2], state[3], 30.0 * cmd)
    assert x_acc == pytest.approx(ex, rel=1e-12)
    assert a_acc == pytest.approx(ea, rel=1e-12)


def test_cartpole_full_command_from_rest():
    # With the pole coupled, the rod's reaction makes the effective mass
    # m_c + m_p / 4 rather than m_c + m_p.
    s = cartpole_step(np.zeros(4), 1.0)
    x_acc = s[1] / 0.05
    ex, _ = lagrange_accelerations(0.0, 0.0, 30.0)
    assert x_acc == pytest.approx(ex, rel=1e-12)
    assert x_acc == pytest.approx(30.0 / (1.0 + 0.1 / 4), rel=1e-12)


def test_cartpole_rejects_nan():
    with pytest.raises(InvalidStateError):
        cartpole_step(np.array([0.0, np.nan, 0.0, 0.0]), 0.0)


# -- quadrotor ----------------------------------------------------------

def test_hover_is_stationary():
    s = quadrotor_step(hover_state(), np.array([9.81, 0.0, 0.0, 0.0]))
    assert np.allclose(s, hover_state(), atol=1e-15)


def test_free_fall_velocity():
    s = quadrotor_step(hover_state(), np.array([0.0, 0.0, 0.0, 0.0]))
    assert s[5] == pytest.approx(-0.981)


def test_max_thrust_acceleration():
    s = quadrotor_step(hover_state(), np.array([17.31, 0.0, 0.0, 0.0]))
    assert s[5] / 0.1 == pytest.approx(7.5)


def test_rk4_free_fall_position_exact():
    dyn = QuadrotorDynamics(integrator="rk4")
    s = dyn.step(hover_state(), np.zeros(4))
    assert s[2] == pytest.approx(-0.5 * 9.81 * 0.01, rel=1e-12)


def test_rate_lag_first_order():
    s = quadrotor_step(hover_state(), np.array([9.81, 0.5, 0.0, 0.0]))
    assert s[15] == pytest.approx(0.1 * 10.0 * 0.5)


def test_non_orthonormal_rotation_rejected():
    s = hover_state()
    s[6] = 1.1
    with pytest.raises(InvalidStateError):
        quadrotor_step(s, np.array([9.81, 0, 0, 0]))


def test_reflection_rejected():
    s = hover_state()
    s[14] = -1.0
    with pytest.raises(InvalidStateError):
        quadrotor_step(s, np.array([9.81, 0, 0, 0]))


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_rotation_stays_orthonormal(seed):
    rng = np.random.default_rng(seed)
    dyn = QuadrotorDynamics()
    s = hover_state()
    for _ in range(1000):
        a = np.concatenate([rng.uniform(2.21, 17.31, 1), rng.uniform(-0.5, 0.5, 3)])
        s = dyn.step(s, a)
    assert orthonormality_error(s) < 1e-6
    r = s[6:15].reshape(3, 3)
    assert np.linalg.det(r) > 0


def test_observation_layout():
    s = hover_state(velocity=(1.0, 2.0, 3.0))
    obs = observation(s)
    assert obs.shape == (15,)
    assert np.allclose(obs[0:3], [1, 2, 3]) and np.allclose(obs[3:6], [1, 2, 3])
    assert np.allclose(obs[6:12], [1, 0, 0, 0, 1, 0])


# -- fixed wing ---------------------------------------------------------

def trim(speed=11.5):
    """Level-flight trim (alpha, elevator, thrust) found by root finding."""
    dyn = FixedWingDynamics()

    def residual(z):
        alpha, de, thrust = z
        s = initial_state(speed)
        s[3], s[5], s[7] = speed * np.cos(alpha), speed * np.sin(alpha), alpha
        d = dyn.derivative(s, np.array([thrust, de, 0.0, 0.0]))
        return [d[3], d[5], d[10]]

    sol = root(residual, [0.05, -0.05, 2.0], tol=1e-12)
    assert sol.success
    alpha, de, thrust = sol.x
    s = initial_state(speed)
    s[3], s[5], s[7] = speed * np.cos(alpha), speed * np.sin(alpha), alpha
    return s, np.array([thrust, de, 0.0, 0.0])


def test_trim_holds_straight_flight():
    s, a = trim()
    lo, hi = FixedWingDynamics().action_bounds()
    assert np.all(a >= lo) and np.all(a <= hi)
    nxt = fixedwing_step(s, a)
    assert abs(nxt[7] - s[7]) < 1e-3
    assert abs(nxt[2] - s[2]) < 1e-3


def test_zero_thrust_slows_down():
    s, a = trim()
    a[0] = 0.0
    speeds = [airspeed(s)]
    for _ in range(20):
        s = fixedwing_step(s, a)
        speeds.append(airspeed(s))
    assert np.all(np.diff(speeds) < 0)


def test_positive_elevator_pitches_down():
    s, a = trim()
    a[1] += np.radians(5.0)
    nxt = fixedwing_step(s, a)
    # C_m_delta_e < 0: trailing-edge-down elevator gives a nose-down rate
    assert FixedWingDynamics().params.C_m_delta_e < 0
    assert nxt[10] < 0


def test_stall_floor():
    s = initial_state(0.05)
    with pytest.raises(InvalidStateError):
        fixedwing_step(s, np.array([1.0, 0.0, 0.0, 0.0]))


def test_pitch_validity():
    s = initial_state()
    s[7] = np.pi / 2
    with pytest.raises(InvalidStateError):
        fixedwing_step(s, np.zeros(4))


# -- Jacobians vs finite differences -------------------------------------

def _random_points(system, rng, n):
    if system == "cartpole":
        return CartPoleDynamics(), rng.normal(scale=0.5, size=(n, 4)), rng.uniform(-1, 1, (n, 1))
    if system == "quadrotor":
        dyn = QuadrotorDynamics()
        s = np.zeros((n, 18))
        for i in range(n):
            q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
            q *= np.sign(np.linalg.det(q))
            s[i] = np.concatenate([rng.normal(size=6), q.ravel(), rng.normal(scale=0.3, size=3)])
        a = np.column_stack([rng.uniform(2.21, 17.31, n), rng.uniform(-0.5, 0.5, (n, 3))])
        return dyn, s, a
    dyn = FixedWingDynamics()
    s = np.column_stack([
        rng.normal(size=(n, 3)), rng.uniform(9, 14, n), rng.normal(scale=0.5, size=(n, 2)),
        rng.normal(scale=0.3, size=(n, 3)), rng.normal(scale=0.3, size=(n, 3))])
    lo, hi = dyn.action_bounds()
    return dyn, s, rng.uniform(lo, hi, (n, 4))


@pytest.mark.parametrize("system", ["cartpole", "quadrotor", "fixedwing"])
def test_step_jacobian_fd(system):
    rng = np.random.default_rng(7)
    dyn, s, a = _random_points(system, rng, 100)
    ds = s.shape[1]
    h = 1e-6
    for j in range(ds):
        tape = ad.Tape()
        sv, av = tape.variable(s), tape.variable(a)
        g = tape.backward(ad.sum(dyn.step(sv, av)[:, j]))
        for x, gx, which in ((s, g[sv.id], 0), (a, g[av.id], 1)):
            fd = np.zeros_like(x)
            for k in range(x.shape[1]):
                e = np.zeros_like(x)
                e[:, k] = h
                if which == 0:
                    fp, fm = dyn.step(s + e, a), dyn.step(s - e, a)
                else:
                    fp, fm = dyn.step(s, a + e), dyn.step(s, a - e)
                fd[:, k] = (fp[:, j] - fm[:, j]) / (2 * h)
            big = np.abs(gx) > 1e-4
            assert np.all(np.abs(gx - fd)[~big] < 1e-6), (system, j, which)
            assert np.all(np.abs(gx - fd)[big] / np.abs(gx[big]) < 1e-4), (system, j, which)


# -- drag ---------------------------------------------------------------

def test_drag_zero_bitwise_identical(rng):
    for dyn, s, a in (_random_points("quadrotor", rng, 5), _random_points("fixedwing", rng, 5)):
        assert np.array_equal(DragPerturbed(dyn, 0.0).step(s, a), dyn.step(s, a))


def test_drag_hover_unaffected():
    a = np.array([9.81, 0, 0, 0])
    assert np.array_equal(drag_perturbed(hover_state(), a, QuadrotorDynamics()),
                          QuadrotorDynamics().step(hover_state(), a))


def test_drag_velocity_reduction():
    s = hover_state(velocity=(1.0, 0.0, 0.0))
    a = np.array([9.81, 0, 0, 0])
    base = QuadrotorDynamics()
    diff = base.step(s, a)[3] - drag_perturbed(s, a, base, 0.3)[3]
    assert diff == pytest.approx(0.03, rel=1e-12)


def test_negative_drag_rejected():
    with pytest.raises(InvalidParameterError):
        DragPerturbed(QuadrotorDynamics(), -0.1)


def test_drag_needs_3d_velocity():
    with pytest.raises(InvalidParameterError):
        DragPerturbed(CartPoleDynamics(), 0.3)


# -- residual -----------------------------------------------------------

def test_zero_residual_matches_base(rng):
    for system in ("quadrotor", "fixedwing", "cartpole"):
        dyn, s, a = _random_points(system, rng, 4)
        res = ResidualModel.initialize(system, 0)
        assert np.allclose(residual_step(s, a, dyn, res), dyn.step(s, a), atol=1e-15)


def test_residual_dimension_mismatch():
    with pytest.raises(ValueError):
        ResidualDynamics(QuadrotorDynamics(), ResidualModel.initialize("fixedwing", 0))


def test_residual_parameter_gradient_fd(rng):
    dyn, s, a = _random_points("quadrotor", rng, 6)
    res = ResidualModel.initialize("quadrotor", 1)
    res = res.with_flat(res.flat() + rng.normal(scale=0.05, size=res.n_params))
    target = dyn.step(s, a) + rng.normal(scale=0.1, size=(6, 18))

    def loss_np(flat):
        return float(np.sum((residual_step(s, a, dyn, res.with_flat(flat)) - target) ** 2))

    tape = ad.Tape()
    lifted, vars_ = res.on_tape(tape)
    out = ResidualDynamics(dyn, lifted).step(s, a)
    g = tape.backward(ad.sum((out - target) ** 2))
    analytic = np.concatenate([g[v.id].ravel() for v in vars_])
    idx = rng.choice(res.n_params, 40, replace=False)
    flat = res.flat()
    for i in idx:
        fd = central_diff(lambda v: loss_np(np.concatenate([flat[:i], v, flat[i + 1:]])),
                          flat[i:i + 1], h=1e-6)[0]
        if abs(analytic[i]) > 1e-4:
            assert abs(analytic[i] - fd) / abs(analytic[i]) < 1e-4
        else:
            assert abs(analytic[i] - fd) < 1e-6


def test_default_start_is_neutral_trim():
    dyn = FixedWingDynamics()
    s = initial_state()
    neutral = np.array([3.5, 0.0, 0.0, 0.0])
    for _ in range(20):
        s = dyn.step(s, neutral)
    assert abs(s[2]) < 0.01 and abs(s[7] - initial_state()[7]) < 1e-3
    assert airspeed(s) == pytest.approx(11.5, abs=0.01)
