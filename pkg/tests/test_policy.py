import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apgtrack import autodiff as ad
from apgtrack import nn
from apgtrack import policy as pol
from apgtrack.dynamics.quadrotor import hover_state, observation


def zeroed(params):
    return params.with_flat(np.zeros(params.n_params))


def fw_params(seed=0):
    return pol.initialize("fixedwing", seed, normalizer=(np.zeros(12), np.ones(12)))


def quad_inputs(rng, n=4):
    s = hover_state(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)))
    return observation(s), rng.normal(size=(n, 10, 6))


# -- cartpole ----------------------------------------------------------------

def test_cartpole_zero_weights():
    out = pol.forward_cartpole(zeroed(pol.initialize("cartpole")), np.ones((3, 4)))
    assert out.shape == (3, 10, 1)
    assert np.array_equal(out, np.zeros((3, 10, 1)))


def test_cartpole_layers():
    p = pol.initialize("cartpole")
    assert [l.out_width for l in p.layers] == [32, 64, 64, 32, 10]
    assert all(l.activation == "tanh" for l in p.layers)
    assert p.norm_mean is None  # raw state input


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), st.integers(0, 50))
def test_cartpole_outputs_bounded(state, seed):
    out = pol.forward_cartpole(pol.initialize("cartpole", seed), np.array(state))
    assert np.all(np.abs(out) <= 1.0)


def test_cartpole_shape_error():
    with pytest.raises(pol.ConfigurationError):
        pol.forward_cartpole(pol.initialize("cartpole"), np.ones(5))


# -- quadrotor ---------------------------------------------------------------

def test_quadrotor_zero_weights_midpoint(rng):
    p = zeroed(pol.initialize("quadrotor"))
    obs, ref = quad_inputs(rng)
    raw = pol.forward_quadrotor(p, obs, ref)
    assert raw.shape == (4, 10, 4)
    assert np.allclose(raw, 0.5)
    act = pol.scale_actions(p, raw)
    assert np.allclose(act[..., 0], (2.21 + 17.31) / 2)  # 9.76 N, not 9.81
    assert np.allclose(act[..., 1:], 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.1, 100.0))
def test_quadrotor_actions_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    p = pol.initialize("quadrotor", seed % 13)
    p = p.with_flat(p.flat() * scale)
    obs, ref = quad_inputs(rng)
    act = pol.scale_actions(p, pol.forward_quadrotor(p, obs * scale, ref * scale))
    assert np.all(act[..., 0] >= 2.21) and np.all(act[..., 0] <= 17.31)
    assert np.all(np.abs(act[..., 1:]) <= 0.5)


def test_quadrotor_architecture():
    p = pol.initialize("quadrotor")
    conv = p["ref"]
    assert conv.kernel == 3 and conv.out_width == 20
    assert p["h0"].in_width == 64 + 8 * 20
    assert p["out"].out_width == 40


def test_quadrotor_reference_rows(rng):
    obs, _ = quad_inputs(rng)
    with pytest.raises(pol.ConfigurationError):
        pol.forward_quadrotor(pol.initialize("quadrotor"), obs, rng.normal(size=(4, 9, 6)))


def test_quadrotor_conv_matches_manual(rng):
    """Valid 1-D convolution equals a per-window dense product."""
    p = pol.initialize("quadrotor", 2)
    ref = rng.normal(size=(10, 6))
    out = p["ref"](ref)
    w, b = p["ref"].weight, p["ref"].bias
    manual = np.stack([np.tanh(w @ ref[i:i + 3].ravel() + b) for i in range(8)])
    assert np.allclose(out, manual)


def test_reference_features_relative():
    s = hover_state((1.0, 2.0, 3.0))
    win = np.zeros((12, 6))
    win[:, 0:3] = [4.0, 2.0, 3.0]
    win[:, 3:6] = [1.0, 0.0, 0.0]
    f = pol.quadrotor_reference_features(s, win)
    assert f.shape == (10, 6)
    assert np.allclose(f[:, 0:3], [3.0, 0.0, 0.0])
    assert np.allclose(f[:, 3:6], [1.0, 0.0, 0.0])


def test_initial_quadrotor_near_midpoint():
    p = pol.initialize("quadrotor", 0)
    obs = observation(hover_state())
    act = pol.scale_actions(p, pol.forward_quadrotor(p, obs, np.zeros((10, 6))))
    assert np.all(np.abs(act[:, 0] - 9.76) < 0.5)


# -- fixed wing --------------------------------------------------------------

def test_fixedwing_zero_weights():
    p = zeroed(fw_params())
    act = pol.scale_actions(p, pol.forward_fixedwing(p, np.ones(12), np.ones(3)))
    assert act.shape == (10, 4)
    assert np.allclose(act[:, 0], 3.5)
    assert np.allclose(act[:, 1:], 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.1, 100.0))
def test_fixedwing_aileron_bound(seed, scale):
    rng = np.random.default_rng(seed)
    p = fw_params(seed % 11)
    p = p.with_flat(p.flat() * scale)
    act = pol.scale_actions(p, pol.forward_fixedwing(p, rng.normal(size=(5, 12)) * scale,
                                                   rng.normal(size=(5, 3)) * scale))
    assert np.all(np.abs(act[..., 2]) <= np.radians(2.5))
    assert np.all(np.abs(act[..., 1]) <= np.radians(20.0))
    assert np.all((act[..., 0] >= 0) & (act[..., 0] <= 7.0))


def test_fixedwing_needs_normalizer():
    p = pol.initialize("fixedwing")
    with pytest.raises(pol.ConfigurationError):
        pol.forward_fixedwing(p, np.ones(12), np.ones(3))


def test_normalized_mean_is_zero(rng):
    data = rng.normal(3.0, 2.0, size=(2000, 12))
    mean, std = pol.compute_normalizer(data)
    p = pol.initialize("fixedwing", normalizer=(mean, std))
    assert np.allclose(pol.normalize_state(p, mean), 0.0)
    normed = pol.normalize_state(p, data)
    assert np.abs(normed.mean(axis=0)).max() < 1e-9


def test_normalizer_constant_and_pm1():
    mean, std = pol.compute_normalizer(np.full((1000, 3), 2.0))
    assert np.allclose(std, pol.STD_FLOOR)
    assert np.allclose((np.full(3, 2.0) - mean) / std, 0.0)
    pm = np.tile([[-1.0], [1.0]], (500, 4))
    mean, std = pol.compute_normalizer(pm)
    assert np.allclose(mean, 0.0) and np.allclose(std, 1.0)


def test_normalizer_empty():
    with pytest.raises(pol.ConfigurationError):
        pol.compute_normalizer(np.zeros((0, 12)))


# -- initialization and structure ---------------------------------------------

@pytest.mark.parametrize("system", pol.SYSTEMS)
def test_initialize_deterministic(system):
    a, b = pol.initialize(system, 5), pol.initialize(system, 5)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), pol.initialize(system, 6).flat())


@pytest.mark.parametrize("system", pol.SYSTEMS)
def test_initialize_ranges(system):
    p = pol.initialize(system, 1)
    for layer in p.layers:
        bound = np.sqrt(1.0 / layer.in_width)
        assert np.all(np.abs(layer.weight) <= bound)
        assert np.array_equal(layer.bias, np.zeros(layer.out_width))
    lo, hi = p.action_low, p.action_high
    assert np.all(lo < hi)
    p.check_architecture()


def test_zero_fan_in_rejected(rng):
    with pytest.raises(nn.ConfigurationError):
        nn.init_layer(rng, "bad", 0, 3)


def test_bounds_must_be_ordered():
    p = pol.initialize("cartpole")
    with pytest.raises(pol.ConfigurationError):
        pol.PolicyParameters(layers=p.layers, system="cartpole",
                             action_low=np.array([1.0]), action_high=np.array([-1.0]))


def test_architecture_mismatch_detected():
    p = pol.initialize("quadrotor")
    p.system = "fixedwing"
    with pytest.raises(pol.ConfigurationError):
        p.check_architecture()


def test_forward_is_pure(rng):
    p = fw_params(3)
    before = p.flat().copy()
    x, r = rng.normal(size=(2, 12)), rng.normal(size=(2, 3))
    a = pol.forward_fixedwing(p, x, r)
    b = pol.forward_fixedwing(p, x, r)
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(p.flat(), before)


# -- output gradients vs finite differences -------------------------------------

def _forward(system, params, x):
    if system == "cartpole":
        return pol.forward_cartpole(params, x[0])
    if system == "quadrotor":
        return pol.forward_quadrotor(params, x[0], x[1])
    return pol.forward_fixedwing(params, x[0], x[1])


@pytest.mark.parametrize("system", pol.SYSTEMS)
def test_output_gradient_fd(system, rng):
    if system == "cartpole":
        p, x = pol.initialize(system, 0), (rng.normal(size=(3, 4)),)
    elif system == "quadrotor":
        p, x = pol.initialize(system, 0), quad_inputs(rng, 3)
    else:
        p, x = fw_params(0), (rng.normal(size=(3, 12)), rng.normal(size=(3, 3)))
    w = rng.normal(size=np.shape(_forward(system, p, x)))
    tape = ad.Tape()
    lifted, vars_ = p.on_tape(tape)
    g = tape.backward(ad.sum(_forward(system, lifted, x) * w))
    analytic = np.concatenate([g[v.id].ravel() for v in vars_])
    flat = p.flat()
    h = 1e-6
    for i in rng.choice(flat.size, 40, replace=False):
        e = np.zeros_like(flat)
        e[i] = h
        fd = (np.sum(_forward(system, p.with_flat(flat + e), x) * w)
              - np.sum(_forward(system, p.with_flat(flat - e), x) * w)) / (2 * h)
        if abs(analytic[i]) > 1e-5:
            assert abs(analytic[i] - fd) / abs(analytic[i]) < 1e-4
        else:
            assert abs(analytic[i] - fd) < 1e-7
