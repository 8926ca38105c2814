import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apgtrack import policy as pol
from apgtrack import reference as rf
from apgtrack import tasks as tk
from apgtrack.dynamics.quadrotor import hover_state


# -- polynomial references --------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(3.0, 5.0))
def test_polynomial_respects_limits(seed, v_max):
    cfg = rf.PolynomialConfig(v_max=v_max)
    path = rf.generate_path(seed, cfg)
    t = np.linspace(0, path.duration, 2001)
    assert np.linalg.norm(path.evaluate(t, 1), axis=1).max() <= v_max
    assert np.linalg.norm(path.evaluate(t, 2), axis=1).max() <= cfg.a_max
    assert rf.tilt_rate(path) <= cfg.max_tilt_rate
    traj = rf.sample_path(path, cfg.dt)
    assert rf.validate_trajectory(traj, v_max)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_positions_consistent_with_velocities(seed):
    traj = rf.generate_polynomial(seed, v_max=4.0)
    fd = np.diff(traj.positions, axis=0) / traj.dt
    mismatch = np.linalg.norm(fd - traj.velocities[:-1], axis=1)
    assert mismatch.max() < 0.1 * 4.0


def test_generate_is_deterministic():
    a = rf.generate_polynomial(42)
    b = rf.generate_polynomial(42)
    assert np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states, rf.generate_polynomial(43).states)


def test_shape_and_start():
    traj = rf.generate_polynomial(3, duration_s=10.0, dt=0.1)
    assert traj.states.shape == (101, 6)
    assert np.allclose(traj.states[0], 0.0)  # starts at rest at the origin


def test_joins_are_c2_continuous():
    path = rf.generate_path(11, rf.PolynomialConfig(n_waypoints=5))
    for k in path.knots[1:-1]:
        for d in (0, 1, 2):
            left = path.evaluate(k - 1e-12, d)
            right = path.evaluate(k, d)
            assert np.abs(left - right).max() < 1e-9


def test_fit_passes_through_waypoints():
    w = np.array([[0.0, 0, 0], [3, 1, 0], [5, 4, 2], [2, 6, 1]])
    path = rf.fit_path(w, 10.0)
    assert np.allclose(path.evaluate(path.knots), w, atol=1e-12)
    assert np.allclose(path.evaluate(np.array([0.0, 10.0]), 1), 0.0, atol=1e-12)


def test_coincident_waypoints_rejected():
    with pytest.raises(rf.GenerationError):
        rf.fit_path(np.zeros((3, 3)), 10.0)


def test_scale_path_scales_speed():
    path = rf.generate_path(5)
    half = rf.scale_path(path, 0.5)
    t = np.linspace(0, path.duration, 50)
    assert np.allclose(half.evaluate(t, 1), 0.5 * path.evaluate(t, 1))
    assert np.allclose(half.evaluate(t, 2), 0.5 * path.evaluate(t, 2))


def test_speed_scale_is_time_scaling():
    path = rf.generate_path(8)
    slow = rf.sample_path(path, 0.1, speed_scale=0.5)
    full = rf.sample_path(path, 0.1)
    assert len(slow) == len(full)
    # slow row 2k sits where the full-speed reference is at row k
    assert np.allclose(slow.positions[::2], full.positions[:51])
    assert np.allclose(slow.velocities[::2], 0.5 * full.velocities[:51])


def test_impossible_limits_raise():
    with pytest.raises(rf.GenerationError):
        rf.generate_path(0, rf.PolynomialConfig(v_max=-1.0))


# -- trajectory sets and files ---------------------------------------------

def test_set_splits_disjoint():
    ts = rf.TrajectorySet.generate(30, seed=1, test_fraction=0.2)
    assert len(ts.test) == 6 and len(ts.train) == 24
    assert not set(ts.train_ids) & set(ts.test_ids)
    assert sorted(ts.train_ids + ts.test_ids) == list(range(30))
    again = rf.TrajectorySet.generate(30, seed=1, test_fraction=0.2)
    assert again.test_ids == ts.test_ids
    assert np.array_equal(again.sample("test"), ts.sample("test"))
    assert ts.sample("train", indices=[0, 3]).shape == (2, 101, 6)


def test_trajectory_file_roundtrip(tmp_path):
    traj = rf.generate_polynomial(9)
    f = tmp_path / "t.txt"
    rf.save_trajectory(f, traj)
    header = f.read_text().splitlines()[0]
    assert header.split()[1:] == list(rf.TRAJ_COLUMNS)
    back = rf.load_trajectory(f)
    assert back.dt == pytest.approx(0.1)
    assert np.array_equal(back.states, traj.states)


def test_write_set_manifest(tmp_path):
    ts = rf.TrajectorySet.generate(5, seed=2, test_fraction=0.4)
    out = rf.write_trajectory_set(tmp_path / "set", ts)
    man = json.loads((out / "manifest.json").read_text())
    assert man["n_train"] == 3 and man["n_test"] == 2
    assert len(rf.read_trajectory_dir(out, "test")) == 2
    assert len(rf.read_trajectory_dir(out)) == 5


# -- interpolated references -----------------------------------------------

def test_cartpole_reference_at_target():
    ref = rf.cartpole_reference(np.zeros(4), 10)
    assert np.array_equal(ref, np.zeros((10, 4)))


def test_cartpole_reference_midpoint():
    ref = rf.cartpole_reference(np.array([1.5, 0.4, 0.2, -1.0]), 10)
    assert ref[4, 2] == pytest.approx(0.1)  # fifth future step
    assert np.allclose(ref[-1, 1:], 0.0)
    assert np.allclose(ref[:, 0], 1.5)


def test_cartpole_reference_rejects_k0():
    with pytest.raises(ValueError):
        rf.cartpole_reference(np.zeros(4), 0)


def test_fixedwing_reference_first_point():
    ref = rf.fixedwing_reference(np.zeros(3), np.array([50.0, 0, 0]), 11.5)
    assert np.allclose(ref[0], [0.575, 0, 0])
    assert np.allclose(np.diff(ref, axis=0), [0.575, 0, 0])


def test_fixedwing_reference_clamps_at_target():
    ref = rf.fixedwing_reference(np.array([49.0, 0, 0]), np.array([50.0, 0, 0]), 11.5)
    assert np.allclose(ref[2:], [50.0, 0, 0])
    assert ref[0, 0] == pytest.approx(49.575)


def test_fixedwing_reference_constant_slope():
    ref = rf.fixedwing_reference(np.zeros(3), np.array([50.0, 5.0, 0]), 11.5)
    slope = ref[:, 1] / ref[:, 0]
    assert np.allclose(slope, 0.1)


def test_fixedwing_reference_degenerate():
    with pytest.raises(rf.InvalidTargetError):
        rf.fixedwing_reference(np.ones(3), np.ones(3), 11.5)


# -- pair collection --------------------------------------------------------

def _quad_episode(seed=0):
    return rf.sample_path(rf.generate_path(seed)).states[None]


def _const_controller(action):
    def control(state, ref, t):
        return np.repeat(np.asarray(action, dtype=np.float64)[None], len(state), axis=0)
    return control


def test_perfect_policy_never_resets():
    task = tk.CartPoleTask()
    eps = np.zeros((3, 4))
    data = rf.collect_pairs(task, None, eps, 0.01, controller=_const_controller([0.0]))
    assert data.n_resets == 0
    assert len(data) == 3 * task.episode_steps
    assert np.array_equal(data.states, np.zeros_like(data.states))


def test_infinite_threshold_is_free_rollout():
    task = tk.QuadrotorTask()
    eps = _quad_episode(1)
    params = pol.initialize("quadrotor", 0)
    data = rf.collect_pairs(task, params, eps, np.inf)
    assert data.n_resets == 0
    assert len(data) == eps.shape[1] - 1


def test_first_pair_is_reference_start():
    task = tk.QuadrotorTask()
    eps = np.concatenate([_quad_episode(2), _quad_episode(3)])
    data = rf.collect_pairs(task, pol.initialize("quadrotor", 0), eps, 0.5)
    assert np.array_equal(data.states[:2], hover_state(eps[:, 0, 0:3], eps[:, 0, 3:6]))


def test_reset_onto_reference():
    # hover reference; zero thrust drops the vehicle 0.294 m by step 3
    task = tk.QuadrotorTask()
    eps = np.zeros((1, 11, 6))
    data = rf.collect_pairs(task, None, eps, 0.1, controller=_const_controller([0, 0, 0, 0]))
    assert data.n_resets >= 1
    flags = np.flatnonzero(data.reset_flags)
    assert flags[0] == 3
    assert np.array_equal(data.states[3], hover_state(eps[0, 3, 0:3], eps[0, 3, 3:6]))
    assert data.states[2, 2] == pytest.approx(-0.0981)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.05, 1.0), st.integers(0, 1000))
def test_pairs_within_threshold(tau, seed):
    task = tk.QuadrotorTask()
    eps = _quad_episode(seed)
    data = rf.collect_pairs(task, pol.initialize("quadrotor", seed % 7), eps, tau)
    t = np.arange(len(data))  # one episode: pair k is time k
    div = np.linalg.norm(data.states[:, 0:3] - eps[0, t, 0:3], axis=1)
    assert np.all(div <= tau + 1e-12)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.02, 0.3), st.integers(0, 1000))
def test_cartpole_pairs_within_threshold(tau, seed):
    task = tk.CartPoleTask()
    eps = task.new_episodes(np.random.default_rng(seed), 4)
    data = rf.collect_pairs(task, pol.initialize("cartpole", seed % 5), eps, tau)
    start = np.abs(eps[:, 2]).max()
    assert np.all(np.abs(data.states[:, 2]) <= max(tau, start) + 1e-12)
