"""Per-system glue: episodes, reference windows, policy calls, losses, metrics.

An *episode batch* is a plain array describing ``n`` episodes:

* quadrotor -- reference trajectories ``(n, steps + 1, 6)``
* cartpole  -- initial states ``(n, 4)``
* fixedwing -- targets ``(n, 3)`` (the aircraft starts at the origin)

Reference windows handed to the policy and the losses are dicts of arrays
with a leading batch axis, so datasets can be sliced uniformly.
"""
from __future__ import annotations

import numpy as np

from apgtrack import autodiff as ad
from apgtrack import policy as pol
from apgtrack.dynamics import CartPoleDynamics, FixedWingDynamics, QuadrotorDynamics
from apgtrack.dynamics.fixedwing import initial_state as fw_initial_state
from apgtrack.dynamics.quadrotor import hover_state, observation
from apgtrack.reference import cartpole_reference, line_points

DIVERGENCE_LIMIT = 5.0


def _take(ref: dict, idx) -> dict:
    return {k: v[idx] for k, v in ref.items()}


def _concat_refs(refs: list[dict]) -> dict:
    if not refs:
        return {}
    return {k: np.concatenate([r[k] for r in refs]) for k in refs[0]}


class Task:
    name = "base"
    dynamics = None

    def __init__(self, horizon: int = pol.HORIZON):
        self.horizon = horizon

    # -- episodes ---------------------------------------------------------
    def initial_states(self, episodes) -> np.ndarray:
        raise NotImplementedError

    def n_steps(self, episodes) -> int:
        raise NotImplementedError

    def window(self, episodes, t: int, state) -> dict:
        raise NotImplementedError

    def divergence(self, episodes, t: int, state) -> np.ndarray:
        """Distance of ``state`` (at time ``t``) from the reference."""
        raise NotImplementedError

    def reset_states(self, episodes, t: int, state) -> np.ndarray:
        raise NotImplementedError

    def failed(self, episodes, t: int, state) -> np.ndarray:
        return self.divergence(episodes, t, state) > DIVERGENCE_LIMIT

    def finished(self, episodes, t: int, prev, state) -> np.ndarray:
        return np.zeros(len(state), dtype=bool)

    # -- policy -----------------------------------------------------------
    def policy_raw(self, params, state, ref: dict, offset: int = 0):
        raise NotImplementedError

    def scale(self, params, raw):
        return pol.scale_actions(params, raw)

    def loss(self, states: list, raw, ref: dict, per_sample: bool = False):
        raise NotImplementedError

    # -- metrics ----------------------------------------------------------
    def step_error(self, episodes, t: int, state) -> np.ndarray:
        return self.divergence(episodes, t, state)

    def new_episodes(self, rng: np.random.Generator, n: int):
        raise NotImplementedError

    def _per_step(self, fn, episodes, history, steps) -> np.ndarray:
        """Mean of ``fn`` over steps ``1..steps`` of each episode."""
        n = len(history)
        out = np.zeros(n)
        for t in range(1, history.shape[1]):
            live = steps >= t
            if not live.any():
                break
            out[live] += fn(episodes, t, history[:, t])[live]
        return np.where(steps > 0, out / np.maximum(steps, 1), 0.0)

    def summarize(self, episodes, history, steps, failed, finished):
        from apgtrack.rollout import RolloutResult

        err = self._per_step(self.step_error, episodes, history, steps)
        sec = self._per_step(self.divergence, episodes, history, steps)
        return RolloutResult(err, ~failed, sec, steps, history)


class QuadrotorTask(Task):
    name = "quadrotor"

    def __init__(self, horizon: int = pol.HORIZON, dynamics=None):
        super().__init__(horizon)
        self.dynamics = dynamics or QuadrotorDynamics()

    def initial_states(self, episodes):
        return hover_state(episodes[:, 0, 0:3], episodes[:, 0, 3:6])

    def n_steps(self, episodes):
        return episodes.shape[1] - 1

    def window_len(self) -> int:
        return self.horizon + pol.REF_STEPS

    def window(self, episodes, t, state):
        n = episodes.shape[1]
        idx = np.minimum(np.arange(t + 1, t + 1 + self.window_len()), n - 1)
        return {"window": episodes[:, idx]}

    def divergence(self, episodes, t, state):
        t = min(t, episodes.shape[1] - 1)
        return np.linalg.norm(state[:, 0:3] - episodes[:, t, 0:3], axis=-1)

    def reset_states(self, episodes, t, state):
        return hover_state(episodes[:, t, 0:3], episodes[:, t, 3:6])

    def policy_raw(self, params, state, ref, offset=0):
        win = ref["window"][:, offset:offset + pol.REF_STEPS]
        feats = pol.quadrotor_reference_features(state, win)
        return pol.forward_quadrotor(params, observation(state), feats)

    def loss(self, states, raw, ref, per_sample=False):
        return loss_quadrotor(states, raw, ref["window"], per_sample)


class CartPoleTask(Task):
    name = "cartpole"
    episode_steps = 200  # 10 s
    fail_angle = 0.5
    start_angle = 0.1

    def __init__(self, horizon: int = pol.HORIZON, dynamics=None, start_angle: float = 0.1):
        super().__init__(horizon)
        self.dynamics = dynamics or CartPoleDynamics()
        self.start_angle = start_angle

    def new_episodes(self, rng, n):
        s = np.zeros((n, 4))
        s[:, 1] = rng.uniform(-0.1, 0.1, n)
        s[:, 2] = rng.uniform(-self.start_angle, self.start_angle, n)
        s[:, 3] = rng.uniform(-0.1, 0.1, n)
        return s

    def initial_states(self, episodes):
        return np.array(episodes, dtype=np.float64)

    def n_steps(self, episodes):
        return self.episode_steps

    def window(self, episodes, t, state):
        return {"window": cartpole_reference(state, self.horizon)}

    def divergence(self, episodes, t, state):
        return np.abs(state[:, 2])

    def failed(self, episodes, t, state):
        return np.abs(state[:, 2]) > self.fail_angle

    def reset_states(self, episodes, t, state):
        # upright at the current cart position
        s = np.zeros_like(state)
        s[:, 0] = state[:, 0]
        return s

    def step_error(self, episodes, t, state):
        return np.abs(state[:, 1])

    def policy_raw(self, params, state, ref, offset=0):
        return pol.forward_cartpole(params, state)

    def loss(self, states, raw, ref, per_sample=False):
        return loss_cartpole(states, ref["window"], per_sample)


class FixedWingTask(Task):
    name = "fixedwing"
    start_speed = 11.5
    target_x = 50.0
    lateral = 5.0
    max_steps = 140

    def __init__(self, horizon: int = pol.HORIZON, dynamics=None):
        super().__init__(horizon)
        self.dynamics = dynamics or FixedWingDynamics()

    def new_episodes(self, rng, n):
        t = np.zeros((n, 3))
        t[:, 0] = self.target_x
        t[:, 1:] = rng.uniform(-self.lateral, self.lateral, (n, 2))
        return t

    def initial_states(self, episodes):
        return np.repeat(fw_initial_state(self.start_speed)[None], len(episodes), axis=0)

    def n_steps(self, episodes):
        return self.max_steps

    def _spacing(self, state):
        return np.linalg.norm(state[:, 3:6], axis=-1) * self.dynamics.dt

    def window(self, episodes, t, state):
        spacing = self._spacing(state)
        pts = line_points(state[:, 0:3], episodes, spacing, self.horizon)
        return {"window": pts, "target": np.asarray(episodes, dtype=np.float64), "spacing": spacing}

    def divergence(self, episodes, t, state):
        """Distance from the straight start-to-target line."""
        d = episodes / np.linalg.norm(episodes, axis=-1, keepdims=True)
        p = state[:, 0:3]
        along = np.sum(p * d, axis=-1, keepdims=True)
        return np.linalg.norm(p - along * d, axis=-1)

    def reset_states(self, episodes, t, state):
        d = episodes / np.linalg.norm(episodes, axis=-1, keepdims=True)
        along = np.sum(state[:, 0:3] * d, axis=-1, keepdims=True)
        s = np.repeat(fw_initial_state(self.start_speed)[None], len(state), axis=0)
        s[:, 0:3] = along * d
        s[:, 8] = np.arctan2(d[:, 1], d[:, 0])
        return s

    def finished(self, episodes, t, prev, state):
        return state[:, 0] >= episodes[:, 0]

    def summarize(self, episodes, history, steps, failed, finished):
        """Miss distance in the y-z plane where the path crosses the target x."""
        from apgtrack.rollout import RolloutResult

        line = self._per_step(self.divergence, episodes, history, steps)
        n = len(history)
        miss = np.full(n, np.nan)
        for i in np.flatnonzero(finished):
            a, b = history[i, steps[i] - 1, 0:3], history[i, steps[i], 0:3]
            w = (episodes[i, 0] - a[0]) / (b[0] - a[0]) if b[0] != a[0] else 1.0
            cross = a + np.clip(w, 0.0, 1.0) * (b - a)
            miss[i] = np.linalg.norm(cross[1:] - episodes[i, 1:])
        success = finished & ~failed
        return RolloutResult(np.where(success, miss, np.nan), success, line, steps, history)

    def reference_features(self, state, ref):
        """Relative position of the 10th reference point from ``state``."""
        pts = line_points(state[:, 0:3], ref["target"], ref["spacing"], pol.REF_STEPS)
        return pts[:, pol.REF_STEPS - 1] - state[:, 0:3]

    def policy_raw(self, params, state, ref, offset=0):
        return pol.forward_fixedwing(params, state, self.reference_features(state, ref))

    def loss(self, states, raw, ref, per_sample=False):
        return loss_fixedwing(states, raw, ref["window"], per_sample)


def make_task(system: str, horizon: int = pol.HORIZON, dynamics=None) -> Task:
    cls = {"quadrotor": QuadrotorTask, "cartpole": CartPoleTask, "fixedwing": FixedWingTask}[system]
    return cls(horizon=horizon, dynamics=dynamics)


# ---------------------------------------------------------------------------
# losses (summed over the horizon, averaged over the batch unless per_sample)

class LossShapeError(ValueError):
    pass


def _check_len(states, raw, ref, min_ref: int):
    if raw is not None and ad.value(raw).shape[-2] != len(states):
        raise LossShapeError(f"{len(states)} states but {ad.value(raw).shape[-2]} actions")
    if np.shape(ref)[-2] < min_ref:
        raise LossShapeError(f"reference has {np.shape(ref)[-2]} steps, need {min_ref}")


def _batch_mean(x):
    v = ad.value(x)
    return ad.sum(x) / float(max(v.size, 1))


def loss_quadrotor(states, raw, ref, per_sample: bool = False):
    """``sum_k 10|p - p_ref|^2 + |v - v_ref|^2 + 5 (T - .5)^2
    + 0.1 |w_des - .5|^2 + 0.1 |w|^2`` with ``raw`` the sigmoid outputs."""
    _check_len(states, raw, ref, len(states))
    total = 0.0
    for k, s in enumerate(states):
        dp = s[..., 0:3] - ref[..., k, 0:3]
        dv = s[..., 3:6] - ref[..., k, 3:6]
        a = raw[..., k, :]
        thrust = a[..., 0] - 0.5
        rates = a[..., 1:4] - 0.5
        omega = s[..., 15:18]
        total = total + (10.0 * ad.dot(dp, dp) + ad.dot(dv, dv) + 5.0 * thrust * thrust
                         + 0.1 * ad.dot(rates, rates) + 0.1 * ad.dot(omega, omega))
    return total if per_sample else _batch_mean(total)


CARTPOLE_WEIGHTS = np.array([0.0, 3.0, 10.0, 1.0])  # x, x_dot, alpha, alpha_dot


def loss_cartpole(states, ref, per_sample: bool = False):
    _check_len(states, None, ref, len(states))
    total = 0.0
    for k, s in enumerate(states):
        d = s - ref[..., k, :]
        total = total + ad.sum(d * d * CARTPOLE_WEIGHTS, axis=-1)
    return total if per_sample else _batch_mean(total)


def loss_fixedwing(states, raw, ref, per_sample: bool = False):
    """``sum_k 10|p - p_ref|^2 + 0.1 sum_j (a_j - .5)^2`` over the three control surfaces."""
    _check_len(states, raw, ref, len(states))
    total = 0.0
    for k, s in enumerate(states):
        dp = s[..., 0:3] - ref[..., k, :]
        surf = raw[..., k, 1:4] - 0.5
        total = total + 10.0 * ad.dot(dp, dp) + 0.1 * ad.dot(surf, surf)
    return total if per_sample else _batch_mean(total)
