"""Receding-horizon shooting MPC on the differentiable dynamics.

The decision variable is the unsquashed action sequence ``z`` of shape
``(batch, T, action_dim)``; actions are ``squash(z)`` rescaled to the bounds,
so the bounds never need projecting. Rows of a batch are independent
problems solved together.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from apgtrack import autodiff as ad
from apgtrack import policy as pol
from apgtrack import rollout as ro
from apgtrack import tasks as tk


class MpcSolverError(FloatingPointError):
    def __init__(self, message, z=None):
        super().__init__(message)
        self.z = z


@dataclass
class MpcConfig:
    horizon: int = pol.HORIZON
    iterations: int = 50
    step_size: float = 1e-2
    momentum: float = 0.9
    warm_start: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("MPC horizon must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")

    @classmethod
    def default(cls, system: str) -> "MpcConfig":
        return cls(step_size=STEP_SIZES.get(system, 1e-2))


STEP_SIZES = {"quadrotor": 2e-3, "cartpole": 2e-2, "fixedwing": 2e-3}


def squash(system: str, z):
    if system == "cartpole":
        return ad.tanh(z)
    return ad.sigmoid(z)


def unsquash(system: str, raw):
    raw = np.asarray(raw, dtype=np.float64)
    if system == "cartpole":
        return np.arctanh(np.clip(raw, -1 + 1e-9, 1 - 1e-9))
    raw = np.clip(raw, 1e-9, 1 - 1e-9)
    return np.log(raw) - np.log1p(-raw)


def shooting(cost_rows, z0: np.ndarray, iterations: int, step_size: float, momentum: float = 0.9):
    """Momentum gradient descent on ``sum(cost_rows(z))``.

    ``cost_rows`` maps a tape variable ``z`` to per-row costs. A row whose
    cost turns non-finite keeps its last finite iterate and is flagged.
    Returns ``(z, costs, failed)``.
    """
    z = np.array(z0, dtype=np.float64)
    vel = np.zeros_like(z)
    failed = np.zeros(len(z), dtype=bool)
    costs = np.full(len(z), np.nan)
    for _ in range(iterations + 1):
        tape = ad.Tape()
        zv = tape.variable(z)
        rows = cost_rows(zv)
        c = np.asarray(ad.value(rows), dtype=np.float64)
        bad = ~np.isfinite(c)
        if bad.any():
            failed |= bad
            c = np.where(bad, costs, c)
        costs = c
        if _ == iterations:
            break
        total = ad.sum(ad.where(bad, 0.0, rows)) if bad.any() else ad.sum(rows)
        g = tape.backward(total, check_finite=False)[zv.id]
        g = np.where(np.isfinite(g), g, 0.0)
        g[failed] = 0.0
        vel = momentum * vel + g
        z = z - step_size * vel
    return z, costs, failed


@dataclass
class MpcSolution:
    action: np.ndarray
    z: np.ndarray
    states: np.ndarray
    cost: np.ndarray
    failed: np.ndarray
    solve_time: float


def shift(z: np.ndarray) -> np.ndarray:
    """Drop the executed step and repeat the last one."""
    return np.concatenate([z[:, 1:], z[:, -1:]], axis=1)


def mpc_solve(task: tk.Task, params, state, ref: dict, config: MpcConfig, dynamics=None,
              warm: np.ndarray | None = None) -> MpcSolution:
    """Optimize ``T`` actions from ``state`` and return the first one.

    ``params`` only supplies the action bounds (any policy of the system
    works). ``warm`` is a previous ``z``; it is shifted by one step.
    """
    dyn = dynamics or task.dynamics
    state = np.atleast_2d(np.asarray(state, dtype=np.float64))
    T = config.horizon
    if np.shape(ref["window"])[1] < T:
        raise ValueError(f"reference covers {np.shape(ref['window'])[1]} steps, horizon is {T}")
    loss_ref = {**ref, "window": ref["window"][:, :T]}
    if warm is not None and config.warm_start:
        z0 = shift(warm)
    else:
        z0 = np.zeros((len(state), T, params.action_dim))

    def cost_rows(z):
        raw = squash(task.name, z)
        acts = task.scale(params, raw)
        states, s = [], state
        for k in range(T):
            s = dyn.step(s, acts[:, k])
            states.append(s)
        return task.loss(states, raw, loss_ref, per_sample=True)

    t0 = time.perf_counter()
    z, costs, failed = shooting(cost_rows, z0, config.iterations, config.step_size, config.momentum)
    elapsed = time.perf_counter() - t0
    raw = np.asarray(squash(task.name, z))
    acts = np.asarray(task.scale(params, raw))
    pred, s = [], state
    for k in range(T):
        s = np.asarray(dyn.step(s, acts[:, k]))
        pred.append(s)
    return MpcSolution(acts[:, 0], z, np.stack(pred, axis=1), costs, failed, elapsed)


@dataclass
class MpcRollout:
    result: ro.RolloutResult
    solve_times: list
    solver_failed: np.ndarray

    @property
    def mean_solve_time(self) -> float:
        return float(np.mean(self.solve_times)) if self.solve_times else 0.0


def mpc_controller(task: tk.Task, params, config: MpcConfig, dynamics=None):
    """Stateful receding-horizon controller for :func:`rollout.run_closed_loop`."""
    memo = {"z": None, "times": [], "failed": None}

    def control(state, ref, t):
        sol = mpc_solve(task, params, state, ref, config, dynamics, memo["z"])
        memo["z"] = sol.z
        memo["times"].append(sol.solve_time / max(len(state), 1))
        memo["failed"] = sol.failed if memo["failed"] is None else memo["failed"] | sol.failed
        return sol.action

    return control, memo


def mpc_rollout(task: tk.Task, params, episodes, config: MpcConfig, dynamics=None,
                model=None) -> MpcRollout:
    """Closed loop with the plant ``dynamics`` and the planning ``model``
    (defaults to the plant). Solve times are per trajectory and step."""
    control, memo = mpc_controller(task, params, config, model or dynamics)
    if np.size(episodes) == 0 or task.n_steps(episodes) <= 0:
        n = len(episodes)
        empty = ro.RolloutResult(np.zeros(n), np.ones(n, dtype=bool), np.zeros(n),
                                 np.zeros(n, dtype=int), np.zeros((n, 1, 0)))
        return MpcRollout(empty, [], np.zeros(n, dtype=bool))
    result = ro.run_closed_loop(task, episodes, control, dynamics)
    failed = memo["failed"] if memo["failed"] is not None else np.zeros(len(episodes), dtype=bool)
    return MpcRollout(result, memo["times"], failed)


# ---------------------------------------------------------------------------
# convex toy: double integrator with quadratic cost

@dataclass
class DoubleIntegrator:
    dt: float = 0.1
    q: tuple = (1.0, 0.1)
    r: float = 0.01

    @property
    def A(self) -> np.ndarray:
        return np.array([[1.0, self.dt], [0.0, 1.0]])

    @property
    def B(self) -> np.ndarray:
        return np.array([[0.0], [self.dt]])

    def step(self, x, u):
        pos = x[..., 0:1] + self.dt * x[..., 1:2]
        vel = x[..., 1:2] + self.dt * u
        return ad.concat([pos, vel], axis=-1)

    def cost_rows(self, x0, T: int):
        Q = np.asarray(self.q)

        def rows(u):
            total, x = 0.0, x0
            for k in range(T):
                uk = u[:, k]
                x = self.step(x, uk)
                total = total + ad.sum(Q * x * x, axis=-1) + self.r * ad.sum(uk * uk, axis=-1)
            return total

        return rows


def lqr_first_action(sys: DoubleIntegrator, x0: np.ndarray, T: int) -> np.ndarray:
    """Finite-horizon Riccati recursion for ``sum_k x_{k+1}' Q x_{k+1} + r u_k^2``."""
    A, B, Q, R = sys.A, sys.B, np.diag(sys.q), np.array([[sys.r]])
    P = Q.copy()
    K = None
    for _ in range(T):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
    return -(np.atleast_2d(x0) @ K.T)


def toy_solve(sys: DoubleIntegrator, x0, T: int, iterations: int, step_size: float = 0.5,
              momentum: float = 0.9, z0=None) -> tuple[np.ndarray, np.ndarray]:
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    z0 = np.zeros((len(x0), T, 1)) if z0 is None else z0
    z, costs, _ = shooting(sys.cost_rows(x0, T), z0, iterations, step_size, momentum)
    return z, costs
