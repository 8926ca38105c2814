"""Closed-loop simulation: curriculum data collection and evaluation rollouts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from apgtrack import tasks as tk


def policy_controller(task: tk.Task, params):
    """Receding-horizon controller applying the first predicted action."""

    def control(state, ref, t):
        raw = task.policy_raw(params, state, ref)
        return task.scale(params, raw[:, 0])

    return control


@dataclass
class PairDataset:
    """Visited states with the reference window seen from each of them."""

    states: np.ndarray
    refs: dict
    n_resets: int = 0
    n_steps: int = 0
    reset_flags: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.states)

    def subset(self, idx) -> "PairDataset":
        flags = None if self.reset_flags is None else self.reset_flags[idx]
        return PairDataset(self.states[idx], tk._take(self.refs, idx), self.n_resets,
                           self.n_steps, flags)


def collect_pairs(task: tk.Task, params, episodes, tau_div: float = np.inf, dynamics=None,
                  controller=None, max_steps: int | None = None) -> PairDataset:
    """Roll the current policy through every episode; a state further than
    ``tau_div`` from the reference is put back onto it before the next step.

    ``reset_flags`` marks pairs whose state was produced by a reset. At most
    ``max_steps`` simulator steps are taken.
    """
    if not tau_div > 0:
        raise ValueError(f"tau_div must be positive, got {tau_div}")
    dyn = dynamics or task.dynamics
    control = controller or policy_controller(task, params)
    state = task.initial_states(episodes)
    n = len(state)
    active = np.ones(n, dtype=bool)
    was_reset = np.zeros(n, dtype=bool)
    states, refs, flags = [], [], []
    n_resets = 0
    n_steps = 0
    for t in range(task.n_steps(episodes)):
        if not active.any():
            break
        if max_steps is not None:
            left = max_steps - n_steps
            if left <= 0:
                break
            active[np.flatnonzero(active)[left:]] = False
        ref = task.window(episodes, t, state)
        idx = np.flatnonzero(active)
        states.append(state[idx].copy())
        refs.append(tk._take(ref, idx))
        flags.append(was_reset[idx].copy())
        nxt = np.asarray(dyn.step(state, control(state, ref, t)))
        n_steps += idx.size
        bad = ~np.isfinite(nxt).all(axis=-1)
        nxt[bad | ~active] = state[bad | ~active]
        done = active & task.finished(episodes, t + 1, state, nxt)
        active &= ~bad & ~done
        div = task.divergence(episodes, t + 1, nxt)
        over = active & (div > tau_div)
        if over.any():
            nxt[over] = task.reset_states(episodes, t + 1, nxt)[over]
            n_resets += int(over.sum())
        was_reset = over
        state = nxt
    if not states:
        sd = task.initial_states(episodes).shape[-1] if n else 0
        return PairDataset(np.zeros((0, sd)), {}, 0, 0, np.zeros(0, dtype=bool))
    return PairDataset(np.concatenate(states), tk._concat_refs(refs), n_resets, n_steps,
                       np.concatenate(flags))


@dataclass
class RolloutResult:
    """Per-episode outcome of an evaluation rollout."""

    error: np.ndarray
    success: np.ndarray
    secondary: np.ndarray
    steps: np.ndarray
    states: np.ndarray = field(repr=False)


def run_closed_loop(task: tk.Task, episodes, controller, dynamics=None) -> RolloutResult:
    """Simulate until every episode finished, failed or ran out of steps.

    Failed episodes stop at the failing step.
    """
    dyn = dynamics or task.dynamics
    state = task.initial_states(episodes)
    n = len(state)
    horizon = task.n_steps(episodes)
    history = np.zeros((n, horizon + 1, state.shape[-1]))
    history[:, 0] = state
    active = np.ones(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    finished = np.zeros(n, dtype=bool)
    steps = np.zeros(n, dtype=int)
    for t in range(horizon):
        if not active.any():
            break
        ref = task.window(episodes, t, state)
        nxt = np.asarray(dyn.step(state, controller(state, ref, t)), dtype=np.float64)
        bad = ~np.isfinite(nxt).all(axis=-1)
        nxt[bad | ~active] = state[bad | ~active]
        fail = active & (bad | task.failed(episodes, t + 1, nxt))
        done = active & ~fail & task.finished(episodes, t + 1, state, nxt)
        steps[active] = t + 1
        history[active, t + 1] = nxt[active]
        failed |= fail
        finished |= done
        active &= ~fail & ~done
        state = nxt
    return task.summarize(episodes, history, steps, failed, finished)
