"""Few-shot adaptation: learn a residual on the nominal model, then fine-tune
the policy through the corrected model."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from apgtrack import autodiff as ad
from apgtrack import rollout as ro
from apgtrack import tasks as tk
from apgtrack import training as tr
from apgtrack.dynamics import ResidualDynamics, ResidualModel

log = logging.getLogger(__name__)


class ResidualDivergedError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass
class TransitionTriples:
    """``next_states[i] = f*(states[i], actions[i])``."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def split(self, n_first: int) -> tuple["TransitionTriples", "TransitionTriples"]:
        a = TransitionTriples(self.states[:n_first], self.actions[:n_first], self.next_states[:n_first])
        b = TransitionTriples(self.states[n_first:], self.actions[n_first:], self.next_states[n_first:])
        return a, b


@dataclass
class AdaptationBudget:
    triples: int = 1000
    fine_tune_samples: int = 1000

    def __post_init__(self):
        if self.triples < 1:
            raise ValueError("triple budget must be positive")
        if self.fine_tune_samples < 0:
            raise ValueError("fine-tune budget must be non-negative")


def collect_triples(task: tk.Task, params, target_dynamics, episodes, B: int,
                    tau_div: float = 1.0, clip: bool = False) -> TransitionTriples:
    """Roll the policy in the target dynamics and record exactly ``B`` transitions.

    States further than ``tau_div`` from the reference are reset onto it.
    """
    if B < 1:
        raise ValueError("B must be positive")
    available = len(episodes) * task.n_steps(episodes)
    if B > available:
        if not clip:
            raise ValueError(f"B={B} exceeds the {available} available steps")
        warnings.warn(f"triple budget {B} clipped to {available} available steps")
        B = available
    data = ro.collect_pairs(task, params, episodes, tau_div, target_dynamics, max_steps=B)
    # the policy is deterministic, so the applied actions can be recomputed row-aligned
    acts = np.asarray(task.scale(params, task.policy_raw(params, data.states, data.refs)[:, 0]))
    nxt = np.asarray(target_dynamics.step(data.states, acts))
    return TransitionTriples(data.states, acts, nxt)


def residual_loss(residual: ResidualModel, base, data: TransitionTriples):
    """Mean Euclidean norm of ``f(s, a) + delta(s, a) - s*``."""
    pred = base.step(data.states, data.actions) + residual(data.states, data.actions)
    err = pred - data.next_states
    # tiny eps keeps the gradient finite when a row is fitted exactly
    return ad.sum(ad.norm(err, eps=1e-12)) / float(len(data))


def train_residual(data: TransitionTriples, residual: ResidualModel, base, epochs: int = 200,
                   lr: float = 1e-3, momentum: float = 0.9) -> tuple[ResidualModel, list]:
    """Full-batch SGD with momentum; returns the residual and the loss curve
    (entry ``i`` is the loss before update ``i``, the last one after training)."""
    if len(data) == 0:
        raise ValueError("empty triple dataset")
    opt = tr.OptimizerState.for_params(residual, lr, momentum)
    curve = []
    best, best_loss = residual, np.inf
    for _ in range(epochs):
        tape = ad.Tape()
        net, vars_ = residual.on_tape(tape)
        loss = residual_loss(net, base, data)
        value = float(loss.value)
        curve.append(value)
        if not np.isfinite(value):
            raise ResidualDivergedError("non-finite residual loss", best)
        if value < best_loss:
            best, best_loss = residual, value
        grads = tape.backward(loss)
        residual = tr.sgd_step(residual, [grads[v.id] for v in vars_], opt)
    curve.append(float(residual_loss(residual, base, data)))
    return residual, curve


def drag_increment(state, dt: float, drag: float, velocity_slice: slice) -> np.ndarray:
    """Exact one-step effect of linear drag under explicit Euler."""
    inc = np.zeros_like(state)
    inc[..., velocity_slice] = -drag * dt * state[..., velocity_slice]
    return inc


FINE_TUNE_TAU = {"quadrotor": 1.0, "fixedwing": 20.0}


def fine_tune_curriculum(system: str) -> tr.CurriculumSchedule:
    """Fixed divergence threshold for an already trained policy."""
    tau = FINE_TUNE_TAU.get(system)
    if tau is None:
        return tr.CurriculumSchedule.none()
    return tr.CurriculumSchedule(tau, 1.0, 1, tau)


@dataclass
class FineTuneResult:
    params: object
    source: tuple
    zero_shot: tuple
    few_shot: tuple
    samples_used: int
    metrics: list = field(default_factory=list)


def fine_tune(task: tk.Task, params, base_dynamics, residual: ResidualModel, target_dynamics,
              curriculum: tr.CurriculumSchedule, sample_budget: int, episodes, eval_episodes,
              config: tr.TrainConfig | None = None, epochs: int = 10, seed: int = 0) -> FineTuneResult:
    """Continue training with gradients through ``base + residual``.

    Pairs are collected in the target dynamics and charged to ``sample_budget``;
    once it is spent the collected pairs are reused. Tracking is reported on
    the nominal dynamics (source) and on the target before and after.
    """
    config = config or tr.TrainConfig.paper(task.name)
    source = tr.aggregate(tr.evaluate_policy(task, params, eval_episodes, base_dynamics))
    zero = tr.aggregate(tr.evaluate_policy(task, params, eval_episodes, target_dynamics))
    model = ResidualDynamics(base_dynamics, residual)
    if sample_budget <= 0 or epochs <= 0:
        return FineTuneResult(params, source, zero, zero, 0)
    res = tr.train(task, tr.HorizonConfig(task.horizon), curriculum, epochs, seed, config,
                   params=params, train_episodes=episodes, eval_episodes=eval_episodes,
                   dynamics=model, collect_dynamics=target_dynamics,
                   eval_dynamics=target_dynamics, sample_budget=sample_budget)
    few = tr.aggregate(tr.evaluate_policy(task, res.params, eval_episodes, target_dynamics))
    return FineTuneResult(res.params, source, zero, few, res.samples_used, res.metrics)
