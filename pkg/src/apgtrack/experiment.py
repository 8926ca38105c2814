"""Builders turning an :class:`ExperimentConfig` into runnable pieces."""
from __future__ import annotations

import numpy as np

from apgtrack import policy as pol
from apgtrack import rollout as ro
from apgtrack import tasks as tk
from apgtrack import training as tr
from apgtrack.config import ExperimentConfig
from apgtrack.dynamics import CartPoleDynamics, DragPerturbed, FixedWingDynamics, QuadrotorDynamics
from apgtrack.mpc import STEP_SIZES, MpcConfig
from apgtrack.reference import PolynomialConfig, TrajectorySet

DEFAULT_EVAL_COUNT = {"quadrotor": 50, "fixedwing": 30, "cartpole": 20}
DEFAULT_EPISODES = {"fixedwing": 100, "cartpole": 50}


def base_dynamics(cfg: ExperimentConfig):
    cls = {"quadrotor": QuadrotorDynamics, "cartpole": CartPoleDynamics,
           "fixedwing": FixedWingDynamics}[cfg.experiment.system]
    return cls(integrator=cfg.dynamics.integrator)


def dynamics(cfg: ExperimentConfig, drag: float | None = None):
    base = base_dynamics(cfg)
    r = cfg.dynamics.drag if drag is None else drag
    return DragPerturbed(base, r) if r > 0 else base


def make_task(cfg: ExperimentConfig, dyn=None) -> tk.Task:
    return tk.make_task(cfg.experiment.system, cfg.policy.horizon, dyn or dynamics(cfg))


def horizon(cfg: ExperimentConfig) -> tr.HorizonConfig:
    return tr.HorizonConfig(cfg.policy.horizon, cfg.policy.mode)


def train_config(cfg: ExperimentConfig) -> tr.TrainConfig:
    t = cfg.training
    paper = tr.TrainConfig.paper(cfg.experiment.system)
    return tr.TrainConfig(
        lr=t.lr if t.lr > 0 else paper.lr,
        momentum=t.momentum if t.momentum >= 0 else paper.momentum,
        batch_size=t.batch_size, clip_norm=t.clip_norm,
        pairs_per_epoch=t.pairs_per_epoch or None, eval_count=t.eval_count)


def curriculum(cfg: ExperimentConfig) -> tr.CurriculumSchedule:
    c, system = cfg.curriculum, cfg.experiment.system
    base = tr.CurriculumSchedule.default(system)
    stages = tuple(float(x) for x in c.speed_stages.split(",") if x.strip()) or base.speed_stages
    if not c.enabled:
        return tr.CurriculumSchedule.none(stages)
    if not np.isfinite(base.tau_init) and c.tau_init <= 0:
        return tr.CurriculumSchedule.none(stages)
    return tr.CurriculumSchedule(
        c.tau_init if c.tau_init > 0 else base.tau_init,
        c.tau_increment if c.tau_increment > 0 else base.tau_increment,
        c.epochs_per_increment or base.epochs_per_increment,
        c.tau_max if c.tau_max > 0 else base.tau_max,
        stages)


def mpc_config(cfg: ExperimentConfig) -> MpcConfig:
    m = cfg.mpc
    step = m.step_size if m.step_size > 0 else STEP_SIZES[cfg.experiment.system]
    return MpcConfig(m.horizon, m.iterations, step, m.momentum, m.warm_start)


def polynomial_config(cfg: ExperimentConfig) -> PolynomialConfig:
    t = cfg.trajectories
    return PolynomialConfig(a_max=t.a_max, n_waypoints=t.n_waypoints, extent=t.extent,
                            max_tilt_rate=t.max_tilt_rate)


def trajectory_set(cfg: ExperimentConfig) -> TrajectorySet:
    t = cfg.trajectories
    return TrajectorySet.generate(t.count, t.seed, t.test_fraction, polynomial_config(cfg),
                                  (t.v_max_min, t.v_max_max))


def episode_sources(cfg: ExperimentConfig, task: tk.Task, eval_count: int | None = None):
    """``(train_source, eval_source)`` callables of the speed scale."""
    system, seed = cfg.experiment.system, cfg.experiment.seed
    n_eval = eval_count if eval_count is not None else cfg.training.eval_count
    if system == "quadrotor":
        tset = trajectory_set(cfg)
        ids = np.arange(min(n_eval, len(tset.test)))
        return (lambda s: tset.sample("train", s)), (lambda s: tset.sample("test", s, ids))
    n_train = cfg.training.episodes or DEFAULT_EPISODES[system]
    train_rng = np.random.default_rng([seed, 1])
    fixed_train = task.new_episodes(train_rng, n_train)
    evals = task.new_episodes(np.random.default_rng([seed, 2]), n_eval)
    return (lambda s: fixed_train), (lambda s: evals)


def holdout_episodes(cfg: ExperimentConfig, task: tk.Task, count: int | None = None, seed: int | None = None):
    """Held-out episodes for evaluation commands."""
    system = cfg.experiment.system
    count = DEFAULT_EVAL_COUNT[system] if count is None else count
    seed = cfg.experiment.seed if seed is None else seed
    if system == "quadrotor":
        tset = trajectory_set(cfg)
        return tset.sample("test", 1.0, np.arange(min(count, len(tset.test))))
    return task.new_episodes(np.random.default_rng([seed, 3]), count)


def initial_policy(cfg: ExperimentConfig, task: tk.Task) -> pol.PolicyParameters:
    system, seed = cfg.experiment.system, cfg.experiment.seed
    if system != "fixedwing":
        return pol.initialize(system, seed, horizon=cfg.policy.horizon)
    return fixedwing_policy(task, seed, cfg.policy.horizon)


def fixedwing_policy(task: tk.Task, seed: int, horizon: int = pol.HORIZON, n_episodes: int = 50):
    """Initial fixed-wing policy whose input normalizer is fitted to states
    visited by uniformly random actions under the starting divergence threshold."""
    unit = (np.zeros(12), np.ones(12))
    params = pol.initialize("fixedwing", seed, normalizer=unit, horizon=horizon)
    rng = np.random.default_rng([seed, 4])
    eps = task.new_episodes(rng, n_episodes)
    lo, hi = params.action_low, params.action_high

    def random_actions(state, ref, t):
        return lo + rng.uniform(size=(len(state), len(lo))) * (hi - lo)

    data = ro.collect_pairs(task, params, eps, tr.CurriculumSchedule.fixedwing().tau_init,
                            controller=random_actions)
    params.norm_mean, params.norm_std = pol.compute_normalizer(data.states)
    return params
