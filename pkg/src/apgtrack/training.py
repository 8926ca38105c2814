"""Policy training by backpropagation through the unrolled dynamics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from apgtrack import autodiff as ad
from apgtrack import policy as pol
from apgtrack import rollout as ro
from apgtrack import tasks as tk
from apgtrack.tasks import loss_cartpole, loss_fixedwing, loss_quadrotor  # noqa: F401

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "tau_div", "speed_stage", "train_loss", "eval_tracking_error_mean",
                  "eval_tracking_error_std", "eval_success_ratio")


class DivergedRolloutError(FloatingPointError):
    pass


class TrainingDivergedError(RuntimeError):
    """Raised after repeated non-finite epochs; ``params`` holds the last finite weights."""

    def __init__(self, message, params=None, metrics=None):
        super().__init__(message)
        self.params = params
        self.metrics = metrics or []


@dataclass
class HorizonConfig:
    T: int = pol.HORIZON
    mode: str = "concurrent"

    def __post_init__(self):
        if int(self.T) < 1:
            raise ValueError("horizon T must be >= 1")
        if self.mode not in ("concurrent", "recurrent"):
            raise ValueError(f"unknown unroll mode {self.mode!r}")
        self.T = int(self.T)


@dataclass
class CurriculumSchedule:
    """Divergence threshold growing stepwise; speed stages restart it."""

    tau_init: float = np.inf
    tau_increment: float = 0.0
    epochs_per_increment: int = 1
    tau_max: float = np.inf
    speed_stages: tuple = (1.0,)

    def __post_init__(self):
        if not self.tau_init > 0:
            raise ValueError("tau_init must be positive")
        if self.tau_init > self.tau_max:
            raise ValueError("tau_init must not exceed tau_max")
        growing = np.isfinite(self.tau_init) and self.tau_max > self.tau_init
        if growing and not self.tau_increment > 0:
            raise ValueError("tau_increment must be positive")
        if self.epochs_per_increment < 1:
            raise ValueError("epochs_per_increment must be >= 1")
        if not self.speed_stages:
            raise ValueError("at least one speed stage is required")

    def tau_at(self, epoch: int) -> float:
        """Threshold ``epoch`` epochs after the schedule (re)started."""
        if not np.isfinite(self.tau_init):
            return np.inf
        steps = epoch // self.epochs_per_increment
        return float(min(self.tau_init + steps * self.tau_increment, self.tau_max))

    @classmethod
    def quadrotor(cls) -> "CurriculumSchedule":
        return cls(0.1, 0.05, 5, 2.0, (0.5, 0.75, 1.0))

    @classmethod
    def fixedwing(cls) -> "CurriculumSchedule":
        return cls(4.0, 0.5, 1, 20.0)

    @classmethod
    def constant(cls, tau: float) -> "CurriculumSchedule":
        return cls(tau, 0.0, 1, tau)

    @classmethod
    def cartpole(cls) -> "CurriculumSchedule":
        """No curriculum; pairs reset once the pole passes the failure angle."""
        return cls.constant(tk.CartPoleTask.fail_angle)

    @classmethod
    def none(cls, speed_stages=(1.0,)) -> "CurriculumSchedule":
        return cls(np.inf, 0.0, 1, np.inf, tuple(speed_stages))

    @classmethod
    def default(cls, system: str) -> "CurriculumSchedule":
        return {"quadrotor": cls.quadrotor, "fixedwing": cls.fixedwing,
                "cartpole": cls.cartpole}.get(system, cls.none)()


# ---------------------------------------------------------------------------
# unrolling

@dataclass
class Unroll:
    states: list
    raw: object
    actions: object
    tape: ad.Tape
    policy_calls: int


def _check_horizon(params, T: int):
    if params.horizon < T:
        raise ValueError(f"policy predicts {params.horizon} actions, horizon needs {T}")


def _step_checked(dyn, state, action):
    nxt = dyn.step(state, action)
    if not np.isfinite(ad.value(nxt)).all():
        raise DivergedRolloutError("non-finite state during unroll")
    return nxt


def unroll_concurrent(task: tk.Task, params, s0, ref: dict, T: int, dynamics=None,
                      tape: ad.Tape | None = None) -> Unroll:
    """One policy call predicts all ``T`` actions; the dynamics are applied in sequence."""
    _check_horizon(params, T)
    dyn = dynamics or task.dynamics
    raw = task.policy_raw(params, s0, ref)[:, :T]
    actions = task.scale(params, raw)
    states, s = [], s0
    for k in range(T):
        s = _step_checked(dyn, s, actions[:, k])
        states.append(s)
    return Unroll(states, raw, actions, tape, 1)


def unroll_recurrent(task: tk.Task, params, s0, ref: dict, T: int, dynamics=None,
                     tape: ad.Tape | None = None) -> Unroll:
    """The policy is re-run on every simulated state and its first action applied."""
    _check_horizon(params, T)
    dyn = dynamics or task.dynamics
    raws, acts, states, s = [], [], [], s0
    for k in range(T):
        r = task.policy_raw(params, s, ref, offset=k)[:, 0:1]
        a = task.scale(params, r)
        s = _step_checked(dyn, s, a[:, 0])
        raws.append(r)
        acts.append(a)
        states.append(s)
    return Unroll(states, ad.concat(raws, axis=1), ad.concat(acts, axis=1), tape, T)


UNROLLS = {"concurrent": unroll_concurrent, "recurrent": unroll_recurrent}


def horizon_loss(task: tk.Task, params, states_np, ref: dict, horizon: HorizonConfig, dynamics=None):
    """Loss of a minibatch evaluated on a fresh tape.

    Returns ``(loss, vars, tape)``; ``params`` are lifted onto the tape.
    """
    tape = ad.Tape()
    net, vars_ = params.on_tape(tape)
    u = UNROLLS[horizon.mode](task, net, states_np, ref, horizon.T, dynamics, tape)
    loss = task.loss(u.states, u.raw, _loss_ref(ref, horizon.T))
    return loss, vars_, tape


def _loss_ref(ref: dict, T: int) -> dict:
    return {**ref, "window": ref["window"][:, :T]}


def loss_and_grad(task, params, states_np, ref, horizon, dynamics=None):
    loss, vars_, tape = horizon_loss(task, params, states_np, ref, horizon, dynamics)
    grads = tape.backward(loss)
    return float(loss.value), [grads[v.id] for v in vars_]


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    velocity: list = field(default_factory=list)
    skipped: int = 0
    clipped: int = 0

    @classmethod
    def for_params(cls, params, lr: float, momentum: float = 0.9) -> "OptimizerState":
        return cls(lr, momentum, [np.zeros_like(a) for a in params.arrays()])


def clip_gradients(grads, max_norm: float):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if np.isfinite(norm) and norm > max_norm > 0:
        return [g * (max_norm / norm) for g in grads], norm, True
    return grads, norm, False


def sgd_step(params, grads, state: OptimizerState):
    """``v <- mu v + g``; ``theta <- theta - lr v``.

    Raises ``ad.DivergedGradientError`` (and leaves everything unchanged) on a
    non-finite gradient.
    """
    arrays = params.arrays()
    if len(grads) != len(arrays) or len(state.velocity) != len(arrays):
        raise ad.ShapeError("gradient/parameter count mismatch")
    for g, a, v in zip(grads, arrays, state.velocity):
        if np.shape(g) != np.shape(a) or np.shape(v) != np.shape(a):
            raise ad.ShapeError(f"gradient shape {np.shape(g)} vs parameter {np.shape(a)}")
    if not all(np.isfinite(g).all() for g in grads):
        state.skipped += 1
        raise ad.DivergedGradientError(-1, "sgd_step")
    state.velocity = [state.momentum * v + g for v, g in zip(state.velocity, grads)]
    return params.with_arrays([a - state.lr * v for a, v in zip(arrays, state.velocity)])


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    lr: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 8
    clip_norm: float = 10.0
    pairs_per_epoch: int | None = None
    eval_count: int = 100
    patience_nonfinite: int = 3
    stage_success: float = 0.95

    @classmethod
    def paper(cls, system: str) -> "TrainConfig":
        lr = {"quadrotor": 1e-5, "fixedwing": 1e-4, "cartpole": 1e-7}[system]
        return cls(lr=lr, momentum=0.0 if system == "cartpole" else 0.9)


@dataclass
class TrainResult:
    params: object
    metrics: list
    events: list
    optimizer: OptimizerState | None = None
    samples_used: int = 0


def evaluate_policy(task, params, episodes, dynamics=None) -> ro.RolloutResult:
    return ro.run_closed_loop(task, episodes, ro.policy_controller(task, params), dynamics)


def aggregate(result: ro.RolloutResult) -> tuple[float, float, float]:
    ok = result.success
    ratio = float(ok.mean()) if ok.size else float("nan")
    if not ok.any():
        return float("nan"), float("nan"), ratio
    e = result.error[ok]
    return float(e.mean()), float(e.std()), ratio


EpisodeSource = Callable[[float], np.ndarray]


def _as_source(ep) -> EpisodeSource:
    return ep if callable(ep) else (lambda speed: ep)


def train(system: str | tk.Task, horizon: HorizonConfig | None = None,
          curriculum: CurriculumSchedule | None = None, epochs: int = 10, seed: int = 0,
          config: TrainConfig | None = None, params=None, train_episodes=None,
          eval_episodes=None, dynamics=None, collect_dynamics=None, eval_dynamics=None,
          log_path=None, sample_budget: int | None = None, on_epoch=None) -> TrainResult:
    """Alternate curriculum data collection, minibatch SGD and evaluation.

    ``train_episodes`` / ``eval_episodes`` are episode arrays or callables
    mapping a speed scale to one. ``dynamics`` is what the policy is
    differentiated through; data is collected in ``collect_dynamics`` and
    evaluated in ``eval_dynamics`` (both default to ``dynamics``).

    With a ``sample_budget`` the collected pairs are kept in a buffer; once
    the budget of collection steps is spent, later epochs reuse the buffer.
    """
    horizon = horizon or HorizonConfig()
    task = system if isinstance(system, tk.Task) else tk.make_task(system, horizon.T)
    task.horizon = horizon.T
    system = task.name
    curriculum = curriculum or CurriculumSchedule.default(system)
    config = config or TrainConfig.paper(system)
    rng = np.random.default_rng(seed)
    if params is None:
        params = pol.initialize(system, seed, horizon=horizon.T)
    opt = OptimizerState.for_params(params, config.lr, config.momentum)
    train_src = _as_source(train_episodes if train_episodes is not None
                           else _default_episodes(task, seed, "train"))
    eval_src = _as_source(eval_episodes if eval_episodes is not None
                          else _default_episodes(task, seed, "test", config.eval_count))
    dyn = dynamics or task.dynamics
    collect_dyn = collect_dynamics or dyn
    eval_dyn = eval_dynamics or collect_dyn
    buffer = []

    metrics, events = [], []
    stage, stage_start = 0, 0
    bad_epochs, last_good = 0, params
    samples_used = 0
    writer = MetricsLog(log_path) if log_path else None
    for epoch in range(epochs):
        speed = curriculum.speed_stages[stage]
        tau = curriculum.tau_at(epoch - stage_start)
        if sample_budget is None:
            data = ro.collect_pairs(task, params, train_src(speed), tau, collect_dyn)
        else:
            left = sample_budget - samples_used
            if left > 0:
                new = ro.collect_pairs(task, params, train_src(speed), tau, collect_dyn,
                                       max_steps=left)
                samples_used += new.n_steps
                buffer.append(new)
            data = _merge(buffer)
        if config.pairs_per_epoch and len(data) > config.pairs_per_epoch:
            data = data.subset(rng.permutation(len(data))[:config.pairs_per_epoch])
        order = rng.permutation(len(data))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = data.subset(idx)
            try:
                loss, grads = loss_and_grad(task, params, batch.states, batch.refs, horizon, dyn)
            except (ad.DivergedGradientError, DivergedRolloutError) as exc:
                events.append(("diverged_gradient", epoch, str(exc)))
                losses.append(np.nan)
                continue
            grads, norm, clipped = clip_gradients(grads, config.clip_norm)
            opt.clipped += int(clipped)
            try:
                params = sgd_step(params, grads, opt)
            except ad.DivergedGradientError:
                events.append(("diverged_gradient", epoch, "sgd_step"))
                losses.append(np.nan)
                continue
            losses.append(loss)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        if not np.isfinite(train_loss):
            bad_epochs += 1
            if bad_epochs >= config.patience_nonfinite:
                raise TrainingDivergedError(
                    f"non-finite training loss for {bad_epochs} consecutive epochs",
                    last_good, metrics)
        else:
            bad_epochs, last_good = 0, params

        result = evaluate_policy(task, params, eval_src(speed), eval_dyn)
        err_mean, err_std, success = aggregate(result)
        row = dict(zip(METRIC_COLUMNS, (epoch, tau, speed, train_loss, err_mean, err_std, success)))
        row.update(resets=data.n_resets, pairs=len(data), clipped=opt.clipped,
                   samples=samples_used)
        metrics.append(row)
        if writer:
            writer.append(row)
        log.info("epoch %d tau %.2f speed %.2f loss %.4g err %.4g success %.2f",
                  epoch, tau, speed, train_loss, err_mean, success)
        if on_epoch:
            on_epoch(row, params)
        if success >= config.stage_success and stage + 1 < len(curriculum.speed_stages):
            stage += 1
            stage_start = epoch + 1
            events.append(("speed_stage", epoch, curriculum.speed_stages[stage]))
    return TrainResult(params, metrics, events, opt, samples_used)


def _merge(parts: list) -> ro.PairDataset:
    parts = [p for p in parts if len(p)]
    if not parts:
        return ro.PairDataset(np.zeros((0, 0)), {}, 0, 0)
    return ro.PairDataset(np.concatenate([p.states for p in parts]),
                          tk._concat_refs([p.refs for p in parts]),
                          sum(p.n_resets for p in parts), sum(p.n_steps for p in parts),
                          np.concatenate([p.reset_flags for p in parts]))


def _default_episodes(task: tk.Task, seed: int, split: str, count: int | None = None):
    rng = np.random.default_rng(seed + (0 if split == "train" else 1))
    if task.name == "quadrotor":
        from apgtrack.reference import TrajectorySet

        tset = TrajectorySet.generate(500, seed)
        ids = None if count is None else np.arange(min(count, len(tset.test_ids)))
        return lambda speed: tset.sample(split, speed, ids)
    n = count or (50 if task.name == "cartpole" else 100)
    return task.new_episodes(rng, n)


class MetricsLog:
    """Whitespace-separated columnar epoch log."""

    def __init__(self, path):
        from pathlib import Path

        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("# " + " ".join(METRIC_COLUMNS) + "\n")

    def append(self, row: dict) -> None:
        vals = [f"{int(row['epoch'])}"] + [f"{float(row[c]):.10g}" for c in METRIC_COLUMNS[1:]]
        with self.path.open("a") as fh:
            fh.write(" ".join(vals) + "\n")


def read_metrics_log(path) -> list[dict]:
    rows = []
    for line in open(path):
        if line.startswith("#") or not line.strip():
            continue
        vals = line.split()
        row = {c: float(v) for c, v in zip(METRIC_COLUMNS, vals)}
        row["epoch"] = int(row["epoch"])
        rows.append(row)
    return rows
