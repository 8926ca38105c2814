"""Experiment configuration from sectioned key/value files.

Every key has a built-in default, so an empty file gives the reference
settings: the paper's optimizer values, curricula and trajectory statistics.
Unknown sections or keys and out-of-range values raise ``ConfigError``.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from apgtrack.policy import SYSTEMS


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSection:
    system: str = "quadrotor"
    seed: int = 0
    out_dir: str = "runs"


@dataclass
class DynamicsSection:
    integrator: str = "euler"
    drag: float = 0.0


@dataclass
class PolicySection:
    horizon: int = 10
    mode: str = "concurrent"


@dataclass
class TrainingSection:
    epochs: int = 60
    lr: float = -1.0  # negative: per-system paper value
    momentum: float = -1.0
    batch_size: int = 8
    clip_norm: float = 10.0
    pairs_per_epoch: int = 0  # 0: use every collected pair
    eval_count: int = 100
    episodes: int = 0  # cartpole / fixed-wing episodes per epoch; 0: default


@dataclass
class CurriculumSection:
    enabled: bool = True
    tau_init: float = -1.0  # negative: per-system default
    tau_increment: float = -1.0
    epochs_per_increment: int = 0
    tau_max: float = -1.0
    speed_stages: str = ""


@dataclass
class TrajectorySection:
    count: int = 10000
    test_fraction: float = 0.1
    v_max_min: float = 3.0
    v_max_max: float = 5.0
    a_max: float = 15.0
    n_waypoints: int = 3
    extent: float = 15.0
    max_tilt_rate: float = 0.5
    seed: int = 0


@dataclass
class MpcSection:
    horizon: int = 10
    iterations: int = 50
    step_size: float = -1.0  # negative: per-system default
    momentum: float = 0.9
    warm_start: bool = True


@dataclass
class AdaptationSection:
    drag: float = 0.3
    triples: int = 1000
    fine_tune_samples: int = 1000
    residual_epochs: int = 200
    residual_lr: float = 1e-3
    residual_momentum: float = 0.9
    fine_tune_epochs: int = 10
    fine_tune_lr: float = -1.0


SECTIONS = {
    "experiment": ExperimentSection,
    "dynamics": DynamicsSection,
    "policy": PolicySection,
    "training": TrainingSection,
    "curriculum": CurriculumSection,
    "trajectories": TrajectorySection,
    "mpc": MpcSection,
    "adaptation": AdaptationSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)
    policy: PolicySection = field(default_factory=PolicySection)
    training: TrainingSection = field(default_factory=TrainingSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    trajectories: TrajectorySection = field(default_factory=TrajectorySection)
    mpc: MpcSection = field(default_factory=MpcSection)
    adaptation: AdaptationSection = field(default_factory=AdaptationSection)

    def validate(self) -> "ExperimentConfig":
        e, p, t, tr, m, a = (self.experiment, self.policy, self.training, self.trajectories,
                             self.mpc, self.adaptation)
        checks = [
            (e.system in SYSTEMS, f"system must be one of {SYSTEMS}"),
            (self.dynamics.integrator in ("euler", "rk4"), "integrator must be euler or rk4"),
            (self.dynamics.drag >= 0, "drag must be >= 0"),
            (p.horizon >= 1, "horizon must be >= 1"),
            (p.mode in ("concurrent", "recurrent"), "mode must be concurrent or recurrent"),
            (t.epochs >= 0, "epochs must be >= 0"),
            (t.batch_size >= 1, "batch_size must be >= 1"),
            (t.clip_norm > 0, "clip_norm must be positive"),
            (t.pairs_per_epoch >= 0 and t.eval_count >= 0 and t.episodes >= 0,
             "counts must be >= 0"),
            (tr.count >= 1, "trajectory count must be >= 1"),
            (0 <= tr.test_fraction < 1, "test_fraction must be in [0, 1)"),
            (0 < tr.v_max_min <= tr.v_max_max, "need 0 < v_max_min <= v_max_max"),
            (tr.a_max > 0 and tr.max_tilt_rate > 0 and tr.extent > 0, "limits must be positive"),
            (tr.n_waypoints >= 2, "n_waypoints must be >= 2"),
            (m.horizon >= 1 and m.iterations >= 0, "invalid mpc horizon/iterations"),
            (0 <= m.momentum < 1, "mpc momentum must be in [0, 1)"),
            (a.drag >= 0 and a.triples >= 1 and a.fine_tune_samples >= 0, "invalid adaptation budget"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(kind, raw: str, where: str):
    try:
        if kind is bool or kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def parse(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig()
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        sec = getattr(cfg, name)
        known = {f.name: f.type for f in fields(sec)}
        for key, raw in cp[name].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            setattr(sec, key, _convert(known[key], raw, f"[{name}] {key}"))
    return cfg.validate()


def load(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text)
