"""Reference trajectories and state-reference datasets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from apgtrack import autodiff as ad


class GenerationError(RuntimeError):
    pass


class InvalidTargetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# piecewise quintic paths

def _quintic(p0, v0, a0, p1, v1, a1, h):
    """Coefficients c[0..5] (per axis) of p(s) = sum c_k s^k on s in [0, h]."""
    c0, c1, c2 = p0, v0, a0 / 2.0
    m = np.array([[h ** 3, h ** 4, h ** 5],
                  [3 * h ** 2, 4 * h ** 3, 5 * h ** 4],
                  [6 * h, 12 * h ** 2, 20 * h ** 3]])
    rhs = np.stack([p1 - (c0 + c1 * h + c2 * h ** 2),
                    v1 - (c1 + 2 * c2 * h),
                    a1 - 2 * c2])
    c345 = np.linalg.solve(m, rhs)
    return np.vstack([c0, c1, c2, c345])


@dataclass
class PolynomialPath:
    """C2-continuous piecewise quintic through waypoints."""

    knots: np.ndarray  # (n_seg + 1,) segment start times, knots[0] == 0
    coeffs: np.ndarray  # (n_seg, 6, 3)

    @property
    def duration(self) -> float:
        return float(self.knots[-1])

    def evaluate(self, t, derivative: int = 0) -> np.ndarray:
        t = np.clip(np.asarray(t, dtype=np.float64), 0.0, self.duration)
        seg = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, len(self.coeffs) - 1)
        s = t - self.knots[seg]
        c = self.coeffs[seg]  # (..., 6, 3)
        out = np.zeros(t.shape + (3,))
        for k in range(derivative, 6):
            fac = np.prod(np.arange(k - derivative + 1, k + 1)) if derivative else 1.0
            out += fac * c[..., k, :] * (s ** (k - derivative))[..., None]
        return out


def fit_path(waypoints: np.ndarray, duration: float) -> PolynomialPath:
    """Quintic spline with segment times proportional to chord length, zero
    velocity/acceleration at both ends, finite-difference slopes inside."""
    w = np.asarray(waypoints, dtype=np.float64)
    chords = np.linalg.norm(np.diff(w, axis=0), axis=1)
    if (chords < 1e-6).any():
        raise GenerationError("coincident waypoints")
    knots = np.concatenate([[0.0], np.cumsum(chords)]) * (duration / chords.sum())
    h = np.diff(knots)
    seg_vel = np.diff(w, axis=0) / h[:, None]
    n = len(w)
    vel = np.zeros_like(w)
    acc = np.zeros_like(w)
    for i in range(1, n - 1):
        vel[i] = (w[i + 1] - w[i - 1]) / (knots[i + 1] - knots[i - 1])
        acc[i] = (seg_vel[i] - seg_vel[i - 1]) / (0.5 * (h[i] + h[i - 1]))
    coeffs = np.stack([
        _quintic(w[i], vel[i], acc[i], w[i + 1], vel[i + 1], acc[i + 1], h[i])
        for i in range(n - 1)
    ])
    return PolynomialPath(knots, coeffs)


def scale_path(path: PolynomialPath, factor: float) -> PolynomialPath:
    """Spatial scaling about the start point; scales speed and acceleration by ``factor``."""
    c = path.coeffs.copy()
    origin = c[0, 0].copy()
    c[:, 0] = origin + factor * (c[:, 0] - origin)
    c[:, 1:] *= factor
    return PolynomialPath(path.knots.copy(), c)


@dataclass
class ReferenceTrajectory:
    """Desired states sampled every ``dt``: rows ``(px, py, pz, vx, vy, vz)``."""

    dt: float
    states: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.dt

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, 0:3]

    @property
    def velocities(self) -> np.ndarray:
        return self.states[:, 3:6]

    def __len__(self) -> int:
        return len(self.states)


def sample_path(path: PolynomialPath, dt: float = 0.1, speed_scale: float = 1.0,
                n_steps: int | None = None) -> ReferenceTrajectory:
    """Sample ``p(speed_scale * t)``; slower stages cover less of the path in
    the same number of steps."""
    if n_steps is None:
        n_steps = int(round(path.duration / dt))
    t = np.arange(n_steps + 1) * dt * speed_scale
    pos = path.evaluate(t)
    vel = speed_scale * path.evaluate(t, 1)
    return ReferenceTrajectory(dt, np.concatenate([pos, vel], axis=1))


@dataclass(frozen=True)
class PolynomialConfig:
    duration: float = 10.0
    dt: float = 0.1
    v_max: float = 3.0
    a_max: float = 15.0
    n_waypoints: int = 3
    extent: float = 15.0
    max_attempts: int = 20
    # turn rate of the thrust direction the vehicle must follow; matches the body-rate bound
    max_tilt_rate: float = 0.5


def path_limits(path: PolynomialPath, resolution: float = 0.01) -> tuple[float, float]:
    t = np.arange(0.0, path.duration + resolution, resolution)
    vmax = np.linalg.norm(path.evaluate(t, 1), axis=1).max()
    amax = np.linalg.norm(path.evaluate(t, 2), axis=1).max()
    return float(vmax), float(amax)


def tilt_rate(path: PolynomialPath, resolution: float = 0.01, gravity: float = 9.81) -> float:
    """Largest turn rate of the required thrust direction ``a + g e_z``."""
    t = np.arange(0.0, path.duration + resolution, resolution)
    a = path.evaluate(t, 2) + np.array([0.0, 0.0, gravity])
    n = a / np.linalg.norm(a, axis=1, keepdims=True)
    cos = np.clip(np.sum(n[1:] * n[:-1], axis=1), -1.0, 1.0)
    return float(np.arccos(cos).max() / resolution)


def generate_path(seed: int, cfg: PolynomialConfig = PolynomialConfig()) -> PolynomialPath:
    if not 0 < cfg.v_max:
        raise GenerationError("v_max must be positive")
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_attempts):
        w = rng.uniform(0.0, cfg.extent, size=(cfg.n_waypoints, 3))
        w -= w[0]
        try:
            path = fit_path(w, cfg.duration)
        except GenerationError:
            continue
        vmax, amax = path_limits(path)
        factor = min(1.0, cfg.v_max / vmax, cfg.a_max / amax)
        if factor < 1.0:
            # leave a margin for the sampled check
            path = scale_path(path, factor * 0.999)
        for _ in range(60):
            if tilt_rate(path) <= cfg.max_tilt_rate:
                break
            path = scale_path(path, 0.95)
        vmax, amax = path_limits(path)
        feasible = vmax <= cfg.v_max and amax <= cfg.a_max and tilt_rate(path) <= cfg.max_tilt_rate
        if feasible and np.isfinite(path.coeffs).all():
            return path
    raise GenerationError(f"no feasible path after {cfg.max_attempts} attempts (seed {seed})")


def generate_polynomial(seed: int, duration_s: float = 10.0, dt: float = 0.1, v_max: float = 3.0,
                        a_max: float = 15.0, speed_scale: float = 1.0) -> ReferenceTrajectory:
    cfg = PolynomialConfig(duration=duration_s, dt=dt, v_max=v_max, a_max=a_max)
    return sample_path(generate_path(seed, cfg), dt, speed_scale)


@dataclass
class TrajectorySet:
    """Seeded pool of paths with a disjoint train/test partition."""

    train: list[PolynomialPath]
    test: list[PolynomialPath]
    seed: int
    config: PolynomialConfig = field(default_factory=PolynomialConfig)
    train_ids: list[int] = field(default_factory=list)
    test_ids: list[int] = field(default_factory=list)

    @classmethod
    def generate(cls, count: int, seed: int = 0, test_fraction: float = 0.1,
                 config: PolynomialConfig | None = None, v_max_range=(3.0, 5.0)) -> "TrajectorySet":
        if count < 1:
            raise ValueError("count must be >= 1")
        config = config or PolynomialConfig()
        rng = np.random.default_rng(seed)
        path_seeds = rng.integers(0, 2 ** 31 - 1, size=count)
        v_maxes = rng.uniform(*v_max_range, size=count)
        paths = [
            generate_path(int(s), PolynomialConfig(**{**config.__dict__, "v_max": float(v)}))
            for s, v in zip(path_seeds, v_maxes)
        ]
        order = rng.permutation(count)
        n_test = int(round(count * test_fraction))
        test_ids = sorted(int(i) for i in order[:n_test])
        train_ids = sorted(int(i) for i in order[n_test:])
        return cls([paths[i] for i in train_ids], [paths[i] for i in test_ids], seed, config,
                   train_ids, test_ids)

    def sample(self, split: str = "train", speed_scale: float = 1.0, indices=None) -> np.ndarray:
        """Stacked references ``(n, steps + 1, 6)``."""
        paths = self.train if split == "train" else self.test
        if indices is not None:
            paths = [paths[i] for i in indices]
        if not paths:
            return np.zeros((0, int(round(self.config.duration / self.config.dt)) + 1, 6))
        return np.stack([sample_path(p, self.config.dt, speed_scale).states for p in paths])


# ---------------------------------------------------------------------------
# file formats

TRAJ_COLUMNS = ("t", "px", "py", "pz", "vx", "vy", "vz")


def save_trajectory(path, traj: ReferenceTrajectory) -> None:
    data = np.column_stack([traj.times, traj.states])
    np.savetxt(path, data, fmt="%.17g", header=" ".join(TRAJ_COLUMNS))


def load_trajectory(path) -> ReferenceTrajectory:
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] != len(TRAJ_COLUMNS):
        raise ValueError(f"{path}: expected {len(TRAJ_COLUMNS)} columns, got {data.shape[1]}")
    dt = float(data[1, 0] - data[0, 0]) if len(data) > 1 else 0.1
    return ReferenceTrajectory(dt, data[:, 1:])


def validate_trajectory(traj: ReferenceTrajectory, v_max: float) -> bool:
    speeds = np.linalg.norm(traj.velocities, axis=1)
    return bool(np.isfinite(traj.states).all() and speeds.max() <= v_max + 1e-9)


def write_trajectory_set(out_dir, tset: TrajectorySet, speed_scale: float = 1.0) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": tset.seed, "count": len(tset.train) + len(tset.test),
                "dt": tset.config.dt, "duration": tset.config.duration, "files": []}
    for split, paths, ids in (("train", tset.train, tset.train_ids), ("test", tset.test, tset.test_ids)):
        for i, p in zip(ids, paths):
            name = f"traj_{i:05d}.txt"
            save_trajectory(out / name, sample_path(p, tset.config.dt, speed_scale))
            manifest["files"].append({"file": name, "index": i, "split": split})
    manifest["files"].sort(key=lambda f: f["index"])
    manifest["n_train"] = len(tset.train)
    manifest["n_test"] = len(tset.test)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def read_trajectory_dir(path, split: str | None = None) -> list[ReferenceTrajectory]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    return [load_trajectory(path / f["file"]) for f in manifest["files"]
            if split is None or f["split"] == split]


# ---------------------------------------------------------------------------
# interpolated references

def cartpole_reference(current, k: int):
    """``k`` states linearly interpolating (x_dot, alpha, alpha_dot) from the
    current values to zero; the cart position is carried unchanged."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cur = np.asarray(current, dtype=np.float64)
    frac = 1.0 - np.arange(1, k + 1) / k  # weight of the current state
    ref = cur[..., None, :] * frac[:, None]
    ref[..., 0] = cur[..., None, 0]
    return ref


def line_points(position, target, spacing, k: int):
    """``k`` points ``spacing`` apart from ``position`` toward ``target``,
    clamped at the target. Works on arrays and tape variables."""
    delta = target - position
    dist = ad.norm(delta)
    if (ad.value(dist) < 1e-9).any():
        raise InvalidTargetError("target coincides with the current position")
    direction = delta / dist[..., None]
    steps = np.arange(1, k + 1, dtype=np.float64)
    along = ad.value(spacing)[..., None] * steps  # (..., k)
    along = np.broadcast_to(along, ad.value(dist).shape + (k,))
    reached = along >= ad.value(dist)[..., None]
    # clamp at target without routing the gradient through the switch
    along_sel = ad.where(reached, dist[..., None] * np.ones(k), along)
    return position[..., None, :] + along_sel[..., None] * direction[..., None, :]


def fixedwing_reference(current_position, target, speed, dt: float = 0.05, k: int = 10) -> np.ndarray:
    """Constant-speed points on the straight line toward the target."""
    pos = np.asarray(current_position, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    spacing = np.asarray(speed, dtype=np.float64) * dt
    return line_points(pos, tgt, spacing, k)


def collect_pairs(task, params, episodes, tau_div: float = np.inf, dynamics=None, **kw):
    """Roll the policy through ``episodes`` and gather (state, reference) pairs,
    resetting onto the reference whenever divergence exceeds ``tau_div``."""
    from apgtrack.rollout import collect_pairs as _collect
    return _collect(task, params, episodes, tau_div=tau_div, dynamics=dynamics, **kw)
