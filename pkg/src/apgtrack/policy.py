"""Neural control policies for the three systems.

Each policy predicts ``horizon`` actions at once (10 by default). ``forward_*`` return raw
outputs (tanh range for the CartPole, sigmoid range [0, 1] for the flying
systems); :func:`scale_actions` maps them to physical commands.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from apgtrack import autodiff as ad
from apgtrack import nn
from apgtrack.dynamics.quadrotor import QuadrotorParams, observation
from apgtrack.dynamics.fixedwing import FixedWingParams
from apgtrack.nn import ConfigurationError

HORIZON = 10
REF_STEPS = 10
SYSTEMS = ("cartpole", "quadrotor", "fixedwing")
STD_FLOOR = 1e-6


def default_bounds(system: str) -> tuple[np.ndarray, np.ndarray]:
    if system == "cartpole":
        return np.array([-1.0]), np.array([1.0])
    if system == "quadrotor":
        q = QuadrotorParams()
        r = q.rate_max
        return np.array([q.thrust_min, -r, -r, -r]), np.array([q.thrust_max, r, r, r])
    if system == "fixedwing":
        f = FixedWingParams()
        hi = np.array([f.thrust_max, np.radians(f.elevator_max_deg),
                       np.radians(f.aileron_max_deg), np.radians(f.rudder_max_deg)])
        return np.array([0.0, -hi[1], -hi[2], -hi[3]]), hi
    raise ConfigurationError(f"unknown system {system!r}")


@dataclass
class PolicyParameters(nn.Network):
    system: str = "quadrotor"
    action_low: np.ndarray = field(default_factory=lambda: np.zeros(0))
    action_high: np.ndarray = field(default_factory=lambda: np.zeros(0))
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def __post_init__(self):
        low, high = np.asarray(self.action_low, float), np.asarray(self.action_high, float)
        if low.shape != high.shape or not (low < high).all():
            raise ConfigurationError("action bounds need lower < upper per output")
        self.action_low, self.action_high = low, high

    @property
    def action_dim(self) -> int:
        return self.action_low.size

    @property
    def horizon(self) -> int:
        return self.layers[-1].out_width // max(self.action_dim, 1)

    def check_architecture(self) -> None:
        expected = architecture(self.system, self.horizon)
        got = [(l.name, l.in_width, l.out_width, l.kernel) for l in self.layers]
        want = [(name, i, o, k) for name, i, o, _, k in expected]
        if got != want:
            raise ConfigurationError(f"{self.system} policy layers {got} do not match {want}")


def architecture(system: str, horizon: int = HORIZON) -> list[tuple]:
    """Layer table ``(name, fan_in, fan_out, activation, kernel)``."""
    if system == "cartpole":
        return [
            ("fc0", 4, 32, "tanh", 0),
            ("fc1", 32, 64, "tanh", 0),
            ("fc2", 64, 64, "tanh", 0),
            ("fc3", 64, 32, "tanh", 0),
            ("fc4", 32, horizon, "tanh", 0),
        ]
    if system == "quadrotor":
        return [
            ("state", 15, 64, "tanh", 0),
            ("ref", 3 * 6, 20, "tanh", 3),
            ("h0", 64 + (REF_STEPS - 2) * 20, 64, "tanh", 0),
            ("h1", 64, 64, "tanh", 0),
            ("h2", 64, 64, "tanh", 0),
            ("out", 64, 4 * horizon, "sigmoid", 0),
        ]
    if system == "fixedwing":
        return [
            ("state", 12, 64, "tanh", 0),
            ("ref", 3, 64, "tanh", 0),
            ("h0", 128, 64, "tanh", 0),
            ("h1", 64, 64, "tanh", 0),
            ("h2", 64, 64, "tanh", 0),
            ("out", 64, 4 * horizon, "sigmoid", 0),
        ]
    raise ConfigurationError(f"unknown system {system!r}")


def initialize(system: str, seed: int = 0, normalizer=None, horizon: int = HORIZON) -> PolicyParameters:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases."""
    if horizon < 1:
        raise ConfigurationError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    layers = [nn.init_layer(rng, name, fi, fo, act, k) for name, fi, fo, act, k in architecture(system, horizon)]
    low, high = default_bounds(system)
    mean, std = normalizer if normalizer is not None else (None, None)
    return PolicyParameters(layers=layers, system=system, action_low=low, action_high=high,
                            norm_mean=mean, norm_std=std)


def _check_width(x, width: int, what: str):
    if ad.value(x).shape[-1] != width:
        raise ConfigurationError(f"{what}: expected last dim {width}, got {ad.value(x).shape}")


def forward_cartpole(params: PolicyParameters, state):
    """Raw state -> ``(..., 10, 1)`` commands in (-1, 1)."""
    _check_width(state, 4, "cartpole state")
    out = nn.run_chain(params.layers, state)
    return ad.reshape(out, tuple(ad.value(out).shape[:-1]) + (params.horizon, 1))


def forward_quadrotor(params: PolicyParameters, obs, ref_features):
    """15-value observation plus ``(..., 10, 6)`` reference features ->
    ``(..., 10, 4)`` sigmoid outputs ``(thrust, rate_x, rate_y, rate_z)``."""
    _check_width(obs, 15, "quadrotor observation")
    rf = ad.value(ref_features)
    if rf.shape[-2:] != (REF_STEPS, 6):
        raise ConfigurationError(f"quadrotor reference features must be (..., 10, 6), got {rf.shape}")
    h_state = params["state"](obs)
    h_ref = params["ref"](ref_features)
    h_ref = ad.reshape(h_ref, tuple(ad.value(h_ref).shape[:-2]) + (-1,))
    x = ad.concat([h_state, h_ref], axis=-1)
    for name in ("h0", "h1", "h2", "out"):
        x = params[name](x)
    return ad.reshape(x, tuple(ad.value(x).shape[:-1]) + (params.horizon, 4))


def normalize_state(params: PolicyParameters, state):
    if params.norm_mean is None or params.norm_std is None:
        raise ConfigurationError("fixed-wing policy needs a state normalizer")
    return (state - params.norm_mean) / params.norm_std


def forward_fixedwing(params: PolicyParameters, state, ref_features):
    """Raw 12-value state plus relative position of the 10th reference point ->
    ``(..., 10, 4)`` sigmoid outputs ``(thrust, elevator, aileron, rudder)``."""
    _check_width(state, 12, "fixed-wing state")
    _check_width(ref_features, 3, "fixed-wing reference")
    h_state = params["state"](normalize_state(params, state))
    h_ref = params["ref"](ref_features)
    x = ad.concat([h_state, h_ref], axis=-1)
    for name in ("h0", "h1", "h2", "out"):
        x = params[name](x)
    return ad.reshape(x, tuple(ad.value(x).shape[:-1]) + (params.horizon, 4))


def scale_actions(params: PolicyParameters, raw):
    """Affine map from the raw output range to the physical action bounds."""
    lo, hi = params.action_low, params.action_high
    if params.system == "cartpole":
        return raw  # tanh output is already the command in [-1, 1]
    return lo + raw * (hi - lo)


def quadrotor_reference_features(state, ref_window):
    """``ref_window[..., k, :]`` holds desired ``(position, velocity)`` for the
    next steps; positions are made relative to the current position."""
    ref = ref_window[..., :REF_STEPS, :]
    pos = state[..., None, 0:3]
    return ad.concat([ref[..., 0:3] - pos, ref[..., 3:6]], axis=-1)


def compute_normalizer(states) -> tuple[np.ndarray, np.ndarray]:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] == 0:
        raise ConfigurationError("normalizer needs a non-empty (N, dim) dataset")
    mean = states.mean(axis=0)
    std = np.maximum(states.std(axis=0), STD_FLOOR)
    return mean, std


def forward(params: PolicyParameters, state, ref_features=None):
    """System-dispatching forward pass returning raw outputs."""
    if params.system == "cartpole":
        return forward_cartpole(params, state)
    if params.system == "quadrotor":
        return forward_quadrotor(params, observation(state), ref_features)
    return forward_fixedwing(params, state, ref_features)
