"""Dynamics wrappers: linear translational drag and learned state residuals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from apgtrack import autodiff as ad
from apgtrack import nn
from apgtrack.dynamics.base import Dynamics, InvalidParameterError
from apgtrack.dynamics.quadrotor import observation


class _Wrapper(Dynamics):
    def __init__(self, base: Dynamics):
        self.base = base
        self.dt = base.dt
        self.integrator = base.integrator
        self.name = base.name
        self.state_dim = base.state_dim
        self.action_dim = base.action_dim
        self.velocity_slice = base.velocity_slice

    def normalize(self, state):
        return self.base.normalize(state)

    def validate(self, state) -> None:
        self.base.validate(state)

    @property
    def params(self):
        return self.base.params


class DragPerturbed(_Wrapper):
    """Base dynamics with ``v_dot <- v_dot - r * v`` on the translational velocity."""

    def __init__(self, base: Dynamics, drag: float = 0.3):
        if drag < 0:
            raise InvalidParameterError(f"drag factor must be non-negative, got {drag}")
        if base.velocity_slice.stop - base.velocity_slice.start != 3:
            raise InvalidParameterError(f"drag model needs a 3-D velocity; {base.name} has none")
        super().__init__(base)
        self.drag = float(drag)

    def derivative(self, state, action):
        d = self.base.derivative(state, action)
        sl = self.velocity_slice
        v = state[..., sl]
        return ad.concat([d[..., :sl.start], d[..., sl] - self.drag * v, d[..., sl.stop:]], axis=-1)

    def step(self, state, action):
        if self.drag == 0.0:
            return self.base.step(state, action)
        return super().step(state, action)


def drag_perturbed(state, action, base: Dynamics, r: float = 0.3):
    return DragPerturbed(base, r).step(state, action)


def residual_features(system: str, state):
    """Input features of the residual network for a physical state."""
    if system == "quadrotor":
        return observation(state)
    if system == "fixedwing":
        return state[..., 3:12]
    return state


FEATURE_DIMS = {"quadrotor": 15, "fixedwing": 9, "cartpole": 4}
STATE_DIMS = {"quadrotor": 18, "fixedwing": 12, "cartpole": 4}
ACTION_DIMS = {"quadrotor": 4, "fixedwing": 4, "cartpole": 1}
# (center, half range) of the action bounds, so the residual sees actions in [-1, 1]
ACTION_SCALES = {
    "quadrotor": (np.array([9.76, 0.0, 0.0, 0.0]), np.array([7.55, 0.5, 0.5, 0.5])),
    "fixedwing": (np.array([3.5, 0.0, 0.0, 0.0]), np.array([3.5, *np.radians([20.0, 2.5, 20.0])])),
    "cartpole": (np.zeros(1), np.ones(1)),
}


@dataclass
class ResidualModel(nn.Network):
    """MLP ``(features(s), a) -> state increment``."""

    system: str = "quadrotor"

    @classmethod
    def initialize(cls, system: str, seed: int = 0, hidden=(64, 64)) -> "ResidualModel":
        rng = np.random.default_rng(seed)
        widths = [FEATURE_DIMS[system] + ACTION_DIMS[system], *hidden, STATE_DIMS[system]]
        layers = nn.mlp(rng, widths, ["tanh"] * len(hidden) + ["linear"], prefix="res")
        # start from the nominal model
        layers[-1].weight = np.zeros_like(layers[-1].weight)
        return cls(layers=layers, system=system)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_width

    def __call__(self, state, action):
        center, half = ACTION_SCALES[self.system]
        x = ad.concat([residual_features(self.system, state), (action - center) / half], axis=-1)
        return nn.run_chain(self.layers, x)


class ResidualDynamics(_Wrapper):
    """``f(s, a) + delta_phi(s, a)``."""

    def __init__(self, base: Dynamics, residual: ResidualModel):
        super().__init__(base)
        if residual.output_dim != base.state_dim:
            raise ValueError(
                f"residual outputs {residual.output_dim} values, state has {base.state_dim}"
            )
        self.residual = residual

    def step(self, state, action):
        return self.base.normalize(self.base.step(state, action) + self.residual(state, action))


def residual_step(state, action, base: Dynamics, residual: ResidualModel):
    return ResidualDynamics(base, residual).step(state, action)
