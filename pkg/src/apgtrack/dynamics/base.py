"""Shared machinery for the discrete-time dynamics models.

States and actions are flat float64 arrays with arbitrary leading batch
axes, ``(..., state_dim)`` and ``(..., action_dim)``. Every model is
written against :mod:`apgtrack.autodiff` so it runs on numpy arrays and on
tape variables alike.
"""
from __future__ import annotations

import numpy as np

from apgtrack import autodiff as ad


class InvalidStateError(ValueError):
    pass


class InvalidParameterError(ValueError):
    pass


class Dynamics:
    """Continuous-time model ``derivative(s, a)`` integrated at a fixed ``dt``."""

    name = "base"
    state_dim = 0
    action_dim = 0
    # translational velocity components acted on by linear drag
    velocity_slice = slice(0, 0)

    def __init__(self, dt: float, integrator: str = "euler"):
        if integrator not in ("euler", "rk4"):
            raise InvalidParameterError(f"unknown integrator {integrator!r}")
        self.dt = float(dt)
        self.integrator = integrator

    def derivative(self, state, action):
        raise NotImplementedError

    def normalize(self, state):
        """Project a state back onto its manifold (identity by default)."""
        return state

    def validate(self, state) -> None:
        s = ad.value(state)
        if s.shape[-1] != self.state_dim:
            raise InvalidStateError(f"{self.name}: expected state dim {self.state_dim}, got {s.shape}")
        if not np.isfinite(s).all():
            raise InvalidStateError(f"{self.name}: non-finite state")

    def step(self, state, action):
        return self.normalize(integrate(self.derivative, state, action, self.dt, self.integrator))

    def __call__(self, state, action):
        return self.step(state, action)


def integrate(deriv, state, action, dt: float, method: str = "euler"):
    if method == "euler":
        return state + dt * deriv(state, action)
    k1 = deriv(state, action)
    k2 = deriv(state + (0.5 * dt) * k1, action)
    k3 = deriv(state + (0.5 * dt) * k2, action)
    k4 = deriv(state + dt * k3, action)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
