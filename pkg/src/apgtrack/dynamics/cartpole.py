"""Pole-on-cart model (Barto, Sutton & Anderson equations of motion)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from apgtrack import autodiff as ad
from apgtrack.dynamics.base import Dynamics, InvalidStateError


@dataclass(frozen=True)
class CartPoleParams:
    m_cart: float = 1.0
    m_pole: float = 0.1
    half_length: float = 0.5
    gravity: float = 9.81
    max_force: float = 30.0
    dt: float = 0.05


class CartPoleDynamics(Dynamics):
    """State ``(x, x_dot, alpha, alpha_dot)``; action is a command in [-1, 1]."""

    name = "cartpole"
    state_dim = 4
    action_dim = 1
    velocity_slice = slice(1, 2)

    def __init__(self, params: CartPoleParams | None = None, integrator: str = "euler"):
        self.params = params or CartPoleParams()
        super().__init__(self.params.dt, integrator)

    def accelerations(self, state, action):
        p = self.params
        total = p.m_cart + p.m_pole
        pml = p.m_pole * p.half_length
        alpha = state[..., 2]
        alpha_dot = state[..., 3]
        force = p.max_force * action[..., 0]
        sin_a = ad.sin(alpha)
        cos_a = ad.cos(alpha)
        temp = (force + pml * alpha_dot * alpha_dot * sin_a) / total
        alpha_acc = (p.gravity * sin_a - cos_a * temp) / (
            p.half_length * (4.0 / 3.0 - p.m_pole * cos_a * cos_a / total)
        )
        x_acc = temp - pml * alpha_acc * cos_a / total
        return x_acc, alpha_acc

    def derivative(self, state, action):
        x_acc, alpha_acc = self.accelerations(state, action)
        return ad.stack([state[..., 1], x_acc, state[..., 3], alpha_acc], axis=-1)


_DEFAULT = CartPoleDynamics()


def cartpole_step(state, command, params: CartPoleParams | None = None):
    """One explicit-Euler step; ``command`` is a scalar (or ``(..., 1)``) in [-1, 1]."""
    dyn = _DEFAULT if params is None else CartPoleDynamics(params)
    s = ad.value(state)
    a = ad.value(command)
    if not (np.isfinite(s).all() and np.isfinite(a).all()):
        raise InvalidStateError("cartpole: non-finite state or command")
    if not isinstance(command, ad.Var):
        command = np.asarray(command, dtype=np.float64)
        if command.ndim == 0 or command.shape[-1] != 1:
            command = command[..., None]
    if not isinstance(state, ad.Var):
        state = np.asarray(state, dtype=np.float64)
    return dyn.step(state, command)
