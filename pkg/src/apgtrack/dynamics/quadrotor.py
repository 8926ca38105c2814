"""Collective-thrust / body-rate quadrotor model.

Flat state layout (18 values)::

    [0:3]   position, world frame, z up
    [3:6]   velocity, world frame
    [6:15]  rotation matrix body->world, row-major
    [15:18] angular velocity, body frame

Action: ``(thrust [N], desired body rates [rad/s] x3)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from apgtrack import autodiff as ad
from apgtrack.dynamics.base import Dynamics, InvalidStateError

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 1.0
    gravity: float = 9.81
    rate_gain: float = 10.0
    dt: float = 0.1
    thrust_min: float = 2.21
    thrust_max: float = 17.31
    rate_max: float = 0.5


def skew(w):
    """Batched skew-symmetric matrix of 3-vectors ``(..., 3) -> (..., 3, 3)``."""
    x, y, z = w[..., 0], w[..., 1], w[..., 2]
    zero = x * 0.0
    rows = [
        ad.stack([zero, -z, y], axis=-1),
        ad.stack([z, zero, -x], axis=-1),
        ad.stack([-y, x, zero], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def orthonormalize(rot):
    """Gram-Schmidt on the first two columns; third column by cross product."""
    c0 = rot[..., :, 0]
    c1 = rot[..., :, 1]
    c0 = c0 / ad.norm(c0)[..., None]
    c1 = c1 - ad.dot(c0, c1)[..., None] * c0
    c1 = c1 / ad.norm(c1)[..., None]
    c2 = ad.cross(c0, c1)
    return ad.stack([c0, c1, c2], axis=-1)


def rotation_of(state):
    s = state[..., 6:15]
    return ad.reshape(s, tuple(ad.value(s).shape[:-1]) + (3, 3))


def hover_state(position=(0.0, 0.0, 0.0), velocity=(0.0, 0.0, 0.0)) -> np.ndarray:
    p = np.broadcast_to(np.asarray(position, dtype=np.float64), np.broadcast_shapes(np.shape(position), np.shape(velocity)))
    v = np.broadcast_to(np.asarray(velocity, dtype=np.float64), p.shape)
    eye = np.broadcast_to(np.eye(3).reshape(9), p.shape[:-1] + (9,))
    return np.concatenate([p, v, eye, np.zeros_like(p)], axis=-1)


def orthonormality_error(state) -> np.ndarray:
    r = np.asarray(ad.value(state))[..., 6:15].reshape(np.shape(ad.value(state))[:-1] + (3, 3))
    err = np.swapaxes(r, -1, -2) @ r - np.eye(3)
    return np.abs(err).max(axis=(-1, -2))


class QuadrotorDynamics(Dynamics):
    name = "quadrotor"
    state_dim = 18
    action_dim = 4
    velocity_slice = slice(3, 6)

    def __init__(self, params: QuadrotorParams | None = None, integrator: str = "euler"):
        self.params = params or QuadrotorParams()
        super().__init__(self.params.dt, integrator)

    def derivative(self, state, action):
        p = self.params
        vel = state[..., 3:6]
        rot = rotation_of(state)
        omega = state[..., 15:18]
        thrust = action[..., 0:1]
        omega_des = action[..., 1:4]
        body_z = rot[..., :, 2]
        acc = body_z * (thrust / p.mass) + np.array([0.0, 0.0, -p.gravity])
        rot_dot = ad.matmul(rot, skew(omega))
        rot_dot = ad.reshape(rot_dot, tuple(ad.value(rot_dot).shape[:-2]) + (9,))
        omega_dot = p.rate_gain * (omega_des - omega)
        return ad.concat([vel, acc, rot_dot, omega_dot], axis=-1)

    def normalize(self, state):
        rot = orthonormalize(rotation_of(state))
        flat = ad.reshape(rot, tuple(ad.value(rot).shape[:-2]) + (9,))
        return ad.concat([state[..., 0:6], flat, state[..., 15:18]], axis=-1)

    def validate(self, state) -> None:
        super().validate(state)
        if (orthonormality_error(state) > ORTHO_TOL).any():
            raise InvalidStateError("quadrotor: rotation is not orthonormal")
        r = np.asarray(ad.value(state))[..., 6:15].reshape(np.shape(ad.value(state))[:-1] + (3, 3))
        if (np.linalg.det(r) <= 0).any():
            raise InvalidStateError("quadrotor: rotation has det <= 0")


def observation(state):
    """15-value policy input: world velocity, body velocity, first two rotation
    columns, body angular velocity."""
    vel = state[..., 3:6]
    rot = rotation_of(state)
    body_vel = ad.matvec(ad.swapaxes(rot, -1, -2), vel)
    cols = ad.concat([rot[..., :, 0], rot[..., :, 1]], axis=-1)
    return ad.concat([vel, body_vel, cols, state[..., 15:18]], axis=-1)


_DEFAULT = QuadrotorDynamics()


def quadrotor_step(state, action, params: QuadrotorParams | None = None):
    dyn = _DEFAULT if params is None else QuadrotorDynamics(params)
    dyn.validate(state)
    if not isinstance(state, ad.Var):
        state = np.asarray(state, dtype=np.float64)
    if not isinstance(action, ad.Var):
        action = np.asarray(action, dtype=np.float64)
    return dyn.step(state, action)
