"""Differentiable discrete-time dynamics models."""
from apgtrack.dynamics.base import Dynamics, InvalidParameterError, InvalidStateError, integrate
from apgtrack.dynamics.cartpole import CartPoleDynamics, CartPoleParams, cartpole_step
from apgtrack.dynamics.fixedwing import FixedWingDynamics, FixedWingParams, fixedwing_step
from apgtrack.dynamics.perturbed import (
    DragPerturbed,
    ResidualDynamics,
    ResidualModel,
    drag_perturbed,
    residual_step,
)
from apgtrack.dynamics.quadrotor import (
    QuadrotorDynamics,
    QuadrotorParams,
    hover_state,
    observation,
    quadrotor_step,
)

__all__ = [
    "CartPoleDynamics", "CartPoleParams", "DragPerturbed", "Dynamics", "FixedWingDynamics",
    "FixedWingParams", "InvalidParameterError", "InvalidStateError", "QuadrotorDynamics",
    "QuadrotorParams", "ResidualDynamics", "ResidualModel", "cartpole_step", "drag_perturbed",
    "fixedwing_step", "hover_state", "integrate", "observation", "quadrotor_step", "residual_step",
]
