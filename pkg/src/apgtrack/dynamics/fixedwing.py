"""Six-degree-of-freedom small fixed-wing UAV with linear aerodynamics.

Equations follow Beard & McLain, *Small Unmanned Aircraft* (2012), chapters
3-4, with Euler-angle attitude. Coefficients are the Aerosonde set from
that book; mass is lowered so the aircraft flies at 11.5 m/s, and the
zero-lift pitch moment and parasitic drag are retuned so that neutral
surfaces with half thrust (3.5 N) are the level trim at that speed.

Flat state layout (12 values)::

    [0:3]   position, inertial NED (north, east, down)
    [3:6]   body velocity (u, v, w)
    [6:9]   roll, pitch, yaw
    [9:12]  body rates (p, q, r)

Action: ``(thrust [N], elevator, aileron, rudder [rad])``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from apgtrack import autodiff as ad
from apgtrack.dynamics.base import Dynamics, InvalidStateError

MIN_AIRSPEED = 0.1


@dataclass(frozen=True)
class FixedWingParams:
    dt: float = 0.05
    mass: float = 2.0
    gravity: float = 9.81
    rho: float = 1.2682
    S: float = 0.55
    b: float = 2.8956
    c: float = 0.18994
    Jx: float = 0.8244
    Jy: float = 1.135
    Jz: float = 1.759
    Jxz: float = 0.1204
    C_L_0: float = 0.23
    C_L_alpha: float = 5.61
    C_L_q: float = 7.95
    C_L_delta_e: float = 0.13
    C_D_0: float = 0.0748
    C_D_alpha: float = 0.03
    C_D_q: float = 0.0
    C_D_delta_e: float = 0.0135
    C_m_0: float = 0.0942
    C_m_alpha: float = -2.74
    C_m_q: float = -38.21
    C_m_delta_e: float = -0.99
    C_Y_0: float = 0.0
    C_Y_beta: float = -0.98
    C_Y_p: float = 0.0
    C_Y_r: float = 0.0
    C_Y_delta_a: float = 0.075
    C_Y_delta_r: float = 0.19
    C_ell_0: float = 0.0
    C_ell_beta: float = -0.13
    C_ell_p: float = -0.51
    C_ell_r: float = 0.25
    C_ell_delta_a: float = 0.17
    C_ell_delta_r: float = 0.0024
    C_n_0: float = 0.0
    C_n_beta: float = 0.073
    C_n_p: float = -0.069
    C_n_r: float = -0.095
    C_n_delta_a: float = -0.011
    C_n_delta_r: float = -0.069
    thrust_max: float = 7.0
    elevator_max_deg: float = 20.0
    aileron_max_deg: float = 2.5
    rudder_max_deg: float = 20.0

    @classmethod
    def from_mapping(cls, values: dict) -> "FixedWingParams":
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise KeyError(f"unknown fixed-wing parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})


class FixedWingDynamics(Dynamics):
    name = "fixedwing"
    state_dim = 12
    action_dim = 4
    velocity_slice = slice(3, 6)

    def __init__(self, params: FixedWingParams | None = None, integrator: str = "euler"):
        self.params = P = params or FixedWingParams()
        super().__init__(P.dt, integrator)
        gam = P.Jx * P.Jz - P.Jxz ** 2
        self.gamma = (
            gam,
            P.Jxz * (P.Jx - P.Jy + P.Jz) / gam,
            (P.Jz * (P.Jz - P.Jy) + P.Jxz ** 2) / gam,
            P.Jz / gam,
            P.Jxz / gam,
            (P.Jz - P.Jx) / P.Jy,
            P.Jxz / P.Jy,
            ((P.Jx - P.Jy) * P.Jx + P.Jxz ** 2) / gam,
            P.Jx / gam,
        )

    def derivative(self, state, action):
        P = self.params
        _, g1, g2, g3, g4, g5, g6, g7, g8 = self.gamma
        u, v, w = state[..., 3], state[..., 4], state[..., 5]
        phi, theta, psi = state[..., 6], state[..., 7], state[..., 8]
        p, q, r = state[..., 9], state[..., 10], state[..., 11]
        thrust, d_e, d_a, d_r = action[..., 0], action[..., 1], action[..., 2], action[..., 3]

        va = ad.sqrt(u * u + v * v + w * w)
        alpha = ad.arctan(w / u)
        beta = ad.arcsin(v / va)
        qbar = 0.5 * P.rho * P.S * va * va
        half_c = P.c / (2.0 * va)
        half_b = P.b / (2.0 * va)

        cphi, sphi = ad.cos(phi), ad.sin(phi)
        cth, sth = ad.cos(theta), ad.sin(theta)
        cpsi, spsi = ad.cos(psi), ad.sin(psi)
        calpha, salpha = ad.cos(alpha), ad.sin(alpha)

        lift = qbar * (P.C_L_0 + P.C_L_alpha * alpha + P.C_L_q * half_c * q + P.C_L_delta_e * d_e)
        drag = qbar * (P.C_D_0 + P.C_D_alpha * alpha + P.C_D_q * half_c * q + P.C_D_delta_e * d_e)
        side = qbar * (
            P.C_Y_0 + P.C_Y_beta * beta + P.C_Y_p * half_b * p + P.C_Y_r * half_b * r
            + P.C_Y_delta_a * d_a + P.C_Y_delta_r * d_r
        )
        mg = P.mass * P.gravity
        fx = -drag * calpha + lift * salpha + thrust - mg * sth
        fy = side + mg * cth * sphi
        fz = -drag * salpha - lift * calpha + mg * cth * cphi

        roll_m = qbar * P.b * (
            P.C_ell_0 + P.C_ell_beta * beta + P.C_ell_p * half_b * p + P.C_ell_r * half_b * r
            + P.C_ell_delta_a * d_a + P.C_ell_delta_r * d_r
        )
        pitch_m = qbar * P.c * (P.C_m_0 + P.C_m_alpha * alpha + P.C_m_q * half_c * q + P.C_m_delta_e * d_e)
        yaw_m = qbar * P.b * (
            P.C_n_0 + P.C_n_beta * beta + P.C_n_p * half_b * p + P.C_n_r * half_b * r
            + P.C_n_delta_a * d_a + P.C_n_delta_r * d_r
        )

        # body -> inertial rotation applied to (u, v, w)
        pn_dot = cth * cpsi * u + (sphi * sth * cpsi - cphi * spsi) * v + (cphi * sth * cpsi + sphi * spsi) * w
        pe_dot = cth * spsi * u + (sphi * sth * spsi + cphi * cpsi) * v + (cphi * sth * spsi - sphi * cpsi) * w
        pd_dot = -sth * u + sphi * cth * v + cphi * cth * w

        u_dot = r * v - q * w + fx / P.mass
        v_dot = p * w - r * u + fy / P.mass
        w_dot = q * u - p * v + fz / P.mass

        tth = sth / cth
        phi_dot = p + q * sphi * tth + r * cphi * tth
        theta_dot = q * cphi - r * sphi
        psi_dot = (q * sphi + r * cphi) / cth

        p_dot = g1 * p * q - g2 * q * r + g3 * roll_m + g4 * yaw_m
        q_dot = g5 * p * r - g6 * (p * p - r * r) + pitch_m / P.Jy
        r_dot = g7 * p * q - g1 * q * r + g4 * roll_m + g8 * yaw_m

        return ad.stack(
            [pn_dot, pe_dot, pd_dot, u_dot, v_dot, w_dot,
             phi_dot, theta_dot, psi_dot, p_dot, q_dot, r_dot],
            axis=-1,
        )

    def validate(self, state) -> None:
        super().validate(state)
        s = np.asarray(ad.value(state))
        if (np.linalg.norm(s[..., 3:6], axis=-1) < MIN_AIRSPEED).any():
            raise InvalidStateError("fixed-wing: airspeed below model validity floor")
        if (np.abs(s[..., 7]) >= np.pi / 2).any():
            raise InvalidStateError("fixed-wing: |pitch| >= pi/2")

    def action_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        P = self.params
        hi = np.array([P.thrust_max, np.radians(P.elevator_max_deg),
                       np.radians(P.aileron_max_deg), np.radians(P.rudder_max_deg)])
        lo = np.array([0.0, -hi[1], -hi[2], -hi[3]])
        return lo, hi


# level-trim angle of attack at 11.5 m/s with neutral surfaces and 3.5 N
TRIM_ALPHA = 0.03436


def initial_state(speed: float = 11.5, position=(0.0, 0.0, 0.0), yaw: float = 0.0,
                  alpha: float = TRIM_ALPHA) -> np.ndarray:
    """Wings-level flight along the yaw heading, pitched up by ``alpha``."""
    s = np.zeros(12)
    s[0:3] = position
    s[3], s[5] = speed * np.cos(alpha), speed * np.sin(alpha)
    s[7] = alpha
    s[8] = yaw
    return s


def airspeed(state) -> np.ndarray:
    return np.linalg.norm(np.asarray(ad.value(state))[..., 3:6], axis=-1)


_DEFAULT = FixedWingDynamics()


def fixedwing_step(state, action, params: FixedWingParams | None = None):
    dyn = _DEFAULT if params is None else FixedWingDynamics(params)
    dyn.validate(state)
    if not isinstance(state, ad.Var):
        state = np.asarray(state, dtype=np.float64)
    if not isinstance(action, ad.Var):
        action = np.asarray(action, dtype=np.float64)
    return dyn.step(state, action)
