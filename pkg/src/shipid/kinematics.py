"""Coordinate frames, state containers and the kinematic relations.

Earth-fixed frame O-XY, ship-fixed frame O-xy with origin at midship. The
flattened state order is (X, u, Y, v_m, psi, r); all angles are radians and
the heading is kept unwrapped.

Every function accepts scalars or numpy arrays (broadcasting elementwise).
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

# column indices into a flattened (..., 6) state array
IX, IU, IY, IV, IPSI, IR = range(6)
STATE_NAMES = ("X", "u", "Y", "vm", "psi", "r")
POSE_IDX = (IX, IY, IPSI)
VEL_IDX = (IU, IV, IR)

N_RANGE = (-20.0, 20.0)
DELTA_RANGE = (-np.deg2rad(35.0), np.deg2rad(35.0))


class Pose(NamedTuple):
    X: float
    Y: float
    psi: float


class Velocity(NamedTuple):
    u: float
    v_m: float
    r: float


class Control(NamedTuple):
    n: float
    delta: float


class WindObs(NamedTuple):
    U_A: float
    gamma_a: float


class WindVector(NamedTuple):
    wx: float
    wy: float


class Accel(NamedTuple):
    du: float
    dvm: float
    dr: float


class StateVector(NamedTuple):
    pose: Pose
    vel: Velocity

    def flat(self) -> np.ndarray:
        p, v = self.pose, self.vel
        return np.array([p.X, v.u, p.Y, v.v_m, p.psi, v.r], dtype=float)

    @classmethod
    def from_flat(cls, x) -> "StateVector":
        x = np.asarray(x, dtype=float)
        return cls(Pose(x[IX], x[IY], x[IPSI]), Velocity(x[IU], x[IV], x[IR]))


def control_in_range(ctrl: Control, n_range=N_RANGE, delta_range=DELTA_RANGE) -> bool:
    return bool(
        n_range[0] <= ctrl.n <= n_range[1] and delta_range[0] <= ctrl.delta <= delta_range[1]
    )


def pose_rate(vel, psi):
    """Time derivative (dX/dt, dY/dt, dpsi/dt) of the pose."""
    u, v_m, r = vel
    c, s = np.cos(psi), np.sin(psi)
    return (u * c - v_m * s, u * s + v_m * c, r)


def euler_pose_step(pose, vel, dt: float) -> Pose:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    dX, dY, dpsi = pose_rate(vel, pose[2])
    return Pose(pose[0] + dt * dX, pose[1] + dt * dY, pose[2] + dt * dpsi)


def wind_to_vector(w) -> WindVector:
    U_A, gamma = w
    return WindVector(U_A * np.cos(gamma), U_A * np.sin(gamma))


def apparent_wind(true_wind, vel, psi) -> WindObs:
    """Apparent wind seen aboard from the true wind (U_T, xi_w) and ship motion.

    ``xi_w`` is the earth-frame direction the true wind blows toward. The
    result's ``gamma_a`` is the ship-frame direction of the apparent air flow,
    in [0, 2*pi); calm air with headway therefore gives gamma_a = pi.
    """
    U_T, xi_w = true_wind
    u, v_m = vel[0], vel[1]
    ax = U_T * np.cos(xi_w - psi) - u
    ay = U_T * np.sin(xi_w - psi) - v_m
    U_A = np.hypot(ax, ay)
    gamma = np.mod(np.arctan2(ay, ax), 2.0 * np.pi)
    # mod of a tiny negative angle rounds up to exactly 2*pi
    gamma = np.where(gamma >= 2.0 * np.pi, 0.0, gamma)
    return WindObs(U_A, gamma[()])


def wind_vectors(wind: np.ndarray) -> np.ndarray:
    """(..., 2) array of (U_A, gamma_a) -> (..., 2) array of (wx, wy)."""
    wind = np.asarray(wind, dtype=float)
    out = np.empty_like(wind)
    out[..., 0] = wind[..., 0] * np.cos(wind[..., 1])
    out[..., 1] = wind[..., 0] * np.sin(wind[..., 1])
    return out


def euler_state_step(x: np.ndarray, acc, dt: float) -> np.ndarray:
    """One explicit Euler step of the flattened state given (du, dvm, dr).

    Pose uses the kinematic relation at the *current* velocity, velocity is
    advanced by ``dt * acc``.
    """
    x = np.asarray(x, dtype=float)
    acc = np.asarray(acc, dtype=float)
    out = np.empty_like(x)
    u, v, psi, r = x[..., IU], x[..., IV], x[..., IPSI], x[..., IR]
    c, s = np.cos(psi), np.sin(psi)
    out[..., IX] = x[..., IX] + dt * (u * c - v * s)
    out[..., IY] = x[..., IY] + dt * (u * s + v * c)
    out[..., IPSI] = psi + dt * r
    out[..., IU] = u + dt * acc[..., 0]
    out[..., IV] = v + dt * acc[..., 1]
    out[..., IR] = r + dt * acc[..., 2]
    return out
