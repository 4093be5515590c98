"""MMG-form 3-DOF reference dynamics with surrogate force submodels.

The equations of motion are

    (m + m_x) du  - (m + m_y) v_m r - x_G m r^2       = X
    (m + m_y) dvm + (m + m_x) u r   + x_G m dr        = Y
    (I_zz + J_zz + x_G^2 m) dr + x_G m (dvm + u r)    = N

with X, Y, N the sum of hull, propeller/rudder and (optionally) wind forces.
The force submodels are synthetic surrogates shaped like the conventional
MMG components; the formulas are listed in the README and the defaults are
scaled to a 3 m model (Lpp 3.0 m, B 0.49 m, d 0.20 m, Cb 0.83). They do not
describe any real ship.
"""
from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from . import kinematics as kin
from .keyvalue import ConfigError, read_keyvalue

# fixed Gauss-Legendre nodes for the hull cross-flow integrals
# 3 points integrate cubics exactly; the integrand is piecewise cubic
_GL_X, _GL_W = np.polynomial.legendre.leggauss(3)


class SingularMassMatrixError(ValueError):
    pass


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


@dataclass(frozen=True)
class RefModelCoeffs:
    # geometry and inertia
    L_pp: float = 3.0
    B: float = 0.49
    d: float = 0.20
    C_b: float = 0.83
    rho: float = 1000.0
    m_mass: float = 0.83 * 3.0 * 0.49 * 0.20 * 1000.0
    m_x: float = 19.8
    m_y: float = 200.7
    I_zz: float = 137.26
    J_zz: float = 89.1
    x_G: float = 0.03
    # hull: resistance, maneuvering derivatives, cross-flow drag, linear damping
    R_0: float = 0.022
    X_vv: float = -0.040
    X_vr: float = 0.002
    X_rr: float = 0.011
    Y_v: float = -0.315
    Y_r: float = 0.083
    N_v: float = -0.137
    N_r: float = -0.049
    C_D: float = 0.8
    lin_u: float = 4.0
    lin_v: float = 20.0
    lin_r: float = 20.0
    # propeller
    D_p: float = 0.084
    w_P: float = 0.40
    t_P: float = 0.20
    k_0: float = 0.33
    k_1: float = -0.28
    k_2: float = -0.13
    K_T_rev: float = 0.25
    J_clip: float = 1.0
    Y_P_rev: float = 0.0
    x_P: float = -1.44
    # rudder
    A_R: float = 0.008
    f_alpha: float = 2.75
    f_alpha_rev: float = 0.5
    eps_R: float = 1.0
    slip_R: float = 0.3
    gamma_R: float = 0.5
    l_R: float = -0.71
    t_R: float = 0.39
    a_H: float = 0.20
    x_R: float = -1.5
    x_H: float = -1.35
    # wind
    wind_on: float = 1.0
    rho_air: float = 1.2
    A_F: float = 0.05
    A_L: float = 0.30
    C_WX: float = 0.8
    C_WY: float = 0.9
    C_WN: float = 0.1

    def __post_init__(self):
        if not self.m_mass > 0:
            raise ValueError("m_mass must be positive")
        if self.m_x < 0 or self.m_y < 0:
            raise ValueError("added masses must be non-negative")
        for name in ("L_pp", "B", "d", "rho"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.I_zz + self.J_zz + self.x_G**2 * self.m_mass > 0:
            raise ValueError("yaw inertia must be positive")

    def replace(self, **kw) -> "RefModelCoeffs":
        return dataclasses.replace(self, **kw)

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_file(cls, path) -> "RefModelCoeffs":
        raw = read_keyvalue(path)
        known = set(cls.keys())
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown coefficient key(s) in {path}: {', '.join(unknown)}")
        try:
            return cls(**{k: float(v) for k, v in raw.items()})
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# reference model coefficients (SI units)\n")
            for k in self.keys():
                fh.write(f"{k} = {getattr(self, k)!r}\n")

    def mass_matrix(self) -> np.ndarray:
        m, xg = self.m_mass, self.x_G
        return np.array(
            [
                [m + self.m_x, 0.0, 0.0],
                [0.0, m + self.m_y, xg * m],
                [0.0, xg * m, self.I_zz + self.J_zz + xg * xg * m],
            ]
        )


DEFAULT_COEFFS = RefModelCoeffs()


class ForceTriple(NamedTuple):
    Xf: float
    Yf: float
    Nf: float

    def __add__(self, other):
        return ForceTriple(*(a + b for a, b in zip(self, other)))


def _crossflow(v_m, r, c: RefModelCoeffs):
    # -1/2 rho d C_D * integral over the hull of s|s| and x s|s|, s = v + x r.
    # The integrand has a kink where s changes sign, so each side of the kink
    # is integrated separately and the quadrature is exact.
    v_m, r = np.broadcast_arrays(np.asarray(v_m, float), np.asarray(r, float))
    half = 0.5 * c.L_pp
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        kink = np.where(r != 0.0, -v_m / np.where(r != 0.0, r, 1.0), -half)
    kink = np.clip(kink, -half, half)
    Y = np.zeros_like(v_m)
    N = np.zeros_like(v_m)
    for a, b in ((-half, kink), (kink, half)):
        mid, rad = 0.5 * (a + b), 0.5 * (b - a)
        x = mid[..., None] + np.multiply.outer(rad, _GL_X) if np.ndim(mid) else mid + rad * _GL_X
        w = np.multiply.outer(rad, _GL_W)
        vx = v_m[..., None] + r[..., None] * x
        f = vx * np.abs(vx) * w
        Y = Y + f.sum(-1)
        N = N + (f * x).sum(-1)
    k = -0.5 * c.rho * c.d * c.C_D
    return k * Y, k * N


def hull_forces(vel, c: RefModelCoeffs = DEFAULT_COEFFS) -> ForceTriple:
    u, v, r = (np.asarray(a, float) for a in vel)
    q = 0.5 * c.rho * c.L_pp * c.d
    L = c.L_pp
    U = np.sqrt(u * u + v * v)
    X = q * (-c.R_0 * u * np.abs(u) + c.X_vv * v * v + c.X_vr * L * v * r + c.X_rr * L * L * r * r)
    X = X - c.lin_u * u
    Ycf, Ncf = _crossflow(v, r, c)
    Y = q * (c.Y_v * U * v + c.Y_r * L * U * r) + Ycf - c.lin_v * v
    N = q * L * (c.N_v * U * v + c.N_r * L * U * r) + Ncf - c.lin_r * r
    return ForceTriple(X, Y, N)


def thrust(u, n, c: RefModelCoeffs = DEFAULT_COEFFS):
    """Propeller thrust with n|n| quadrant logic."""
    u = np.asarray(u, float)
    n = np.asarray(n, float)
    nd = n * c.D_p
    safe = np.where(n > 0, nd, 1.0)
    J = np.clip(u * (1.0 - c.w_P) / safe, -c.J_clip, c.J_clip)
    K_T = np.where(n > 0, c.k_0 + c.k_1 * J + c.k_2 * J * J, c.K_T_rev)
    return c.rho * c.D_p**4 * n * np.abs(n) * K_T, K_T


def prop_rudder_forces(vel, ctrl, c: RefModelCoeffs = DEFAULT_COEFFS) -> ForceTriple:
    u, v, r = (np.asarray(a, float) for a in vel)
    n, delta = (np.asarray(a, float) for a in ctrl)
    T, _ = thrust(u, n, c)
    X_P = (1.0 - c.t_P) * T
    # reverse-propeller lateral force (zero by default: keeps port/starboard symmetry)
    Y_P = np.where(n < 0, c.rho * c.D_p**4 * n * n * c.Y_P_rev, 0.0)
    N_P = c.x_P * Y_P

    u_R = c.eps_R * (1.0 - c.w_P) * u + c.slip_R * np.maximum(n, 0.0) * c.D_p
    v_R = c.gamma_R * (v + c.l_R * c.L_pp * r)
    U_R = np.sqrt(u_R * u_R + v_R * v_R)
    f_a = np.where(u_R >= 0, c.f_alpha, c.f_alpha * c.f_alpha_rev)
    F_N = 0.5 * c.rho * c.A_R * f_a * U_R * (u_R * np.sin(delta) - v_R * np.cos(delta))
    X_R = -(1.0 - c.t_R) * F_N * np.sin(delta)
    Y_R = (1.0 + c.a_H) * F_N * np.cos(delta)
    N_R = (c.x_R + c.a_H * c.x_H) * F_N * np.cos(delta)
    return ForceTriple(X_P + X_R, Y_P + Y_R, N_P + N_R)


def wind_forces(w, c: RefModelCoeffs = DEFAULT_COEFFS) -> ForceTriple:
    U_A, gamma = (np.asarray(a, float) for a in w)
    if np.any(U_A < 0):
        raise ValueError("apparent wind speed must be non-negative")
    p = 0.5 * c.rho_air * U_A * U_A * c.wind_on
    X = p * c.A_F * c.C_WX * np.cos(gamma)
    Y = p * c.A_L * c.C_WY * np.sin(gamma)
    N = p * c.A_L * c.L_pp * c.C_WN * np.sin(2.0 * gamma)
    return ForceTriple(X, Y, N)




def total_forces(vel, ctrl, w, c: RefModelCoeffs = DEFAULT_COEFFS) -> ForceTriple:
    return hull_forces(vel, c) + prop_rudder_forces(vel, ctrl, c) + wind_forces(w, c)


@functools.lru_cache(maxsize=64)
def _mass_matrix_checked(c: RefModelCoeffs) -> np.ndarray:
    M = c.mass_matrix()
    if abs(M[0, 0]) * abs(M[1, 1] * M[2, 2] - M[1, 2] ** 2) < 1e-12 * np.abs(M).max() ** 3:
        raise SingularMassMatrixError("mass matrix is numerically singular")
    M.setflags(write=False)
    return M


def solve_accel(vel, forces, c: RefModelCoeffs = DEFAULT_COEFFS) -> np.ndarray:
    """Solve the 3x3 mass system for (du, dvm, dr) given summed forces.

    Surge decouples; sway and yaw share a symmetric 2x2 block.
    """
    u, v, r = (np.asarray(a, float) for a in vel)
    m, xg = c.m_mass, c.x_G
    M = _mass_matrix_checked(c)
    f0 = forces[0] + (m + c.m_y) * v * r + xg * m * r * r
    f1 = forces[1] - (m + c.m_x) * u * r
    f2 = forces[2] - xg * m * u * r
    a, b, d = M[1, 1], M[1, 2], M[2, 2]
    det = a * d - b * b
    out = np.stack(np.broadcast_arrays(f0 / M[0, 0], (d * f1 - b * f2) / det, (a * f2 - b * f1) / det), axis=-1)
    return out


def accel(state, ctrl, w, c: RefModelCoeffs = DEFAULT_COEFFS) -> np.ndarray:
    """Accelerations (du, dvm, dr) of the reference model.

    ``state`` is a flattened (..., 6) state or a StateVector; pose is ignored.
    """
    if isinstance(state, kin.StateVector):
        state = state.flat()
    x = np.asarray(state, float)
    vel = (x[..., kin.IU], x[..., kin.IV], x[..., kin.IR])
    return solve_accel(vel, total_forces(vel, ctrl, w, c), c)


def step(x: np.ndarray, ctrl, w, dt: float, c: RefModelCoeffs = DEFAULT_COEFFS):
    """One Euler step; returns (next state, acceleration used)."""
    a = accel(x, ctrl, w, c)
    return kin.euler_state_step(x, a, dt), a


def simulate(initial, controls, winds, dt: float, c: RefModelCoeffs = DEFAULT_COEFFS):
    """Explicit-Euler rollout driven by control and apparent-wind series.

    Returns (states (N, 6), accels (N, 3)); the last acceleration row is
    evaluated at the final state so the arrays align sample by sample.
    """
    controls = np.asarray(controls, float)
    winds = np.asarray(winds, float)
    if len(controls) != len(winds):
        raise ValueError("controls and winds must have equal length")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if isinstance(initial, kin.StateVector):
        initial = initial.flat()
    n = len(controls)
    states = np.empty((n, 6))
    accs = np.empty((n, 3))
    x = np.asarray(initial, float).copy()
    for i in range(n):
        states[i] = x
        a = accel(x, controls[i], winds[i], c)
        accs[i] = a
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(x))):
            raise NonFiniteStateError(i)
        x = kin.euler_state_step(x, a, dt)
    return states, accs


def steady_speed(n: float, c: RefModelCoeffs = DEFAULT_COEFFS, lo=-3.0, hi=3.0) -> float:
    """Straight-run speed where surge force balances at fixed n (no wind)."""
    from scipy.optimize import brentq

    def surge(u):
        return accel(np.array([0, u, 0, 0, 0, 0.0]), (n, 0.0), (0.0, 0.0), c)[0]

    return float(brentq(surge, lo, hi, xtol=1e-13))


HYDRO_KEYS = ("R_0", "X_vv", "X_vr", "X_rr", "Y_v", "Y_r", "N_v", "N_r", "C_D",
              "k_0", "k_1", "k_2", "f_alpha", "gamma_R", "l_R", "a_H", "x_H")


def perturbed_coeffs(c: RefModelCoeffs = DEFAULT_COEFFS, rel: float = 0.15, seed: int = 0) -> RefModelCoeffs:
    """Hydrodynamic coefficients scaled by independent factors in [1 - rel, 1 + rel].

    Stands in for a model identified from tank tests rather than from the
    free-running data: structurally right, numerically a little off.
    """
    rng = np.random.default_rng(seed)
    f = rng.uniform(1.0 - rel, 1.0 + rel, size=len(HYDRO_KEYS))
    return c.replace(**{k: getattr(c, k) * float(x) for k, x in zip(HYDRO_KEYS, f)})
