"""Synthetic free-running tests: turning, zigzag, random and berthing runs.

Each trajectory is produced by the reference model under a maneuver
controller and a gusty true-wind scenario; the recorded wind channel is the
apparent wind seen aboard. Measurement noise emulating GNSS-derived
velocities and accelerations can be layered on afterwards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kinematics as kin
from . import refmodel as rm
from .dataset import Dataset, Trajectory, read_dataset, write_dataset  # noqa: F401  (re-export)
from .keyvalue import ConfigError, parse_bool, read_keyvalue

TURNING, ZIGZAG, RANDOM, BERTHING = "T", "Z", "R", "B"
KINDS = (TURNING, ZIGZAG, RANDOM, BERTHING)
KIND_NAMES = {TURNING: "Turning", ZIGZAG: "Zigzag", RANDOM: "Random", BERTHING: "Berthing"}

DEG = math.pi / 180.0

# per-label durations [s] of the reference dataset mixes (model scale)
MIX_DURATIONS = {
    "TZB": {TURNING: 1490.0, ZIGZAG: 737.1, RANDOM: 0.0, BERTHING: 335.8},
    "TZRB": {TURNING: 556.4, ZIGZAG: 342.9, RANDOM: 1301.2, BERTHING: 335.8},
    "TZRB+": {TURNING: 5674.7, ZIGZAG: 1151.0, RANDOM: 5861.2, BERTHING: 788.9},
    "TEST": {TURNING: 424.6, ZIGZAG: 193.8, RANDOM: 717.9, BERTHING: 380.6},
}
MIX_REFERENCE_TOTAL = 2536.3  # the TZRB total; mixes are scaled relative to it
MAX_SEGMENT = {TURNING: 60.0, ZIGZAG: 60.0, RANDOM: 100.0, BERTHING: 90.0}


class ClosedLoopRequired(ValueError):
    """The maneuver's commands depend on the ship state."""


@dataclass(frozen=True)
class ManeuverSpec:
    """Maneuver definition; ``None`` fields are drawn per trajectory."""

    kind: str
    duration: float
    n: float | None = None
    delta: float | None = None  # turning rudder / zigzag rudder amplitude [rad]
    switch_angle: float | None = None  # zigzag heading threshold [rad]
    dwell_mean: float = 5.0  # random: mean dwell time [s]
    n_range: tuple = kin.N_RANGE
    delta_range: tuple = kin.DELTA_RANGE
    n_reverse: float | None = None  # berthing reverse thrust
    side: int | None = None  # berthing: +1 starboard, -1 port
    approach_time: float | None = None
    coast_time: float | None = None
    reverse_time: float | None = None  # nominal (open-loop) reverse duration
    stop_speed: float = 0.02
    u0: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown maneuver kind {self.kind!r}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")

    def resolve(self, rng: np.random.Generator, coeffs: rm.RefModelCoeffs = rm.DEFAULT_COEFFS) -> "ManeuverSpec":
        """Draw every unset parameter; the result is fully determined."""
        kw = {}
        sign = rng.choice([-1.0, 1.0])
        if self.kind == TURNING:
            kw["n"] = self.n if self.n is not None else float(rng.uniform(8.0, 20.0))
            kw["delta"] = self.delta if self.delta is not None else float(sign * rng.uniform(10.0, 35.0) * DEG)
        elif self.kind == ZIGZAG:
            kw["n"] = self.n if self.n is not None else float(rng.uniform(10.0, 20.0))
            amp = float(rng.choice([10.0, 20.0]) * DEG)
            kw["delta"] = self.delta if self.delta is not None else amp
            kw["switch_angle"] = self.switch_angle if self.switch_angle is not None else abs(kw["delta"])
        elif self.kind == BERTHING:
            kw["n"] = self.n if self.n is not None else float(rng.uniform(8.0, 14.0))
            kw["delta"] = self.delta if self.delta is not None else float(rng.uniform(5.0, 20.0) * DEG)
            kw["n_reverse"] = self.n_reverse if self.n_reverse is not None else float(-rng.uniform(10.0, 20.0))
            kw["side"] = self.side if self.side is not None else int(sign)
            kw["approach_time"] = self.approach_time if self.approach_time is not None else float(rng.uniform(15.0, 30.0))
            kw["coast_time"] = self.coast_time if self.coast_time is not None else float(rng.uniform(5.0, 15.0))
            kw["reverse_time"] = self.reverse_time if self.reverse_time is not None else 15.0
        if self.u0 is None:
            if self.kind == RANDOM:
                kw["u0"] = float(rng.uniform(-0.1, 0.3))
            else:
                kw["u0"] = rm.steady_speed(kw["n"], coeffs)
        return replace(self, **kw)


@dataclass(frozen=True)
class WindScenario:
    """True wind: mean plus Ornstein-Uhlenbeck gusts on speed and direction."""

    speed: float = 1.0  # mean U_T [m/s]
    direction: float = 0.0  # mean xi_w [rad], direction the wind blows toward
    gust_sigma: float = 0.3  # stationary std of speed perturbation [m/s]
    dir_sigma: float = 10.0 * DEG  # stationary std of direction perturbation [rad]
    tau: float = 10.0  # correlation time [s]

    def series(self, n: int, dt: float, rng: np.random.Generator) -> np.ndarray:
        """(n, 2) samples of (U_T, xi_w)."""
        a = math.exp(-dt / self.tau)
        k = math.sqrt(1.0 - a * a)
        out = np.empty((n, 2))
        e = rng.standard_normal((n, 2))
        x = np.array([self.gust_sigma, self.dir_sigma]) * e[0]
        for i in range(n):
            if i:
                x = a * x + k * np.array([self.gust_sigma, self.dir_sigma]) * e[i]
            out[i, 0] = max(self.speed + x[0], 0.0)
            out[i, 1] = self.direction + x[1]
        return out


CALM = WindScenario(speed=0.0, gust_sigma=0.0, dir_sigma=0.0)


@dataclass(frozen=True)
class NoiseSpec:
    pos_sigma: float = 0.0  # GNSS position noise [m]
    r_sigma: float = 0.0  # yaw-rate sensor noise [1/s]
    accel_from_differencing: bool = True

    def __post_init__(self):
        if self.pos_sigma < 0 or self.r_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")

    @property
    def is_zero(self) -> bool:
        return self.pos_sigma == 0 and self.r_sigma == 0


# ------------------------------------------------------------- controllers


class _Controller:
    closed_loop = False

    def __init__(self, spec: ManeuverSpec, dt: float, rng: np.random.Generator):
        self.spec, self.dt, self.rng = spec, dt, rng

    def __call__(self, i: int, x) -> tuple[float, float]:
        raise NotImplementedError


class _Turning(_Controller):
    def __call__(self, i, x):
        return self.spec.n, self.spec.delta


class _Random(_Controller):
    def __init__(self, spec, dt, rng):
        super().__init__(spec, dt, rng)
        self.next_switch = 0
        self.cmd = (0.0, 0.0)

    def __call__(self, i, x):
        if i >= self.next_switch:
            s = self.spec
            self.cmd = (float(self.rng.uniform(*s.n_range)), float(self.rng.uniform(*s.delta_range)))
            dwell = self.rng.exponential(s.dwell_mean)
            self.next_switch = i + max(1, int(round(dwell / self.dt)))
        return self.cmd


class _Zigzag(_Controller):
    closed_loop = True

    def __init__(self, spec, dt, rng):
        super().__init__(spec, dt, rng)
        self.delta = abs(spec.delta)
        self.psi0 = None

    def __call__(self, i, x):
        if x is None:
            raise ClosedLoopRequired("zigzag switching needs the heading")
        psi = x[kin.IPSI]
        if self.psi0 is None:
            self.psi0 = psi
        err = psi - self.psi0
        # positive rudder drives the heading negative
        if self.delta > 0 and -err >= self.spec.switch_angle:
            self.delta = -self.delta
        elif self.delta < 0 and err >= self.spec.switch_angle:
            self.delta = -self.delta
        return self.spec.n, self.delta


class _Berthing(_Controller):
    """Approach, coast, reverse thrust to a stop, then low-speed rudder work."""

    def __init__(self, spec, dt, rng):
        super().__init__(spec, dt, rng)
        s = spec
        self.t_app = s.approach_time
        self.t_coast = self.t_app + s.coast_time
        self.reversing_done = None  # sample index when reverse ended
        self.closed_loop = True

    def __call__(self, i, x):
        s, t = self.spec, i * self.dt
        side = s.side
        if t < self.t_app:
            return s.n, side * s.delta
        if t < self.t_coast:
            return 0.0, side * s.delta
        if self.reversing_done is None:
            if x is None:
                stop = t >= self.t_coast + s.reverse_time
            else:
                stop = x[kin.IU] <= s.stop_speed
            if not stop:
                return s.n_reverse, 0.0
            self.reversing_done = i
        k = (i - self.reversing_done) * self.dt
        # alternate the rudder every 5 s while the ship is nearly stopped
        return 0.0, side * (1 if int(k // 5.0) % 2 == 0 else -1) * 20.0 * DEG


_CONTROLLERS = {TURNING: _Turning, ZIGZAG: _Zigzag, RANDOM: _Random, BERTHING: _Berthing}


def _n_samples(duration: float, dt: float) -> int:
    return max(1, int(round(duration / dt)))


def gen_controls(spec: ManeuverSpec, dt: float, seed: int = 0,
                 coeffs: rm.RefModelCoeffs = rm.DEFAULT_COEFFS) -> np.ndarray:
    """Open-loop command series (N, 2) of (n, delta).

    Zigzag commands depend on the heading and raise ``ClosedLoopRequired``;
    berthing uses its nominal reverse duration instead of the stop trigger.
    """
    rng = np.random.default_rng(seed)
    spec = spec.resolve(rng, coeffs)
    ctl = _CONTROLLERS[spec.kind](spec, dt, rng)
    n = _n_samples(spec.duration, dt)
    return np.array([ctl(i, None) for i in range(n)], dtype=float).reshape(n, 2)


def gen_trajectory(spec: ManeuverSpec, coeffs: rm.RefModelCoeffs = rm.DEFAULT_COEFFS,
                   wind: WindScenario = CALM, dt: float = 0.1, seed: int = 0,
                   bounding_box: float | None = None) -> Trajectory:
    """Noise-free closed-loop run of the reference model with true accelerations."""
    ss = np.random.SeedSequence(seed)
    spec_rng, ctl_rng, wind_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    spec = spec.resolve(spec_rng, coeffs)
    ctl = _CONTROLLERS[spec.kind](spec, dt, ctl_rng)
    n = _n_samples(spec.duration, dt)
    true_wind = wind.series(n, dt, wind_rng)

    states = np.empty((n, 6))
    controls = np.empty((n, 2))
    winds = np.empty((n, 2))
    accs = np.empty((n, 3))
    x = np.array([0.0, spec.u0, 0.0, 0.0, 0.0, 0.0])
    last = n
    for i in range(n):
        if bounding_box is not None and (abs(x[kin.IX]) > bounding_box or abs(x[kin.IY]) > bounding_box):
            last = i
            break
        states[i] = x
        w = kin.apparent_wind(true_wind[i], (x[kin.IU], x[kin.IV], x[kin.IR]), x[kin.IPSI])
        winds[i] = w
        controls[i] = ctl(i, x)
        a = rm.accel(x, controls[i], winds[i], coeffs)
        accs[i] = a
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(x))):
            raise rm.NonFiniteStateError(i)
        x = kin.euler_state_step(x, a, dt)
    t = np.arange(last) * dt
    return Trajectory(t, states[:last], controls[:last], winds[:last], accs[:last], spec.kind, dt)


def add_noise(traj: Trajectory, noise: NoiseSpec, seed: int = 0) -> Trajectory:
    """Measurement noise as seen through GNSS differencing.

    Positions get white noise; velocities receive the forward difference of
    that noise rotated into the ship frame; the yaw rate gets white sensor
    noise. With ``accel_from_differencing`` the accelerations receive the
    forward difference of the velocity noise, so their noise grows like
    1/dt**2 for the translational channels.
    """
    if noise.is_zero:
        return traj.copy()
    rng = np.random.default_rng(seed)
    n, dt = len(traj), traj.dt
    s = traj.states.copy()
    ep = rng.normal(0.0, noise.pos_sigma, size=(n + 2, 2)) if noise.pos_sigma > 0 else np.zeros((n + 2, 2))
    er = rng.normal(0.0, noise.r_sigma, size=n + 1) if noise.r_sigma > 0 else np.zeros(n + 1)

    # earth-frame velocity noise for samples 0..n (one extra for the accel difference)
    ev_earth = (ep[1:] - ep[:-1]) / dt
    psi = np.concatenate([s[:, kin.IPSI], s[-1:, kin.IPSI]])
    c, sn = np.cos(psi), np.sin(psi)
    ev_u = ev_earth[:, 0] * c + ev_earth[:, 1] * sn
    ev_v = -ev_earth[:, 0] * sn + ev_earth[:, 1] * c

    s[:, kin.IX] += ep[:n, 0]
    s[:, kin.IY] += ep[:n, 1]
    s[:, kin.IU] += ev_u[:n]
    s[:, kin.IV] += ev_v[:n]
    s[:, kin.IR] += er[:n]
    acc = None if traj.accels is None else traj.accels.copy()
    if acc is not None and noise.accel_from_differencing:
        acc[:, 0] += (ev_u[1:] - ev_u[:-1]) / dt
        acc[:, 1] += (ev_v[1:] - ev_v[:-1]) / dt
        acc[:, 2] += (er[1:] - er[:-1]) / dt
    return Trajectory(traj.t.copy(), s, traj.controls.copy(), traj.winds.copy(), acc, traj.label, dt)


# ------------------------------------------------------------------ recipes


def mix_recipe(mix: str, total_duration: float, durations: dict | None = None) -> list[tuple[ManeuverSpec, int]]:
    """Maneuver list reproducing a reference mix, scaled to ``total_duration``.

    The TZRB mix is scaled to ``total_duration`` exactly; the other mixes keep
    their size relative to it (TZB about equal, TZRB+ about 5.3 times).
    """
    if durations is None:
        if mix not in MIX_DURATIONS:
            raise ConfigError(f"unknown mix {mix!r}; choose from {', '.join(MIX_DURATIONS)}")
        k = total_duration / MIX_REFERENCE_TOTAL
        durations = {lab: d * k for lab, d in MIX_DURATIONS[mix].items()}
    recipe = []
    for lab in KINDS:
        d = float(durations.get(lab, 0.0))
        if d <= 0:
            continue
        count = math.ceil(d / MAX_SEGMENT[lab] - 1e-9)
        recipe.append((ManeuverSpec(lab, d / count), count))
    return recipe


def compose_dataset(recipe, coeffs: rm.RefModelCoeffs = rm.DEFAULT_COEFFS, wind: WindScenario = CALM,
                    dt: float = 0.1, seed: int = 0, noise: NoiseSpec | None = None,
                    bounding_box: float | None = None) -> Dataset:
    """Generate every (spec, count) entry; trajectory k draws from (seed, k)."""
    trajs = []
    k = 0
    for spec, count in recipe:
        for _ in range(count):
            sub = np.random.SeedSequence([seed, k])
            gseed, nseed = (int(s.generate_state(1)[0]) for s in sub.spawn(2))
            box = bounding_box if spec.kind == RANDOM else None
            tr = gen_trajectory(spec, coeffs, wind, dt, gseed, box)
            if noise is not None and not noise.is_zero:
                tr = add_noise(tr, noise, nseed)
            trajs.append(tr)
            k += 1
    return Dataset(trajs)


@dataclass
class Recipe:
    """Dataset recipe as read from a ``key = value`` file."""

    mix: str = "TZRB"
    total_duration: float = 600.0
    dt: float = 0.1
    durations: dict = field(default_factory=dict)  # explicit per-label overrides
    wind_speed: float = 1.0
    wind_dir_deg: float = 0.0
    gust_sigma: float = 0.3
    pos_sigma: float = 0.0
    r_sigma: float = 0.0
    accel_from_differencing: bool = True
    bounding_box: float | None = None

    KEYS = ("mix", "total_duration", "dt", "dur_T", "dur_Z", "dur_R", "dur_B", "wind_speed",
            "wind_dir_deg", "gust_sigma", "pos_sigma", "r_sigma", "accel_from_differencing",
            "bounding_box")

    @classmethod
    def from_mapping(cls, raw: dict, source: str = "recipe") -> "Recipe":
        r = cls()
        for key, text in raw.items():
            if key not in cls.KEYS:
                raise ConfigError(f"unknown recipe key {key!r} in {source}")
            text = str(text).strip()
            try:
                if key == "mix":
                    if text not in MIX_DURATIONS:
                        raise ConfigError(f"unknown mix {text!r} in {source}")
                    r.mix = text
                elif key.startswith("dur_"):
                    r.durations[key[4:]] = float(text)
                elif key == "accel_from_differencing":
                    r.accel_from_differencing = parse_bool(text)
                elif key == "bounding_box":
                    r.bounding_box = None if text.lower() in ("", "none", "off") else float(text)
                else:
                    setattr(r, key, float(text))
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"bad value for {key!r} in {source}: {text!r}") from exc
        if not r.dt > 0 or not r.total_duration > 0:
            raise ConfigError(f"dt and total_duration must be positive in {source}")
        return r

    @classmethod
    def from_file(cls, path) -> "Recipe":
        return cls.from_mapping(read_keyvalue(path), str(path))

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("mix", "total_duration", "dt", "wind_speed", "wind_dir_deg",
                                            "gust_sigma", "pos_sigma", "r_sigma",
                                            "accel_from_differencing", "bounding_box")}
        d["durations"] = dict(sorted(self.durations.items()))
        return d

    @property
    def wind(self) -> WindScenario:
        return WindScenario(self.wind_speed, self.wind_dir_deg * DEG, self.gust_sigma)

    @property
    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.pos_sigma, self.r_sigma, self.accel_from_differencing)

    def build(self, seed: int, coeffs: rm.RefModelCoeffs = rm.DEFAULT_COEFFS) -> Dataset:
        recipe = mix_recipe(self.mix, self.total_duration, self.durations or None)
        return compose_dataset(recipe, coeffs, self.wind, self.dt, seed, self.noise, self.bounding_box)
