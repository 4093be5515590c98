"""Acceleration-matching and rollout-matching training of the recurrent models.

Windows are ``s + N_T`` samples long, where ``s`` is the number of seed
frames (``m`` for the finite-memory net, 1 for the fully recurrent one).

* Acceleration loss: the network sees measured frames only and is compared
  with the measured accelerations that drive the ``N_T`` transitions.
* Rollout loss: the first ``s`` states are set to the measurements, then the
  network's accelerations are integrated ``N_T`` Euler steps with measured
  controls and wind; the simulated states are compared with the measured
  ones.

Both losses are averaged over windows and time steps and summed over
channels, each channel divided by its training-set standard deviation.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kinematics as kin
from .dataset import Dataset
from .keyvalue import ConfigError, parse_bool, read_keyvalue
from .netmodel import FINITE, FULL, PARAM_NAMES, NetParams, init_params

log = logging.getLogger(__name__)

ACC = "acc"
STATE = "state"
LOSS_KINDS = (ACC, STATE)
DEFAULT_LR = {STATE: 2.0e-5, ACC: 1.0e-4}


class MissingAccelerationError(ValueError):
    pass


class DegenerateSplitError(ValueError):
    pass


class RolloutDivergedError(FloatingPointError):
    def __init__(self, window: int, message: str = ""):
        self.window = window
        super().__init__(message or f"rollout diverged (non-finite state) in window {window}")


@dataclass
class StandardizationStats:
    sigma_x: np.ndarray  # (6,) state channels in (X, u, Y, vm, psi, r) order
    sigma_a: np.ndarray | None = None  # (3,)
    source: str = "train"

    def __post_init__(self):
        self.sigma_x = np.asarray(self.sigma_x, float).reshape(6)
        if self.sigma_a is not None:
            self.sigma_a = np.asarray(self.sigma_a, float).reshape(3)
        for name, arr in (("sigma_x", self.sigma_x), ("sigma_a", self.sigma_a)):
            if arr is not None and not np.all(arr > 0):
                raise ValueError(f"degenerate channel in {name}: {arr}")

    @classmethod
    def from_dataset(cls, ds: Dataset, source: str = "train") -> "StandardizationStats":
        if not len(ds):
            raise ValueError("cannot compute statistics of an empty dataset")
        states = np.concatenate([tr.states for tr in ds])
        accs = np.concatenate([tr.accels for tr in ds]) if ds.has_accels else None
        return cls(states.std(axis=0), None if accs is None else accs.std(axis=0), source)

    def scaled(self, k: float) -> "StandardizationStats":
        return StandardizationStats(
            self.sigma_x * k, None if self.sigma_a is None else self.sigma_a * k, self.source
        )


@dataclass
class TrainConfig:
    batch_size: int = 512
    learning_rate: float | None = None  # None -> per-loss default (2e-5 state, 1e-4 acc)
    N_T: int = 60
    m: int = 10
    H: int = 200
    max_epochs: int = 2000
    patience: int = 100
    seeds: tuple = (0,)
    stride: int = 1
    val_stride: int = 1
    val_fraction: float = 0.2
    split_seed: int = 0
    scale_io: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.N_T < 1 or self.batch_size < 1 or self.m < 1 or self.H < 1:
            raise ValueError("N_T, batch_size, m and H must be >= 1")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        self.seeds = tuple(int(s) for s in self.seeds)

    def lr_for(self, loss_kind: str) -> float:
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[loss_kind]

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_mapping(cls, raw: dict, source: str = "config") -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for key, text in raw.items():
            if key not in types:
                raise ConfigError(f"unknown training key {key!r} in {source}")
            text = str(text).strip()
            try:
                if key == "seeds":
                    kw[key] = tuple(int(s) for s in text.replace(",", " ").split())
                elif key == "scale_io":
                    kw[key] = parse_bool(text)
                elif key == "learning_rate":
                    kw[key] = None if text.lower() in ("", "auto", "none") else float(text)
                elif key in ("batch_size", "N_T", "m", "H", "max_epochs", "patience",
                             "stride", "val_stride", "split_seed"):
                    kw[key] = int(text)
                else:
                    kw[key] = float(text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r} in {source}: {text!r}") from exc
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_mapping(read_keyvalue(path), str(path))


def seed_frames(arch: str, m: int) -> int:
    return m if arch == FINITE else 1


# ------------------------------------------------------------------ windows


@dataclass(frozen=True)
class Window:
    traj: int
    start: int


def make_windows(ds: Dataset, N_T: int, m: int, loss_kind: str = STATE, stride: int = 1) -> list[Window]:
    """Sliding windows of ``N_T + m`` samples; ``m`` is the seed-frame count."""
    if loss_kind == ACC and not ds.has_accels:
        raise MissingAccelerationError("acceleration loss needs measured accelerations")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    L = N_T + m
    out = []
    for k, tr in enumerate(ds):
        if len(tr) < L:
            log.warning("trajectory %d (%d samples) shorter than window length %d; skipped", k, len(tr), L)
            continue
        out.extend(Window(k, s) for s in range(0, len(tr) - L + 1, stride))
    return out


@dataclass
class Batch:
    states: np.ndarray  # (B, L, 6)
    frames: np.ndarray  # (B, L, 7)
    accels: np.ndarray | None  # (B, L, 3)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def length(self) -> int:
        return self.states.shape[1]


class WindowSource:
    """Concatenated trajectory arrays for fast window gathering."""

    def __init__(self, ds: Dataset):
        self.offsets = np.cumsum([0] + [len(tr) for tr in ds])
        self.states = np.concatenate([tr.states for tr in ds])
        self.frames = np.concatenate([tr.frames() for tr in ds])
        self.accels = np.concatenate([tr.accels for tr in ds]) if ds.has_accels else None

    def batch(self, windows, length: int) -> Batch:
        starts = np.array([self.offsets[w.traj] + w.start for w in windows], dtype=int)
        idx = starts[:, None] + np.arange(length)[None, :]
        return Batch(
            self.states[idx], self.frames[idx], None if self.accels is None else self.accels[idx]
        )


def make_batch(ds: Dataset, windows, length: int) -> Batch:
    return WindowSource(ds).batch(windows, length)


# ------------------------------------------------------------------- losses


@dataclass
class GradientBundle:
    loss: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def _proj(tape, P, params, vel, frames_k):
    """Input projection for one frame; ``vel`` may be a tape Var."""
    inv = 1.0 / params.input_scale
    return ad.affine(
        tape,
        [(vel, P["W_x0"]), (frames_k[..., 3:5], P["W_u0"]), (frames_k[..., 5:7], P["W_w0"])],
        [inv[0:3], inv[3:5], inv[5:7]],
    )


def _head(tape, P, params, z):
    return ad.head(tape, z, P["W_1"], P["b_1"], P["W_2"], P["b_2"], P["W_3"], params.output_scale)


def _acc_forward(tape, P, params, batch: Batch, stats):
    if batch.accels is None:
        raise MissingAccelerationError("batch carries no accelerations")
    s = seed_frames(params.arch, params.m)
    N_T = batch.length - s
    inv_a = 1.0 / stats.sigma_a
    B = len(batch)
    if params.arch == FINITE:
        m = params.m
        targets_idx = s - 1 + np.arange(N_T)
        hist = targets_idx[:, None] - (m - 1) + np.arange(m)[None, :]  # (N_T, m)
        f = batch.frames[:, hist].reshape(B * N_T, m, 7)
        z = None
        for k in range(m):
            z = ad.cell(tape, _proj(tape, P, params, f[:, k, 0:3], f[:, k]), z, P["W_r0"], P["b_0"])
        a = _head(tape, P, params, z)
        tgt = batch.accels[:, targets_idx].reshape(B * N_T, 3)
        terms = [ad.sq_err(tape, a, tgt, inv_a)]
    else:
        terms, z = [], None
        for i in range(N_T):
            fr = batch.frames[:, i]
            z = ad.cell(tape, _proj(tape, P, params, fr[:, 0:3], fr), z, P["W_r0"], P["b_0"])
            a = _head(tape, P, params, z)
            terms.append(ad.sq_err(tape, a, batch.accels[:, i], inv_a))
    return ad.total(tape, terms, 1.0 / (B * N_T))


def _rollout_forward(tape, P, params, batch: Batch, stats, dt, keep=None):
    s = seed_frames(params.arch, params.m)
    L = batch.length
    N_T = L - s
    B = len(batch)
    meas_pose = batch.states[:, :, kin.POSE_IDX]
    meas_vel = batch.states[:, :, kin.VEL_IDX]
    inv_p = 1.0 / stats.sigma_x[list(kin.POSE_IDX)]
    inv_v = 1.0 / stats.sigma_x[list(kin.VEL_IDX)]

    pose = meas_pose[:, s - 1]
    vel = meas_vel[:, s - 1]
    projs = [_proj(tape, P, params, meas_vel[:, k], batch.frames[:, k]) for k in range(s)]
    terms = []
    z = None
    for i in range(s - 1, L - 1):
        if params.arch == FINITE:
            z = None
            for k in range(i - params.m + 1, i + 1):
                z = ad.cell(tape, projs[k], z, P["W_r0"], P["b_0"])
        else:
            z = ad.cell(tape, projs[i], z, P["W_r0"], P["b_0"])
        a = _head(tape, P, params, z)
        pose = ad.pose_euler(tape, pose, vel, dt)
        vel = ad.axpy(tape, vel, a, dt)
        k = i + 1
        projs.append(_proj(tape, P, params, vel, batch.frames[:, k]))
        terms.append(ad.sq_err(tape, pose, meas_pose[:, k], inv_p))
        terms.append(ad.sq_err(tape, vel, meas_vel[:, k], inv_v))
        if keep is not None:
            keep.append((pose.value if isinstance(pose, ad.Var) else pose,
                         vel.value if isinstance(vel, ad.Var) else vel))
    out = ad.total(tape, terms, 1.0 / (B * N_T))
    if not np.isfinite(out.value):
        bad = 0
        if keep:
            finite = np.ones(B, bool)
            for p_, v_ in keep:
                finite &= np.isfinite(p_).all(-1) & np.isfinite(v_).all(-1)
            bad = int(np.argmin(finite))
        raise RolloutDivergedError(bad)
    return out


def loss_and_grad(params: NetParams, batch: Batch, loss_kind: str, stats: StandardizationStats,
                  dt: float, want_grad: bool = True) -> GradientBundle:
    s = seed_frames(params.arch, params.m)
    if batch.length <= s:
        raise ValueError(f"windows of {batch.length} samples leave no step after {s} seed frames")
    tape = ad.Tape()
    P = {k: tape.leaf(getattr(params, k)) for k in PARAM_NAMES}
    if loss_kind == ACC:
        out = _acc_forward(tape, P, params, batch, stats)
    elif loss_kind == STATE:
        # blow-ups are detected and raised as RolloutDivergedError
        with np.errstate(over="ignore", invalid="ignore"):
            out = _rollout_forward(tape, P, params, batch, stats, dt, keep=[])
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    bundle = GradientBundle(float(out.value))
    if want_grad:
        tape.backward(out)
        bundle.grads = {
            k: (P[k].grad if P[k].grad is not None else np.zeros_like(P[k].value)) for k in PARAM_NAMES
        }
    return bundle


def acc_loss(params: NetParams, batch: Batch, stats: StandardizationStats) -> float:
    return loss_and_grad(params, batch, ACC, stats, dt=1.0, want_grad=False).loss


def rollout_loss(params: NetParams, batch: Batch, stats: StandardizationStats, dt: float) -> float:
    return loss_and_grad(params, batch, STATE, stats, dt, want_grad=False).loss


def grad(params: NetParams, batch: Batch, loss_kind: str, stats: StandardizationStats, dt: float) -> GradientBundle:
    return loss_and_grad(params, batch, loss_kind, stats, dt, want_grad=True)


def batched_loss(params: NetParams, source: WindowSource, windows, N_T: int, loss_kind: str,
                 stats: StandardizationStats, dt: float, batch_size: int = 512) -> float:
    """Mean loss over many windows, evaluated in fixed-order chunks."""
    if not windows:
        raise ValueError("no windows to evaluate")
    length = N_T + seed_frames(params.arch, params.m)
    tot = 0.0
    for lo in range(0, len(windows), batch_size):
        chunk = windows[lo : lo + batch_size]
        b = source.batch(chunk, length)
        tot += loss_and_grad(params, b, loss_kind, stats, dt, want_grad=False).loss * len(chunk)
    return tot / len(windows)


# -------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: NetParams) -> "AdamState":
        arrs = params.arrays()
        return cls({k: np.zeros_like(a) for k, a in arrs.items()}, {k: np.zeros_like(a) for k, a in arrs.items()})


def adam_update(theta: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update of a single array; ``t`` is the 1-based step count."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def adam_step(params: NetParams, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps=1e-8) -> tuple[NetParams, AdamState]:
    if state.t < 0:
        raise ValueError("step counter must be >= 0")
    t = state.t + 1
    new, m_new, v_new = {}, {}, {}
    for k in PARAM_NAMES:
        new[k], m_new[k], v_new[k] = adam_update(
            getattr(params, k), grads[k], state.m[k], state.v[k], t, lr, betas[0], betas[1], eps
        )
    return params.with_arrays(new), AdamState(m_new, v_new, t)


# ------------------------------------------------------------------- train


@dataclass
class TrainResult:
    params: NetParams
    log: list[tuple[int, float, float]]  # (epoch, train_loss, val_loss)
    wall_times: list[float]
    best_epoch: int
    best_val: float
    stats: StandardizationStats
    seed: int
    loss_kind: str

    def log_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e},{tl!r},{vl!r}" for e, tl, vl in self.log]
        return "\n".join(lines) + "\n"

    def timing_csv(self) -> str:
        lines = ["epoch,wall_time"]
        lines += [f"{e},{w:.3f}" for (e, _, _), w in zip(self.log, self.wall_times)]
        return "\n".join(lines) + "\n"


def split_dataset(ds: Dataset, val_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Shuffle whole trajectories and split train/validation."""
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    if n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    train, val = ds.subset(sorted(order[n_val:])), ds.subset(sorted(order[:n_val]))
    if not len(train) or not len(val):
        raise DegenerateSplitError(f"split of {n} trajectories leaves an empty part")
    return train, val


def io_scales(ds: Dataset, lag: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel input std and a lagged-difference acceleration scale."""
    frames = np.concatenate([tr.frames() for tr in ds])
    s_in = frames.std(axis=0)
    s_in[s_in <= 0] = 1.0
    diffs = [
        (tr.states[lag:, kin.VEL_IDX] - tr.states[:-lag, kin.VEL_IDX]) / (lag * tr.dt)
        for tr in ds if len(tr) > lag
    ]
    s_out = np.concatenate(diffs).std(axis=0) if diffs else np.ones(3)
    s_out[s_out <= 0] = 1.0
    return s_in, s_out


def train(ds: Dataset, config: TrainConfig, loss_kind: str, arch: str, seed: int = 0,
          val: Dataset | None = None, on_epoch=None) -> TrainResult:
    """Mini-batch Adam with best-validation snapshot and patience stopping."""
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if val is None:
        train_ds, val_ds = split_dataset(ds, config.val_fraction, config.split_seed)
    else:
        train_ds, val_ds = ds, val
    if not len(train_ds) or not len(val_ds):
        raise DegenerateSplitError("training and validation sets must be non-empty")
    dt = train_ds.dt
    stats = StandardizationStats.from_dataset(train_ds)
    if loss_kind == ACC and stats.sigma_a is None:
        raise MissingAccelerationError("acceleration loss needs measured accelerations")

    s = seed_frames(arch, config.m)
    L = config.N_T + s
    tr_windows = make_windows(train_ds, config.N_T, s, loss_kind, config.stride)
    va_windows = make_windows(val_ds, config.N_T, s, loss_kind, config.val_stride)
    if not tr_windows or not va_windows:
        raise DegenerateSplitError("no windows fit in the training or validation split")
    tr_src, va_src = WindowSource(train_ds), WindowSource(val_ds)

    ss = np.random.SeedSequence(seed)
    init_seed, shuffle_seed = (int(x.generate_state(1)[0]) for x in ss.spawn(2))
    scales = {}
    if config.scale_io:
        s_in, s_out = io_scales(train_ds)
        scales = {"input_scale": s_in, "output_scale": s_out}
    params = init_params(config.H, arch, config.m, init_seed, **scales)
    rng = np.random.default_rng(shuffle_seed)
    lr = config.lr_for(loss_kind)
    opt = AdamState.zeros_like(params)

    def evaluate(p, src, windows):
        return batched_loss(p, src, windows, config.N_T, loss_kind, stats, dt, config.batch_size)

    best = (evaluate(params, va_src, va_windows), params.copy(), 0)
    history, walls = [(0, float("nan"), best[0])], [0.0]
    t0 = time.perf_counter()
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(tr_windows))
        tot = 0.0
        for lo in range(0, len(order), config.batch_size):
            chunk = [tr_windows[j] for j in order[lo : lo + config.batch_size]]
            bundle = loss_and_grad(params, tr_src.batch(chunk, L), loss_kind, stats, dt, True)
            params, opt = adam_step(params, bundle.grads, opt, lr, (config.beta1, config.beta2), config.eps)
            tot += bundle.loss * len(chunk)
        train_loss = tot / len(order)
        val_loss = evaluate(params, va_src, va_windows)
        history.append((epoch, train_loss, val_loss))
        walls.append(time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        if val_loss < best[0]:
            best = (val_loss, params.copy(), epoch)
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    log.info("seed %d: best validation %.5g at epoch %d", seed, best[0], best[2])
    return TrainResult(best[1], history, walls, best[2], best[0], stats, seed, loss_kind)


def train_seeds(ds: Dataset, config: TrainConfig, loss_kind: str, arch: str, **kw) -> list[TrainResult]:
    return [train(ds, config, loss_kind, arch, seed, **kw) for seed in config.seeds]
