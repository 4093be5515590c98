"""Free-running prediction, the standardized state MSE and the experiment table."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin
from . import netmodel as nm
from . import refmodel as rm
from .dataset import LABELS, Dataset, Trajectory
from .training import StandardizationStats, TrainConfig, train

log = logging.getLogger(__name__)

DEFAULT_RESTART = 100.0
DIVERGENCE_LIMIT = 1e6  # standardized units


class NonFiniteRolloutError(FloatingPointError):
    """Rollout left the finite (or sane) range; ``partial`` holds the valid prefix."""

    def __init__(self, step: int, partial: Trajectory | None = None):
        self.step = step
        self.partial = partial
        super().__init__(f"rollout diverged at step {step}")


def warmup_frames(model) -> int:
    """Samples copied from the measurement after each restart."""
    if isinstance(model, nm.NetParams):
        return model.m
    if isinstance(model, rm.RefModelCoeffs):
        return 1
    raise TypeError(f"cannot roll out a {type(model).__name__}")


def segment_starts(n: int, restart_period: float, dt: float) -> np.ndarray:
    if not restart_period > 0:
        raise ValueError("restart_period must be positive")
    if math.isinf(restart_period):
        return np.array([0])
    P = max(1, int(round(restart_period / dt)))
    return np.arange(0, n, P)


def measured_mask(n: int, restart_period: float, dt: float, warmup: int) -> np.ndarray:
    """True where the rollout copies the measurement instead of predicting."""
    mask = np.zeros(n, dtype=bool)
    for s in segment_starts(n, restart_period, dt):
        mask[s : s + warmup] = True
    return mask


class _NetStepper:
    """Acceleration from the trailing frames of a rollout."""

    def __init__(self, p: nm.NetParams):
        self.p = p
        self.z = None

    def __call__(self, frames: np.ndarray, i: int) -> np.ndarray:
        p = self.p
        if p.arch == nm.FULL:
            a, self.z = nm.step_full(frames[i], self.z, p)
            return a
        if i + 1 < p.m:
            return np.full(3, np.nan)
        return nm.forward_finite(frames[i + 1 - p.m : i + 1], p)


def rollout(model, traj: Trajectory, restart_period: float = math.inf,
            sigma: np.ndarray | None = None, limit: float = DIVERGENCE_LIMIT) -> Trajectory:
    """Euler rollout driven by the measured controls and wind.

    After every restart the first ``warmup_frames(model)`` samples are the
    measurement itself. The fully recurrent net keeps its latent state across
    restarts. Raises ``NonFiniteRolloutError`` when a state becomes
    non-finite or exceeds ``limit`` in units of ``sigma``.
    """
    n, dt = len(traj), traj.dt
    warm = warmup_frames(model)
    copy = measured_mask(n, restart_period, dt, warm)
    sigma = np.ones(6) if sigma is None else np.asarray(sigma, float)
    meas = traj.states
    pred = np.empty_like(meas)
    acc = np.full((n, 3), np.nan)
    frames = np.empty((n, nm.N_IN))
    frames[:, 3:5] = traj.controls
    frames[:, 5:7] = kin.wind_vectors(traj.winds)
    net = _NetStepper(model) if isinstance(model, nm.NetParams) else None

    x = meas[0].copy()
    for i in range(n):
        if copy[i]:
            x = meas[i].copy()
        elif not (np.all(np.isfinite(x)) and np.all(np.abs(x) <= limit * sigma)):
            raise NonFiniteRolloutError(i, _with_states(traj, pred[:i], acc[:i]))
        pred[i] = x
        frames[i, 0:3] = x[list(kin.VEL_IDX)]
        if net is not None:
            a = net(frames, i)
        else:
            a = rm.accel(x, traj.controls[i], traj.winds[i], model)
        acc[i] = a
        if i + 1 < n and not copy[i + 1]:
            x = kin.euler_state_step(x, a, dt)
    return _with_states(traj, pred, acc)


def _with_states(traj: Trajectory, states: np.ndarray, acc: np.ndarray) -> Trajectory:
    k = len(states)
    return Trajectory(traj.t[:k], states, traj.controls[:k], traj.winds[:k], acc, traj.label, traj.dt)


def mse(pred: Trajectory, meas: Trajectory, stats: StandardizationStats, mask=None) -> float:
    """(1/N) sum_i sum_j ((x_ij - xhat_ij) / sigma_j)**2 over the selected samples."""
    if len(pred) != len(meas):
        raise ValueError(f"length mismatch: prediction {len(pred)} vs measurement {len(meas)}")
    d = (pred.states - meas.states) / stats.sigma_x
    if mask is not None:
        d = d[np.asarray(mask, bool)]
    if not len(d):
        return 0.0
    return float(np.sum(d * d) / len(d))


def horizon_mse(model, ds: Dataset, horizon: int, stats: StandardizationStats) -> float:
    """Mean error of free rollouts over consecutive ``horizon``-step predictions.

    Each trajectory is cut into back-to-back segments of warmup plus
    ``horizon`` samples; only predicted samples are scored.
    """
    warm = warmup_frames(model)
    tot, count = 0.0, 0
    for tr in ds:
        period = (warm + horizon) * tr.dt
        pred = rollout(model, tr, period, stats.sigma_x)
        keep = ~measured_mask(len(tr), period, tr.dt, warm)
        d = (pred.states[keep] - tr.states[keep]) / stats.sigma_x
        tot += float(np.sum(d * d))
        count += int(keep.sum())
    return tot / count if count else 0.0


# ------------------------------------------------------------------ reports


@dataclass
class TrajectoryResult:
    index: int
    label: str
    mse: float
    diverged_at: int | None = None
    pred: Trajectory | None = None


def evaluate_model(model, test: Dataset, stats: StandardizationStats,
                   restart_period: float = DEFAULT_RESTART, keep_pred: bool = False) -> list[TrajectoryResult]:
    """Per-trajectory MSE; divergent rollouts are scored on their valid prefix and flagged."""
    out = []
    for k, tr in enumerate(test):
        try:
            pred = rollout(model, tr, restart_period, stats.sigma_x)
            res = TrajectoryResult(k, tr.label, mse(pred, tr, stats), None, pred)
        except NonFiniteRolloutError as exc:
            part = exc.partial
            err = mse(part, tr.slice(0, len(part)), stats) if len(part) else math.inf
            res = TrajectoryResult(k, tr.label, err, exc.step, part)
        if not keep_pred:
            res.pred = None
        out.append(res)
    return out


@dataclass
class ExperimentConfig:
    name: str
    arch: str
    loss_kind: str
    train_data: Dataset


@dataclass
class Cell:
    config: str
    seed: int
    results: list[TrajectoryResult] = field(default_factory=list)
    error: str | None = None
    params: nm.NetParams | None = None

    def label_mse(self, label: str) -> float:
        vals = [r.mse for r in self.results if r.label == label]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def diverged(self) -> bool:
        return self.error is not None or any(r.diverged_at is not None for r in self.results)


@dataclass
class RolloutReport:
    configs: list[str]
    seeds: list[int]
    labels: list[str]
    cells: list[Cell]
    stats: StandardizationStats
    baseline: list[TrajectoryResult] | None = None

    def cell(self, config: str, seed: int) -> Cell:
        for c in self.cells:
            if c.config == config and c.seed == seed:
                return c
        raise KeyError((config, seed))

    def seed_values(self, config: str, label: str) -> list[float]:
        return [self.cell(config, s).label_mse(label) for s in self.seeds]

    def summary(self, config: str, label: str) -> tuple[float, float, int]:
        """(mean, std, diverged-seed count) across seeds for one class."""
        vals = np.array(self.seed_values(config, label))
        ok = vals[np.isfinite(vals)]
        n_div = sum(
            1 for s in self.seeds
            if self.cell(config, s).error is not None
            or any(r.diverged_at is not None for r in self.cell(config, s).results if r.label == label)
        )
        if not len(ok):
            return math.nan, math.nan, n_div
        return float(ok.mean()), float(ok.std()), n_div

    def baseline_mse(self, label: str) -> float:
        if self.baseline is None:
            return math.nan
        vals = [r.mse for r in self.baseline if r.label == label]
        return float(np.mean(vals)) if vals else math.nan

    def table(self) -> list[dict]:
        rows = []
        for lab in self.labels:
            row = {"label": lab}
            for c in self.configs:
                mean, std, n_div = self.summary(c, lab)
                row[f"{c}_mean"], row[f"{c}_std"], row[f"{c}_diverged"] = mean, std, n_div
            if self.baseline is not None:
                row["baseline"] = self.baseline_mse(lab)
            rows.append(row)
        return rows

    def to_csv(self) -> str:
        rows = self.table()
        buf = io.StringIO()
        fields = list(rows[0]) if rows else ["label"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in fields])
        return buf.getvalue()

    def cells_csv(self) -> str:
        """Long format: one row per (config, seed, trajectory)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "seed", "trajectory", "label", "mse", "diverged_at", "error"])
        for c in self.cells:
            if c.error is not None:
                w.writerow([c.config, c.seed, "", "", "nan", "", c.error])
            for r in c.results:
                w.writerow([c.config, c.seed, r.index, r.label, _fmt(r.mse),
                            "" if r.diverged_at is None else r.diverged_at, ""])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _run_cell(args):
    cfg, seed, train_cfg, test, test_stats, restart = args
    cell = Cell(cfg.name, seed)
    try:
        res = train(cfg.train_data, train_cfg, cfg.loss_kind, cfg.arch, seed)
    except (ValueError, FloatingPointError) as exc:
        cell.error = f"{type(exc).__name__}: {exc}"
        log.warning("cell %s seed %d failed: %s", cfg.name, seed, exc)
        return cell
    cell.params = res.params
    cell.results = evaluate_model(res.params, test, test_stats, restart)
    return cell


def experiment_matrix(configs: list[ExperimentConfig], seeds, test: Dataset, train_config: TrainConfig,
                      baseline: rm.RefModelCoeffs | None = None, restart_period: float = DEFAULT_RESTART,
                      jobs: int = 1) -> RolloutReport:
    """Train every (config, seed) cell and score it on ``test``.

    Errors inside a cell are recorded on that cell only. Cells may run in
    worker processes; results are merged in (config, seed) order.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    stats = StandardizationStats.from_dataset(test, source="test")
    tasks = [(cfg, s, train_config, test, stats, restart_period) for cfg in configs for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, tasks))
    else:
        cells = [_run_cell(t) for t in tasks]
    base = None if baseline is None else evaluate_model(baseline, test, stats, restart_period)
    labels = [lab for lab in LABELS if lab in set(test.labels())]
    return RolloutReport([c.name for c in configs], seeds, labels, cells, stats, base)


# -------------------------------------------------------------------- plots


@dataclass
class PlotEntry:
    name: str
    meas: Trajectory
    preds: dict[str, Trajectory]


def plot_entries(models: dict, test: Dataset, stats: StandardizationStats,
                 restart_period: float = DEFAULT_RESTART) -> list[PlotEntry]:
    """Roll every named model over every test trajectory (divergent runs keep their prefix)."""
    entries = []
    for k, tr in enumerate(test):
        preds = {}
        for name, model in models.items():
            try:
                preds[name] = rollout(model, tr, restart_period, stats.sigma_x)
            except NonFiniteRolloutError as exc:
                preds[name] = exc.partial
        entries.append(PlotEntry(f"traj{k:03d}_{tr.label}", tr, preds))
    return entries


def emit_plots(entries: list[PlotEntry], out_dir) -> list:
    """Per trajectory: ``<name>_track.svg``, ``<name>_series.svg`` and ``<name>_series.csv``."""
    from pathlib import Path

    from . import plotting

    if not entries:
        log.warning("no trajectories to plot")
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for e in entries:
        paths = (out / f"{e.name}_track.svg", out / f"{e.name}_series.svg", out / f"{e.name}_series.csv")
        plotting.track_figure(e.meas, e.preds, paths[0])
        plotting.series_figure(e.meas, e.preds, paths[1])
        plotting.series_csv(e.meas, e.preds, paths[2])
        written.extend(paths)
    return written
