"""Deterministic SVG overlays of measured and predicted trajectories."""
from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import kinematics as kin  # noqa: E402
from .dataset import Trajectory  # noqa: E402

# fixed ids and no timestamp, so reruns give identical files
plt.rcParams["svg.hashsalt"] = "shipid"
_SVG_META = {"Date": None, "Creator": "shipid"}

_SERIES = (("u", kin.IU, "m/s"), ("vm", kin.IV, "m/s"), ("r", kin.IR, "rad/s"), ("psi", kin.IPSI, "rad"))
_ACCELS = (("du", 0, "m/s2"), ("dvm", 1, "m/s2"), ("dr", 2, "rad/s2"))


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def track_figure(meas: Trajectory, preds: dict[str, Trajectory], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(meas.states[:, kin.IY], meas.states[:, kin.IX], "k-", lw=1.2, label="measured")
    for name, p in preds.items():
        ax.plot(p.states[:, kin.IY], p.states[:, kin.IX], "--", lw=1.0, label=name)
    ax.set_xlabel("Y [m]")
    ax.set_ylabel("X [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=7)
    _save(fig, path)


def series_figure(meas: Trajectory, preds: dict[str, Trajectory], path) -> None:
    rows = len(_SERIES) + (len(_ACCELS) if meas.accels is not None else 0)
    fig, axes = plt.subplots(rows, 1, figsize=(7, 1.6 * rows), sharex=True)
    for ax, (name, idx, unit) in zip(axes, _SERIES):
        ax.plot(meas.t, meas.states[:, idx], "k-", lw=1.0)
        for p in preds.values():
            ax.plot(p.t, p.states[:, idx], "--", lw=0.9)
        ax.set_ylabel(f"{name} [{unit}]", fontsize=7)
    if meas.accels is not None:
        for ax, (name, idx, unit) in zip(axes[len(_SERIES):], _ACCELS):
            ax.plot(meas.t, meas.accels[:, idx], "k-", lw=0.6, alpha=0.6)
            for p in preds.values():
                if p.accels is not None:
                    ax.plot(p.t, p.accels[:, idx], "-", lw=0.9)
            ax.set_ylabel(f"{name} [{unit}]", fontsize=7)
    axes[-1].set_xlabel("t [s]")
    axes[0].legend(["measured", *preds], fontsize=7, loc="upper right")
    _save(fig, path)


def series_csv(meas: Trajectory, preds: dict[str, Trajectory], path) -> None:
    """Long-format columns: t, measured channels, then each prediction's channels."""
    chans = [("X", kin.IX), ("Y", kin.IY)] + [(n, i) for n, i, _ in _SERIES]
    header = ["t"] + [f"meas_{n}" for n, _ in chans] + [f"meas_{n}" for n, _, _ in _ACCELS]
    for name in preds:
        header += [f"{name}_{n}" for n, _ in chans] + [f"{name}_{n}" for n, _, _ in _ACCELS]
    n = len(meas)

    def cols(tr: Trajectory):
        out = [_padded(tr.states[:, i], n) for _, i in chans]
        acc = tr.accels if tr.accels is not None else np.full((len(tr), 3), np.nan)
        out += [_padded(acc[:, k], n) for _, k, _ in _ACCELS]
        return out

    table = [meas.t] + cols(meas)
    for p in preds.values():
        table += cols(p)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.column_stack(table):
            w.writerow([repr(float(v)) for v in row])


def _padded(a: np.ndarray, n: int) -> np.ndarray:
    """Diverged predictions are shorter than the measurement; pad with NaN."""
    if len(a) >= n:
        return a[:n]
    return np.concatenate([a, np.full(n - len(a), np.nan)])
