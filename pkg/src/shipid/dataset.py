"""Trajectory containers and the dataset CSV format.

A dataset file holds one or more trajectory blocks::

    # shipid-dataset version=1 trajectories=2
    # trajectory label=T dt=0.1 rows=600 accel=1
    t,X,Y,psi,u,vm,r,n,delta,U_A,gamma_a,du,dvm,dr
    0.0,...
    # trajectory label=Z dt=0.1 rows=450 accel=1
    ...

Units are SI and angles radians. Floats are written with ``repr`` so a
write/read round trip is bit-exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin

SCHEMA_NAME = "shipid-dataset"
SCHEMA_VERSION = 1
BASE_COLUMNS = ("t", "X", "Y", "psi", "u", "vm", "r", "n", "delta", "U_A", "gamma_a")
ACCEL_COLUMNS = ("du", "dvm", "dr")
LABELS = ("T", "Z", "R", "B")
# CSV column -> flattened state index
_STATE_COLS = {"X": kin.IX, "u": kin.IU, "Y": kin.IY, "vm": kin.IV, "psi": kin.IPSI, "r": kin.IR}


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaVersionError(DatasetFormatError):
    pass


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray  # (N, 6) in (X, u, Y, vm, psi, r) order
    controls: np.ndarray  # (N, 2) (n, delta)
    winds: np.ndarray  # (N, 2) (U_A, gamma_a)
    accels: np.ndarray | None = None  # (N, 3) (du, dvm, dr)
    label: str = "R"
    dt: float = 0.1

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.states = np.asarray(self.states, dtype=float).reshape(-1, 6)
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, 2)
        self.winds = np.asarray(self.winds, dtype=float).reshape(-1, 2)
        n = len(self.t)
        if not (len(self.states) == len(self.controls) == len(self.winds) == n):
            raise ValueError("trajectory channels must have equal length")
        if self.accels is not None:
            self.accels = np.asarray(self.accels, dtype=float).reshape(-1, 3)
            if len(self.accels) != n:
                raise ValueError("accels length mismatch")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        return len(self) * self.dt

    def frames(self) -> np.ndarray:
        """Network input frames (N, 7): (u, vm, r, n, delta, wx, wy)."""
        out = np.empty((len(self), 7))
        out[:, 0:3] = self.states[:, kin.VEL_IDX]
        out[:, 3:5] = self.controls
        out[:, 5:7] = kin.wind_vectors(self.winds)
        return out

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(
            self.t[start:stop], self.states[start:stop], self.controls[start:stop],
            self.winds[start:stop], None if self.accels is None else self.accels[start:stop],
            self.label, self.dt,
        )

    def copy(self) -> "Trajectory":
        """Deep copy; `slice` returns views."""
        return Trajectory(
            self.t.copy(), self.states.copy(), self.controls.copy(), self.winds.copy(),
            None if self.accels is None else self.accels.copy(), self.label, self.dt,
        )


@dataclass
class Dataset:
    trajectories: list[Trajectory] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def dt(self) -> float:
        dts = {tr.dt for tr in self.trajectories}
        if len(dts) != 1:
            raise ValueError(f"dataset mixes sample periods {sorted(dts)}")
        return dts.pop()

    @property
    def has_accels(self) -> bool:
        return bool(self.trajectories) and all(tr.accels is not None for tr in self.trajectories)

    def labels(self) -> list[str]:
        return [tr.label for tr in self.trajectories]

    def durations(self) -> dict[str, float]:
        out = {lab: 0.0 for lab in LABELS}
        for tr in self.trajectories:
            out[tr.label] = out.get(tr.label, 0.0) + tr.duration
        return out

    def total_duration(self) -> float:
        return sum(tr.duration for tr in self.trajectories)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.trajectories[i] for i in idx])

    def by_label(self, label: str) -> "Dataset":
        return Dataset([tr for tr in self.trajectories if tr.label == label])


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# {SCHEMA_NAME} version={SCHEMA_VERSION} trajectories={len(ds)}\n")
        for tr in ds:
            acc = tr.accels is not None
            fh.write(f"# trajectory label={tr.label} dt={_fmt(tr.dt)} rows={len(tr)} accel={int(acc)}\n")
            cols = BASE_COLUMNS + (ACCEL_COLUMNS if acc else ())
            fh.write(",".join(cols) + "\n")
            table = _to_table(tr)
            for row in table:
                fh.write(",".join(map(_fmt, row)) + "\n")


def _to_table(tr: Trajectory) -> np.ndarray:
    s = tr.states
    parts = [tr.t[:, None], s[:, [kin.IX]], s[:, [kin.IY]], s[:, [kin.IPSI]],
             s[:, [kin.IU]], s[:, [kin.IV]], s[:, [kin.IR]], tr.controls, tr.winds]
    if tr.accels is not None:
        parts.append(tr.accels)
    return np.hstack(parts)


def _parse_meta(text: str, lineno: int) -> dict[str, str]:
    meta = {}
    for tok in text.split()[1:]:
        if "=" not in tok:
            raise DatasetFormatError(f"bad metadata token {tok!r}", lineno)
        k, v = tok.split("=", 1)
        meta[k] = v
    return meta


def read_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("empty file", 1)
    head = lines[0]
    if not head.startswith("# "):
        raise DatasetFormatError("missing schema header", 1)
    parts = head[2:].split()
    if not parts or parts[0] != SCHEMA_NAME:
        raise DatasetFormatError(f"unknown schema {parts[0] if parts else ''!r}", 1)
    meta = _parse_meta(head[2:], 1)
    try:
        version = int(meta.get("version", "-1"))
        n_traj = int(meta["trajectories"])
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"bad schema header ({exc})", 1) from exc
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"schema version {version} not supported (expected {SCHEMA_VERSION})", 1
        )

    trajs = []
    pos = 1
    for _ in range(n_traj):
        if pos >= len(lines):
            raise DatasetFormatError("file truncated: missing trajectory block", pos + 1)
        block = lines[pos]
        if not block.startswith("# trajectory"):
            raise DatasetFormatError("expected '# trajectory' line", pos + 1)
        bmeta = _parse_meta(block[2:], pos + 1)
        try:
            label, dt, rows, acc = bmeta["label"], float(bmeta["dt"]), int(bmeta["rows"]), bmeta["accel"] == "1"
        except (KeyError, ValueError) as exc:
            raise DatasetFormatError(f"bad trajectory metadata ({exc})", pos + 1) from exc
        cols = BASE_COLUMNS + (ACCEL_COLUMNS if acc else ())
        if pos + 1 >= len(lines) or tuple(lines[pos + 1].split(",")) != cols:
            raise DatasetFormatError(f"expected header {','.join(cols)}", pos + 2)
        start = pos + 2
        if start + rows > len(lines):
            raise DatasetFormatError(
                f"file truncated: trajectory declares {rows} rows, found {len(lines) - start}",
                len(lines) + 1,
            )
        table = np.empty((rows, len(cols)))
        for r in range(rows):
            lineno = start + r + 1
            cells = lines[start + r].split(",")
            if len(cells) != len(cols):
                raise DatasetFormatError(f"expected {len(cols)} cells, got {len(cells)}", lineno)
            for c, cell in enumerate(cells):
                try:
                    v = float(cell)
                except ValueError:
                    raise DatasetFormatError(f"channel {cols[c]}: not a number {cell!r}", lineno) from None
                if not math.isfinite(v):
                    raise DatasetFormatError(f"channel {cols[c]} row {r}: non-finite value {cell}", lineno)
                table[r, c] = v
        trajs.append(_from_table(table, label, dt, acc))
        pos = start + rows
    if pos != len(lines):
        raise DatasetFormatError("unexpected trailing content", pos + 1)
    return Dataset(trajs)


def _from_table(table: np.ndarray, label: str, dt: float, acc: bool) -> Trajectory:
    col = {name: i for i, name in enumerate(BASE_COLUMNS + ACCEL_COLUMNS)}
    states = np.empty((len(table), 6))
    for name, idx in _STATE_COLS.items():
        states[:, idx] = table[:, col[name]]
    return Trajectory(
        t=table[:, 0].copy(),
        states=states,
        controls=table[:, [col["n"], col["delta"]]],
        winds=table[:, [col["U_A"], col["gamma_a"]]],
        accels=table[:, [col["du"], col["dvm"], col["dr"]]] if acc else None,
        label=label,
        dt=dt,
    )


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Bit-exact equality of all channels and metadata."""
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if x.label != y.label or x.dt != y.dt or len(x) != len(y):
            return False
        if (x.accels is None) != (y.accels is None):
            return False
        pairs = [(x.t, y.t), (x.states, y.states), (x.controls, y.controls), (x.winds, y.winds)]
        if x.accels is not None:
            pairs.append((x.accels, y.accels))
        for p, q in pairs:
            if p.tobytes() != q.tobytes():
                return False
    return True
