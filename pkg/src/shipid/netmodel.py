"""Recurrent acceleration models.

Both architectures share one parameter set. A frame is the 7-vector
``(u, v_m, r, n, delta, wx, wy)``; frames are fed as rows, so every weight
matrix is applied as ``x @ W`` with ``W`` shaped (fan_in, fan_out).

``FULL`` carries the latent ``z1`` across all past frames. ``FINITE`` rebuilds
``z1`` from zero over exactly the last ``m`` frames at every prediction. Every
hidden transform subtracts ``tanh(bias)`` so a zero input from zero memory
produces exactly zero acceleration.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

FULL = "full"
FINITE = "finite"
ARCHS = (FULL, FINITE)

CHANNELS = ("u", "vm", "r", "n", "delta", "wx", "wy")
N_IN = len(CHANNELS)
CHECKPOINT_FORMAT = "shipid-netparams"
CHECKPOINT_VERSION = 1

MATRICES = ("W_x0", "W_u0", "W_w0", "W_r0", "W_1", "W_2", "W_3")
BIASES = ("b_0", "b_1", "b_2")
PARAM_NAMES = MATRICES + BIASES


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class NetParams:
    W_x0: np.ndarray
    W_u0: np.ndarray
    W_w0: np.ndarray
    W_r0: np.ndarray
    W_1: np.ndarray
    W_2: np.ndarray
    W_3: np.ndarray
    b_0: np.ndarray
    b_1: np.ndarray
    b_2: np.ndarray
    arch: str = FINITE
    m: int = 10
    # fixed (untrained) per-channel scalers; all ones means raw physical units
    input_scale: np.ndarray = field(default_factory=lambda: np.ones(N_IN))
    output_scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        H = self.H
        expect = {
            "W_x0": (3, H), "W_u0": (2, H), "W_w0": (2, H), "W_r0": (H, H),
            "W_1": (H, H), "W_2": (H, H), "W_3": (H, 3),
            "b_0": (H,), "b_1": (H,), "b_2": (H,),
        }
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        if self.m < 1:
            raise ValueError("memory steps m must be >= 1")
        self.input_scale = np.asarray(self.input_scale, dtype=float).reshape(N_IN)
        self.output_scale = np.asarray(self.output_scale, dtype=float).reshape(3)

    @property
    def H(self) -> int:
        return np.shape(self.W_x0)[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "NetParams":
        return dataclasses.replace(self, **{k: np.array(v, dtype=float) for k, v in arrays.items()})

    def copy(self) -> "NetParams":
        return self.with_arrays(self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, k).ravel() for k in PARAM_NAMES])

    def from_flat(self, vec) -> "NetParams":
        out, pos = {}, 0
        for k in PARAM_NAMES:
            a = getattr(self, k)
            out[k] = np.asarray(vec[pos : pos + a.size], dtype=float).reshape(a.shape)
            pos += a.size
        return self.with_arrays(out)

    def zero_output(self) -> "NetParams":
        """Same network with W_3 = 0, i.e. constant-velocity extrapolation."""
        return self.with_arrays({"W_3": np.zeros_like(self.W_3)})


def init_params(H: int = 200, arch: str = FINITE, m: int = 10, seed: int = 0, **scales) -> NetParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, U(-0.1, 0.1) biases."""
    if H < 1:
        raise ValueError("hidden width must be >= 1")
    rng = np.random.default_rng(seed)
    shapes = {"W_x0": (3, H), "W_u0": (2, H), "W_w0": (2, H), "W_r0": (H, H),
              "W_1": (H, H), "W_2": (H, H), "W_3": (H, 3)}
    arrays = {}
    for name, shape in shapes.items():
        s = 1.0 / np.sqrt(shape[0])
        arrays[name] = rng.uniform(-s, s, size=shape)
    for name in BIASES:
        arrays[name] = rng.uniform(-0.1, 0.1, size=H)
    return NetParams(**arrays, arch=arch, m=m, **scales)


def layer(x, W, b):
    """tanh(x @ W + b) - tanh(b); zero whenever x is zero."""
    x, W, b = np.asarray(x, float), np.asarray(W, float), np.asarray(b, float)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"layer shapes incompatible: x{x.shape}, W{W.shape}, b{b.shape}")
    return np.tanh(x @ W + b) - np.tanh(b)


def _check_frames(frames) -> np.ndarray:
    frames = np.asarray(frames, dtype=float)
    if frames.shape[-1] != N_IN:
        raise ShapeError(f"frames must have {N_IN} channels, got {frames.shape[-1]}")
    return frames


def project(frames, p: NetParams):
    """Input part of the first transform: W_x0 v + W_u0 u + W_w0 w' (no bias)."""
    f = _check_frames(frames) / p.input_scale
    return f[..., 0:3] @ p.W_x0 + f[..., 3:5] @ p.W_u0 + f[..., 5:7] @ p.W_w0


def first_cell(proj, z_prev, p: NetParams):
    pre = proj if z_prev is None else proj + z_prev @ p.W_r0
    return np.tanh(pre + p.b_0) - np.tanh(p.b_0)


def head(z1, p: NetParams):
    z2 = layer(z1, p.W_1, p.b_1)
    z3 = layer(z2, p.W_2, p.b_2)
    return (z3 @ p.W_3) * p.output_scale


def step_full(frame, z1, p: NetParams):
    """One step of the fully recurrent network; returns (accel, new z1)."""
    frame = _check_frames(frame)
    if z1 is None:
        z1 = np.zeros(frame.shape[:-1] + (p.H,))
    z1 = np.asarray(z1, float)
    if z1.shape[-1] != p.H:
        raise ShapeError(f"hidden state width {z1.shape[-1]} != H={p.H}")
    z_new = first_cell(project(frame, p), z1, p)
    return head(z_new, p), z_new


def forward_finite(frames, p: NetParams, m: int | None = None):
    """Acceleration at the last of exactly ``m`` frames (oldest first, axis -2)."""
    frames = _check_frames(frames)
    m = p.m if m is None else m
    if frames.ndim < 2 or frames.shape[-2] != m:
        raise ShapeError(f"expected {m} frames on axis -2, got shape {frames.shape}")
    proj = project(frames, p)
    z = first_cell(proj[..., 0, :], None, p)
    for k in range(1, m):
        z = first_cell(proj[..., k, :], z, p)
    return head(z, p)


def output_bound(p: NetParams) -> np.ndarray:
    """Hard bound on |accel| per channel: z3 entries lie in (-2, 2)."""
    return 2.0 * np.abs(p.W_3).sum(axis=0) * np.abs(p.output_scale)


def save_checkpoint(p: NetParams, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": p.arch,
        "H": p.H,
        "m": p.m,
        "channels": list(CHANNELS),
        "input_scale": p.input_scale.tolist(),
        "output_scale": p.output_scale.tolist(),
        "params": {k: getattr(p, k).tolist() for k in PARAM_NAMES},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> NetParams:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown format {doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {doc.get('version')!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    if tuple(doc.get("channels", ())) != CHANNELS:
        raise CheckpointError(f"{path}: channel order {doc.get('channels')} differs from {CHANNELS}")
    arrays = {k: np.array(v, dtype=float) for k, v in doc["params"].items()}
    p = NetParams(**arrays, arch=doc["arch"], m=int(doc["m"]),
                  input_scale=doc["input_scale"], output_scale=doc["output_scale"])
    if p.H != doc["H"]:
        raise CheckpointError(f"{path}: H={doc['H']} disagrees with matrix shapes")
    return p
