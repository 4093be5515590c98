"""Minimal reverse-mode tape over dense numpy arrays.

Values are recorded in creation order, so reversing the tape is a valid
topological order for the backward sweep. The primitive set is tailored to
the recurrent acceleration model and the Euler rollout: each primitive
carries its own vector-Jacobian products.
"""
from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "grad", "parents", "tape")

    def __init__(self, value, tape: "Tape", parents=()):
        self.value = value
        self.grad = None
        self.parents = parents  # tuple of (Var, vjp) pairs
        self.tape = tape

    @property
    def shape(self):
        return np.shape(self.value)


def _val(x):
    return x.value if isinstance(x, Var) else x


def _flat2(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []

    def leaf(self, value) -> Var:
        v = Var(np.asarray(value, dtype=float), self)
        self.nodes.append(v)
        return v

    def record(self, value, parents) -> Var:
        parents = tuple((p, f) for p, f in parents if isinstance(p, Var))
        v = Var(value, self, parents)
        self.nodes.append(v)
        return v

    def backward(self, out: Var, seed=1.0) -> None:
        out.grad = np.asarray(seed, dtype=float) * np.ones_like(out.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib


# ---------------------------------------------------------------- primitives


def affine(tape: Tape, pairs, scales=None) -> Var:
    """sum_k (x_k * s_k) @ W_k over (x, W) pairs; s_k an optional column scale."""
    scales = scales or [None] * len(pairs)
    xs = []
    total = None
    for (x, W), s in zip(pairs, scales):
        xv = _val(x) if s is None else _val(x) * s
        xs.append(xv)
        term = xv @ _val(W)
        total = term if total is None else total + term
    parents = []
    for (x, W), s, xv in zip(pairs, scales, xs):
        if isinstance(x, Var):
            Wv = _val(W)
            if s is None:
                parents.append((x, lambda g, Wv=Wv: g @ Wv.T))
            else:
                parents.append((x, lambda g, Wv=Wv, s=s: (g @ Wv.T) * s))
        if isinstance(W, Var):
            parents.append((W, lambda g, xv=xv: _flat2(xv).T @ _flat2(g)))
    return tape.record(total, parents)


def cell(tape: Tape, proj, z_prev, W_r, b) -> Var:
    """tanh(proj + z_prev @ W_r + b) - tanh(b); ``z_prev`` may be None."""
    pre = _val(proj) + _val(b)
    if z_prev is not None:
        pre = pre + _val(z_prev) @ _val(W_r)
    t = np.tanh(pre)
    tb = np.tanh(_val(b))
    out = t - tb
    dpre = 1.0 - t * t
    dtb = 1.0 - tb * tb

    def g_pre(g):
        return g * dpre

    parents = [(proj, g_pre), (b, lambda g: _flat2(g * dpre).sum(0) - _flat2(g).sum(0) * dtb)]
    if z_prev is not None:
        zv, Wv = _val(z_prev), _val(W_r)
        parents.append((z_prev, lambda g: (g * dpre) @ Wv.T))
        parents.append((W_r, lambda g: _flat2(zv).T @ _flat2(g * dpre)))
    return tape.record(out, parents)


def head(tape: Tape, z1, W1, b1, W2, b2, W3, out_scale) -> Var:
    """Two shifted-tanh layers and a linear readout, scaled per channel."""
    z1v, W1v, b1v, W2v, b2v, W3v = map(_val, (z1, W1, b1, W2, b2, W3))
    t2 = np.tanh(z1v @ W1v + b1v)
    tb1 = np.tanh(b1v)
    z2 = t2 - tb1
    t3 = np.tanh(z2 @ W2v + b2v)
    tb2 = np.tanh(b2v)
    z3 = t3 - tb2
    out = (z3 @ W3v) * out_scale
    cache = {}

    def back(g):
        if cache.get("g") is g:
            return cache
        cache["g"] = g
        gy = g * out_scale
        cache["W3"] = _flat2(z3).T @ _flat2(gy)
        gz3 = gy @ W3v.T
        gp3 = gz3 * (1.0 - t3 * t3)
        cache["W2"] = _flat2(z2).T @ _flat2(gp3)
        cache["b2"] = _flat2(gp3).sum(0) - _flat2(gz3).sum(0) * (1.0 - tb2 * tb2)
        gz2 = gp3 @ W2v.T
        gp2 = gz2 * (1.0 - t2 * t2)
        cache["W1"] = _flat2(z1v).T @ _flat2(gp2)
        cache["b1"] = _flat2(gp2).sum(0) - _flat2(gz2).sum(0) * (1.0 - tb1 * tb1)
        cache["gz1"] = gp2 @ W1v.T
        return cache

    # all six vjps receive the same upstream array within one sweep
    def pick(key):
        return lambda g: back(g)[key]

    parents = [(z1, pick("gz1")), (W1, pick("W1")), (b1, pick("b1")),
               (W2, pick("W2")), (b2, pick("b2")), (W3, pick("W3"))]
    return tape.record(out, parents)


def pose_euler(tape: Tape, pose, vel, dt: float) -> Var:
    """(X, Y, psi) + dt * (u cos psi - v sin psi, u sin psi + v cos psi, r)."""
    P, V = _val(pose), _val(vel)
    psi = P[..., 2]
    c, s = np.cos(psi), np.sin(psi)
    u, v, r = V[..., 0], V[..., 1], V[..., 2]
    out = np.empty_like(P)
    out[..., 0] = P[..., 0] + dt * (u * c - v * s)
    out[..., 1] = P[..., 1] + dt * (u * s + v * c)
    out[..., 2] = psi + dt * r

    def g_pose(g):
        gX, gY = g[..., 0], g[..., 1]
        res = g.copy()
        res[..., 2] = g[..., 2] + dt * (gX * (-u * s - v * c) + gY * (u * c - v * s))
        return res

    def g_vel(g):
        gX, gY = g[..., 0], g[..., 1]
        res = np.empty_like(g)
        res[..., 0] = dt * (gX * c + gY * s)
        res[..., 1] = dt * (-gX * s + gY * c)
        res[..., 2] = dt * g[..., 2]
        return res

    return tape.record(out, [(pose, g_pose), (vel, g_vel)])


def axpy(tape: Tape, x, a, alpha: float) -> Var:
    """x + alpha * a."""
    return tape.record(_val(x) + alpha * _val(a), [(x, lambda g: g), (a, lambda g: alpha * g)])


def sq_err(tape: Tape, pred, target, inv_sigma) -> Var:
    """sum(((pred - target) * inv_sigma)**2) as a scalar."""
    d = (_val(pred) - target) * inv_sigma
    return tape.record(np.array(np.sum(d * d)), [(pred, lambda g: 2.0 * g * d * inv_sigma)])


def total(tape: Tape, terms, scale: float = 1.0) -> Var:
    """scale * sum of scalar terms."""
    val = np.array(scale * sum(float(_val(t)) for t in terms))
    return tape.record(val, [(t, lambda g: scale * g) for t in terms])
