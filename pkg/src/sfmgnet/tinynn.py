"""A small dense-network toolkit: layers with analytic gradients, an
exponential distance unit, Adam, a finite-difference checker and a plain-text
weight format.

Everything works on batches: inputs are ``(B, in)`` arrays (a 1-D input is
treated as a batch of one). Parameters live in flat ``dict``s mapping names to
2-D arrays so that composite networks can share one optimiser and one
checkpoint file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

Params = Dict[str, np.ndarray]

MIN_SCALE = 1e-3
MAX_EXPONENT = 60.0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


ACTIVATIONS = {
    "identity": (lambda z: z, lambda z, y: np.ones_like(z)),
    "sigmoid": (sigmoid, lambda z, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda z, y: 1.0 - y * y),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, y: (z > 0).astype(z.dtype)),
}


@dataclass
class Dense:
    """``activation(x @ W.T + b)`` with ``W`` of shape ``(out, in)``."""

    weights: np.ndarray
    bias: np.ndarray = None
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias is not None and np.size(self.bias) != self.weights.shape[0]:
            raise ValueError("bias length must equal output dimension")

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        x2 = np.atleast_2d(x)
        if x2.shape[1] != self.weights.shape[1]:
            raise ValueError(f"input has {x2.shape[1]} features, layer expects {self.weights.shape[1]}")
        z = x2 @ self.weights.T
        if self.bias is not None:
            z = z + self.bias.reshape(1, -1)
        y = ACTIVATIONS[self.activation][0](z)
        return (y[0] if squeeze else y), (x2, z, y, squeeze)

    def backward(self, cache, upstream):
        x, z, y, squeeze = cache
        g = np.atleast_2d(np.asarray(upstream, dtype=float))
        if g.shape != z.shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output shape {z.shape}")
        gz = g * ACTIVATIONS[self.activation][1](z, y)
        gx = gz @ self.weights
        gw = gz.T @ x
        gb = gz.sum(axis=0).reshape(np.shape(self.bias)) if self.bias is not None else None
        return (gx[0] if squeeze else gx), gw, gb


def exp_unit(d, w):
    """``exp(d / w)`` with learnable scale(s) ``w`` kept at ``|w| >= 1e-3``.

    ``w`` holds one scale (broadcast over ``d``) or one per trailing column of
    ``d``. The exponent is capped at 60 so a wrong-signed scale stays finite;
    the cap has zero gradient.
    """
    w = np.asarray(w, dtype=float)
    wf = w.reshape(-1)
    ws = np.where(wf >= 0, 1.0, -1.0) * np.maximum(np.abs(wf), MIN_SCALE)
    wsb = ws[0] if wf.size == 1 else ws
    a = d / wsb
    capped = a > MAX_EXPONENT
    y = np.exp(np.minimum(a, MAX_EXPONENT))
    return y, (d, wsb, y, capped, np.abs(wf) >= MIN_SCALE, w.shape)


def exp_unit_backward(cache, g):
    """Gradients ``(d_input, d_scale)`` of ``exp_unit``."""
    d, ws, y, capped, free, shape = cache
    live = np.where(capped, 0.0, g * y)
    gd = live / ws
    gws = -live * d / ws**2
    if np.ndim(ws) == 0:
        gw = np.array([np.sum(gws)])
    else:
        gw = gws.reshape(-1, gws.shape[-1]).sum(axis=0)
    return gd, np.where(free, gw, 0.0).reshape(shape)


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_update(state: AdamState, params: Params, grads: Params, keys=None) -> Params:
    """One bias-corrected Adam step, applied in place; returns ``params``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k in (keys if keys is not None else grads):
        g = grads[k]
        if g is None:
            continue
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(loss_and_grads: Callable[[Params], tuple], params: Params, h: float = 1e-5,
               keys=None, floor: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_and_grads(params)`` must return ``(scalar loss, grads dict)``. The
    relative error uses ``max(|a|, |n|, floor)`` as denominator: a central
    difference of an O(1) loss carries roundoff of about ``eps / h ~ 1e-11``,
    so gradients below ``floor`` are effectively compared in absolute terms.
    """
    _, analytic = loss_and_grads(params)
    worst = 0.0
    for k in (keys if keys is not None else params):
        p = params[k]
        ga = analytic.get(k)
        ga = np.zeros_like(p) if ga is None else ga
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, _ = loss_and_grads(params)
            p[idx] = old - h
            lm, _ = loss_and_grads(params)
            p[idx] = old
            num = (lp - lm) / (2 * h)
            a = ga[idx]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialisation

FORMAT_HEADER = "# tinynn-weights v1"


def dumps_params(params: Params, meta: dict | None = None) -> str:
    lines = [FORMAT_HEADER]
    for k, v in (meta or {}).items():
        lines.append(f"#! {k} {v}")
    for name, arr in params.items():
        a = np.atleast_2d(np.asarray(arr, dtype=float))
        rows, cols = a.shape
        lines.append(f"{name} {rows} {cols}")
        lines.append(" ".join(repr(float(x)) for x in a.reshape(-1)))
    return "\n".join(lines) + "\n"


def loads_params(text: str):
    """Inverse of ``dumps_params``; returns ``(params, meta)``."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise ValueError("not a tinynn weight file (missing version header)")
    params, meta = {}, {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line.startswith("#!"):
            key, _, value = line[2:].strip().partition(" ")
            meta[key] = value
            continue
        if line.startswith("#"):
            continue
        name, rows, cols = line.split()
        rows, cols = int(rows), int(cols)
        values = lines[i].split() if rows * cols else []
        i += 1
        if len(values) != rows * cols:
            raise ValueError(f"record {name}: expected {rows * cols} values, got {len(values)}")
        params[name] = np.array([float(x) for x in values], dtype=float).reshape(rows, cols)
    return params, meta


def save_params(path, params: Params, meta: dict | None = None):
    with open(path, "w") as fh:
        fh.write(dumps_params(params, meta))


def load_params(path):
    with open(path) as fh:
        return loads_params(fh.read())
