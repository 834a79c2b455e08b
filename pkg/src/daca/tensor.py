"""Dense MLPs with hand-derived backprop, gradient reversal, Adam and a
finite-difference checker.

Everything runs in float64. Inputs are row-batched: ``x`` has shape
``(n, in_dim)``; a 1-D vector is treated as a batch of one and the output is
squeezed back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

PROB_EPS = 1e-7

_HIDDEN = ("relu", "tanh")
_OUTPUT = ("identity", "sigmoid", "relu", "tanh")


class ShapeError(ValueError):
    """Dimension mismatch between parameters, inputs or caches."""


class NonFiniteError(FloatingPointError):
    """A gradient or loss became NaN/inf."""


def as_float(x) -> np.ndarray:
    """``x`` as float64, except that long-double input stays long double so a
    whole forward pass can run in extended precision."""
    a = np.asarray(x)
    return a if a.dtype == np.longdouble else a.astype(np.float64, copy=False)


def total(terms):
    """Sum of per-record loss terms: a Python float, or a long-double scalar
    when the terms are long double."""
    s = np.sum(terms)
    return s if s.dtype == np.longdouble else float(s)


def sigmoid(z):
    # split by sign so exp never overflows
    z = as_float(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def clamp_prob(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class Mlp:
    """Stack of affine layers. Weights are stored ``(in, out)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    output: str = "identity"

    def __post_init__(self):
        if self.activation not in _HIDDEN:
            raise ValueError(f"hidden activation must be one of {_HIDDEN}")
        if self.output not in _OUTPUT:
            raise ValueError(f"output activation must be one of {_OUTPUT}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i} in-dim {w.shape[0]} does not chain")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator,
             activation: str = "relu", output: str = "identity") -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation, output)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.activation, self.output)

    def zeros_like(self) -> list[np.ndarray]:
        return [np.zeros_like(a) for a in self.arrays()]


@dataclass
class MlpCache:
    params: Mlp
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    acts: list[np.ndarray]
    squeeze: bool


def mlp_forward(params: Mlp, x) -> tuple[np.ndarray, MlpCache]:
    x = as_float(x)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x
    if a.ndim != 2 or a.shape[1] != params.in_dim:
        raise ShapeError(f"input dim {x.shape[-1] if x.ndim else 0} != {params.in_dim}")
    inputs, preacts, acts = [], [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w + b
        a = _act(params.output if i == last else params.activation, z)
        preacts.append(z)
        acts.append(a)
    out = a[0] if squeeze else a
    return out, MlpCache(params, inputs, preacts, acts, squeeze)


def mlp_backward(params: Mlp, cache: MlpCache, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    """Returns (grads aligned with ``params.arrays()``, grad w.r.t. the input)."""
    if cache.params is not params or len(cache.inputs) != len(params.weights):
        raise ShapeError("cache was not produced by these parameters")
    g = as_float(upstream)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.acts[-1].shape:
        raise ShapeError(f"upstream shape {g.shape} != output shape {cache.acts[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(params.weights))  # type: ignore[list-item]
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        name = params.output if i == last else params.activation
        dz = g * _act_grad(name, cache.preacts[i], cache.acts[i])
        grads[2 * i] = cache.inputs[i].T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        g = dz @ params.weights[i].T
    return grads, (g[0] if cache.squeeze else g)


def reverse_gradient(upstream):
    """Backward rule of the gradient reversal layer (forward is identity)."""
    return -as_float(upstream)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """In-place bias-corrected Adam update. Returns ``state`` (also mutated)."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam moments must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to Adam")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def finite_diff_check(loss_fn: Callable[[], float | Sequence[float]],
                      params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                      step: float = 1e-5, floor: float = 1e-12) -> float:
    """Max elementwise relative error between ``grads`` and central differences.

    The denominator is ``max(|analytic|, |numeric|, floor)``, so entries smaller
    than ``floor`` are compared on an absolute scale.

    ``loss_fn`` is re-evaluated after each in-place perturbation of ``params``;
    every entry is restored afterwards. It may return the loss as a sequence of
    additive parts, in which case each part is differenced on its own and the
    differences summed. That is the same central difference, but parts that do
    not depend on the perturbed entry cancel exactly instead of adding their
    rounding error to a tiny numerator.
    """
    worst = 0.0
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            if np.ndim(up):
                num = math.fsum(np.subtract(up, down)) / (2.0 * step)
            else:
                num = (up - down) / (2.0 * step)
            ana = gflat[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
