"""Shared feature transform F_h, label classifier F_y and the source
cross-entropy loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (PROB_EPS, Mlp, ShapeError, clamp_prob, mlp_backward, mlp_forward, sigmoid,
                     total)


@dataclass
class ClassifierHead:
    fh: Mlp
    fy: Mlp

    def __post_init__(self):
        if self.fh.out_dim != self.fy.in_dim:
            raise ShapeError(f"F_h out-dim {self.fh.out_dim} != F_y in-dim {self.fy.in_dim}")
        if self.fy.out_dim != 1:
            raise ShapeError("F_y must have a single output")


def transform(fh: Mlp, x) -> np.ndarray:
    return mlp_forward(fh, x)[0]


def head_forward(head: ClassifierHead, X: np.ndarray):
    """Clamped probabilities for a 2-D batch plus the state needed for backprop."""
    h, ch = mlp_forward(head.fh, X)
    z, cy = mlp_forward(head.fy, h)
    raw = sigmoid(z[:, 0])
    return clamp_prob(raw), (ch, cy, raw)


def head_backward_logit(head: ClassifierHead, cache, dz: np.ndarray):
    """Backprop a gradient w.r.t. the pre-sigmoid logits. Clamped outputs pass
    no gradient."""
    ch, cy, raw = cache
    live = (raw > PROB_EPS) & (raw < 1.0 - PROB_EPS)
    dz = np.where(live, dz, 0.0)
    gy, dh = mlp_backward(head.fy, cy, dz[:, None])
    gh, _ = mlp_backward(head.fh, ch, dh)
    return gh, gy


def head_backward_prob(head: ClassifierHead, cache, dp: np.ndarray):
    raw = cache[2]
    return head_backward_logit(head, cache, dp * raw * (1.0 - raw))


def predict_label_prob(head: ClassifierHead, x):
    x = np.asarray(x, dtype=np.float64)
    p, _ = head_forward(head, np.atleast_2d(x))
    return float(p[0]) if x.ndim == 1 else p


def label_loss(head: ClassifierHead, X: np.ndarray, y, reduce: bool = True):
    """Summed binary cross-entropy over labeled records.

    Returns ``(loss, grads_fh, grads_fy)``; with ``reduce=False`` the loss is
    the per-record array instead of its sum.
    """
    if y is None:
        raise ValueError("label_loss needs a label for every record")
    y = np.asarray(y, dtype=np.float64)
    if len(y) != len(X):
        raise ShapeError("features and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    p, cache = head_forward(head, X)
    terms = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    loss = total(terms) if reduce else terms
    # d/dz of BCE(sigmoid(z)) collapses to p - y
    gh, gy = head_backward_logit(head, cache, cache[2] - y)
    return loss, gh, gy
