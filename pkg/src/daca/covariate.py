"""Domain classifier F_d and the adversarial loss with gradient reversal."""

from __future__ import annotations

import numpy as np

from . import tensor
from .tensor import (PROB_EPS, Mlp, ShapeError, clamp_prob, mlp_backward, mlp_forward, sigmoid,
                     total)


def predict_domain_prob(fd: Mlp, h):
    """Probability that a transformed vector comes from the target domain."""
    h = np.asarray(h, dtype=np.float64)
    z, _ = mlp_forward(fd, np.atleast_2d(h))
    q = clamp_prob(sigmoid(z[:, 0]))
    return float(q[0]) if h.ndim == 1 else q


def domain_loss(fh: Mlp, fd: Mlp, X: np.ndarray, d, reverse: bool = True,
                reduce: bool = True):
    """Summed domain cross-entropy on R(F_h(x)); d=0 source, d=1 target.

    Returns ``(loss, grads_fh, grads_fd)``. With ``reverse`` the F_h gradient
    is sign-flipped at the F_h/F_d boundary, so a descent step on it is an
    ascent step on the domain loss for the feature transform. ``reduce=False``
    returns per-record losses.
    """
    d = np.asarray(d, dtype=np.float64)
    if len(d) != len(X):
        raise ShapeError("features and domain indicators differ in length")
    if not (np.any(d == 0) and np.any(d == 1)):
        raise ValueError("domain loss needs both source and target records")
    h, ch = mlp_forward(fh, X)
    z, cd = mlp_forward(fd, h)
    raw = sigmoid(z[:, 0])
    q = clamp_prob(raw)
    terms = -(d * np.log(q) + (1.0 - d) * np.log(1.0 - q))
    loss = total(terms) if reduce else terms
    live = (raw > PROB_EPS) & (raw < 1.0 - PROB_EPS)
    dz = np.where(live, raw - d, 0.0)
    gd, dh = mlp_backward(fd, cd, dz[:, None])
    if reverse:
        # looked up at call time so tests can swap in a faulty reversal
        dh = tensor.reverse_gradient(dh)
    gh, _ = mlp_backward(fh, ch, dh)
    return loss, gh, gd
