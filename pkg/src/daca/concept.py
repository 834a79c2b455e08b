"""Similarity learning (contrastive sub-module) and the concept alignment loss.

Selection of the most similar / most dissimilar candidate is treated as a
constant: neither argmax nor the similarity network receives gradient from
the concept loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .classification import ClassifierHead, head_backward_prob, head_forward
from .tensor import Mlp, mlp_backward, mlp_forward, total

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


class DegenerateEmbeddingError(ValueError):
    """A transformed vector has (near) zero norm, so cosine is undefined."""


def embed(fs: Mlp, X) -> np.ndarray:
    return mlp_forward(fs, X)[0]


def _safe_norms(E: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(E, axis=-1)
    if np.any(n < NORM_FLOOR):
        log.warning("embedding norm below %.0e; flooring", NORM_FLOOR)
    return np.maximum(n, NORM_FLOOR)


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between rows of ``A`` and rows of ``B``."""
    return (A @ B.T) / np.outer(_safe_norms(A), _safe_norms(B))


def similarity(fs: Mlp, xi, xj) -> float:
    a, b = embed(fs, xi), embed(fs, xj)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise DegenerateEmbeddingError("transformed vector has zero norm")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# -- contrastive sub-module -------------------------------------------------


@dataclass(frozen=True)
class PeerSet:
    """Indices into a source pool: an anchor, one same-label positive and
    ``m`` opposite-label negatives."""

    anchor: int
    positive: int
    negatives: tuple[int, ...]


def sample_peers(anchor: int, labels: np.ndarray, m: int,
                 rng: np.random.Generator) -> PeerSet | None:
    """Uniform draw without replacement; ``None`` when the pool is too thin."""
    lbl = labels[anchor]
    same = np.flatnonzero(labels == lbl)
    same = same[same != anchor]
    other = np.flatnonzero(labels != lbl)
    if len(same) < 1 or len(other) < m:
        return None
    pos = int(rng.choice(same))
    negs = rng.choice(other, size=m, replace=False)
    return PeerSet(anchor, pos, tuple(int(i) for i in negs))


def sample_all_peers(labels: np.ndarray, m: int, rng: np.random.Generator) -> list[PeerSet]:
    peers = []
    for i in range(len(labels)):
        ps = sample_peers(i, labels, m, rng)
        if ps is None:
            log.debug("anchor %d skipped: not enough peers", i)
        else:
            peers.append(ps)
    return peers


def contrastive_loss(fs: Mlp, X_pool: np.ndarray, peers: Sequence[PeerSet], tau: float,
                     reduce: bool = True):
    """InfoNCE over peer sets, summed over anchors. Returns ``(loss, grads_fs)``,
    or per-anchor losses with ``reduce=False``."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"temperature must lie in (0, 1), got {tau}")
    if not peers:
        return (0.0 if reduce else np.zeros(0)), fs.zeros_like()
    E, cache = mlp_forward(fs, X_pool)
    norms = _safe_norms(E)
    U = E / norms[:, None]
    a_idx = np.array([p.anchor for p in peers])
    o_idx = np.array([(p.positive,) + p.negatives for p in peers])   # (P, 1+m)
    s = np.einsum("pe,pke->pk", U[a_idx], U[o_idx])
    logits = s / tau
    shift = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - shift)
    lse = np.log(ex.sum(axis=1)) + shift[:, 0]
    terms = lse - logits[:, 0]
    loss = total(terms) if reduce else terms
    soft = ex / ex.sum(axis=1, keepdims=True)
    ds = soft.copy()
    ds[:, 0] -= 1.0
    ds /= tau
    # d cos(a, b)/da = (b_hat - cos * a_hat) / |a|
    dU = np.zeros_like(U)
    np.add.at(dU, a_idx, np.einsum("pk,pke->pe", ds, U[o_idx]))
    np.add.at(dU, o_idx, ds[:, :, None] * U[a_idx][:, None, :])
    dE = (dU - np.sum(dU * U, axis=1, keepdims=True) * U) / norms[:, None]
    grads, _ = mlp_backward(fs, cache, dE)
    return loss, grads


# -- concept alignment sub-module -------------------------------------------


@dataclass(frozen=True)
class ExtremePair:
    anchor: int
    nearest: int
    farthest: int
    sim_nearest: float
    sim_farthest: float


def extreme_indices(anchor_emb: np.ndarray, cand_emb: np.ndarray):
    """Most / least similar candidate per anchor row; ties go to the lowest
    index (``argmax``/``argmin`` return the first hit)."""
    S = cosine_matrix(np.atleast_2d(anchor_emb), np.atleast_2d(cand_emb))
    return S.argmax(axis=1), S.argmin(axis=1), S


def select_extremes(fs: Mlp | None, anchor, targets) -> ExtremePair:
    """``fs=None`` compares raw feature vectors."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if len(targets) == 0:
        raise ValueError("candidate set is empty")
    a = np.atleast_2d(np.asarray(anchor, dtype=np.float64))
    if fs is not None:
        a, targets = embed(fs, a), embed(fs, targets)
    c, d, S = extreme_indices(a, targets)
    return ExtremePair(0, int(c[0]), int(d[0]), float(S[0, c[0]]), float(S[0, d[0]]))


def concept_loss(head: ClassifierHead, X_anchor: np.ndarray, X_near: np.ndarray,
                 X_far: np.ndarray, reduce: bool = True):
    """Sum over anchors of (p_a - p_c)^2 - (p_a - p_d)^2.

    Returns ``(loss, grads_fh, grads_fy)``; ``reduce=False`` gives per-anchor
    losses.
    """
    n = len(X_anchor)
    if n == 0:
        return (0.0 if reduce else np.zeros(0)), head.fh.zeros_like(), head.fy.zeros_like()
    if len(X_near) != n or len(X_far) != n:
        raise ValueError("need one nearest and one farthest record per anchor")
    p, cache = head_forward(head, np.concatenate([X_anchor, X_near, X_far], axis=0))
    pa, pc, pd = p[:n], p[n:2 * n], p[2 * n:]
    terms = (pa - pc) ** 2 - (pa - pd) ** 2
    loss = total(terms) if reduce else terms
    dp = np.concatenate([2.0 * (pd - pc), -2.0 * (pa - pc), 2.0 * (pa - pd)])
    gh, gy = head_backward_prob(head, cache, dp)
    return loss, gh, gy


def _add(acc: list[np.ndarray], g: list[np.ndarray], w: float = 1.0) -> None:
    for a, b in zip(acc, g):
        a += w * b


def pair_extremes(fs: Mlp | None, Xs: Sequence[np.ndarray]) -> dict[tuple[int, int], tuple]:
    """(nearest, farthest) candidate indices for every ordered source pair."""
    E = [X if fs is None else embed(fs, X) for X in Xs]
    out = {}
    for j in range(len(Xs)):
        for n in range(len(Xs)):
            if j != n and len(Xs[j]) and len(Xs[n]):
                c, d, _ = extreme_indices(E[j], E[n])
                out[(j, n)] = (c, d)
    return out


def source_pair_concept_loss(head: ClassifierHead, Xs: Sequence[np.ndarray],
                             extremes: dict[tuple[int, int], tuple],
                             weight: float = 1.0, normalize: bool = False,
                             reduce: bool = True):
    """Concept loss with source S_j as anchors and source S_n as candidates,
    summed over ordered pairs j != n and scaled by ``weight``.

    ``normalize`` divides each pair's sum by its anchor count. Returns 0 for a
    single source. ``reduce=False`` returns the scaled per-anchor terms of all
    pairs, concatenated in pair order.
    """
    gh, gy = head.fh.zeros_like(), head.fy.zeros_like()
    acc, parts = 0.0, []
    for (j, n), (c, d) in sorted(extremes.items()):
        lc, g1, g2 = concept_loss(head, Xs[j], Xs[n][c], Xs[n][d], reduce=False)
        scale = weight / len(Xs[j]) if normalize else weight
        acc += scale * total(lc)
        parts.append(scale * lc)
        _add(gh, g1, scale)
        _add(gy, g2, scale)
    if not reduce:
        return (np.concatenate(parts) if parts else np.zeros(0)), gh, gy
    return acc, gh, gy
