"""Empirical terms of the multi-source target-error bound.

For each source domain j the bound sums

    eps_Sj(h) + coeff * dH(D_Sj, D_T) + concept_j + lipschitz_j + C_j

and the right-hand side is the mean over the k sources. ``coeff`` defaults to
1/2; 1 is also supported and both values are reported.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .concept import cosine_matrix, embed
from .data import Corpus, SyntheticTruth
from .tensor import AdamState, Mlp, adam_step, mlp_backward, mlp_forward, sigmoid

log = logging.getLogger(__name__)

BRUTEFORCE_MAX_DIM = 3
BRUTEFORCE_MAX_POINTS = 2000


@dataclass
class BoundConfig:
    eta: float = 0.05
    vc_dim: int = 3
    lipschitz: float | None = None     # None -> take it from the synthetic truth
    ideal_error: float = 0.0
    lambda_mode: str = "fixed"         # "fixed" or "stumps"
    divergence_coefficient: float = 0.5
    threshold: float = 0.5
    divergence_mode: str = "auto"      # "auto", "bruteforce" or "learned"
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if self.vc_dim < 1:
            raise ValueError("vc_dim must be >= 1")
        if self.lipschitz is not None and self.lipschitz < 0:
            raise ValueError("Lipschitz constant must be non-negative")
        if self.ideal_error < 0:
            raise ValueError("ideal error must be non-negative")
        if self.lambda_mode not in ("fixed", "stumps"):
            raise ValueError("lambda_mode must be 'fixed' or 'stumps'")
        if self.divergence_coefficient not in (0.5, 1.0):
            raise ValueError("divergence coefficient must be 0.5 or 1")
        if self.divergence_mode not in ("auto", "bruteforce", "learned"):
            raise ValueError("divergence_mode must be auto, bruteforce or learned")


def source_error(h_vals, f_vals) -> float:
    """Mean |h(x) - f(x)|. ``f_vals`` may be true f values or hard labels
    (the empirical proxy)."""
    h_vals = np.asarray(h_vals, dtype=np.float64)
    if f_vals is None:
        raise ValueError("source error needs truth values or labels")
    f_vals = np.asarray(f_vals, dtype=np.float64)
    if h_vals.shape != f_vals.shape or h_vals.size == 0:
        raise ValueError("hypothesis and truth values must be non-empty and aligned")
    return float(np.mean(np.abs(h_vals - f_vals)))


# -- H-divergence -----------------------------------------------------------


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X


def stump_objective_min(XS, XT) -> tuple[int, int, int]:
    """Exact minimum over threshold stumps (and their inverses, and the two
    constant hypotheses) of  #S_classified_0 / N_S + #T_classified_1 / N_T.

    Returned as ``(numerator, N_S, N_T)`` with the objective equal to
    ``numerator / (N_S * N_T)``.
    """
    XS, XT = _as_2d(XS), _as_2d(XT)
    ns, nt = len(XS), len(XT)
    if ns == 0 or nt == 0:
        raise ValueError("both samples must be non-empty")
    best = ns * nt  # constant hypotheses score exactly 1
    is_t = np.concatenate([np.zeros(ns, np.int64), np.ones(nt, np.int64)])
    for axis in range(XS.shape[1]):
        vals = np.concatenate([XS[:, axis], XT[:, axis]])
        order = np.argsort(vals, kind="stable")
        v, t = vals[order], is_t[order]
        left_t = np.cumsum(t)[:-1]
        left_s = np.arange(1, len(v)) - left_t
        ok = v[:-1] < v[1:]
        if not np.any(ok):
            continue
        ls, lt = left_s[ok], left_t[ok]
        # 1 on the right: S on the left is classified 0, T on the right is classified 1
        right_one = ls * nt + (nt - lt) * ns
        left_one = (ns - ls) * nt + lt * ns
        best = min(best, int(right_one.min()), int(left_one.min()))
    return best, ns, nt


def h_divergence_bruteforce(XS, XT) -> float:
    best, ns, nt = stump_objective_min(XS, XT)
    return float(2 * (1 - Fraction(best, ns * nt)))


def _train_domain_classifier(XS, XT, seed: int, steps: int = 400, lr: float = 0.02,
                             hidden: int = 16) -> Callable[[np.ndarray], np.ndarray]:
    X = np.concatenate([XS, XT])
    mu, sd = X.mean(axis=0), X.std(axis=0) + 1e-12
    Z = (X - mu) / sd
    d = np.concatenate([np.zeros(len(XS)), np.ones(len(XT))])
    # class-balanced so both fractions in the objective weigh equally
    w = np.where(d == 1, 0.5 / len(XT), 0.5 / len(XS))
    net = Mlp.init([X.shape[1], hidden, 1], np.random.default_rng(seed), "tanh")
    params = net.arrays()
    adam = AdamState.for_params(params)
    for _ in range(steps):
        z, cache = mlp_forward(net, Z)
        q = sigmoid(z[:, 0])
        grads, _ = mlp_backward(net, cache, (w * (q - d))[:, None])
        adam_step(params, grads, adam, lr)
    return lambda A: sigmoid(mlp_forward(net, (_as_2d(A) - mu) / sd)[0][:, 0])


def h_divergence_learned(XS, XT, threshold: float = 0.5, seed: int = 0) -> float:
    """Plug a trained domain classifier (and its inverse) into the empirical
    estimator. Lower-biased: the classifier need not reach the supremum."""
    XS, XT = _as_2d(XS), _as_2d(XT)
    if len(XS) == 0 or len(XT) == 0:
        raise ValueError("both samples must be non-empty")
    h = _train_domain_classifier(XS, XT, seed)
    hs, ht = h(XS), h(XT)
    obj = np.mean(hs <= threshold) + np.mean(ht > threshold)
    inv = np.mean(1.0 - hs <= threshold) + np.mean(1.0 - ht > threshold)
    return float(np.clip(2.0 * (1.0 - min(obj, inv, 1.0)), 0.0, 2.0))


def empirical_h_divergence(XS, XT, mode: str = "bruteforce", threshold: float = 0.5,
                           seed: int = 0) -> float:
    XS, XT = _as_2d(XS), _as_2d(XT)
    if mode == "auto":
        small = XS.shape[1] <= BRUTEFORCE_MAX_DIM and len(XS) + len(XT) <= BRUTEFORCE_MAX_POINTS
        mode = "bruteforce" if small else "learned"
    if mode == "bruteforce":
        if XS.shape[1] > BRUTEFORCE_MAX_DIM or len(XS) + len(XT) > BRUTEFORCE_MAX_POINTS:
            raise ValueError("bruteforce mode needs dim <= 3 and at most 2000 points")
        return h_divergence_bruteforce(XS, XT)
    if mode == "learned":
        return h_divergence_learned(XS, XT, threshold, seed)
    raise ValueError(f"unknown mode {mode!r}")


# -- nearest-target terms ---------------------------------------------------


def nearest_target(XS, XT, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean nearest target record for every source record (lowest index
    on ties) and the distance to it."""
    XS, XT = _as_2d(XS), _as_2d(XT)
    if len(XT) == 0:
        raise ValueError("target set is empty")
    idx = np.empty(len(XS), dtype=np.int64)
    dist = np.empty(len(XS))
    for lo in range(0, len(XS), chunk):
        diff = XS[lo:lo + chunk, None, :] - XT[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        j = d2.argmin(axis=1)
        idx[lo:lo + chunk] = j
        dist[lo:lo + chunk] = np.sqrt(d2[np.arange(len(j)), j])
    return idx, dist


def concept_shift_term(f_S_vals, f_T_at_nearest) -> float:
    """Mean |f_S(x) - f_T(c(x))| given both sides already evaluated."""
    return source_error(f_S_vals, f_T_at_nearest)


def concept_shift_euclidean(f_S, f_T, XS, XT) -> float:
    idx, _ = nearest_target(XS, XT)
    XS, XT = _as_2d(XS), _as_2d(XT)
    return concept_shift_term(f_S(XS), f_T(XT[idx]))


def concept_shift_learned(f_S, f_T, XS, XT, fs: Mlp) -> float:
    """Same term with c(x) chosen by cosine similarity under a learned transform."""
    XS, XT = _as_2d(XS), _as_2d(XT)
    idx = cosine_matrix(embed(fs, XS), embed(fs, XT)).argmax(axis=1)
    return concept_shift_term(f_S(XS), f_T(XT[idx]))


def lipschitz_term(L: float, XS, XT) -> float:
    _, dist = nearest_target(XS, XT)
    return float(L * np.mean(dist))


def constant_C(config: BoundConfig, n_s: int, n_t: int, ideal_error: float | None = None) -> float:
    if not 0.0 < config.eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {config.eta}")
    lam = config.ideal_error if ideal_error is None else ideal_error
    eta, d = config.eta, config.vc_dim
    mcd = math.sqrt(-math.log(eta / 2.0) / (2.0 * n_s))
    vc_s = math.sqrt((d * math.log(2 * n_s) + math.log(2.0 / eta)) / n_s)
    vc_t = math.sqrt((d * math.log(2 * n_t) + math.log(2.0 / eta)) / n_t)
    return lam + mcd + 2.0 * max(vc_s, vc_t)


def ideal_error_stumps(XS, XT, f_T: Callable) -> float:
    """min over {0,1}-valued stumps (and constants) of
    mean_S |h - f_T| + mean_T |h - f_T|."""
    XS, XT = _as_2d(XS), _as_2d(XT)
    X = np.concatenate([XS, XT])
    f = f_T(X)
    wt = np.concatenate([np.full(len(XS), 1.0 / len(XS)), np.full(len(XT), 1.0 / len(XT))])
    c1 = wt * (1.0 - f)   # cost of predicting 1
    c0 = wt * f           # cost of predicting 0
    best = min(c0.sum(), c1.sum())
    for axis in range(X.shape[1]):
        order = np.argsort(X[:, axis], kind="stable")
        v = X[order, axis]
        a0, a1 = np.cumsum(c0[order])[:-1], np.cumsum(c1[order])[:-1]
        ok = v[:-1] < v[1:]
        if not np.any(ok):
            continue
        t0, t1 = c0.sum(), c1.sum()
        right_one = a0[ok] + (t1 - a1[ok])
        left_one = a1[ok] + (t0 - a0[ok])
        best = min(best, float(right_one.min()), float(left_one.min()))
    return float(best)


# -- report -----------------------------------------------------------------


@dataclass
class DomainTerms:
    name: str
    n: int
    eps_S: float
    d_H: float
    concept: float
    lipschitz: float
    ideal_error: float
    C: float
    concept_learned: float | None = None

    def total(self, coeff: float) -> float:
        return self.eps_S + coeff * self.d_H + self.concept + self.lipschitz + self.C


@dataclass
class BoundReport:
    domains: list[DomainTerms]
    coefficient: float
    rhs: float
    rhs_alt: float
    eps_T: float
    holds: bool
    confidence: float
    eta: float
    vc_dim: int
    lipschitz_L: float
    divergence_mode: str
    warnings: list[str] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str]]:
        def f(v):
            return f"{v:.6f}"

        out = [("k", str(len(self.domains))), ("eta", f(self.eta)), ("vc_dim", str(self.vc_dim)),
               ("lipschitz_L", f(self.lipschitz_L)), ("divergence_mode", self.divergence_mode),
               ("divergence_coefficient", f(self.coefficient))]
        for d in self.domains:
            p = f"domain.{d.name}."
            out += [(p + "n", str(d.n)), (p + "eps_S_hat", f(d.eps_S)), (p + "d_H_hat", f(d.d_H)),
                    (p + "concept_term", f(d.concept)), (p + "lipschitz_term", f(d.lipschitz)),
                    (p + "ideal_error", f(d.ideal_error)), (p + "C", f(d.C)),
                    (p + "sum", f(d.total(self.coefficient)))]
            if d.concept_learned is not None:
                out.append((p + "concept_term_learned_pairing", f(d.concept_learned)))
        alt = 1.0 if self.coefficient == 0.5 else 0.5
        out += [("rhs", f(self.rhs)), (f"rhs_coefficient_{alt:g}", f(self.rhs_alt)),
                ("eps_T_hat", f(self.eps_T)), ("holds", str(self.holds).lower()),
                ("confidence", f(self.confidence))]
        out += [("warning", w) for w in self.warnings]
        return out

    def to_text(self) -> str:
        return "".join(f"{k}\t{v}\n" for k, v in self.rows())


def bound_report(h: Callable[[np.ndarray], np.ndarray], corpus: Corpus, truth: SyntheticTruth,
                 config: BoundConfig, fs: Mlp | None = None) -> BoundReport:
    """Evaluate every right-hand-side term for hypothesis ``h`` (a map from a
    feature matrix to probabilities) and the measured target error."""
    config.validate()
    XT = corpus.target.X
    f_T = truth.f_target
    L = truth.lipschitz if config.lipschitz is None else config.lipschitz
    small = corpus.feature_dim <= BRUTEFORCE_MAX_DIM
    warnings = []
    if config.lambda_mode == "fixed" and config.ideal_error == 0.0:
        warnings.append("ideal-hypothesis error set to 0: constants are optimistic")
    terms, modes = [], set()
    for j, ds in enumerate(corpus.sources):
        XS = ds.X
        f_S = truth.f_source(ds.name)
        mode = config.divergence_mode
        if mode == "auto":
            mode = "bruteforce" if small and len(XS) + len(XT) <= BRUTEFORCE_MAX_POINTS else "learned"
        modes.add(mode)
        d_H = empirical_h_divergence(XS, XT, mode, config.threshold, config.seed + j)
        idx, dist = nearest_target(XS, XT)
        lam = ideal_error_stumps(XS, XT, f_T) if config.lambda_mode == "stumps" else config.ideal_error
        terms.append(DomainTerms(
            name=ds.name, n=len(XS),
            eps_S=source_error(h(XS), f_S(XS)),
            d_H=d_H,
            concept=concept_shift_term(f_S(XS), f_T(XT[idx])),
            lipschitz=float(L * np.mean(dist)),
            ideal_error=lam,
            C=constant_C(config, len(XS), len(XT), lam),
            concept_learned=None if fs is None else concept_shift_learned(f_S, f_T, XS, XT, fs)))
    coeff = config.divergence_coefficient
    alt = 1.0 if coeff == 0.5 else 0.5
    rhs = float(np.mean([t.total(coeff) for t in terms]))
    rhs_alt = float(np.mean([t.total(alt) for t in terms]))
    eps_T = source_error(h(XT), f_T(XT))
    k = len(terms)
    return BoundReport(terms, coeff, rhs, rhs_alt, eps_T, rhs >= eps_T,
                       (1.0 - config.eta) ** (2 * k), config.eta, config.vc_dim, L,
                       "+".join(sorted(modes)), warnings)
