"""Central-difference checks of every loss on randomised small networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import concept
from .classification import ClassifierHead, label_loss
from .covariate import domain_loss
from .data import BatchData
from .tensor import Mlp, finite_diff_check, mlp_forward
from .trainer import NETS, DacaModel, TrainConfig, combined_loss, module_weights, select

LOSSES = ("L_y", "L_d", "L_s", "L_c", "combined")
KINK_MARGIN = 1e-3
EMBED_MARGIN = 0.05


@dataclass
class Setup:
    model: DacaModel
    data: BatchData
    config: TrainConfig


def _random_setup(rng: np.random.Generator) -> Setup:
    dim = int(rng.integers(2, 6))
    act = str(rng.choice(["relu", "tanh"]))

    def widths(depth_max):
        return tuple(int(w) for w in rng.integers(3, 9, size=int(rng.integers(1, depth_max + 1))))

    config = TrainConfig(hidden_h=widths(2), hidden_y=widths(1), hidden_d=widths(1),
                         hidden_s=widths(2), activation=act, m=int(rng.integers(1, 3)),
                         tau=float(rng.uniform(0.2, 0.9)), weight_domain=float(rng.uniform(0.5, 2)),
                         weight_contrastive=float(rng.uniform(0.5, 2)),
                         weight_concept=float(rng.uniform(0.5, 2)))
    if config.hidden_s[-1] < 2:
        config.hidden_s = config.hidden_s[:-1] + (2,)
    model = DacaModel.init(dim, config, rng)
    k = int(rng.integers(1, 4))
    Xs, ys = [], []
    for _ in range(k):
        n = int(rng.integers(4, 8))
        y = rng.permutation(np.arange(n) % 2)
        Xs.append(rng.standard_normal((n, dim)) + 0.5 * rng.standard_normal(dim))
        ys.append(y.astype(np.int64))
    Xt = rng.standard_normal((int(rng.integers(3, 7)), dim))
    return Setup(model, BatchData(Xs, ys, Xt, [f"s{j}" for j in range(k)]), config)


def _kink_margin(s: Setup) -> float:
    """Smallest |pre-activation| at a relu over every input the losses touch."""
    if s.config.activation != "relu":
        return np.inf
    X = np.concatenate([s.data.X_source, s.data.Xt])
    margins = []
    h, ch = mlp_forward(s.model.fh, X)
    for net, inp in ((s.model.fh, X), (s.model.fy, h), (s.model.fd, h), (s.model.fs, X)):
        _, cache = mlp_forward(net, inp)
        for i, z in enumerate(cache.preacts):
            last = i == len(cache.preacts) - 1
            if (net.output if last else net.activation) == "relu":
                margins.append(np.abs(z).min())
    return float(min(margins)) if margins else np.inf


def _min_embedding_norm(s: Setup) -> float:
    X = np.concatenate([s.data.X_source, s.data.Xt])
    return float(np.linalg.norm(concept.embed(s.model.fs, X), axis=1).min())


def random_setup(rng: np.random.Generator) -> Setup:
    # finite differences need the loss smooth at the evaluation point: no relu
    # sitting on its kink and no embedding at the origin, where cosine is undefined
    while True:
        s = _random_setup(rng)
        if _kink_margin(s) > KINK_MARGIN and _min_embedding_norm(s) > EMBED_MARGIN:
            return s


# Finite differences of O(1) losses in float64 resolve gradients only to about
# 1e-11 at step 1e-5, which is not enough for entries near 1e-7. Each check
# therefore perturbs long-double copies of the networks and inputs and runs the
# same loss code on them; analytic gradients come from the float64 originals.
XP = np.longdouble
# Even in long double the differences resolve about 1e-13 on these losses, so
# gradient entries smaller than FLOOR are compared on an absolute scale.
FLOOR = 1e-8


def _xp(net: Mlp) -> Mlp:
    return Mlp([w.astype(XP) for w in net.weights], [b.astype(XP) for b in net.biases],
               net.activation, net.output)


def _xp_head(head: ClassifierHead) -> ClassifierHead:
    return ClassifierHead(_xp(head.fh), _xp(head.fy))


def _head_params(head: ClassifierHead) -> list[np.ndarray]:
    return head.fh.arrays() + head.fy.arrays()


def check_label(s: Setup, step: float) -> float:
    X, y = s.data.X_source, s.data.y_source
    _, gh, gy = label_loss(s.model.head, X, y)
    xh, xX = _xp_head(s.model.head), X.astype(XP)
    return finite_diff_check(lambda: label_loss(xh, xX, y, reduce=False)[0],
                             _head_params(xh), gh + gy, step, FLOOR)


def check_domain(s: Setup, step: float) -> float:
    m = s.model
    X = np.concatenate([s.data.X_source, s.data.Xt])
    d = np.concatenate([np.zeros(len(s.data.X_source)), np.ones(len(s.data.Xt))])
    _, gh, gd = domain_loss(m.fh, m.fd, X, d)
    xh, xd, xX = _xp(m.fh), _xp(m.fd), X.astype(XP)

    def loss():
        return domain_loss(xh, xd, xX, d, reduce=False)[0]

    # the reversed F_h gradient is the gradient of -L_d
    err_d = finite_diff_check(loss, xd.arrays(), gd, step, FLOOR)
    err_h = finite_diff_check(lambda: -loss(), xh.arrays(), gh, step, FLOOR)
    return max(err_d, err_h)


def check_contrastive(s: Setup, step: float, rng: np.random.Generator) -> float:
    X, y = s.data.X_source, s.data.y_source
    peers = concept.sample_all_peers(y, s.config.m, rng)
    tau = s.config.tau
    _, gs = concept.contrastive_loss(s.model.fs, X, peers, tau)
    xs, xX = _xp(s.model.fs), X.astype(XP)

    def loss():
        return concept.contrastive_loss(xs, xX, peers, tau, reduce=False)[0]

    return finite_diff_check(loss, xs.arrays(), gs, step, FLOOR)


def check_concept(s: Setup, step: float) -> float:
    head = s.model.head
    X, Xt = s.data.X_source, s.data.Xt
    c, d, _ = concept.extreme_indices(concept.embed(s.model.fs, X), concept.embed(s.model.fs, Xt))
    args = (X, Xt[c], Xt[d])
    _, gh, gy = concept.concept_loss(head, *args)
    xh = _xp_head(head)
    xargs = [a.astype(XP) for a in args]

    def loss():
        return concept.concept_loss(xh, *xargs, reduce=False)[0]

    err = finite_diff_check(loss, _head_params(xh), gh + gy, step, FLOOR)
    if len(s.data.Xs) > 1:
        pairs = concept.pair_extremes(s.model.fs, s.data.Xs)
        _, ph, py = concept.source_pair_concept_loss(head, s.data.Xs, pairs, 0.7, normalize=True)
        Xs = [x.astype(XP) for x in s.data.Xs]

        def pair_loss():
            return concept.source_pair_concept_loss(xh, Xs, pairs, 0.7, normalize=True,
                                                    reduce=False)[0]

        err = max(err, finite_diff_check(pair_loss, _head_params(xh), ph + py, step, FLOOR))
    return err


def check_combined(s: Setup, step: float, rng: np.random.Generator) -> float:
    m, cfg, data = s.model, s.config, s.data
    sel = select(m, data, cfg, "full", rng)
    br = combined_loss(m, data, cfg, "full", selections=sel)
    weights = module_weights(cfg, len(data.Xs))
    xdata = BatchData([x.astype(XP) for x in data.Xs], data.ys, data.Xt.astype(XP), data.names)
    xm = DacaModel(**{n: _xp(net) for n, net in m.nets().items()})

    def parts(reversed_domain=False):
        b = combined_loss(xm, xdata, cfg, "full", selections=sel)
        out = [weights[k] * v for k, v in b.values.items()]
        if reversed_domain and "domain" in b.values:
            # the reversal flips the domain term's sign for F_h only
            out.append(-2.0 * weights["domain"] * b.values["domain"])
        return out

    err = finite_diff_check(lambda: parts(reversed_domain=True), xm.fh.arrays(), br.grads["fh"],
                            step, FLOOR)
    for net in NETS[1:]:
        err = max(err, finite_diff_check(parts, getattr(xm, net).arrays(), br.grads[net], step, FLOOR))
    return err


def run_gradcheck(seed: int = 0, n_configs: int = 20, step: float = 1e-5) -> dict[str, float]:
    """Worst relative error per loss over ``n_configs`` random setups."""
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(LOSSES, 0.0)
    for _ in range(n_configs):
        s = random_setup(rng)
        worst["L_y"] = max(worst["L_y"], check_label(s, step))
        worst["L_d"] = max(worst["L_d"], check_domain(s, step))
        worst["L_s"] = max(worst["L_s"], check_contrastive(s, step, rng))
        worst["L_c"] = max(worst["L_c"], check_concept(s, step))
        worst["combined"] = max(worst["combined"], check_combined(s, step, rng))
    return worst
