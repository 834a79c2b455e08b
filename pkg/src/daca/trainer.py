"""Two-stage optimisation of the combined objective.

Per batch, each module loss is normalised by the number of records it sums
over before weighting:

    L_y / n_source + w_d * L_d / n_all + w_s * L_s / n_anchors
        + w_alpha * L_c / n_source + w_beta * sum_(j,n) L_c(j->n) / n_j

The last two terms are only active after the warmup epochs.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import concept
from .classification import ClassifierHead, head_forward, label_loss
from .config import ConfigError, as_bool, as_ints
from .covariate import domain_loss
from .data import BatchData, Corpus, make_batches
from .tensor import AdamState, Mlp, NonFiniteError, adam_step

log = logging.getLogger(__name__)

NETS = ("fh", "fy", "fd", "fs")
MODULES = ("label", "domain", "contrastive", "concept", "pairs")


class TrainingError(RuntimeError):
    pass


class UnusableCorpusError(TrainingError):
    pass


class DivergenceError(TrainingError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 30
    warmup_epochs: int = 5
    batch_size: int = 64
    m: int = 3
    tau: float = 0.5
    weight_domain: float = 1.0
    weight_contrastive: float = 1.0
    weight_concept: float = 1.0
    # None -> 1 / (k (k - 1))
    weight_pairs: float | None = None
    disable_concept_module: bool = False
    disable_contrastive_submodule: bool = False
    seed: int = 0
    hidden_h: tuple[int, ...] = (64, 64)
    hidden_y: tuple[int, ...] = (32,)
    hidden_d: tuple[int, ...] = (32,)
    hidden_s: tuple[int, ...] = (64, 64)
    activation: str = "relu"

    def validate(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("need epochs >= 1 and 0 <= warmup_epochs <= epochs")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError("activation must be relu or tanh")
        if not self.hidden_h or not self.hidden_s or len(self.hidden_s) < 1 or self.hidden_s[-1] < 2:
            raise ConfigError("hidden_h and hidden_s need at least one layer; embedding dim >= 2")
        for name in ("weight_domain", "weight_contrastive", "weight_concept"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def pair_weight(self, k: int) -> float:
        if k < 2:
            return 0.0
        return self.weight_pairs if self.weight_pairs is not None else 1.0 / (k * (k - 1))

    @property
    def uses_contrastive(self) -> bool:
        return not (self.disable_concept_module or self.disable_contrastive_submodule)

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif v is None:
                v = "auto"
            elif isinstance(v, float):
                v = repr(v)
            out[f.name] = str(v).lower() if isinstance(v, bool) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        cfg = cls()
        known = {f.name: f for f in fields(cls)}
        for key, raw in kv.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            cur = getattr(cfg, key)
            try:
                if key == "weight_pairs":
                    val = None if raw.strip().lower() == "auto" else float(raw)
                elif isinstance(cur, bool):
                    val = as_bool(raw)
                elif isinstance(cur, int):
                    val = int(raw)
                elif isinstance(cur, float):
                    val = float(raw)
                elif isinstance(cur, tuple):
                    val = tuple(as_ints(raw))
                else:
                    val = raw.strip()
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
            setattr(cfg, key, val)
        cfg.validate()
        return cfg


@dataclass
class DacaModel:
    fh: Mlp
    fy: Mlp
    fd: Mlp
    fs: Mlp

    @classmethod
    def init(cls, feature_dim: int, config: TrainConfig, rng: np.random.Generator) -> "DacaModel":
        act = config.activation
        h_dim = config.hidden_h[-1]
        fh = Mlp.init([feature_dim, *config.hidden_h], rng, act, output=act)
        fy = Mlp.init([h_dim, *config.hidden_y, 1], rng, act)
        fd = Mlp.init([h_dim, *config.hidden_d, 1], rng, act)
        fs = Mlp.init([feature_dim, *config.hidden_s], rng, act)
        return cls(fh, fy, fd, fs)

    @property
    def head(self) -> ClassifierHead:
        return ClassifierHead(self.fh, self.fy)

    def nets(self) -> dict[str, Mlp]:
        return {n: getattr(self, n) for n in NETS}

    def arrays(self) -> list[np.ndarray]:
        return [a for n in NETS for a in getattr(self, n).arrays()]

    def zero_grads(self) -> dict[str, list[np.ndarray]]:
        return {n: getattr(self, n).zeros_like() for n in NETS}

    def copy(self) -> "DacaModel":
        return DacaModel(*(getattr(self, n).copy() for n in NETS))


def predict_target(model: DacaModel, x):
    """Probability of misinformation, F_y(F_h(x)). F_d and F_s are not used."""
    x = np.asarray(x, dtype=np.float64)
    p, _ = head_forward(model.head, np.atleast_2d(x))
    return float(p[0]) if x.ndim == 1 else p


def predict_labels(model: DacaModel, X) -> np.ndarray:
    # strict: p == 0.5 is label 0
    return (predict_target(model, np.atleast_2d(X)) > 0.5).astype(np.int64)


@dataclass
class Selections:
    """Peer sets and extreme pairs for one batch, frozen before any gradient
    is computed."""

    peers: list[concept.PeerSet] = field(default_factory=list)
    near: np.ndarray | None = None
    far: np.ndarray | None = None
    pairs: dict = field(default_factory=dict)


def select(model: DacaModel, data: BatchData, config: TrainConfig, stage: str,
           rng: np.random.Generator) -> Selections:
    sel = Selections()
    if config.disable_concept_module:
        return sel
    if config.uses_contrastive:
        sel.peers = concept.sample_all_peers(data.y_source, config.m, rng)
    if stage == "full":
        # W/o_CL: extremes from raw-feature cosine
        fs = model.fs if config.uses_contrastive else None
        Xs = data.X_source
        if config.weight_concept > 0 and len(Xs) and len(data.Xt):
            ea = Xs if fs is None else concept.embed(fs, Xs)
            et = data.Xt if fs is None else concept.embed(fs, data.Xt)
            sel.near, sel.far, _ = concept.extreme_indices(ea, et)
        if config.pair_weight(len(data.Xs)) > 0:
            sel.pairs = concept.pair_extremes(fs, data.Xs)
    return sel


@dataclass
class LossBreakdown:
    values: dict[str, float]                            # normalised, unweighted
    total: float
    grads: dict[str, list[np.ndarray]]                  # summed over modules
    contributions: dict[str, dict[str, list[np.ndarray]]]  # weighted, per module


def _scaled(grads: dict[str, list[np.ndarray]], w: float) -> dict[str, list[np.ndarray]]:
    return {n: [w * g for g in gs] for n, gs in grads.items()}


def module_weights(config: TrainConfig, k: int) -> dict[str, float]:
    """Weight applied to each normalised module value in the total."""
    return {"label": 1.0, "domain": config.weight_domain,
            "contrastive": config.weight_contrastive, "concept": config.weight_concept,
            "pairs": config.pair_weight(k)}


def combined_loss(model: DacaModel, data: BatchData, config: TrainConfig, stage: str,
                  selections: Selections | None = None,
                  rng: np.random.Generator | None = None) -> LossBreakdown:
    if stage not in ("warmup", "full"):
        raise ValueError(f"unknown stage {stage!r}")
    if selections is None:
        selections = select(model, data, config, stage,
                            rng if rng is not None else np.random.default_rng(config.seed))
    head = model.head
    Xs, ys, Xt = data.X_source, data.y_source, data.Xt
    n_src, n_all = len(Xs), len(Xs) + len(Xt)
    values: dict[str, float] = {}
    contrib: dict[str, dict[str, list[np.ndarray]]] = {}
    zero = model.zero_grads

    def add(name, w, value, grads_by_net):
        values[name] = value
        g = zero()
        for net, gs in grads_by_net.items():
            g[net] = gs
        contrib[name] = _scaled(g, w)

    ly, gh, gy = label_loss(head, Xs, ys)
    add("label", 1.0 / n_src, ly / n_src, {"fh": gh, "fy": gy})

    if config.weight_domain > 0 and len(Xt):
        X = np.concatenate([Xs, Xt], axis=0)
        dom = np.concatenate([np.zeros(n_src), np.ones(len(Xt))])
        ld, gh, gd = domain_loss(model.fh, model.fd, X, dom)
        add("domain", config.weight_domain / n_all, ld / n_all, {"fh": gh, "fd": gd})

    if config.uses_contrastive and config.weight_contrastive > 0 and selections.peers:
        n_anchor = len(selections.peers)
        ls, gs = concept.contrastive_loss(model.fs, Xs, selections.peers, config.tau)
        add("contrastive", config.weight_contrastive / n_anchor, ls / n_anchor, {"fs": gs})

    if stage == "full" and not config.disable_concept_module:
        if selections.near is not None and config.weight_concept > 0:
            lc, gh, gy = concept.concept_loss(head, Xs, Xt[selections.near], Xt[selections.far])
            add("concept", config.weight_concept / n_src, lc / n_src, {"fh": gh, "fy": gy})
        wp = config.pair_weight(len(data.Xs))
        if selections.pairs and wp > 0:
            lp, gh, gy = concept.source_pair_concept_loss(head, data.Xs, selections.pairs,
                                                          1.0, normalize=True)
            add("pairs", wp, lp, {"fh": gh, "fy": gy})

    weights = module_weights(config, len(data.Xs))
    total = sum(weights[k] * v for k, v in values.items())
    grads = zero()
    for part in contrib.values():
        for net in NETS:
            for acc, g in zip(grads[net], part[net]):
                acc += g
    return LossBreakdown(values, total, grads, contrib)


def flat_grads(grads: dict[str, list[np.ndarray]]) -> list[np.ndarray]:
    return [g for n in NETS for g in grads[n]]


def grad_norm(grads: dict[str, list[np.ndarray]]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for gs in grads.values() for g in gs)))


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    label: float
    domain: float | None
    contrastive: float | None
    concept: float | None
    pairs: float | None
    total: float
    concept_grad_norm: float | None


COLUMNS = [f.name for f in fields(EpochRecord)]


@dataclass
class EpochHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def to_tsv(self) -> str:
        def cell(v):
            if v is None:
                return "NA"
            return repr(float(v)) if isinstance(v, float) else str(v)

        lines = ["\t".join(COLUMNS)]
        for r in self.records:
            lines.append("\t".join(cell(v) for v in asdict(r).values()))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "EpochHistory":
        rows = [ln.split("\t") for ln in text.strip().splitlines()]
        if rows[0] != COLUMNS:
            raise ValueError("unexpected history header")
        recs = []
        for row in rows[1:]:
            vals = {}
            for k, v in zip(COLUMNS, row):
                if k == "epoch":
                    vals[k] = int(v)
                elif k == "stage":
                    vals[k] = v
                else:
                    vals[k] = None if v == "NA" else float(v)
            recs.append(EpochRecord(**vals))
        return cls(recs)


def _check_corpus(corpus: Corpus) -> None:
    labels = corpus.source_labels()
    if not (np.any(labels == 0) and np.any(labels == 1)):
        raise UnusableCorpusError("source domains contain only one label class")


def train(corpus: Corpus, config: TrainConfig, callback=None) -> tuple[DacaModel, EpochHistory]:
    """Train from scratch. Deterministic for a fixed ``config.seed``.

    ``callback(epoch, batch_index, breakdown)`` is invoked after each step's
    loss evaluation, before the parameter update.
    """
    config.validate()
    _check_corpus(corpus)
    model = DacaModel.init(corpus.feature_dim, config, np.random.default_rng(config.seed))
    params = model.arrays()
    adam = AdamState.for_params(params)
    history = EpochHistory()
    for epoch in range(config.epochs):
        stage = "warmup" if epoch < config.warmup_epochs else "full"
        sums: dict[str, list[float]] = {}
        totals, cnorms = [], []
        for b, batch in enumerate(make_batches(corpus, config.batch_size, config.seed, epoch)):
            data = BatchData.gather(corpus, batch)
            rng = np.random.default_rng([config.seed, epoch, b])
            br = combined_loss(model, data, config, stage, rng=rng)
            if not np.isfinite(br.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch} batch {b}")
            if callback is not None:
                callback(epoch, b, br)
            try:
                adam_step(params, flat_grads(br.grads), adam, config.lr)
            except NonFiniteError:
                raise DivergenceError(f"non-finite gradient at epoch {epoch} batch {b}") from None
            for k, v in br.values.items():
                sums.setdefault(k, []).append(v)
            totals.append(br.total)
            if "concept" in br.contributions:
                cnorms.append(grad_norm(br.contributions["concept"]))

        def mean(k):
            return float(np.mean(sums[k])) if k in sums else None

        history.records.append(EpochRecord(
            epoch=epoch, stage=stage, label=mean("label"), domain=mean("domain"),
            contrastive=mean("contrastive"), concept=mean("concept"), pairs=mean("pairs"),
            total=float(np.mean(totals)),
            concept_grad_norm=float(np.mean(cnorms)) if cnorms else None))
        log.info("epoch %d (%s) total %.6f", epoch, stage, history.records[-1].total)
    return model, history


def grads_by_module(br: LossBreakdown) -> dict[str, float]:
    return {k: grad_norm(v) for k, v in br.contributions.items()}

