"""Corpora of precomputed feature vectors, the line-delimited file format,
synthetic corpora with known labeling functions, and mini-batching.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import ConfigError
from .tensor import sigmoid

TARGET = "__target__"


class CorpusError(ValueError):
    """Malformed corpus file or a violated corpus invariant."""


@dataclass(frozen=True)
class FeatureRecord:
    id: str
    domain: str
    features: np.ndarray
    label: int | None = None


@dataclass
class Dataset:
    """Records of one domain, stored column-wise."""

    name: str
    ids: list[str]
    X: np.ndarray
    y: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def records(self) -> Iterator[FeatureRecord]:
        for i, rid in enumerate(self.ids):
            label = None if self.y is None else int(self.y[i])
            yield FeatureRecord(rid, self.name, self.X[i], label)


@dataclass
class Corpus:
    feature_dim: int
    sources: list[Dataset]
    target: Dataset

    def __post_init__(self):
        if not self.sources:
            raise CorpusError("corpus needs at least one source domain")
        for ds in self.sources + [self.target]:
            if len(ds) == 0:
                raise CorpusError(f"domain {ds.name!r} is empty")
            if ds.X.shape != (len(ds), self.feature_dim):
                raise CorpusError(f"domain {ds.name!r} has features of shape {ds.X.shape}")
        for ds in self.sources:
            if ds.y is None:
                raise CorpusError(f"source domain {ds.name!r} is unlabeled")

    @property
    def k(self) -> int:
        return len(self.sources)

    @property
    def domain_names(self) -> list[str]:
        return [s.name for s in self.sources]

    def source_labels(self) -> np.ndarray:
        return np.concatenate([s.y for s in self.sources])


def _fmt_features(x: np.ndarray) -> list[float]:
    # json writes repr(float), which round-trips float64 exactly
    return [float(v) for v in x]


def write_corpus(corpus: Corpus, path, include_target_labels: bool = False,
                 header_extra: dict | None = None) -> None:
    header = {"feature_dim": corpus.feature_dim, "domains": corpus.domain_names + [TARGET]}
    if header_extra:
        header.update(header_extra)
    lines = [json.dumps(header, sort_keys=True)]
    for ds in corpus.sources + [corpus.target]:
        domain = TARGET if ds is corpus.target else ds.name
        for rec in ds.records():
            obj = {"id": rec.id, "domain": domain, "features": _fmt_features(rec.features)}
            if rec.label is not None and (domain != TARGET or include_target_labels):
                obj["label"] = rec.label
            lines.append(json.dumps(obj, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}:1: header is not valid JSON ({exc.msg})") from None
    if not isinstance(header, dict) or "feature_dim" not in header or "domains" not in header:
        raise CorpusError(f"{path}:1: header must declare feature_dim and domains")
    return header


def load_corpus(path, allow_target_labels: bool = False) -> Corpus:
    """Parse and validate a corpus file.

    Target records must be unlabeled unless ``allow_target_labels`` is set
    (evaluation / truth files).
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"{path}: no such file")
    header = read_header(path)
    dim = header["feature_dim"]
    if not isinstance(dim, int) or dim < 1:
        raise CorpusError(f"{path}:1: feature_dim must be a positive integer")
    names = [d for d in header["domains"] if d != TARGET]
    rows: dict[str, list[tuple[str, list[float], int | None]]] = {n: [] for n in names}
    rows[TARGET] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc.msg}") from None
            rid = obj.get("id")
            if not isinstance(rid, str):
                raise CorpusError(f"{path}:{lineno}: record id must be a string")
            if rid in seen:
                raise CorpusError(f"record {rid!r}: duplicate id")
            seen.add(rid)
            domain = obj.get("domain")
            if domain not in rows:
                raise CorpusError(f"record {rid!r}: undeclared domain {domain!r}")
            feats = obj.get("features")
            if not isinstance(feats, list) or len(feats) != dim:
                got = len(feats) if isinstance(feats, list) else "no"
                raise CorpusError(f"record {rid!r}: expected {dim} features, got {got}")
            try:
                vec = [float(v) for v in feats]
            except (TypeError, ValueError):
                raise CorpusError(f"record {rid!r}: non-numeric feature") from None
            if not all(math.isfinite(v) for v in vec):
                raise CorpusError(f"record {rid!r}: non-finite feature")
            label = obj.get("label")
            if label is not None and label not in (0, 1):
                raise CorpusError(f"record {rid!r}: label must be 0 or 1")
            if domain == TARGET and label is not None and not allow_target_labels:
                raise CorpusError(f"record {rid!r}: target record carries a label")
            if domain != TARGET and label is None:
                raise CorpusError(f"record {rid!r}: source record has no label")
            rows[domain].append((rid, vec, label))

    def build(name: str, recs) -> Dataset:
        ids = [r[0] for r in recs]
        X = np.array([r[1] for r in recs], dtype=np.float64).reshape(len(recs), dim)
        labels = [r[2] for r in recs]
        if name == TARGET and any(lbl is None for lbl in labels):
            y = None
        else:
            y = np.array(labels, dtype=np.int64)
        return Dataset(name, ids, X, y)

    target = build(TARGET, rows[TARGET])
    if allow_target_labels and target.y is None and any(r[2] is not None for r in rows[TARGET]):
        raise CorpusError("target labels are only partially present")
    return Corpus(dim, [build(n, rows[n]) for n in names], target)


# -- synthetic corpora ------------------------------------------------------


@dataclass
class LogisticLabeler:
    """f(x) = flip + (1 - 2 flip) * sigmoid(w.x + b)."""

    w: np.ndarray
    b: float = 0.0
    flip: float = 0.0

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self.flip + (1.0 - 2.0 * self.flip) * sigmoid(X @ self.w + self.b)

    @property
    def lipschitz(self) -> float:
        # sigmoid' <= 1/4
        return (1.0 - 2.0 * self.flip) * float(np.linalg.norm(self.w)) / 4.0

    def to_json(self) -> dict:
        return {"w": [float(v) for v in self.w], "b": float(self.b), "flip": float(self.flip)}

    @classmethod
    def from_json(cls, obj: dict) -> "LogisticLabeler":
        return cls(np.asarray(obj["w"], dtype=np.float64), float(obj.get("b", 0.0)),
                   float(obj.get("flip", 0.0)))


@dataclass
class DomainSpec:
    name: str
    n: int
    means: np.ndarray          # (components, dim)
    scale: float
    labeler: LogisticLabeler


@dataclass
class SyntheticSpec:
    """Gaussian-mixture features with logistic labeling functions.

    ``noise`` is a label-flip rate; it is folded into each labeler so that
    ``f(x)`` stays the exact probability of label 1.
    """

    feature_dim: int
    sources: list[DomainSpec]
    target: DomainSpec
    noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise CorpusError("feature_dim must be >= 1")
        if not self.sources:
            raise CorpusError("need at least one source domain")
        if not 0.0 <= self.noise < 0.5:
            raise CorpusError("noise must lie in [0, 0.5)")
        names = [d.name for d in self.sources]
        if len(set(names)) != len(names) or TARGET in names:
            raise CorpusError("source domain names must be unique and not reserved")
        for d in self.sources + [self.target]:
            if d.n < 1:
                raise CorpusError(f"domain {d.name!r}: sample count must be >= 1")
            if d.means.ndim != 2 or d.means.shape[1] != self.feature_dim or len(d.means) == 0:
                raise CorpusError(f"domain {d.name!r}: means must be (components, {self.feature_dim})")
            if d.labeler.w.shape != (self.feature_dim,):
                raise CorpusError(f"domain {d.name!r}: labeling weight has wrong dimension")
            if d.scale <= 0:
                raise CorpusError(f"domain {d.name!r}: scale must be positive")


def _spec_value(kv: dict[str, str], key: str, conv, default=None):
    if key not in kv:
        if default is None:
            raise CorpusError(f"synthetic spec: missing key {key!r}")
        return default
    try:
        return conv(kv[key])
    except ValueError as exc:
        raise CorpusError(f"synthetic spec: {key}: {exc}") from None


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _domain_from_kv(kv: dict[str, str], name: str, stored: str, dim: int) -> DomainSpec:
    means = _spec_value(kv, f"{name}.means", lambda s: [_float_list(r) for r in s.split(";")],
                        [[0.0] * dim])
    try:
        means = np.array(means, dtype=np.float64)
    except ValueError:
        raise CorpusError(f"synthetic spec: {name}.means rows differ in length") from None
    w = np.array(_spec_value(kv, f"{name}.w", _float_list), dtype=np.float64)
    return DomainSpec(stored, _spec_value(kv, f"{name}.n", int), means,
                      _spec_value(kv, f"{name}.scale", float, 1.0),
                      LogisticLabeler(w, _spec_value(kv, f"{name}.b", float, 0.0)))


def synthetic_spec_from_kv(kv: dict[str, str], seed: int | None = None) -> SyntheticSpec:
    """Build a spec from flat keys::

        feature_dim = 2
        domains = a, b
        noise = 0.05
        a.n = 500
        a.means = -1, 0; 1, 0     # mixture component centres, rows split by ';'
        a.scale = 1.0
        a.w = 2, 0                # labeling weight; a.b is the bias
        target.n = 500
        ...

    ``seed`` overrides the file's ``seed`` key.
    """
    dim = _spec_value(kv, "feature_dim", int)
    names = [n.strip() for n in _spec_value(kv, "domains", str).split(",") if n.strip()]
    prefixes = set(names) | {"target"}
    top = {"feature_dim", "domains", "noise", "seed"}
    for key in kv:
        if key not in top and key.split(".", 1)[0] not in prefixes:
            raise CorpusError(f"synthetic spec: unknown key {key!r}")
    spec = SyntheticSpec(
        feature_dim=dim,
        sources=[_domain_from_kv(kv, n, n, dim) for n in names],
        target=_domain_from_kv(kv, "target", TARGET, dim),
        noise=_spec_value(kv, "noise", float, 0.0),
        seed=seed if seed is not None else _spec_value(kv, "seed", int, 0))
    spec.validate()
    return spec


@dataclass
class SyntheticTruth:
    """Held-out ground truth for a synthetic corpus."""

    labelers: dict[str, LogisticLabeler]
    target_labels: np.ndarray
    lipschitz: float

    def f_source(self, j_name: str) -> LogisticLabeler:
        return self.labelers[j_name]

    @property
    def f_target(self) -> LogisticLabeler:
        return self.labelers[TARGET]

    def header(self) -> dict:
        return {"labeling": {k: v.to_json() for k, v in sorted(self.labelers.items())},
                "lipschitz": self.lipschitz}


def gen_synthetic(spec: SyntheticSpec) -> tuple[Corpus, SyntheticTruth]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labelers: dict[str, LogisticLabeler] = {}
    datasets = []
    for d in spec.sources + [spec.target]:
        comp = rng.integers(0, len(d.means), size=d.n)
        X = d.means[comp] + d.scale * rng.standard_normal((d.n, spec.feature_dim))
        lab = LogisticLabeler(d.labeler.w, d.labeler.b, spec.noise)
        y = (rng.random(d.n) < lab(X)).astype(np.int64)
        key = TARGET if d is spec.target else d.name
        labelers[key] = lab
        prefix = "t" if d is spec.target else d.name
        ids = [f"{prefix}-{i}" for i in range(d.n)]
        datasets.append(Dataset(key, ids, X, y))
    target = datasets.pop()
    truth = SyntheticTruth(labelers, target.y.copy(),
                           max(lab.lipschitz for lab in labelers.values()))
    corpus = Corpus(spec.feature_dim, datasets, Dataset(TARGET, target.ids, target.X, None))
    return corpus, truth


def with_target_labels(corpus: Corpus, labels: np.ndarray) -> Corpus:
    t = corpus.target
    return Corpus(corpus.feature_dim, corpus.sources, Dataset(t.name, t.ids, t.X, labels))


def load_truth(path) -> tuple[Corpus, SyntheticTruth]:
    """Read a truth file: a corpus with target labels plus labeler parameters."""
    header = read_header(path)
    if "labeling" not in header:
        raise CorpusError(f"{path}: header carries no labeling functions")
    corpus = load_corpus(path, allow_target_labels=True)
    if corpus.target.y is None:
        raise CorpusError(f"{path}: target records carry no labels")
    labelers = {k: LogisticLabeler.from_json(v) for k, v in header["labeling"].items()}
    missing = set(corpus.domain_names + [TARGET]) - set(labelers)
    if missing:
        raise CorpusError(f"{path}: no labeling function for {sorted(missing)}")
    return corpus, SyntheticTruth(labelers, corpus.target.y, float(header["lipschitz"]))


# -- batching ---------------------------------------------------------------


@dataclass
class Batch:
    """Index arrays into each source dataset and into the target dataset."""

    sources: list[np.ndarray]
    target: np.ndarray


@dataclass
class BatchData:
    Xs: list[np.ndarray]
    ys: list[np.ndarray]
    Xt: np.ndarray
    names: list[str] = field(default_factory=list)

    @classmethod
    def gather(cls, corpus: Corpus, batch: Batch) -> "BatchData":
        return cls([s.X[i] for s, i in zip(corpus.sources, batch.sources)],
                   [s.y[i] for s, i in zip(corpus.sources, batch.sources)],
                   corpus.target.X[batch.target],
                   corpus.domain_names)

    @property
    def X_source(self) -> np.ndarray:
        return np.concatenate(self.Xs, axis=0)

    @property
    def y_source(self) -> np.ndarray:
        return np.concatenate(self.ys)


def allocate_slots(sizes: Sequence[int], batch_size: int) -> list[int]:
    """Split ``batch_size`` across domains proportionally to ``sizes``, floor 2.

    Largest-remainder rounding; ties go to the earlier domain.
    """
    n = len(sizes)
    if batch_size < 2 * n:
        raise ConfigError(f"batch_size {batch_size} < 2 x {n} domains")
    total = sum(sizes)
    raw = [batch_size * s / total for s in sizes]
    slots = [max(2, int(math.floor(r))) for r in raw]
    order = sorted(range(n), key=lambda i: (-(raw[i] - math.floor(raw[i])), i))
    i = 0
    while sum(slots) < batch_size:
        slots[order[i % n]] += 1
        i += 1
    while sum(slots) > batch_size:
        # only reachable when floors of 2 overshoot; trim the largest
        j = max(range(n), key=lambda m: (slots[m], -m))
        slots[j] -= 1
    return slots


def _fix_label_presence(chunks: list[np.ndarray], labels: np.ndarray) -> None:
    # swap records between chunks so every chunk of size >= 2 sees both labels
    for lbl in (0, 1):
        for c in chunks:
            if len(c) < 2 or np.any(labels[c] == lbl):
                continue
            for other in chunks:
                pos = np.flatnonzero(labels[other] == lbl)
                if len(pos) >= 2:
                    c[0], other[pos[0]] = other[pos[0]], c[0]
                    break


def make_batches(corpus: Corpus, batch_size: int, seed: int, epoch: int = 0) -> list[Batch]:
    """One epoch of batches: every source record exactly once, target sampled
    sequentially from fresh permutations (so with replacement across the
    epoch when N_T is exhausted)."""
    sizes = [len(s) for s in corpus.sources] + [len(corpus.target)]
    slots = allocate_slots(sizes, batch_size)
    rng = np.random.default_rng([seed, epoch])
    n_batches = max(math.ceil(len(s) / k) for s, k in zip(corpus.sources, slots[:-1]))
    per_source = []
    for s in corpus.sources:
        chunks = np.array_split(rng.permutation(len(s)), n_batches)
        _fix_label_presence(chunks, s.y)
        per_source.append(chunks)
    need = n_batches * slots[-1]
    nt = len(corpus.target)
    reps = [rng.permutation(nt) for _ in range(math.ceil(need / nt))]
    tidx = np.concatenate(reps)[:need].reshape(n_batches, slots[-1])
    return [Batch([chunks[b] for chunks in per_source], tidx[b]) for b in range(n_batches)]
