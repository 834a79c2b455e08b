"""``daca`` command line: synth, train, eval, bound, gradcheck.

Every command writes its artifacts plus ``manifest.json`` into ``--out``.
Exit codes: 0 ok, 1 gradient check failed, 2 bad input or config,
3 numerical divergence, 4 undefined metric.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import bound, checkpoint, metrics, plotting
from .config import ConfigError, read_kv
from .data import (CorpusError, gen_synthetic, load_corpus, load_truth, synthetic_spec_from_kv,
                   with_target_labels, write_corpus)
from .gradcheck import LOSSES, run_gradcheck
from .trainer import DivergenceError, TrainConfig, UnusableCorpusError, predict_target, train

EXIT_OK, EXIT_GRADCHECK, EXIT_INPUT, EXIT_DIVERGED, EXIT_UNDEFINED = 0, 1, 2, 3, 4
GRAD_TOL = 1e-4


@dataclass
class RunManifest:
    command: str
    config: dict
    corpus_paths: list[str]
    seed: int | None
    outputs: dict[str, str] = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)
    started: str = ""
    duration_s: float = 0.0


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects outputs of one command and writes the manifest at the end."""

    def __init__(self, command: str, out: Path, corpus_paths=(), seed=None):
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.t0 = time.perf_counter()
        self.manifest = RunManifest(command, {}, [str(p) for p in corpus_paths], seed,
                                    started=datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def path(self, key: str, name: str) -> Path:
        p = self.out / name
        self.manifest.outputs[key] = str(p)
        return p

    def finish(self) -> Path:
        m = self.manifest
        m.checksums = {k: sha256(p) for k, p in sorted(m.outputs.items())}
        m.duration_s = round(time.perf_counter() - self.t0, 3)
        dest = self.out / "manifest.json"
        dest.write_text(json.dumps(asdict(m), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return dest


# -- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = synthetic_spec_from_kv(read_kv(args.config), seed=args.seed)
    corpus, truth = gen_synthetic(spec)
    run = Run("synth", Path(args.out), [args.config], spec.seed)
    run.manifest.config = read_kv(args.config) | {"seed": str(spec.seed)}
    write_corpus(corpus, run.path("corpus", "corpus.jsonl"))
    write_corpus(with_target_labels(corpus, truth.target_labels), run.path("truth", "truth.jsonl"),
                 include_target_labels=True, header_extra=truth.header())
    run.finish()
    print(f"corpus\t{run.manifest.outputs['corpus']}\ntruth\t{run.manifest.outputs['truth']}")
    return EXIT_OK


def train_config(args) -> TrainConfig:
    kv = read_kv(args.config) if args.config else {}
    overrides = {"seed": args.seed, "epochs": args.epochs, "warmup_epochs": args.warmup,
                 "lr": args.lr}
    kv |= {k: str(v) for k, v in overrides.items() if v is not None}
    if args.no_concept:
        kv["disable_concept_module"] = "true"
    if args.no_contrastive:
        kv["disable_contrastive_submodule"] = "true"
    return TrainConfig.from_kv(kv)


def cmd_train(args) -> int:
    config = train_config(args)
    corpus = load_corpus(args.corpus)
    run = Run("train", Path(args.out), [args.corpus], config.seed)
    run.manifest.config = config.to_kv()
    model, history = train(corpus, config)
    checkpoint.save(run.path("checkpoint", "checkpoint.json"), model, config, corpus.feature_dim)
    run.path("history", "history.tsv").write_text(history.to_tsv(), encoding="utf-8")
    plotting.plot_history(history, run.path("history_plot", "history.png"))
    run.finish()
    sys.stdout.write(history.to_tsv())
    return EXIT_OK


def cmd_eval(args) -> int:
    model, config, dim = checkpoint.load(args.checkpoint)
    corpus = load_corpus(args.corpus, allow_target_labels=True)
    if corpus.target.y is None:
        raise CorpusError(f"{args.corpus}: target records carry no evaluation labels")
    if corpus.feature_dim != dim:
        raise CorpusError(f"corpus has {corpus.feature_dim} features, model expects {dim}")
    run = Run("eval", Path(args.out), [args.corpus], config.seed)
    run.manifest.config = {"checkpoint": str(args.checkpoint), "threshold": "0.5"}
    probs = predict_target(model, corpus.target.X)
    text = metrics.report(metrics.confusion(probs, corpus.target.y))
    run.path("report", "metrics.tsv").write_text(text, encoding="utf-8")
    plotting.plot_scores(probs, corpus.target.y, run.path("scores_plot", "scores.png"))
    run.finish()
    sys.stdout.write(text)
    return EXIT_OK


def bound_config(args) -> bound.BoundConfig:
    cfg = bound.BoundConfig()
    kv = read_kv(args.config) if args.config else {}
    known = set(asdict(cfg))
    for key, raw in kv.items():
        if key not in known:
            raise ConfigError(f"unknown bound config key {key!r}")
        try:
            if key in ("divergence_mode", "lambda_mode"):
                val = raw.strip()
            elif key in ("vc_dim", "seed"):
                val = int(raw)
            elif key == "lipschitz":
                val = None if raw.strip().lower() == "auto" else float(raw)
            else:
                val = float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        setattr(cfg, key, val)
    if args.eta is not None:
        cfg.eta = args.eta
    if args.vc_dim is not None:
        cfg.vc_dim = args.vc_dim
    if args.seed is not None:
        cfg.seed = args.seed
    if args.div_coeff is not None:
        cfg.divergence_coefficient = {"half": 0.5, "one": 1.0}[args.div_coeff]
    if args.lam is not None:
        if args.lam == "stumps":
            cfg.lambda_mode = "stumps"
        else:
            try:
                cfg.lambda_mode, cfg.ideal_error = "fixed", float(args.lam)
            except ValueError:
                raise ConfigError(f"--lambda takes a number or 'stumps', got {args.lam!r}") from None
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def cmd_bound(args) -> int:
    if not (args.ideal or args.checkpoint):
        raise ConfigError("bound needs --checkpoint or --ideal")
    cfg = bound_config(args)
    corpus = load_corpus(args.corpus)
    truth_corpus, truth = load_truth(args.truth)
    if truth_corpus.target.ids != corpus.target.ids or not np.array_equal(truth_corpus.target.X,
                                                                         corpus.target.X):
        raise CorpusError(f"{args.truth} does not describe {args.corpus}")
    fs = None
    if args.ideal:
        h = truth.f_target
    else:
        model, _, dim = checkpoint.load(args.checkpoint)
        if dim != corpus.feature_dim:
            raise CorpusError(f"corpus has {corpus.feature_dim} features, model expects {dim}")
        fs = model.fs

        def h(X):
            return predict_target(model, X)
    run = Run("bound", Path(args.out), [args.corpus, args.truth], cfg.seed)
    run.manifest.config = {k: str(v) for k, v in asdict(cfg).items()} | {
        "hypothesis": "ideal" if args.ideal else str(args.checkpoint)}
    report = bound.bound_report(h, corpus, truth, cfg, fs=fs)
    text = report.to_text()
    run.path("report", "bound.tsv").write_text(text, encoding="utf-8")
    plotting.plot_bound(report, run.path("bound_plot", "bound.png"))
    run.finish()
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    run = Run("gradcheck", Path(args.out), seed=seed)
    run.manifest.config = {"configs": str(args.configs), "step": "1e-05", "tolerance": str(GRAD_TOL)}
    worst = run_gradcheck(seed=seed, n_configs=args.configs)
    lines = ["loss\tmax_relative_error\tresult"]
    lines += [f"{k}\t{worst[k]:.3e}\t{'pass' if worst[k] <= GRAD_TOL else 'FAIL'}" for k in LOSSES]
    text = "\n".join(lines) + "\n"
    run.path("report", "gradcheck.tsv").write_text(text, encoding="utf-8")
    run.finish()
    sys.stdout.write(text)
    return EXIT_OK if all(worst[k] <= GRAD_TOL for k in LOSSES) else EXIT_GRADCHECK


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="daca", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus and its truth file")
    s.add_argument("--config", required=True, help="synthetic spec (key = value)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--config", help="training config (key = value)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--warmup", type=int, help="warmup epochs")
    t.add_argument("--lr", type=float)
    t.add_argument("--no-concept", action="store_true", help="drop the whole concept module")
    t.add_argument("--no-contrastive", action="store_true", help="drop only the contrastive loss")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="recall / F1 on labeled target records")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True, help="corpus whose target records are labeled")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bound", help="target-error bound terms on a synthetic corpus")
    b.add_argument("--corpus", required=True)
    b.add_argument("--truth", required=True)
    b.add_argument("--out", required=True)
    src = b.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--ideal", action="store_true", help="use the true target labeling function as h")
    b.add_argument("--config", help="bound config (key = value)")
    b.add_argument("--seed", type=int)
    b.add_argument("--eta", type=float)
    b.add_argument("--vc-dim", type=int)
    b.add_argument("--lambda", dest="lam", help="ideal-hypothesis error, or 'stumps'")
    b.add_argument("--div-coeff", choices=("half", "one"))
    b.set_defaults(fn=cmd_bound)

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--configs", type=int, default=20)
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except metrics.UndefinedMetricError as exc:
        print(f"daca: {exc}", file=sys.stderr)
        return EXIT_UNDEFINED
    except DivergenceError as exc:
        print(f"daca: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, CorpusError, checkpoint.CheckpointError, UnusableCorpusError,
            OSError) as exc:
        print(f"daca: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
