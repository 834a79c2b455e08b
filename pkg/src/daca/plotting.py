"""Figures written next to the CLI's text reports."""

from __future__ import annotations

import numpy as np
from matplotlib.figure import Figure

from .bound import BoundReport
from .trainer import EpochHistory

_MODULES = ("label", "domain", "contrastive", "concept", "pairs", "total")


def plot_history(history: EpochHistory, path) -> None:
    """Per-epoch mean of each loss module; the warmup stage is shaded."""
    fig = Figure(figsize=(6.4, 4.0))
    ax = fig.add_subplot(1, 1, 1)
    epochs = [r.epoch for r in history.records]
    for name in _MODULES:
        vals = [getattr(r, name) for r in history.records]
        if all(v is None for v in vals):
            continue
        ys = [np.nan if v is None else v for v in vals]
        ax.plot(epochs, ys, marker=".", label=name, lw=2 if name == "total" else 1)
    warm = [r.epoch for r in history.records if r.stage == "warmup"]
    if warm:
        ax.axvspan(min(warm) - 0.5, max(warm) + 0.5, color="0.9", zorder=0, label="warmup")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.legend(fontsize=8)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def plot_bound(report: BoundReport, path) -> None:
    """Stacked right-hand-side terms per source domain against the measured
    target error."""
    fig = Figure(figsize=(6.4, 4.0))
    ax = fig.add_subplot(1, 1, 1)
    names = [d.name for d in report.domains]
    x = np.arange(len(names))
    parts = [("eps_S", [d.eps_S for d in report.domains]),
             (f"{report.coefficient:g} * d_H", [report.coefficient * d.d_H for d in report.domains]),
             ("concept", [d.concept for d in report.domains]),
             ("lipschitz", [d.lipschitz for d in report.domains]),
             ("C", [d.C for d in report.domains])]
    bottom = np.zeros(len(names))
    for label, vals in parts:
        ax.bar(x, vals, bottom=bottom, label=label, width=0.6)
        bottom += np.asarray(vals)
    ax.axhline(report.rhs, color="k", ls="--", lw=1, label=f"rhs {report.rhs:.3f}")
    ax.axhline(report.eps_T, color="tab:red", lw=1.5, label=f"eps_T {report.eps_T:.3f}")
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylabel("error bound term")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def plot_scores(probs, labels, path) -> None:
    """Histogram of predicted probabilities split by true label."""
    probs, labels = np.asarray(probs), np.asarray(labels)
    fig = Figure(figsize=(6.4, 4.0))
    ax = fig.add_subplot(1, 1, 1)
    bins = np.linspace(0.0, 1.0, 21)
    for lab, name in ((0, "true news"), (1, "fake news")):
        ax.hist(probs[labels == lab], bins=bins, alpha=0.6, label=name)
    ax.axvline(0.5, color="k", lw=1)
    ax.set_xlabel("predicted probability of fake")
    ax.set_ylabel("records")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
