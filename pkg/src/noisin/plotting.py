"""PNG figures written next to the CSV outputs (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_curves(rows: Sequence[dict], path: str | Path, title: str = "") -> Path:
    """Train and validation perplexity per epoch for one run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    tr = [(r["epoch"], r["train_ppl"]) for r in rows if r.get("train_ppl") is not None]
    va = [(r["epoch"], r["valid_ppl"]) for r in rows]
    if tr:
        ax.plot(*zip(*tr), "o-", label="train")
    ax.plot(*zip(*va), "s-", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("perplexity")
    ax.set_yscale("log")
    ax.set_title(title or "training curves")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_run_comparison(runs: Mapping[str, Sequence[dict]], path: str | Path, title: str = "") -> Path:
    """Train (dashed) and validation (solid) perplexity for several runs on shared axes."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for i, (label, rows) in enumerate(runs.items()):
        color = f"C{i}"
        tr = [(r["epoch"], r["train_ppl"]) for r in rows if r.get("train_ppl") is not None]
        va = [(r["epoch"], r["valid_ppl"]) for r in rows if r["epoch"] > 0]
        if tr:
            ax.plot(*zip(*tr), "--", color=color, label=f"{label} train")
        if va:
            ax.plot(*zip(*va), "-", color=color, label=f"{label} valid")
    ax.set_xlabel("epoch")
    ax.set_ylabel("perplexity")
    ax.set_title(title or "train vs validation perplexity")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_decomposition(rows: Sequence[dict], path: str | Path) -> Path:
    """Empirical penalty with error bars against its second-order approximation, per spread."""
    rows = sorted(rows, key=lambda r: float(r["gamma"]))
    g = np.array([float(r["gamma"]) for r in rows])
    emp = np.array([float(r["reg_empirical"]) for r in rows])
    emp_se = np.array([float(r["reg_stderr"]) for r in rows])
    tay = np.array([float(r["reg_taylor"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(g, emp, yerr=3 * emp_se, fmt="o", capsize=3, label="empirical (±3 s.e.)")
    ax.plot(g, tay, "x--", label="second-order")
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_xlabel("gamma")
    ax.set_ylabel("regularizer (nats per sequence)")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_zscores(z_scores: np.ndarray, path: str | Path, threshold: float = 4.0) -> Path:
    """Per-unit unbiasedness z-scores, one panel row per layer."""
    z = np.atleast_2d(np.asarray(z_scores, dtype=float))
    fig, ax = plt.subplots(figsize=(7, 3))
    for l, zl in enumerate(z):
        ax.plot(np.arange(zl.size), np.clip(zl, -50, 50), ".", label=f"layer {l}")
    for t in (threshold, -threshold):
        ax.axhline(t, color="r", lw=0.8, ls="--")
    ax.set_xlabel("hidden unit")
    ax.set_ylabel("z-score (clipped to ±50)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)
