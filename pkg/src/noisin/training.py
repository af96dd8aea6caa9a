"""Epoch loop with validation-triggered learning-rate decay, and perplexity evaluation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import save_checkpoint
from .config import TrainConfig, model_from_config, write_config
from .data import Corpus, batchify
from .model import SGD, NoisinModel, noisy_forward, train_step
from .numerics import NumericalError

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "train_loss", "train_ppl", "valid_loss", "valid_ppl", "lr", "wall_time")


@dataclass
class EvalResult:
    loss: float
    perplexity: float
    n_tokens: int


def evaluate(
    model: NoisinModel,
    ids,
    batch_size: int = 10,
    unroll: int = 35,
    eval_mode: str = "noise-off",
    k: int = 1,
    seed: int = 1111,
) -> EvalResult:
    """Per-token mean NLL over a whole split, hidden state carried across windows.

    ``noise-off`` scores the deterministic network.  ``k-sample`` keeps the
    injected noise on and averages the per-token loss of ``k`` noisy rollouts.
    """
    ids = np.asarray(ids)
    batch_size = max(1, min(batch_size, (ids.size - 1) // 2 or 1))
    window = max(1, min(unroll, ids.size // batch_size - 1))
    stream = batchify(ids, batch_size, window)
    if eval_mode == "noise-off":
        m = model.deterministic()
        rng = None
    elif eval_mode == "k-sample":
        m = model
        rng = nx.make_rng(seed)
    else:
        raise ValueError(f"unknown eval mode {eval_mode!r}")
    rollouts = 1 if eval_mode == "noise-off" or not model.noise.active else k
    m = dataclasses.replace(m, k=1)
    total = 0.0
    for r, child in enumerate(nx.split_rng(rng, rollouts) if rng is not None else [None]):
        states = m.zero_state(stream.batch_size)
        for inputs, targets in stream.windows():
            res = noisy_forward(m, inputs, targets, states, rng=child, train=False)
            states = res.final_states
            total += float(res.token_nll.sum())
    loss = total / (rollouts * stream.n_targets)
    if not math.isfinite(loss):
        raise NumericalError("evaluation loss is not finite")
    return EvalResult(loss, math.exp(loss), stream.n_targets)


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    best_checkpoint: Path | None = None
    best_valid_ppl: float = math.inf
    model: NoisinModel | None = None
    failed: bool = False


class MetricsWriter:
    """Append-only CSV writer for per-epoch metrics."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(METRIC_FIELDS)

    def append(self, row: dict) -> None:
        if not self.path:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_cell(row[k]) for k in METRIC_FIELDS])


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metrics(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                if k == "epoch":
                    row[k] = int(v)
                else:
                    row[k] = float(v) if v != "" else None
            rows.append(row)
    return rows


def train(
    cfg: TrainConfig,
    corpus: Corpus,
    out_dir: str | Path | None = None,
    metrics_path: str | Path | None = None,
    checkpoint_every_epoch: bool = False,
) -> TrainResult:
    """Train per ``cfg``; writes the echoed config, metrics CSV and best checkpoint.

    Raises :class:`NumericalError` on a non-finite loss after flushing the
    metrics gathered so far; the last good checkpoint stays on disk.
    """
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        write_config(cfg, out / "config.txt")
    if metrics_path is None and out is not None:
        metrics_path = out / "metrics.csv"
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        write_config(cfg, Path(metrics_path).with_suffix(".config.txt"))
    writer = MetricsWriter(metrics_path)

    root = nx.make_rng(cfg.seed)
    init_rng, train_rng = nx.split_rng(root, 2)
    model = model_from_config(cfg, len(corpus.vocab), init_rng)
    stream = batchify(corpus.train, cfg.batch_size, cfg.unroll)
    opt = SGD(model.parameters(), cfg.lr)
    result = TrainResult(model=model)
    t0 = time.perf_counter()

    def validate() -> EvalResult:
        opt.swap_average()
        try:
            return evaluate(model, corpus.valid, cfg.eval_batch_size, cfg.unroll, cfg.eval_mode, cfg.eval_k, cfg.seed)
        finally:
            opt.swap_average()

    def record(row: dict) -> None:
        result.rows.append(row)
        writer.append(row)
        log.info(
            "epoch %3d | train ppl %s | valid ppl %8.3f | lr %.4g",
            row["epoch"],
            "      -" if row["train_ppl"] is None else f"{row['train_ppl']:8.3f}",
            row["valid_ppl"],
            row["lr"],
        )

    def save_best(epoch: int) -> None:
        if out is None:
            return
        params = {k: (opt.avg[k] if opt.avg is not None else p.data) for k, p in model.parameters().items()}
        path = out / f"epoch_{epoch:03d}.npz"
        save_checkpoint(path, model, cfg, corpus.vocab, {"epoch": epoch}, params=params)
        best = out / "best.npz"
        save_checkpoint(best, model, cfg, corpus.vocab, {"epoch": epoch}, params=params)
        (out / "best.json").write_text(json.dumps({"epoch": epoch, "checkpoint": path.name, "valid_ppl": result.best_valid_ppl}))
        result.best_checkpoint = best
        if not checkpoint_every_epoch and epoch > 0:
            for old in out.glob("epoch_*.npz"):
                if old != path:
                    old.unlink()

    v = validate()
    result.best_valid_ppl = v.perplexity
    record(dict(epoch=0, train_loss=None, train_ppl=None, valid_loss=v.loss, valid_ppl=v.perplexity,
                lr=opt.lr, wall_time=time.perf_counter() - t0))
    save_best(0)

    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.optimizer == "asgd" and epoch == cfg.asgd_start_epoch:
            opt.start_averaging()
        states = model.zero_state(cfg.batch_size)
        tot, n = 0.0, 0
        try:
            for inputs, targets in stream.windows():
                step = train_step(model, (inputs, targets), states, opt, cfg.clip_norm, train_rng)
                states = step.states
                tot += step.loss * targets.size
                n += targets.size
            train_loss = tot / n
            v = validate()
        except NumericalError:
            result.failed = True
            raise
        row = dict(epoch=epoch, train_loss=train_loss, train_ppl=math.exp(train_loss), valid_loss=v.loss,
                   valid_ppl=v.perplexity, lr=opt.lr, wall_time=time.perf_counter() - t0)
        record(row)
        if v.perplexity < result.best_valid_ppl:
            result.best_valid_ppl = v.perplexity
            save_best(epoch)
        elif v.perplexity > result.best_valid_ppl:
            opt.lr /= cfg.lr_decay
    return result
