"""``noisin`` command line: train, eval, diagnose and plot.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
3 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import load_checkpoint
from .config import PRESETS, TrainConfig, format_config, model_from_config, parse_overrides, resolve_config, write_config
from .data import Corpus, Vocab, bundled_corpus_dir, load_corpus, read_corpus
from .model import check_unbiasedness, jensen_gap, model_step
from .numerics import ContractViolation, NumericalError
from .regularizer import CSV_FIELDS, decomposition_check
from .training import evaluate, read_metrics, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_INVARIANT = 0, 1, 2, 3

log = logging.getLogger("noisin")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (defaults < --preset < --config < flags)")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--config", metavar="FILE", help="key = value config file")
    for f in fields(TrainConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", metavar="V")


def _add_corpus_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("corpus (defaults to the bundled desk corpus)")
    g.add_argument("--corpus-dir", help="directory holding train.txt, valid.txt and test.txt")
    g.add_argument("--train-file")
    g.add_argument("--valid-file")
    g.add_argument("--test-file")


def _config_from_args(args) -> TrainConfig:
    raw = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        return resolve_config(args.preset, args.config, parse_overrides(raw))
    except (KeyError, ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc


def _corpus_paths(args) -> tuple[Path, Path, Path | None]:
    if args.train_file or args.valid_file:
        if not (args.train_file and args.valid_file):
            raise UsageError("--train-file and --valid-file go together")
        return Path(args.train_file), Path(args.valid_file), Path(args.test_file) if args.test_file else None
    d = Path(args.corpus_dir) if args.corpus_dir else bundled_corpus_dir("desk")
    test = d / "test.txt"
    return d / "train.txt", d / "valid.txt", test if test.exists() else None


def _load_corpus(args, cfg: TrainConfig, vocab: Vocab | None = None) -> Corpus:
    tr, va, te = _corpus_paths(args)
    try:
        return load_corpus(tr, va, te, level=cfg.level, max_vocab=cfg.max_vocab or None, vocab=vocab)
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read corpus: {exc}") from exc


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    corpus = _load_corpus(args, cfg)
    out = Path(args.out_dir)
    metrics = Path(args.metrics_out) if args.metrics_out else out / "metrics.csv"
    log.info("vocab %d | train %d tokens | valid %d tokens", len(corpus.vocab), corpus.train.size, corpus.valid.size)
    try:
        result = train(cfg, corpus, out, metrics, checkpoint_every_epoch=args.keep_checkpoints)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    finally:
        if args.plot and metrics.exists():
            from .plotting import plot_training_curves

            plot_training_curves(read_metrics(metrics), metrics.with_suffix(".png"))
    best = result.best_valid_ppl
    print(f"best validation perplexity {best:.6g} ({result.best_checkpoint})")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, cfg, vocab = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from exc
    path = Path(args.data)
    try:
        tokens = read_corpus(path, cfg.level)
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    n_out = model.head.V.shape[1]
    if vocab is None or len(vocab) != n_out:
        raise UsageError(f"vocabulary mismatch: checkpoint vocab {None if vocab is None else len(vocab)}, head width {n_out}")
    ids = vocab.encode(tokens)
    eval_mode = args.eval_mode or cfg.eval_mode
    k = args.eval_k or cfg.eval_k
    res = evaluate(model, ids, args.batch_size or cfg.eval_batch_size, args.unroll or cfg.unroll, eval_mode, k, cfg.seed)
    print(f"loss {res.loss!r}")
    print(f"perplexity {res.perplexity!r}")
    print(f"tokens {res.n_tokens}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["data", "eval_mode", "k", "loss", "perplexity", "n_tokens"])
            w.writerow([str(path), eval_mode, k, repr(res.loss), repr(res.perplexity), res.n_tokens])
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if args.checkpoint:
        try:
            model, cfg, vocab = load_checkpoint(args.checkpoint)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot load checkpoint: {exc}") from exc
        corpus = _load_corpus(args, cfg, vocab)
    else:
        cfg = _config_from_args(args)
        corpus = _load_corpus(args, cfg)
        model = model_from_config(cfg, len(corpus.vocab), nx.make_rng(cfg.seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.txt")
    unb_rng, jen_rng, reg_rng = nx.split_rng(nx.make_rng(cfg.seed), 3)

    T, B = args.steps, args.batch
    if corpus.valid.size < (T + 1) * B:
        raise UsageError(f"validation split has {corpus.valid.size} tokens, need {(T + 1) * B}")
    seq = corpus.valid[: (T + 1) * B].reshape(B, T + 1).T
    inputs, targets = seq[:-1], seq[1:]
    violations = []

    # unbiasedness, conditioned on the noise-free state after the first sequence's prefix
    det = model.deterministic()
    warm = det.zero_state(1)
    for t in range(T - 1):
        _, warm = model_step(det, det.embed(inputs[t, :1]), warm, None)
    unb = check_unbiasedness(model, int(inputs[T - 1, 0]), warm, args.unbiasedness_samples, unb_rng)
    with open(out / "unbiasedness.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "unit", "z_score", "mean_deviation"])
        for l in range(unb.z_scores.shape[0]):
            for u in range(unb.z_scores.shape[1]):
                w.writerow([l, u, repr(float(unb.z_scores[l, u])), repr(float(unb.mean_deviation[l, u]))])
    biased = unb.biased
    print(f"unbiasedness: max |z| = {unb.max_abs_z:.3f} over {unb.n_samples} samples -> {'VIOLATED' if biased else 'ok'}")
    if args.expect_biased:
        if not biased:
            violations.append("expected an unbiasedness violation but none was detected")
    elif biased:
        violations.append(f"unbiasedness violated (max |z| = {unb.max_abs_z:.3f} > {unb.threshold})")

    # Jensen gap of the K-rollout objective
    with open(out / "jensen.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "bound", "log_mean", "gap"])
        for k, child in zip(args.jensen_k, nx.split_rng(jen_rng, len(args.jensen_k))):
            jg = jensen_gap(model, inputs, targets, k, child)
            w.writerow([k, repr(jg.bound), repr(jg.log_mean), repr(jg.gap)])
            print(f"jensen K={k}: gap = {jg.gap:.6g}")
            if jg.gap < -1e-12:
                violations.append(f"Jensen gap {jg.gap} < -1e-12 at K={k}")

    reports = decomposition_check(
        model, inputs, targets, args.gammas, args.n_samples, reg_rng, args.n_outer, args.n_inner, args.taylor_method
    )
    with open(out / "regularizer.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})
            print(
                f"gamma {r.gamma:g}: reg_empirical {r.reg_empirical:.5g} ± {r.reg_stderr:.2g}, "
                f"reg_taylor {r.reg_taylor:.5g}"
            )
    if args.plot:
        from .plotting import plot_decomposition, plot_zscores

        plot_zscores(unb.z_scores, out / "unbiasedness.png", unb.threshold)
        plot_decomposition([r.row() for r in reports], out / "regularizer.png")

    for v in violations:
        print(f"INVARIANT VIOLATION: {v}", file=sys.stderr)
    return EXIT_INVARIANT if violations else EXIT_OK


def cmd_plot(args) -> int:
    runs = {}
    for spec in args.metrics:
        label, _, path = spec.rpartition("=")
        path = Path(path)
        try:
            runs[label or path.parent.name or path.stem] = read_metrics(path)
        except OSError as exc:
            raise UsageError(str(exc)) from exc
    from .plotting import plot_run_comparison

    print(plot_run_comparison(runs, args.out, args.title))
    return EXIT_OK


def cmd_show_config(args) -> int:
    sys.stdout.write(format_config(_config_from_args(args)))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="noisin", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and results")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and log per-epoch metrics")
    _add_config_flags(t)
    _add_corpus_flags(t)
    t.add_argument("--out-dir", default="run", help="checkpoint and echoed-config directory")
    t.add_argument("--metrics-out", metavar="CSV", help="metrics path (default OUT_DIR/metrics.csv)")
    t.add_argument("--keep-checkpoints", action="store_true", help="keep every improving epoch's checkpoint")
    t.add_argument("--plot", action="store_true", help="render the curves next to the metrics CSV")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="perplexity of a checkpoint on a text file")
    e.add_argument("checkpoint")
    e.add_argument("data", help="text file, tokenized at the checkpoint's level")
    e.add_argument("--eval-mode", choices=("noise-off", "k-sample"))
    e.add_argument("--eval-k", type=int)
    e.add_argument("--batch-size", type=int)
    e.add_argument("--unroll", type=int)
    e.add_argument("--out", metavar="CSV")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="unbiasedness, Jensen gap and risk decomposition")
    d.add_argument("--checkpoint", help="diagnose a trained model instead of a fresh init")
    _add_config_flags(d)
    _add_corpus_flags(d)
    d.add_argument("--out-dir", default="diagnostics")
    d.add_argument("--gammas", type=_floats, default=[0.1, 0.5, 1.0], help="comma-separated spreads; 0 means off")
    d.add_argument("--steps", type=int, default=5, help="sequence length used by the estimators")
    d.add_argument("--batch", type=int, default=2, help="sequences used by the estimators")
    d.add_argument("--n-samples", type=int, default=2000, help="noise draws for the empirical risk")
    d.add_argument("--n-outer", type=int, default=128)
    d.add_argument("--n-inner", type=int, default=32)
    d.add_argument("--taylor-method", choices=("mc", "analytic"), default="mc")
    d.add_argument("--unbiasedness-samples", type=int, default=100_000)
    d.add_argument("--jensen-k", type=_ints, default=[2, 16, 64])
    d.add_argument("--expect-biased", action="store_true", help="an unbiasedness violation is the expected outcome")
    d.add_argument("--plot", action="store_true")
    d.set_defaults(func=cmd_diagnose)

    pl = sub.add_parser("plot", help="compare train/validation curves of several runs")
    pl.add_argument("metrics", nargs="+", metavar="[LABEL=]CSV")
    pl.add_argument("--out", default="comparison.png")
    pl.add_argument("--title", default="")
    pl.set_defaults(func=cmd_plot)

    c = sub.add_parser("config", help="print the fully resolved configuration")
    _add_config_flags(c)
    c.set_defaults(func=cmd_show_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"noisin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"noisin: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ContractViolation as exc:
        print(f"noisin: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except np.linalg.LinAlgError as exc:
        print(f"noisin: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
