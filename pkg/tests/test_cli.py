import csv
import math

import pytest

from noisin import cli
from noisin import numerics as nx
from noisin.checkpoint import save_checkpoint
from noisin.config import TrainConfig, model_from_config, resolve_config
from noisin.data import bundled_corpus_dir, build_vocab, load_bundled_corpus
from noisin.numerics import NumericalError
from noisin.training import read_metrics

from lm_fixture import IDS, hand_perplexity, write_fixture


def run(*argv):
    return cli.main(["-q", *map(str, argv)])


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    src = bundled_corpus_dir()
    for name, n in (("train", 6000), ("valid", 1500), ("test", 1500)):
        (d / f"{name}.txt").write_text((src / f"{name}.txt").read_text()[:n])
    return d


TINY = ("--preset", "desk", "--hidden", "16", "--batch-size", "8", "--unroll", "20")


# ---------------------------------------------------------------------------
# eval on a hand-computed fixture


@pytest.fixture
def fixture_checkpoint(tmp_path):
    return write_fixture(tmp_path)


def test_eval_matches_hand_computation(fixture_checkpoint, capsys, tmp_path):
    ck, data, vocab = fixture_checkpoint
    assert vocab.encode(["a", "b", "a", "<eos>"]).tolist() == IDS
    out = tmp_path / "eval.csv"
    assert run("eval", ck, data, "--out", out) == 0
    lines = dict(line.split(" ", 1) for line in capsys.readouterr().out.splitlines())
    expected, nll = hand_perplexity(IDS)
    assert len(nll) == 3 and int(lines["tokens"]) == 3
    assert abs(float(lines["perplexity"]) - expected) <= 1e-10
    (row,) = csv.DictReader(out.open())
    assert abs(float(row["loss"]) - sum(nll) / 3) <= 1e-12


def test_eval_vocab_mismatch(fixture_checkpoint, tmp_path):
    ck, data, _ = fixture_checkpoint
    cfg = TrainConfig(cell="ernn-tanh", layers=1, hidden=4)
    model = model_from_config(cfg, 4, nx.make_rng(0))
    bad = save_checkpoint(tmp_path / "bad.npz", model, cfg, build_vocab(["a", "b", "c"]))
    assert run("eval", bad, data) == 1


def test_eval_missing_files(fixture_checkpoint, tmp_path):
    ck, data, _ = fixture_checkpoint
    assert run("eval", tmp_path / "none.npz", data) == 1
    assert run("eval", ck, tmp_path / "none.txt") == 1


# ---------------------------------------------------------------------------
# train


def test_zero_epochs_untrained_perplexity(tmp_path):
    out = tmp_path / "run"
    assert run("train", "--preset", "desk", "--max-epochs", "0", "--out-dir", out) == 0
    (row,) = read_metrics(out / "metrics.csv")
    vocab_size = len(load_bundled_corpus().vocab)
    assert row["epoch"] == 0 and row["train_loss"] is None
    assert abs(row["valid_ppl"] / vocab_size - 1) <= 0.05
    assert (out / "config.txt").read_text() == (out / "metrics.config.txt").read_text()
    assert (out / "best.npz").exists()


def test_eval_reproduces_training_validation(small_corpus, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", *TINY, "--max-epochs", "1", "--corpus-dir", small_corpus, "--out-dir", out) == 0
    rows = read_metrics(out / "metrics.csv")
    best = min(rows, key=lambda r: r["valid_ppl"])
    capsys.readouterr()
    assert run("eval", out / "best.npz", small_corpus / "valid.txt") == 0
    lines = dict(line.split(" ", 1) for line in capsys.readouterr().out.splitlines())
    assert float(lines["perplexity"]) == best["valid_ppl"]


def test_metrics_invariants(small_corpus, tmp_path):
    out = tmp_path / "run"
    assert run("train", *TINY, "--max-epochs", "4", "--lr", "40", "--corpus-dir", small_corpus,
               "--out-dir", out, "--plot") == 0
    rows = read_metrics(out / "metrics.csv")
    assert [r["epoch"] for r in rows] == [0, 1, 2, 3, 4]
    # replay the schedule: divide by 1.2 whenever validation is strictly worse than the best so far
    lr, best = 40.0, rows[0]["valid_ppl"]
    for row in rows[1:]:
        assert abs(row["train_ppl"] - math.exp(row["train_loss"])) <= 1e-12 * row["train_ppl"]
        assert abs(row["valid_ppl"] - math.exp(row["valid_loss"])) <= 1e-12 * row["valid_ppl"]
        assert row["lr"] == lr
        if row["valid_ppl"] < best:
            best = row["valid_ppl"]
        elif row["valid_ppl"] > best:
            lr /= 1.2
    assert (out / "metrics.png").stat().st_size > 0


def test_k_sample_eval_is_reproducible(small_corpus, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", *TINY, "--max-epochs", "0", "--noise-mode", "multiplicative", "--gamma", "0.5",
               "--corpus-dir", small_corpus, "--out-dir", out) == 0
    results = []
    for _ in range(2):
        capsys.readouterr()
        assert run("eval", out / "best.npz", small_corpus / "valid.txt", "--eval-mode", "k-sample", "--eval-k", "1") == 0
        results.append(capsys.readouterr().out)
    assert results[0] == results[1]
    capsys.readouterr()
    run("eval", out / "best.npz", small_corpus / "valid.txt")
    assert capsys.readouterr().out != results[0]


def test_numerical_failure_exit_code(monkeypatch, small_corpus, tmp_path):
    def boom(*a, **k):
        raise NumericalError("loss is nan")

    monkeypatch.setattr(cli, "train", boom)
    assert run("train", *TINY, "--corpus-dir", small_corpus, "--out-dir", tmp_path) == 2


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as e:
        run("train", "--no-such-flag")
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        run()
    assert e.value.code == 1
    assert run("config", "--hidden", "abc") == 1
    assert run("config", "--cell", "gru") == 1
    assert run("train", "--train-file", tmp_path / "x.txt") == 1
    assert run("train", "--corpus-dir", tmp_path, "--out-dir", tmp_path / "r") == 1


def test_config_echo(capsys, tmp_path):
    assert run("config", "--preset", "desk", "--gamma", "0.5") == 0
    text = capsys.readouterr().out
    p = tmp_path / "c.txt"
    p.write_text(text)
    assert resolve_config(config_file=p) == resolve_config("desk", overrides={"gamma": 0.5})


# ---------------------------------------------------------------------------
# diagnose

FAST = ("--n-samples", "1000", "--n-outer", "8", "--n-inner", "4", "--unbiasedness-samples", "20000")


def test_diagnose_off_mode(tmp_path):
    out = tmp_path / "d"
    assert run("diagnose", *TINY, "--noise-mode", "off", "--out-dir", out, *FAST) == 0
    z = [float(r["z_score"]) for r in csv.DictReader((out / "unbiasedness.csv").open())]
    gaps = [float(r["gap"]) for r in csv.DictReader((out / "jensen.csv").open())]
    assert len(z) == 16 and all(v == 0.0 for v in z)
    assert len(gaps) == 3 and all(g == 0.0 for g in gaps)


def test_diagnose_noisin_report(tmp_path):
    out = tmp_path / "d"
    assert run("diagnose", *TINY, "--noise-mode", "multiplicative", "--gamma", "0.5", "--gammas", "0.1,0.5",
               "--out-dir", out, "--plot", *FAST) == 0
    rows = list(csv.DictReader((out / "regularizer.csv").open()))
    assert [float(r["gamma"]) for r in rows] == [0.1, 0.5]
    assert all(r["mode"] == "multiplicative" for r in rows)
    assert all(float(r["reg_empirical"]) >= -3 * float(r["reg_stderr"]) for r in rows)
    assert (out / "regularizer.png").exists() and (out / "unbiasedness.png").exists()
    assert all(float(r["gap"]) >= -1e-12 for r in csv.DictReader((out / "jensen.csv").open()))


@pytest.fixture
def dropout_checkpoint(tmp_path):
    corpus = load_bundled_corpus()
    cfg = resolve_config("desk", overrides=dict(hidden=8, dropout_input=0.5, dropout_recurrent=0.4))
    model = model_from_config(cfg, len(corpus.vocab), nx.make_rng(cfg.seed))
    for k, p in model.parameters().items():
        if k.startswith("layer"):
            p.data = p.data * 3  # trained gates are far from the linear regime
    return save_checkpoint(tmp_path / "dropout.npz", model, cfg, corpus.vocab)


def test_diagnose_dropout_expected_bias(dropout_checkpoint, tmp_path):
    args = ("diagnose", "--checkpoint", dropout_checkpoint, "--out-dir", tmp_path / "d", *FAST[:-1], "100000")
    assert run(*args, "--expect-biased") == 0
    assert run(*args) == 3


def test_diagnose_expect_biased_without_bias(tmp_path):
    assert run("diagnose", *TINY, "--noise-mode", "additive", "--out-dir", tmp_path, "--expect-biased", *FAST) == 3


def test_plot_subcommand(small_corpus, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d, extra in ((a, ()), (b, ("--noise-mode", "multiplicative", "--gamma", "0.5"))):
        assert run("train", *TINY, "--max-epochs", "1", "--corpus-dir", small_corpus, "--out-dir", d, *extra) == 0
    png = tmp_path / "cmp.png"
    assert run("plot", f"base={a / 'metrics.csv'}", f"noisin={b / 'metrics.csv'}", "--out", png) == 0
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert run("plot", tmp_path / "missing.csv") == 1
