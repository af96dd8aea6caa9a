import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisin.data import (
    EOS,
    UNK,
    Vocab,
    batchify,
    build_vocab,
    bundled_corpus_dir,
    detokenize,
    load_bundled_corpus,
    load_corpus,
    normalize_words,
    tokenize,
)

FIXTURE = "the cat sat\non the  mat\nthe end\n"


class TestTokenize:
    def test_word(self):
        assert tokenize("a b\n") == ["a", "b", EOS]

    def test_empty(self):
        assert tokenize("") == []
        assert tokenize("", "char") == []

    def test_char(self):
        assert tokenize("ab\nc", "char") == ["a", "b", "\n", "c"]

    def test_invalid_utf8(self):
        with pytest.raises(UnicodeDecodeError):
            tokenize(b"\xff\xfe", "word")

    def test_fixture_ids(self):
        toks = tokenize(FIXTURE)
        vocab = build_vocab(toks)
        # counts: the 3, eos 3 (reserved), cat/end/mat/on/sat 1 each
        assert vocab.itos == [UNK, EOS, "the", "cat", "end", "mat", "on", "sat"]
        assert vocab.encode(toks).tolist() == [2, 3, 7, 1, 6, 2, 5, 1, 2, 4, 1]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.lists(st.text("abc xyz\t", max_size=12), max_size=4), max_size=5))
    def test_round_trip(self, lines):
        text = "\n".join(" ".join(ws) for ws in lines)
        text = text + "\n" if text else text
        assert detokenize(tokenize(text)) == normalize_words(text)

    def test_char_round_trip(self):
        assert detokenize(tokenize(FIXTURE, "char"), "char") == FIXTURE


class TestVocab:
    def test_frequency_cut(self):
        v = build_vocab(["a", "a", "b"], 3)
        assert v.itos == [UNK, EOS, "a"]
        assert v.encode(["b"]).tolist() == [v.unk_id]

    def test_no_cut(self):
        v = build_vocab(["a", "b", UNK], 10)
        assert v.encode(["a", "b"]).tolist() == [2, 3]
        assert v.encode([UNK]).tolist() == [v.unk_id]

    def test_tie_lexicographic(self):
        assert build_vocab(["b", "a"], 3).itos == [UNK, EOS, "a"]

    def test_min_size(self):
        with pytest.raises(ValueError):
            build_vocab(["a"], 1)

    def test_deterministic(self):
        toks = tokenize(FIXTURE * 3)
        assert build_vocab(toks, 5).itos == build_vocab(list(toks), 5).itos

    def test_dump_load(self, tmp_path):
        v = build_vocab(["a", "\t", "\n", "\\", "b"])
        p = tmp_path / "vocab.txt"
        v.dump(p)
        lines = p.read_text().splitlines()
        assert lines[0] == f"{UNK}\t0"
        assert Vocab.load(p).itos == v.itos

    def test_invariants(self):
        with pytest.raises(ValueError):
            Vocab(["a", "a", UNK, EOS])
        with pytest.raises(ValueError):
            Vocab(["a"])


class TestBatchify:
    def test_layout(self):
        bs = batchify(np.arange(10), 2, 2)
        x, y = next(bs.windows())
        np.testing.assert_array_equal(x.T, [[0, 1], [5, 6]])
        np.testing.assert_array_equal(y.T, [[1, 2], [6, 7]])

    def test_single_stream(self):
        bs = batchify(np.arange(9), 1, 3)
        xs = np.concatenate([x[:, 0] for x, _ in bs.windows()])
        np.testing.assert_array_equal(xs, np.arange(8))

    def test_remainder_dropped(self):
        bs = batchify(np.arange(11), 2, 2)
        assert bs.data.shape == (2, 5)

    def test_too_small(self):
        with pytest.raises(ValueError):
            batchify(np.arange(5), 2, 2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(20, 300), st.integers(1, 5), st.integers(1, 9))
    def test_reconstruction(self, n, batch, window):
        ids = np.arange(n)
        if n < batch * (window + 1):
            return
        bs = batchify(ids, batch, window)
        wins = list(bs.windows())
        xs = np.concatenate([x for x, _ in wins], axis=0).T
        ys = np.concatenate([y for _, y in wins], axis=0).T
        np.testing.assert_array_equal(xs, bs.data[:, :-1])
        np.testing.assert_array_equal(ys, bs.data[:, 1:])
        assert bs.n_targets == ys.size
        assert len(bs) == len(wins)


def test_load_corpus(tmp_path):
    for name, text in [("train", FIXTURE), ("valid", "the dog\n"), ("test", "")]:
        (tmp_path / f"{name}.txt").write_text(text)
    c = load_corpus(tmp_path / "train.txt", tmp_path / "valid.txt", tmp_path / "test.txt")
    assert c.vocab.decode(c.valid) == ["the", UNK, EOS]
    assert c.test.size == 0


def test_bundled_corpus():
    d = bundled_corpus_dir()
    sizes = sum((d / f).stat().st_size for f in ("train.txt", "valid.txt", "test.txt"))
    assert 90_000 <= sizes <= 110_000
    c = load_bundled_corpus()
    assert len(c.vocab) < 200
    assert c.train.size > 70_000
    with pytest.raises(FileNotFoundError):
        bundled_corpus_dir("nope")
