"""Corpus ingestion, vocabularies and contiguous truncated-BPTT batching."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

UNK = "<unk>"
EOS = "<eos>"


def tokenize(text: str | bytes, level: str = "word") -> list[str]:
    """Word level: whitespace split with an eos token closing every line.

    Char level: the sequence of unicode scalars, newlines included.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")  # raises UnicodeDecodeError on invalid input
    if level == "char":
        return list(text)
    if level != "word":
        raise ValueError(f"unknown tokenization level {level!r}")
    tokens: list[str] = []
    for line in text.splitlines():
        tokens.extend(line.split())
        tokens.append(EOS)
    return tokens


def detokenize(tokens: list[str], level: str = "word") -> str:
    if level == "char":
        return "".join(tokens)
    lines, cur = [], []
    for tok in tokens:
        if tok == EOS:
            lines.append(" ".join(cur))
            cur = []
        else:
            cur.append(tok)
    text = "".join(line + "\n" for line in lines)
    return text + " ".join(cur)


def normalize_words(text: str) -> str:
    """What a word-level round trip preserves: single spaces, one newline per line."""
    return "".join(" ".join(line.split()) + "\n" for line in text.splitlines())


@dataclass
class Vocab:
    itos: list[str]

    def __post_init__(self):
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary tokens must be unique")
        if UNK not in self.stoi or EOS not in self.stoi:
            raise ValueError("vocabulary must contain unk and eos")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    def encode(self, tokens: list[str]) -> np.ndarray:
        unk = self.unk_id
        return np.array([self.stoi.get(t, unk) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, tok in enumerate(self.itos):
                fh.write(f"{_escape(tok)}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        itos = []
        with open(path, encoding="utf-8", newline="\n") as fh:
            for line in fh:
                tok, idx = line.rstrip("\n").rsplit("\t", 1)
                if int(idx) != len(itos):
                    raise ValueError(f"vocabulary ids out of order at {idx}")
                itos.append(_unescape(tok))
        return cls(itos)


def _escape(tok: str) -> str:
    return tok.replace("\\", "\\\\").replace("\n", "\\n").replace("\t", "\\t")


def _unescape(tok: str) -> str:
    out, i = [], 0
    while i < len(tok):
        if tok[i] == "\\" and i + 1 < len(tok):
            out.append({"n": "\n", "t": "\t", "\\": "\\"}[tok[i + 1]])
            i += 2
        else:
            out.append(tok[i])
            i += 1
    return "".join(out)


def build_vocab(tokens: list[str], max_size: int | None = None) -> Vocab:
    """unk and eos first, then tokens by decreasing count (ties lexicographic)."""
    if max_size is not None and max_size < 2:
        raise ValueError("max_size must leave room for unk and eos")
    counts = Counter(t for t in tokens if t not in (UNK, EOS))
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[: max_size - 2]
    return Vocab([UNK, EOS] + ranked)


def read_corpus(path: str | Path, level: str = "word") -> list[str]:
    data = Path(path).read_bytes()
    return tokenize(data, level)


@dataclass
class BatchStream:
    """Corpus laid out as ``batch_size`` contiguous rows, read in windows."""

    data: np.ndarray        # (batch_size, row_length)
    window: int

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def row_length(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return len(range(0, self.row_length - 1, self.window))

    def windows(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Time-major (inputs, targets) pairs; targets are inputs shifted by one step."""
        L = self.row_length
        for start in range(0, L - 1, self.window):
            stop = min(start + self.window, L - 1)
            yield self.data[:, start:stop].T, self.data[:, start + 1:stop + 1].T

    @property
    def n_targets(self) -> int:
        return self.batch_size * (self.row_length - 1)


def batchify(ids, batch_size: int, window: int) -> BatchStream:
    ids = np.asarray(ids, dtype=np.int64)
    if batch_size < 1 or window < 1:
        raise ValueError("batch_size and window must be positive")
    if ids.size < batch_size * (window + 1):
        raise ValueError(
            f"corpus of {ids.size} tokens is too small for batch {batch_size} and window {window}"
        )
    row = ids.size // batch_size
    return BatchStream(ids[: row * batch_size].reshape(batch_size, row), window)


@dataclass
class Corpus:
    vocab: Vocab
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray | None = None


def load_corpus(
    train: str | Path,
    valid: str | Path,
    test: str | Path | None = None,
    level: str = "word",
    max_vocab: int | None = None,
    vocab: Vocab | None = None,
) -> Corpus:
    train_tokens = read_corpus(train, level)
    vocab = vocab or build_vocab(train_tokens, max_vocab)
    return Corpus(
        vocab,
        vocab.encode(train_tokens),
        vocab.encode(read_corpus(valid, level)),
        vocab.encode(read_corpus(test, level)) if test else None,
    )


def bundled_corpus_dir(name: str = "desk") -> Path:
    """Directory of a corpus shipped with the package (train/valid/test.txt)."""
    from importlib.resources import files

    path = Path(str(files("noisin") / "corpora" / name))
    if not (path / "train.txt").is_file():
        raise FileNotFoundError(f"no bundled corpus named {name!r}")
    return path


def load_bundled_corpus(name: str = "desk", level: str = "char", max_vocab: int | None = None) -> Corpus:
    d = bundled_corpus_dir(name)
    return load_corpus(d / "train.txt", d / "valid.txt", d / "test.txt", level=level, max_vocab=max_vocab)
