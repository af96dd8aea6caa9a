"""Regenerate the bundled desk-scale character corpus.

The text is the CPython interactive help topics (``pydoc_data.topics``,
PSF license), concatenated in sorted-key order and split into
train/valid/test files of fixed byte budgets.
"""

import argparse
from pathlib import Path

import pydoc_data.topics as topics

SIZES = {"train": 80_000, "valid": 10_000, "test": 10_000}


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/noisin/corpora/desk"))
    args = ap.parse_args()
    text = "\n".join(topics.topics[k] for k in sorted(topics.topics))
    # ascii only, collapse trailing spaces, drop blank-line runs
    text = text.encode("ascii", "ignore").decode()
    lines = [ln.rstrip() for ln in text.splitlines()]
    cleaned, blank = [], False
    for ln in lines:
        if not ln:
            if blank:
                continue
            blank = True
        else:
            blank = False
        cleaned.append(ln)
    text = "\n".join(cleaned) + "\n"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pos = 0
    for name, size in SIZES.items():
        chunk = text[pos:pos + size]
        cut = chunk.rfind("\n") + 1
        chunk = chunk[:cut]
        (out / f"{name}.txt").write_text(chunk, encoding="utf-8")
        pos += cut


if __name__ == "__main__":
    main()
