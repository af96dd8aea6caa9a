"""Portable parameter checkpoints.

A checkpoint is a zip archive (readable by ``numpy.load``) holding one
``.npy`` member per named parameter plus ``manifest.json`` with the format
version, shapes, dtypes, the resolved config and the vocabulary.  Member
timestamps are fixed so equal parameters give byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .config import TrainConfig, model_from_config
from .data import Vocab
from .model import NoisinModel
from .numerics import make_rng

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(
    path: str | Path,
    model: NoisinModel,
    config: TrainConfig | None = None,
    vocab: Vocab | None = None,
    extra: dict | None = None,
    params: dict[str, np.ndarray] | None = None,
) -> Path:
    """Write ``model``'s parameters (or the explicit ``params`` arrays) to ``path``."""
    path = Path(path)
    arrays = params if params is not None else {k: t.data for k, t in model.parameters().items()}
    manifest = {
        "format": "noisin-checkpoint",
        "version": FORMAT_VERSION,
        "parameters": {k: {"shape": list(a.shape), "dtype": str(a.dtype)} for k, a in arrays.items()},
        "config": config.to_dict() if config is not None else None,
        "vocab": vocab.itos if vocab is not None else None,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        for k, a in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
            _write_member(zf, f"{k}.npy", buf.getvalue())
        _write_member(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        if "manifest.json" not in zf.namelist():
            raise ValueError(f"{path} is not a noisin checkpoint")
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != "noisin-checkpoint":
            raise ValueError(f"{path} is not a noisin checkpoint")
        if manifest["version"] > FORMAT_VERSION:
            raise ValueError(f"checkpoint version {manifest['version']} is newer than supported")
        arrays = {}
        for k in manifest["parameters"]:
            arrays[k] = np.lib.format.read_array(io.BytesIO(zf.read(f"{k}.npy")), allow_pickle=False)
    return arrays, manifest


def load_checkpoint(path: str | Path) -> tuple[NoisinModel, TrainConfig, Vocab | None]:
    arrays, manifest = read_checkpoint(path)
    if manifest["config"] is None:
        raise ValueError("checkpoint carries no config; cannot rebuild the model")
    cfg = TrainConfig(**manifest["config"])
    vocab = Vocab(manifest["vocab"]) if manifest["vocab"] is not None else None
    vocab_size = len(vocab) if vocab is not None else arrays["head.V"].shape[1]
    model = model_from_config(cfg, vocab_size, make_rng(cfg.seed))
    load_parameters(model, arrays)
    return model, cfg, vocab


def load_parameters(model: NoisinModel, arrays: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    if set(params) != set(arrays):
        raise ValueError(f"parameter names differ: {sorted(set(params) ^ set(arrays))}")
    for k, p in params.items():
        if p.shape != arrays[k].shape:
            raise ValueError(f"shape mismatch for {k}: {p.shape} vs {arrays[k].shape}")
        p.data = arrays[k].astype(p.dtype, copy=True)
