"""Checkpoint container: a zip of ``meta.json`` plus one ``.npy`` per tensor.

Entries carry a fixed timestamp so identical models produce identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointError, ParseError
from .bilstm import BiLstmConfig, BiLstmTagger
from .transformer import TransformerConfig, TransformerTagger

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)

ARCHITECTURES = {
    "bilstm": (BiLstmConfig, BiLstmTagger),
    "transformer": (TransformerConfig, TransformerTagger),
}


def build_model(architecture: str, config: dict, seed: int = 0):
    try:
        cfg_cls, model_cls = ARCHITECTURES[architecture]
    except KeyError:
        raise CheckpointError(f"unknown architecture {architecture!r}") from None
    return model_cls(cfg_cls(**config), seed=seed)


@dataclass
class Checkpoint:
    architecture: str
    config: dict
    params: dict
    feature_mode: str = "prosody"
    embedding: dict = field(default_factory=dict)
    normalizer: dict | None = None  # {"mean": array, "std": array}
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, **kwargs) -> "Checkpoint":
        return cls(model.architecture, model.config.to_dict(), model.state_dict(), **kwargs)

    def build(self):
        model = build_model(self.architecture, self.config, self.seed)
        load_state(model, self)
        return model


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "architecture": ckpt.architecture,
        "config": ckpt.config,
        "feature_mode": ckpt.feature_mode,
        "embedding": ckpt.embedding,
        "seed": ckpt.seed,
        "extra": ckpt.extra,
        "params": {k: list(v.shape) for k, v in ckpt.params.items()},
        "has_normalizer": ckpt.normalizer is not None,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _EPOCH), json.dumps(meta, sort_keys=True))
        for name, arr in ckpt.params.items():
            zf.writestr(zipfile.ZipInfo(f"params/{name}.npy", _EPOCH), _npy_bytes(arr))
        if ckpt.normalizer is not None:
            for key in ("mean", "std"):
                zf.writestr(zipfile.ZipInfo(f"normalizer/{key}.npy", _EPOCH),
                            _npy_bytes(np.asarray(ckpt.normalizer[key], dtype=np.float64)))


def load_checkpoint(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
            params = {name: np.load(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
                      for name in meta["params"]}
            normalizer = None
            if meta.get("has_normalizer"):
                normalizer = {k: np.load(io.BytesIO(zf.read(f"normalizer/{k}.npy")), allow_pickle=False)
                              for k in ("mean", "std")}
    except CheckpointError:
        raise
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no such checkpoint") from exc
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as exc:
        raise ParseError(f"{path}: corrupted checkpoint ({exc})") from exc
    return Checkpoint(meta["architecture"], meta["config"], params, meta.get("feature_mode", "prosody"),
                      meta.get("embedding", {}), normalizer, int(meta.get("seed", 0)), meta.get("extra", {}))


def load_state(model, ckpt: Checkpoint) -> None:
    """Copy parameters into ``model``; names, shapes and architecture must match exactly."""
    if ckpt.architecture != model.architecture:
        raise CheckpointError(
            f"checkpoint holds a {ckpt.architecture} model, target is {model.architecture}")
    own = dict(model.named_parameters())
    missing = sorted(set(own) - set(ckpt.params))
    unexpected = sorted(set(ckpt.params) - set(own))
    wrong = sorted(n for n in set(own) & set(ckpt.params) if own[n].shape != ckpt.params[n].shape)
    if missing or unexpected or wrong:
        raise CheckpointError(
            f"parameter mismatch: missing={missing} unexpected={unexpected} wrong_shape={wrong}")
    for name, p in own.items():
        p.data = np.array(ckpt.params[name], dtype=np.float64)
        p.grad = None


def load_into(model, path) -> Checkpoint:
    ckpt = load_checkpoint(Path(path))
    load_state(model, ckpt)
    return ckpt
