"""Per-word text embeddings.

Two sources: a deterministic pseudo-random generator keyed by the token's
FNV-1a hash, and a JSON cache of externally computed vectors. Cache misses
fall back to the pseudo generator and are logged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, InvalidTokenError

DEFAULT_D_EMBED = 64
DEFAULT_SEED = 0

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def pseudo_embed(word: str, d_embed: int = DEFAULT_D_EMBED, global_seed: int = DEFAULT_SEED) -> np.ndarray:
    if not word:
        raise InvalidTokenError("cannot embed an empty token")
    rng = np.random.default_rng((fnv1a_64(word) ^ (global_seed & _MASK64)) & _MASK64)
    v = rng.standard_normal(d_embed)
    return v / np.linalg.norm(v)


def load_cache(path, d_embed: int | None = None) -> dict[str, np.ndarray]:
    """Read ``{word: [floats]}`` and L2-normalise each vector."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read embedding cache ({exc})") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: embedding cache must be a JSON object")
    out: dict[str, np.ndarray] = {}
    dims = set()
    for word, values in raw.items():
        try:
            v = np.asarray(values, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}: entry {word!r} is not a float array") from exc
        if v.ndim != 1 or v.size == 0:
            raise FormatError(f"{path}: entry {word!r} is not a flat float array")
        dims.add(v.size)
        norm = np.linalg.norm(v)
        if not np.isfinite(norm) or norm == 0.0:
            raise FormatError(f"{path}: entry {word!r} has zero or non-finite norm")
        out[word] = v / norm
    if len(dims) > 1:
        raise DimensionError(f"{path}: mixed embedding dimensionalities {sorted(dims)}")
    if d_embed is not None and dims and dims != {d_embed}:
        raise DimensionError(f"{path}: cache dimensionality {dims.pop()} != d_embed {d_embed}")
    return out


@dataclass
class EmbeddingSource:
    kind: str = "pseudo"
    d_embed: int = DEFAULT_D_EMBED
    cache_path: str | None = None
    global_seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.kind not in ("pseudo", "file_cache"):
            raise ConfigurationError(f"unknown embedding source {self.kind!r}")
        if self.kind == "file_cache" and not self.cache_path:
            raise ConfigurationError("file_cache embeddings need a cache_path")
        if self.d_embed < 1:
            raise ConfigurationError("d_embed must be positive")


@dataclass
class Embedder:
    """Looks words up in the cache (if any) and records every miss."""

    source: EmbeddingSource = field(default_factory=EmbeddingSource)
    miss_log: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._cache = (load_cache(self.source.cache_path, self.source.d_embed)
                       if self.source.kind == "file_cache" else {})

    def embed(self, word: str) -> np.ndarray:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        self.miss_log.append(word)
        return pseudo_embed(word, self.source.d_embed, self.source.global_seed)

    def embed_utterance(self, words: Sequence[str]) -> np.ndarray:
        if not words:
            return np.zeros((0, self.source.d_embed))
        return np.stack([self.embed(w) for w in words])


def embed_utterance(words: Sequence[str], source: EmbeddingSource) -> tuple[np.ndarray, list[str]]:
    """Return ``(T, d_embed)`` vectors and the list of words that missed the cache."""
    emb = Embedder(source)
    return emb.embed_utterance(words), emb.miss_log
