"""Transformer encoder-decoder tagger with an SOS-shifted causal label decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..corpus import SOS
from ..errors import ConfigurationError
from .layers import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, positional_encoding

N_CLASSES = 3


@dataclass
class TransformerConfig:
    input_dim: int
    model_dim: int = 448
    num_layers: int = 3
    num_heads: int = 8
    ffn_dim: int | None = None
    dropout: float = 0.25
    max_len: int = 512

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ConfigurationError(f"{self.num_heads} heads do not divide model_dim {self.model_dim}")
        if self.model_dim % 2:
            raise ConfigurationError(f"model_dim must be even, got {self.model_dim}")
        if self.num_layers < 1:
            raise ConfigurationError("num_layers must be >= 1")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.model_dim

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderLayer(Module):
    """Pre-norm: ``x + SA(LN(x))`` then ``x + FFN(LN(x))``."""

    def __init__(self, c: TransformerConfig, rng):
        self.ln1 = LayerNorm(c.model_dim)
        self.attn = MultiHeadAttention(c.model_dim, c.num_heads, rng)
        self.ln2 = LayerNorm(c.model_dim)
        self.ffn = FeedForward(c.model_dim, c.ffn_dim, rng)
        self._p = c.dropout

    def __call__(self, x, mask, training, rng):
        h = self.ln1(x)
        x = x + ad.dropout(self.attn(h, h, mask), self._p, training, rng)
        return x + ad.dropout(self.ffn(self.ln2(x), training, rng, self._p), self._p, training, rng)


class DecoderLayer(Module):
    def __init__(self, c: TransformerConfig, rng):
        self.ln1 = LayerNorm(c.model_dim)
        self.self_attn = MultiHeadAttention(c.model_dim, c.num_heads, rng)
        self.ln2 = LayerNorm(c.model_dim)
        self.cross_attn = MultiHeadAttention(c.model_dim, c.num_heads, rng)
        self.ln3 = LayerNorm(c.model_dim)
        self.ffn = FeedForward(c.model_dim, c.ffn_dim, rng)
        self._p = c.dropout

    def __call__(self, y, memory, self_mask, mem_mask, training, rng):
        h = self.ln1(y)
        y = y + ad.dropout(self.self_attn(h, h, self_mask, causal=True), self._p, training, rng)
        y = y + ad.dropout(self.cross_attn(self.ln2(y), memory, mem_mask), self._p, training, rng)
        return y + ad.dropout(self.ffn(self.ln3(y), training, rng, self._p), self._p, training, rng)


def shift_right(targets: np.ndarray) -> np.ndarray:
    """Decoder inputs ``[SOS, y_1 .. y_{T-1}]``."""
    targets = np.asarray(targets, dtype=np.int64)
    prev = np.full(targets.shape, SOS, dtype=np.int64)
    prev[:, 1:] = targets[:, :-1]
    return prev


class TransformerTagger(Module):
    architecture = "transformer"

    def __init__(self, config: TransformerConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, 11])
        c = config
        self.proj = Linear(c.input_dim, c.model_dim, rng)
        self.encoder = [EncoderLayer(c, rng) for _ in range(c.num_layers)]
        self.enc_norm = LayerNorm(c.model_dim)
        self.bridge = Linear(2 * c.model_dim, c.model_dim, rng)
        self.label_embed = Embedding(SOS + 1, c.model_dim, rng)
        self.decoder = [DecoderLayer(c, rng) for _ in range(c.num_layers)]
        self.dec_norm = LayerNorm(c.model_dim)
        self.fc = Linear(c.model_dim, N_CLASSES, rng)
        self._pe = positional_encoding(c.max_len, c.model_dim)

    def _pe_rows(self, T: int) -> np.ndarray:
        if T > self._pe.shape[0]:
            raise ConfigurationError(f"sequence length {T} exceeds max_len {self._pe.shape[0]}")
        return self._pe[:T]

    def encode(self, X, mask, training: bool = False, rng=None) -> Tensor:
        """Memory ``M' = W [M ; P]`` where ``P`` is the projected input."""
        c = self.config
        X = ad.as_tensor(X)
        P = self.proj(X)
        h = ad.dropout(P + self._pe_rows(X.shape[1]), c.dropout, training, rng)
        for layer in self.encoder:
            h = layer(h, mask, training, rng)
        M = self.enc_norm(h)
        return self.bridge(ad.concat([M, P], axis=-1))

    def decode(self, memory, prev_labels, mask, training: bool = False, rng=None) -> Tensor:
        """Logits for each decoder position given ``prev_labels`` (SOS-prefixed)."""
        c = self.config
        prev_labels = np.asarray(prev_labels, dtype=np.int64)
        T = prev_labels.shape[1]
        mask = np.asarray(mask, dtype=bool)
        y = ad.dropout(self.label_embed(prev_labels) + self._pe_rows(T), c.dropout, training, rng)
        for layer in self.decoder:
            y = layer(y, memory, mask[:, :T], mask, training, rng)
        return self.fc(self.dec_norm(y))

    def forward(self, X, mask, targets, training: bool = False, rng=None) -> Tensor:
        """Teacher-forced ``(B, T, 3)`` logits."""
        mask = np.asarray(mask, dtype=bool)
        memory = self.encode(X, mask, training, rng)
        return self.decode(memory, shift_right(targets), mask, training, rng)

    __call__ = forward

    def greedy_decode(self, X, mask) -> np.ndarray:
        """Feed back the argmax label one position at a time; returns ``(B, T)`` ints."""
        mask = np.asarray(mask, dtype=bool)
        with ad.no_grad():
            memory = self.encode(X, mask)
            B, T = mask.shape
            prev = np.full((B, 1), SOS, dtype=np.int64)
            out = np.zeros((B, T), dtype=np.int64)
            for t in range(T):
                logits = self.decode(memory, prev, mask)
                out[:, t] = np.argmax(logits.data[:, t, :], axis=-1)
                prev = np.concatenate([prev, out[:, t:t + 1]], axis=1)
        return out

    predict = greedy_decode


def transformer_forward_teacher_forced(model: TransformerTagger, X, targets, mask, training=False, rng=None):
    return model.forward(X, mask, targets, training, rng)


def transformer_greedy_decode(model: TransformerTagger, X, mask) -> np.ndarray:
    return model.greedy_decode(X, mask)
