"""BiLSTM encoder-decoder tagger with attention fusion and multi-head gating."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import ConfigurationError
from .layers import AttentionFusion, BiLSTMLayer, Linear, Module, MultiHeadAttention

N_CLASSES = 3


@dataclass
class BiLstmConfig:
    input_dim: int
    hidden_dim: int = 512  # both directions together
    num_layers: int = 1
    num_heads: int = 4
    attn_layers: int = 1
    dropout: float = 0.45
    proj_dim: int = 256
    fusion_dim: int = 64
    # "full": decoder sees the whole fused x_t; "embed": only the trailing text-embedding slice
    decoder_input: str = "full"
    embed_dim: int = 0

    def __post_init__(self):
        if self.hidden_dim % 2:
            raise ConfigurationError(f"hidden_dim must be even, got {self.hidden_dim}")
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(f"{self.num_heads} heads do not divide hidden_dim {self.hidden_dim}")
        if self.num_layers < 1 or self.attn_layers < 0:
            raise ConfigurationError("num_layers must be >= 1 and attn_layers >= 0")
        if self.decoder_input not in ("full", "embed"):
            raise ConfigurationError(f"decoder_input must be 'full' or 'embed', got {self.decoder_input!r}")
        if self.decoder_input == "embed" and not 0 < self.embed_dim <= self.input_dim:
            raise ConfigurationError("decoder_input='embed' needs 0 < embed_dim <= input_dim")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def skip_dim(self) -> int:
        return self.input_dim if self.decoder_input == "full" else self.embed_dim


class BiLstmTagger(Module):
    architecture = "bilstm"

    def __init__(self, config: BiLstmConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, 10])
        c = config
        half = c.hidden_dim // 2
        self.fusion = AttentionFusion(c.input_dim, c.fusion_dim, rng)
        self.proj = Linear(c.input_dim, c.proj_dim, rng)
        self.encoder = [BiLSTMLayer(c.proj_dim if i == 0 else c.hidden_dim, half, rng)
                        for i in range(c.num_layers)]
        self.attention = [MultiHeadAttention(c.hidden_dim, c.num_heads, rng) for _ in range(c.attn_layers)]
        self.decoder = [BiLSTMLayer(c.hidden_dim + c.skip_dim if i == 0 else c.hidden_dim, half, rng)
                        for i in range(c.num_layers)]
        self.fc = Linear(c.hidden_dim, N_CLASSES, rng)

    def forward(self, X, mask, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """``X`` is ``(B, T, d)``; returns ``(B, T, 3)`` logits."""
        c = self.config
        X = ad.as_tensor(X)
        mask = np.asarray(mask, dtype=bool)
        fused = self.fusion(X, mask)
        h = ad.dropout(ad.relu(self.proj(fused)), c.dropout, training, rng)
        for layer in self.encoder:
            h = layer(h, mask)
        o = h
        for mha in self.attention:
            o = mha(o, o, mask)
        gated = o * h
        skip = X if c.decoder_input == "full" else X[..., c.input_dim - c.embed_dim:]
        z = ad.concat([gated, skip], axis=-1)
        for layer in self.decoder:
            z = layer(z, mask)
        z = ad.dropout(z, c.dropout, training, rng)
        return self.fc(z)

    __call__ = forward

    def predict(self, X, mask) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.forward(X, mask).data, axis=-1)


def bilstm_forward(model: BiLstmTagger, X, mask, training: bool = False, rng=None) -> Tensor:
    return model.forward(X, mask, training, rng)
