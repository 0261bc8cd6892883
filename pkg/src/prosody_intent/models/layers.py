"""Building blocks shared by both taggers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import ConfigurationError, DimensionError


class Module:
    """Parameter container; parameters are ``Tensor`` attributes with ``requires_grad``."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _uniform(rng, d_in, (d_in, d_out))
        self.bias = _uniform(rng, d_in, (d_out,)) if bias else None

    def __call__(self, x) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.table = Tensor(rng.normal(0.0, 0.02, size=(n, dim)), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return ad.embedding(self.table, ids)


# ---------------------------------------------------------------- attention fusion


class AttentionFusion(Module):
    """Scalar weight per word: softmax over ``v . tanh(W x_t + b)``, then ``alpha_t * x_t``."""

    def __init__(self, d_in: int, d_att: int, rng: np.random.Generator):
        self.W = _uniform(rng, d_in, (d_in, d_att))
        self.b = _uniform(rng, d_in, (d_att,))
        self.v = _uniform(rng, d_att, (d_att, 1))

    def weights(self, X, mask) -> Tensor:
        X = ad.as_tensor(X)
        scores = ad.matmul(ad.tanh(ad.matmul(X, self.W) + self.b), self.v)
        return ad.softmax_masked(ad.reshape(scores, X.shape[:-1]), mask)

    def __call__(self, X, mask) -> Tensor:
        X = ad.as_tensor(X)
        alpha = self.weights(X, mask)
        return X * ad.reshape(alpha, X.shape[:-1] + (1,))


def attention_fusion(X, mask, params: AttentionFusion) -> Tensor:
    return params(X, mask)


# ---------------------------------------------------------------- LSTM


class LSTMCell(Module):
    """Gates packed as ``[i | f | o | g]``; forget bias starts at 1."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.W_ih = _uniform(rng, hidden, (d_in, 4 * hidden))
        self.W_hh = _uniform(rng, hidden, (hidden, 4 * hidden))
        b = rng.uniform(-1.0 / math.sqrt(hidden), 1.0 / math.sqrt(hidden), size=4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def input_projection(self, X) -> Tensor:
        return ad.matmul(X, self.W_ih) + self.b

    def step(self, xw, h, c) -> tuple[Tensor, Tensor]:
        """One step from pre-projected input ``xw = x W_ih + b``."""
        H = self.hidden
        gates = xw + ad.matmul(h, self.W_hh)
        sig = ad.sigmoid(gates[..., : 3 * H])
        g = ad.tanh(gates[..., 3 * H:])
        i, f, o = sig[..., :H], sig[..., H:2 * H], sig[..., 2 * H:3 * H]
        c_new = f * c + i * g
        return o * ad.tanh(c_new), c_new


def lstm_cell(x, h, c, cell: LSTMCell) -> tuple[Tensor, Tensor]:
    x = ad.as_tensor(x)
    if x.shape[-1] != cell.W_ih.shape[0] or h.shape[-1] != cell.hidden or c.shape[-1] != cell.hidden:
        raise DimensionError(
            f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape} vs cell in={cell.W_ih.shape[0]} "
            f"hidden={cell.hidden}")
    return cell.step(cell.input_projection(x), ad.as_tensor(h), ad.as_tensor(c))


class BiLSTMLayer(Module):
    """Forward and backward cells; padded steps pass state through and emit zeros."""

    def __init__(self, d_in: int, hidden_per_dir: int, rng: np.random.Generator):
        self.fwd = LSTMCell(d_in, hidden_per_dir, rng)
        self.bwd = LSTMCell(d_in, hidden_per_dir, rng)

    def _run(self, cell: LSTMCell, X: Tensor, mask: np.ndarray, reverse: bool) -> Tensor:
        B, T, _ = X.shape
        xw = cell.input_projection(X)
        h = c = Tensor(np.zeros((B, cell.hidden)))
        outs: list = [None] * T
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            h_new, c_new = cell.step(xw[:, t, :], h, c)
            m = mask[:, t:t + 1]
            h = ad.where(m, h_new, h)
            c = ad.where(m, c_new, c)
            outs[t] = h_new * m.astype(np.float64)
        return ad.stack(outs, axis=1)

    def __call__(self, X, mask) -> Tensor:
        X = ad.as_tensor(X)
        return ad.concat([self._run(self.fwd, X, mask, False), self._run(self.bwd, X, mask, True)], axis=-1)


# ---------------------------------------------------------------- attention


def positional_encoding(T: int, model_dim: int) -> np.ndarray:
    if model_dim % 2:
        raise ConfigurationError(f"positional encoding needs an even model_dim, got {model_dim}")
    pos = np.arange(T)[:, None]
    rates = np.power(10000.0, np.arange(0, model_dim, 2) / model_dim)
    pe = np.zeros((T, model_dim))
    pe[:, 0::2] = np.sin(pos / rates)
    pe[:, 1::2] = np.cos(pos / rates)
    return pe


class MultiHeadAttention(Module):
    def __init__(self, model_dim: int, num_heads: int, rng: np.random.Generator):
        if model_dim % num_heads:
            raise ConfigurationError(f"{num_heads} heads do not divide model dim {model_dim}")
        self.num_heads = num_heads
        self.q = Linear(model_dim, model_dim, rng)
        self.k = Linear(model_dim, model_dim, rng)
        self.v = Linear(model_dim, model_dim, rng)
        self.o = Linear(model_dim, model_dim, rng)
        self._last_weights: Tensor | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        return ad.transpose(ad.reshape(x, (B, T, self.num_heads, D // self.num_heads)), (0, 2, 1, 3))

    def attend(self, q_in, k_in, v_in, key_mask: np.ndarray, causal: bool = False) -> Tensor:
        q_in, k_in, v_in = ad.as_tensor(q_in), ad.as_tensor(k_in), ad.as_tensor(v_in)
        B, Tq, D = q_in.shape
        Tk = k_in.shape[1]
        if k_in.shape[:2] != v_in.shape[:2]:
            raise DimensionError(f"keys {k_in.shape} and values {v_in.shape} differ in length")
        dk = D // self.num_heads
        Q, K, V = self._split(self.q(q_in)), self._split(self.k(k_in)), self._split(self.v(v_in))
        scores = ad.scale(ad.matmul(Q, ad.swapaxes(K, -1, -2)), 1.0 / math.sqrt(dk))
        allowed = np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if causal:
            allowed = allowed & np.tril(np.ones((Tq, Tk), dtype=bool))[None, None]
        P = ad.softmax_masked(scores, allowed)
        self._last_weights = P
        ctx = ad.reshape(ad.transpose(ad.matmul(P, V), (0, 2, 1, 3)), (B, Tq, D))
        return self.o(ctx)

    def __call__(self, q_in, kv_in, key_mask: np.ndarray, causal: bool = False) -> Tensor:
        return self.attend(q_in, kv_in, kv_in, key_mask, causal)


def multi_head_attention(Q_in, K_in, V_in, mha: MultiHeadAttention, pad_mask, causal: bool = False) -> Tensor:
    return mha.attend(Q_in, K_in, V_in, pad_mask, causal)


class FeedForward(Module):
    def __init__(self, model_dim: int, ffn_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(model_dim, ffn_dim, rng)
        self.fc2 = Linear(ffn_dim, model_dim, rng)

    def __call__(self, x, training: bool, rng, p: float) -> Tensor:
        return self.fc2(ad.dropout(ad.relu(self.fc1(x)), p, training, rng))
