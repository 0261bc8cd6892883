import math

import numpy as np
import pytest

from prosody_intent import autodiff as ad
from prosody_intent.errors import CheckpointError, ConfigurationError, DimensionError, ParseError
from prosody_intent.models import (
    AttentionFusion, BiLstmConfig, BiLstmTagger, Checkpoint, LSTMCell, MultiHeadAttention,
    TransformerConfig, TransformerTagger, load_checkpoint, load_into, lstm_cell, positional_encoding,
    save_checkpoint, shift_right,
)


def tiny_bilstm(d=5, **kw):
    cfg = dict(input_dim=d, hidden_dim=4, proj_dim=4, fusion_dim=3, num_heads=2, dropout=0.0)
    cfg.update(kw)
    return BiLstmTagger(BiLstmConfig(**cfg), seed=3)


def tiny_transformer(d=5, **kw):
    cfg = dict(input_dim=d, model_dim=4, num_layers=1, num_heads=2, ffn_dim=6, dropout=0.0)
    cfg.update(kw)
    return TransformerTagger(TransformerConfig(**cfg), seed=3)


def batch(rng, lengths, d=5):
    T = max(lengths)
    X = rng.standard_normal((len(lengths), T, d))
    mask = np.arange(T)[None] < np.array(lengths)[:, None]
    X[~mask] = 0.0
    y = np.where(mask, rng.integers(0, 3, mask.shape), 0)
    return X, y, mask


def test_attention_fusion_examples(rng):
    af = AttentionFusion(3, 4, rng)
    x = rng.standard_normal((1, 1, 3))
    out = af(x, np.ones((1, 1), bool))
    assert np.allclose(out.data, x)
    same = np.repeat(x, 2, axis=1)
    alpha = af.weights(same, np.ones((1, 2), bool)).data
    assert np.allclose(alpha, 0.5)
    X = rng.standard_normal((3, 6, 3))
    mask = np.arange(6)[None] < np.array([[2], [6], [4]])
    a = af.weights(X, mask).data
    assert np.allclose(a.sum(-1), 1.0, atol=1e-12) and np.all(a[~mask] == 0)


def test_lstm_cell_zero_weights_and_bounds(rng):
    cell = LSTMCell(3, 4, rng)
    for p in cell.parameters():
        p.data[...] = 0.0
    h, c = lstm_cell(np.ones((1, 3)), ad.Tensor(np.zeros((1, 4))), ad.Tensor(np.zeros((1, 4))), cell)
    assert np.all(h.data == 0)
    cell = LSTMCell(3, 4, rng)
    h, _ = lstm_cell(10 * rng.standard_normal((5, 3)), ad.Tensor(np.ones((5, 4))), ad.Tensor(np.ones((5, 4))), cell)
    assert np.all(np.abs(h.data) <= 1)
    with pytest.raises(DimensionError):
        lstm_cell(np.ones((1, 2)), ad.Tensor(np.zeros((1, 4))), ad.Tensor(np.zeros((1, 4))), cell)


def test_lstm_cell_gradient(rng):
    cell = LSTMCell(4, 4, rng)
    x = ad.Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    h0 = ad.Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    c0 = ad.Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    w = rng.standard_normal((2, 4))

    def loss():
        h, c = lstm_cell(x, h0, c0, cell)
        return ad.tsum((h + c) * w)

    assert ad.gradient_check(loss, [x, h0, c0] + cell.parameters()) < 1e-6


def test_positional_encoding_values():
    pe = positional_encoding(3, 6)
    assert np.allclose(pe[0], [0, 1, 0, 1, 0, 1])
    assert pe[1, 0] == pytest.approx(math.sin(1.0))
    with pytest.raises(ConfigurationError):
        positional_encoding(3, 5)


def test_mha_masks_keys_and_causal(rng):
    mha = MultiHeadAttention(4, 2, rng)
    x = rng.standard_normal((1, 4, 4))
    mha(x, x, np.array([[1, 1, 1, 0]], bool), causal=True)
    P = mha._last_weights.data[0]
    assert np.all(P[:, :, 3] == 0)
    assert np.all(np.triu(P[0], 1) == 0)
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(6, 4, rng)


@pytest.mark.parametrize("make", [tiny_bilstm, tiny_transformer])
def test_output_shapes(make, rng):
    m = make()
    X, y, mask = batch(rng, [2, 4, 3])
    logits = m.forward(X, mask, y) if isinstance(m, TransformerTagger) else m.forward(X, mask)
    assert logits.shape == (3, 4, 3)
    assert m.predict(X, mask).shape == (3, 4)


def test_bilstm_full_gradient_check(rng):
    m = tiny_bilstm()
    X, y, mask = batch(rng, [4, 3])
    err = ad.gradient_check(lambda: ad.cross_entropy_masked(m.forward(X, mask), y, mask), m.parameters())
    assert err < 1e-4


def test_transformer_full_gradient_check(rng):
    m = tiny_transformer()
    X, y, mask = batch(rng, [4, 3])
    err = ad.gradient_check(lambda: ad.cross_entropy_masked(m.forward(X, mask, y), y, mask), m.parameters())
    assert err < 1e-4


def test_shift_right():
    assert shift_right(np.array([[1, 2, 0]])).tolist() == [[3, 1, 2]]


def test_decoder_is_causal(rng):
    m = tiny_transformer()
    X, y, mask = batch(rng, [5])
    base = m.forward(X, mask, y).data
    for t in range(5):
        y2 = y.copy()
        y2[0, t:] = (y2[0, t:] + 1) % 3
        out = m.forward(X, mask, y2).data
        # position t sees labels < t only
        assert np.array_equal(out[0, : t + 1], base[0, : t + 1])


@pytest.mark.parametrize("make", [tiny_bilstm, tiny_transformer])
def test_padding_invariance(make, rng):
    m = make()
    X, y, mask = batch(rng, [4])
    ref = None
    for pad in (0, 3, 7):
        Xp = np.concatenate([X, np.zeros((1, pad, 5))], axis=1)
        yp = np.concatenate([y, np.zeros((1, pad), int)], axis=1)
        mp = np.concatenate([mask, np.zeros((1, pad), bool)], axis=1)
        out = (m.forward(Xp, mp, yp) if isinstance(m, TransformerTagger) else m.forward(Xp, mp)).data[:, :4]
        if ref is None:
            ref = out
        assert np.max(np.abs(out - ref)) < 1e-9


def test_greedy_decode_equals_teacher_forcing_on_its_own_output(rng):
    m = tiny_transformer()
    X, _, mask = batch(rng, [5, 3])
    pred = m.greedy_decode(X, mask)
    tf = np.argmax(m.forward(X, mask, pred).data, axis=-1)
    assert np.array_equal(tf[mask], pred[mask])


def test_decoder_embedding_slice_toggle(rng):
    m = tiny_bilstm(d=7, decoder_input="embed", embed_dim=3)
    assert m.decoder[0].fwd.W_ih.shape[0] == 4 + 3
    X, _, mask = batch(rng, [3], d=7)
    assert m.forward(X, mask).shape == (1, 3, 3)
    with pytest.raises(ConfigurationError):
        BiLstmConfig(input_dim=5, decoder_input="embed", embed_dim=0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        BiLstmConfig(input_dim=5, hidden_dim=7)
    with pytest.raises(ConfigurationError):
        BiLstmConfig(input_dim=5, hidden_dim=6, num_heads=4)
    with pytest.raises(ConfigurationError):
        TransformerConfig(input_dim=5, model_dim=6, num_heads=4)
    assert TransformerConfig(input_dim=5).ffn_dim == 4 * 448


def test_reference_default_sizes_construct():
    b = BiLstmTagger(BiLstmConfig(input_dim=80))
    t = TransformerTagger(TransformerConfig(input_dim=80))
    assert b.config.hidden_dim == 512 and t.config.num_layers == 3 and len(t.encoder) == 3


@pytest.mark.parametrize("make", [tiny_bilstm, tiny_transformer])
def test_checkpoint_round_trip_is_exact(make, rng, tmp_path):
    m = make()
    X, y, mask = batch(rng, [4, 2])
    ck = Checkpoint.from_model(m, normalizer={"mean": np.zeros(5), "std": np.ones(5)})
    save_checkpoint(ck, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt").build()
    if isinstance(m, TransformerTagger):
        assert np.array_equal(back.forward(X, mask, y).data, m.forward(X, mask, y).data)
    else:
        assert np.array_equal(back.forward(X, mask).data, m.forward(X, mask).data)
    save_checkpoint(ck, tmp_path / "again.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    save_checkpoint(Checkpoint.from_model(tiny_bilstm()), tmp_path / "b.ckpt")
    with pytest.raises(CheckpointError):
        load_into(tiny_transformer(), tmp_path / "b.ckpt")
    with pytest.raises(CheckpointError, match="wrong_shape"):
        load_into(tiny_bilstm(d=6), tmp_path / "b.ckpt")
    data = (tmp_path / "b.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
