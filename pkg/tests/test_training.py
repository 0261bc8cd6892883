import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from prosody_intent import autodiff as ad
from prosody_intent.corpus import Featurizer, SplitSpec, generate_corpus, split_by_instruction
from prosody_intent.errors import ConfigurationError, DivergenceError, SearchError
from prosody_intent.training import (
    Adam, PlateauScheduler, SearchSpace, TrainConfig, adam_step, build_tagger, clip_gradients,
    compute_metrics, cross_entropy_masked, eval_rows, evaluate, hyperparameter_search,
    reference_default_point, read_eval_rows, report_table, train, write_csv,
)


def brute_metrics(y, p):
    """Counting oracle written independently of the confusion-matrix path."""
    out = {}
    n = len(y)
    for k in range(3):
        tp = sum(1 for a, b in zip(y, p) if a == k and b == k)
        fp = sum(1 for a, b in zip(y, p) if a != k and b == k)
        fn = sum(1 for a, b in zip(y, p) if a == k and b != k)
        tn = n - tp - fp - fn
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out[k] = ((tp + tn) / n, prec, rec, f1)
    acc = sum(a == b for a, b in zip(y, p)) / n
    return out, acc


def test_metrics_match_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 200))
        y, p = rng.integers(0, 3, n), rng.integers(0, 3, n)
        rep = compute_metrics(y, p)
        ref, acc = brute_metrics(list(y), list(p))
        assert rep.token_accuracy == acc
        for k, name in enumerate(("O", "GOAL", "DETAIL")):
            m = rep.per_class[name]
            assert (m.accuracy, m.precision, m.recall, m.f1) == ref[k]


def test_perfect_and_degenerate_predictions():
    y = np.array([0, 1, 2, 1, 0])
    rep = compute_metrics(y, y)
    assert rep.token_accuracy == 1.0 and rep.macro_f1 == 1.0 and rep.goal_detail_f1 == 1.0
    rep = compute_metrics(y, np.zeros_like(y))
    assert rep.goal.precision == 0.0 and rep.goal.recall == 0.0 and rep.goal.f1 == 0.0


def test_metrics_respect_mask():
    y = np.array([[1, 2, 0], [1, 0, 0]])
    p = np.array([[1, 2, 2], [1, 1, 1]])
    mask = np.array([[1, 1, 0], [1, 0, 0]], bool)
    assert compute_metrics(y, p, mask).token_accuracy == 1.0


def test_loss_reference_values():
    u = cross_entropy_masked(ad.Tensor(np.zeros((1, 2, 3))), np.array([[0, 2]]), np.ones((1, 2), bool))
    assert u.item() == pytest.approx(math.log(3), abs=1e-12)
    logits = np.zeros((1, 1, 3))
    logits[0, 0, 1] = 20.0
    assert cross_entropy_masked(ad.Tensor(logits), np.array([[1]]), np.ones((1, 1), bool)).item() < 1e-8


def test_masked_loss_and_grad_padding_invariant(rng):
    m = build_tagger("bilstm", dict(input_dim=4, hidden_dim=4, proj_dim=4, fusion_dim=3, num_heads=2, dropout=0.0), 0)
    X = rng.standard_normal((1, 3, 4))
    y = np.array([[1, 0, 2]])
    values, grads = [], []
    for pad in (0, 4):
        Xp = np.concatenate([X, np.zeros((1, pad, 4))], 1)
        yp = np.concatenate([y, np.zeros((1, pad), int)], 1)
        mp = np.arange(3 + pad)[None] < 3
        m.zero_grad()
        loss = cross_entropy_masked(m.forward(Xp, mp), yp, mp)
        ad.backward(loss)
        values.append(loss.item())
        grads.append(np.concatenate([p.grad.ravel() for p in m.parameters()]))
    assert abs(values[0] - values[1]) < 1e-12
    assert np.max(np.abs(grads[0] - grads[1])) < 1e-12


def test_adam_first_step_and_weight_decay():
    p = ad.Tensor(np.zeros(1), requires_grad=True)
    adam_step([p], [np.ones(1)], None, lr=1e-3)
    assert abs(p.data[0] + 1e-3 / (1 + 1e-8)) < 1e-12
    for decoupled in (False, True):
        q = ad.Tensor(np.ones(1), requires_grad=True)
        adam_step([q], [np.zeros(1)], None, lr=1e-2, weight_decay=0.1, decoupled=decoupled)
        assert q.data[0] < 1.0


def test_adam_divergence_on_nan():
    p = ad.Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(DivergenceError):
        Adam([p], lr=1e-3).step()


def test_clip_gradients():
    g = [np.array([0.3, 0.4])]
    out, norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(0.5) and np.array_equal(out[0], g[0])
    g = [np.array([1.2]), np.array([1.6])]
    out, norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(2.0)
    flat = np.concatenate(out)
    assert np.linalg.norm(flat) == pytest.approx(1.0, abs=1e-12)
    assert flat @ np.array([1.2, 1.6]) / (np.linalg.norm(flat) * 2.0) == pytest.approx(1.0, abs=1e-12)


def test_scheduler_behaviour():
    s = PlateauScheduler(1e-2)
    assert [s.step(0.1 * i) for i in range(1, 11)] == [1e-2] * 10
    s = PlateauScheduler(1e-2, patience=5)
    lrs = [s.step(0.5) for _ in range(10)]
    assert lrs.index(5e-3) == 5  # epoch 6
    s = PlateauScheduler(1e-5, patience=1, min_lr=1e-6)
    assert min(s.step(0.0) for _ in range(50)) == 1e-6


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_scheduler_never_increases(metrics):
    s = PlateauScheduler(1.0, patience=2)
    lrs = [s.step(m) for m in metrics]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation_and_parsing():
    assert TrainConfig.for_architecture("transformer").lr == 2.22e-4
    cfg = TrainConfig.from_dict({"lr": 0.01, "scheduler": {"factor": 0.25, "patience": 3, "min_lr": 1e-5}})
    assert (cfg.scheduler_factor, cfg.scheduler_patience, cfg.min_lr) == (0.25, 3, 1e-5)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=-1)


@pytest.fixture(scope="module")
def split():
    s = generate_corpus(8, 3, seed=11, with_raw=False)
    return split_by_instruction(s, SplitSpec(0.5, 0.25, 0.25, seed=1))


TINY = {
    "bilstm": dict(hidden_dim=8, proj_dim=8, fusion_dim=4, num_heads=2, dropout=0.1),
    "transformer": dict(model_dim=8, num_layers=1, num_heads=2, dropout=0.1),
}


def run(arch, split, seed=0, **tc):
    tr, va, _ = split
    f = Featurizer("prosody").fit(tr)
    m = build_tagger(arch, dict(input_dim=f.dim, **TINY[arch]), seed)
    cfg = TrainConfig.for_architecture(arch, seed=seed, **{"max_epochs": 12, **tc})
    return train(m, tr, va, f, cfg), f


@pytest.mark.parametrize("arch", ["bilstm", "transformer"])
def test_training_is_deterministic(arch, split):
    a, _ = run(arch, split)
    b, _ = run(arch, split)
    assert a.history == b.history
    assert all(np.array_equal(a.checkpoint.params[k], b.checkpoint.params[k]) for k in a.checkpoint.params)


def test_history_and_best_checkpoint(split):
    res, f = run("bilstm", split, lr=1e-2)
    keys = {"epoch", "train_loss", "val_loss", "val_f1", "val_accuracy", "lr"}
    assert all(set(h) == keys for h in res.history)
    assert res.best_val_f1 == max(h["val_f1"] for h in res.history)
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]
    model = res.model()
    assert evaluate(model, split[1], f).goal_detail_f1 == pytest.approx(res.best_val_f1)


def test_early_stopping(split):
    res, _ = run("bilstm", split, lr=1e-9, max_epochs=50, patience_early_stop=3)
    assert len(res.history) == res.best_epoch + 3


def test_divergence_reported(split):
    tr, va, _ = split
    f = Featurizer("prosody").fit(tr)
    m = build_tagger("bilstm", dict(input_dim=f.dim, **TINY["bilstm"]), 0)
    m.fc.weight.data[...] = np.nan
    with pytest.raises(DivergenceError, match="epoch 1"):
        train(m, tr, va, f, TrainConfig(max_epochs=2))


def test_search_budget_one_and_reference_point(split):
    tr, va, _ = split
    f = Featurizer("prosody").fit(tr)
    space = SearchSpace(dims=(8,), layers=(1,), heads=(2,), attn_layers=(1,), budget=1)
    res = hyperparameter_search(space, tr, va, f, "bilstm", TrainConfig(max_epochs=3), seed=0)
    assert len(res.trials) == 1
    assert res.best_objective == res.trials[0]["objective"]
    assert res.best_model_config["hidden_dim"] == 8
    pt = reference_default_point("bilstm")
    assert (pt["lr"], pt["dim"], pt["layers"], pt["dropout"]) == (4.2e-3, 512, 1, 0.45)
    small = dict(pt, dim=8, heads=2)
    res = hyperparameter_search(space, tr, va, f, "bilstm", TrainConfig(max_epochs=2), extra_points=[small])
    assert res.trials[0]["lr"] == 4.2e-3 and res.trials[0]["dropout"] == 0.45
    assert res.best_objective == max(t["objective"] for t in res.trials)


def test_search_grid_and_all_diverged(split, monkeypatch):
    from prosody_intent import training

    tr, va, _ = split
    f = Featurizer("prosody").fit(tr)
    grid = training.sample_points(SearchSpace(dims=(8, 12), heads=(2, 4), layers=(1,), attn_layers=(1,),
                                              budget=10, mode="grid"), "transformer", 0)
    assert [(p["dim"], p["heads"]) for p in grid] == [(8, 2), (8, 4), (12, 2), (12, 4)]

    def boom(*a, **k):
        raise DivergenceError("nan")

    monkeypatch.setattr(training, "train", boom)
    with pytest.raises(SearchError):
        hyperparameter_search(SearchSpace(dims=(8,), heads=(2,), budget=2), tr, va, f, "bilstm")


def test_report_table_layout_and_csv_round_trip():
    rng = np.random.default_rng(2)
    reports = {}
    for model in ("BiLSTM", "Transformer"):
        for mode in ("prosody", "raw", "prosody+raw"):
            y, p = rng.integers(0, 3, 100), rng.integers(0, 3, 100)
            reports[(model, mode)] = compute_metrics(y, p)
    text, csv_text = report_table(reports)
    lines = text.splitlines()
    assert len(lines) == 2 + 6
    for mode in ("prosody", "raw", "prosody+raw"):
        assert mode in lines[0]
    assert [ln.split()[1] for ln in lines[2:5]] == ["Goal", "Detail", "Overall"]
    cells = [c for c in csv_text.splitlines()[1].split(",")[2:]]
    assert len(cells) == 12 and all(c.endswith("%") and len(c.split(".")[1]) == 3 for c in cells)
    again_text, again_csv = report_table({k: v for k, v in reports.items()})
    assert again_csv == csv_text


def test_eval_rows_round_trip(tmp_path):
    rep = compute_metrics(np.array([0, 1, 2, 1]), np.array([0, 1, 1, 1]))
    write_csv(eval_rows("BiLSTM", "prosody", rep), tmp_path / "e.csv")
    cells = read_eval_rows(tmp_path / "e.csv")
    assert cells[("BiLSTM", "prosody")]["Goal"] == (rep.goal.accuracy, rep.goal.precision, rep.goal.recall, rep.goal.f1)
    assert report_table(cells)[1] == report_table({("BiLSTM", "prosody"): rep})[1]
