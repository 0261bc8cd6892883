"""Masked cross-entropy training, evaluation, search and Table-I-style reporting."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .corpus import LABELS, Batch, Featurizer, UtteranceSample, make_batches, pad_batch
from .errors import ConfigurationError, DivergenceError, SearchError
from .models import BiLstmConfig, BiLstmTagger, Checkpoint, TransformerConfig, TransformerTagger

log = logging.getLogger(__name__)

REFERENCE_DEFAULTS = {
    "bilstm": {"lr": 4.2e-3, "weight_decay": 5.44e-5},
    "transformer": {"lr": 2.22e-4, "weight_decay": 2.25e-6},
}


@dataclass
class TrainConfig:
    lr: float = 4.2e-3
    weight_decay: float = 5.44e-5
    batch_size: int = 16
    max_epochs: int = 200
    clip_norm: float = 1.0
    patience_early_stop: int = 20
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    scheduler_min_delta: float = 1e-4
    min_lr: float = 1e-6
    decoupled_weight_decay: bool = False
    seed: int = 42

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if not 0 < self.scheduler_factor < 1:
            raise ConfigurationError("scheduler_factor must lie in (0, 1)")
        if self.scheduler_patience < 1 or self.patience_early_stop < 1:
            raise ConfigurationError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.clip_norm <= 0:
            raise ConfigurationError("batch_size, max_epochs and clip_norm must be positive")

    @classmethod
    def for_architecture(cls, arch: str, **overrides) -> "TrainConfig":
        return cls(**{**REFERENCE_DEFAULTS[arch], **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sched = d.pop("scheduler", None) or {}
        for key, value in sched.items():
            d["min_lr" if key == "min_lr" else f"scheduler_{key}"] = value
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- loss / optimiser


def cross_entropy_masked(logits, targets, mask) -> ad.Tensor:
    return ad.cross_entropy_masked(logits, targets, mask)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(params: Sequence[ad.Tensor], grads: Sequence[np.ndarray], state: list[AdamState] | None,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
              decoupled: bool = False) -> list[AdamState]:
    """In-place Adam update of ``params``; weight decay is added to the gradient by default."""
    if state is None:
        state = [AdamState(np.zeros(p.shape), np.zeros(p.shape)) for p in params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    for p, g, s in zip(params, grads, state):
        s.t += 1
        kernels.adam_update(p.data, np.asarray(g, dtype=np.float64), s.m, s.v, lr=lr, beta1=betas[0],
                            beta2=betas[1], eps=eps, weight_decay=weight_decay, step=s.t,
                            decoupled=decoupled)
    return state


class Adam:
    def __init__(self, params: Sequence[ad.Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, decoupled: bool = False):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.decoupled = decoupled
        self.state: list[AdamState] | None = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        self.state = adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps,
                               self.weight_decay, self.decoupled)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale all gradients together when their global L2 norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        s = max_norm / norm
        return [g * s for g in grads], norm
    return list(grads), norm


@dataclass
class PlateauScheduler:
    """Halve the lr (by default) after ``patience`` epochs with no gain in a higher-is-better metric."""

    lr: float
    factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    best: float = -math.inf
    bad_epochs: int = 0

    def step(self, metric: float) -> float:
        if metric > self.best + self.min_delta:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def plateau_scheduler_step(state: PlateauScheduler, val_metric: float) -> float:
    return state.step(val_metric)


# ---------------------------------------------------------------- metrics


@dataclass
class ClassMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    per_class: dict  # label name -> ClassMetrics
    token_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray  # rows gold, columns predicted

    @property
    def goal(self) -> ClassMetrics:
        return self.per_class["GOAL"]

    @property
    def detail(self) -> ClassMetrics:
        return self.per_class["DETAIL"]

    @property
    def goal_detail_f1(self) -> float:
        """Mean of GOAL and DETAIL F1: the model-selection objective."""
        return 0.5 * (self.goal.f1 + self.detail.f1)

    def to_dict(self) -> dict:
        return {
            "per_class": {k: asdict(v) for k, v in self.per_class.items()},
            "token_accuracy": self.token_accuracy, "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall, "macro_f1": self.macro_f1,
            "goal_detail_f1": self.goal_detail_f1, "confusion": self.confusion.tolist(),
        }

    def summary(self) -> str:
        lines = [f"{'class':<8}{'acc':>8}{'prec':>8}{'rec':>8}{'f1':>8}{'support':>9}"]
        for name, m in self.per_class.items():
            lines.append(f"{name:<8}{m.accuracy:8.4f}{m.precision:8.4f}{m.recall:8.4f}{m.f1:8.4f}{m.support:9d}")
        lines.append(f"token accuracy {self.token_accuracy:.4f}  macro P/R/F1 "
                     f"{self.macro_precision:.4f}/{self.macro_recall:.4f}/{self.macro_f1:.4f}  "
                     f"GOAL/DETAIL F1 {self.goal_detail_f1:.4f}")
        return "\n".join(lines)


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def metrics_from_confusion(cm: np.ndarray) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    per_class = {}
    for k, name in enumerate(LABELS):
        tp = int(cm[k, k])
        fp = int(cm[:, k].sum()) - tp
        fn = int(cm[k, :].sum()) - tp
        tn = total - tp - fp - fn
        p = _safe_div(tp, tp + fp)
        r = _safe_div(tp, tp + fn)
        per_class[name] = ClassMetrics(_safe_div(tp + tn, total), p, r, _safe_div(2 * p * r, p + r),
                                       int(cm[k, :].sum()))
    vals = list(per_class.values())
    return MetricsReport(
        per_class, _safe_div(int(np.trace(cm)), total),
        float(np.mean([m.precision for m in vals])), float(np.mean([m.recall for m in vals])),
        float(np.mean([m.f1 for m in vals])), cm,
    )


def compute_metrics(y_true, y_pred, mask=None) -> MetricsReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        y_true, y_pred = y_true[mask], y_pred[mask]
    return metrics_from_confusion(kernels.confusion_counts(y_true, y_pred, len(LABELS)))


# ---------------------------------------------------------------- forward / predict


def model_logits(model, batch: Batch, training: bool = False, rng=None) -> ad.Tensor:
    if isinstance(model, TransformerTagger):
        return model.forward(batch.features, batch.mask, batch.targets, training, rng)
    return model.forward(batch.features, batch.mask, training, rng)


def predict_batch(model, batch: Batch) -> np.ndarray:
    """BiLSTM: per-token argmax. Transformer: greedy autoregressive decode."""
    return model.predict(batch.features, batch.mask)


def predict_samples(model, samples: Sequence[UtteranceSample], featurizer: Featurizer,
                    batch_size: int = 64) -> list[list[int]]:
    out = []
    for batch in make_batches(samples, featurizer, batch_size):
        pred = predict_batch(model, batch)
        out.extend(pred[b, :n].tolist() for b, n in enumerate(batch.lengths))
    return out


def evaluate(model, dataset: Sequence[UtteranceSample], featurizer: Featurizer,
             batch_size: int = 64) -> MetricsReport:
    if not dataset:
        raise ValueError("evaluate needs a non-empty dataset")
    gold, pred = [], []
    for batch in make_batches(dataset, featurizer, batch_size):
        p = predict_batch(model, batch)
        gold.append(batch.targets[batch.mask])
        pred.append(p[batch.mask])
    return compute_metrics(np.concatenate(gold), np.concatenate(pred))


def _batch_loss(model, batches: Sequence[Batch]) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for b in batches:
            n = int(b.mask.sum())
            total += ad.cross_entropy_masked(model_logits(model, b), b.targets, b.mask).item() * n
            count += n
    return total / count


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    best_epoch: int
    best_val_f1: float

    def model(self):
        return self.checkpoint.build()


def build_tagger(arch: str, model_config: dict, seed: int):
    if arch == "bilstm":
        return BiLstmTagger(BiLstmConfig(**model_config), seed=seed)
    if arch == "transformer":
        return TransformerTagger(TransformerConfig(**model_config), seed=seed)
    raise ValueError(f"unknown architecture {arch!r}")


class _Cached:
    """Fixed featurisation of a sample list, so epochs only re-batch."""

    def __init__(self, samples, featurizer):
        self.x = [featurizer(s) for s in samples]
        self.y = [s.labels for s in samples]
        self.ids = [s.id for s in samples]
        self.d = featurizer.dim

    def batches(self, batch_size, order=None) -> list[Batch]:
        order = np.arange(len(self.x)) if order is None else order
        out = []
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            out.append(pad_batch([self.x[j] for j in idx], [self.y[j] for j in idx], d=self.d,
                                 ids=[self.ids[j] for j in idx]))
        return out


def train(model, train_set: Sequence[UtteranceSample], val_set: Sequence[UtteranceSample],
          featurizer: Featurizer, config: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train with early stopping on validation GOAL/DETAIL macro-F1; returns the best checkpoint."""
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    if featurizer.normalizer is None:
        featurizer.fit(train_set)
    rng = np.random.default_rng([config.seed, 20])
    train_data = _Cached(train_set, featurizer)
    val_batches = _Cached(val_set, featurizer).batches(config.batch_size)
    params = model.parameters()
    opt = Adam(params, config.lr, config.weight_decay, decoupled=config.decoupled_weight_decay)
    sched = PlateauScheduler(config.lr, config.scheduler_factor, config.scheduler_patience,
                             config.scheduler_min_delta, config.min_lr)
    history = []
    best_f1, best_epoch, best_state, stale = -1.0, 0, model.state_dict(), 0
    for epoch in range(1, config.max_epochs + 1):
        lr = sched.lr
        opt.lr = lr
        total, count = 0.0, 0
        for batch in train_data.batches(config.batch_size, rng.permutation(len(train_data.x))):
            opt.zero_grad()
            loss = ad.cross_entropy_masked(model_logits(model, batch, True, rng), batch.targets, batch.mask)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            ad.backward(loss)
            grads, _ = clip_gradients([p.grad if p.grad is not None else np.zeros(p.shape) for p in params],
                                      config.clip_norm)
            for p, g in zip(params, grads):
                p.grad = g
            try:
                opt.step()
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}") from None
            n = int(batch.mask.sum())
            total += value * n
            count += n
        val_loss = _batch_loss(model, val_batches)
        gold = np.concatenate([b.targets[b.mask] for b in val_batches])
        pred = np.concatenate([predict_batch(model, b)[b.mask] for b in val_batches])
        report = compute_metrics(gold, pred)
        f1 = report.goal_detail_f1
        row = {"epoch": epoch, "train_loss": total / count, "val_loss": val_loss, "val_f1": f1,
               "val_accuracy": report.token_accuracy, "lr": lr}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if f1 > best_f1:
            best_f1, best_epoch, best_state, stale = f1, epoch, model.state_dict(), 0
        else:
            stale += 1
        sched.step(f1)
        if stale >= config.patience_early_stop:
            break
    ckpt = Checkpoint(
        model.architecture, model.config.to_dict(), best_state, featurizer.mode,
        asdict(featurizer.embedding), featurizer.normalizer.to_dict(), config.seed,
        {"best_epoch": best_epoch, "best_val_f1": best_f1, "train_config": config.to_dict()},
    )
    return TrainResult(ckpt, history, best_epoch, best_f1)


def featurizer_from_checkpoint(ckpt: Checkpoint) -> Featurizer:
    from .embeddings import EmbeddingSource
    from .features import Normalizer

    norm = None if ckpt.normalizer is None else Normalizer.from_dict(ckpt.normalizer)
    return Featurizer(ckpt.feature_mode, EmbeddingSource(**ckpt.embedding) if ckpt.embedding else EmbeddingSource(),
                      norm)


# ---------------------------------------------------------------- CSV helpers


def write_csv(rows: Sequence[dict], path_or_buf) -> None:
    if not rows:
        header: list = []
    else:
        header = list(rows[0].keys())
        for r in rows[1:]:
            header.extend(k for k in r if k not in header)
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if own:
            fh.close()


# ---------------------------------------------------------------- search


@dataclass
class SearchSpace:
    lr: tuple = (1e-5, 1e-2)
    dims: tuple = (128, 192, 256, 320, 384, 448, 512)
    layers: tuple = (1, 2, 3, 4)
    dropout: tuple = (0.1, 0.5)
    heads: tuple = (1, 2, 4, 8)
    attn_layers: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    weight_decay: tuple = (1e-7, 1e-3)
    budget: int = 20
    mode: str = "random"  # or "grid" over the discrete axes

    def __post_init__(self):
        for name in ("lr", "dropout", "weight_decay"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"empty range for {name}")
        for name in ("dims", "layers", "heads", "attn_layers"):
            if not getattr(self, name):
                raise ValueError(f"no choices for {name}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.mode not in ("random", "grid"):
            raise ValueError("mode must be 'random' or 'grid'")


def _log_uniform(rng, lo, hi):
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi)))) if lo < hi else float(lo)


def _trial_point(arch: str, dim: int, layers: int, heads: int, attn_layers: int, lr: float,
                 dropout: float, weight_decay: float) -> dict:
    return {"arch": arch, "dim": int(dim), "layers": int(layers), "heads": int(heads),
            "attn_layers": int(attn_layers), "lr": float(lr), "dropout": float(dropout),
            "weight_decay": float(weight_decay)}


def _valid_heads(arch: str, dim: int, heads: int) -> bool:
    return dim % 2 == 0 and dim % heads == 0


def sample_points(space: SearchSpace, arch: str, seed: int) -> list[dict]:
    rng = np.random.default_rng([seed, 30])
    pts = []
    if space.mode == "grid":
        attn = space.attn_layers if arch == "bilstm" else space.attn_layers[:1]
        for dim, layers, heads, al in itertools.product(space.dims, space.layers, space.heads, attn):
            if not _valid_heads(arch, dim, heads):
                continue
            pts.append(_trial_point(arch, dim, layers, heads, al, _log_uniform(rng, *space.lr),
                                    rng.uniform(*space.dropout), _log_uniform(rng, *space.weight_decay)))
            if len(pts) == space.budget:
                break
        return pts
    tries = 0
    while len(pts) < space.budget:
        tries += 1
        if tries > 1000 * space.budget:
            raise SearchError("no valid (dim, heads) combination in search space")
        dim = space.dims[rng.integers(len(space.dims))]
        heads = space.heads[rng.integers(len(space.heads))]
        layers = space.layers[rng.integers(len(space.layers))]
        al = space.attn_layers[rng.integers(len(space.attn_layers))]
        lr = _log_uniform(rng, *space.lr)
        dropout = float(rng.uniform(*space.dropout))
        wd = _log_uniform(rng, *space.weight_decay)
        if _valid_heads(arch, dim, heads):
            pts.append(_trial_point(arch, dim, layers, heads, al, lr, dropout, wd))
    return pts


def point_to_configs(point: dict, input_dim: int, base: TrainConfig, extra_model: dict | None = None):
    arch = point["arch"]
    if arch == "bilstm":
        mc = {"input_dim": input_dim, "hidden_dim": point["dim"], "num_layers": point["layers"],
              "num_heads": point["heads"], "attn_layers": point["attn_layers"],
              "dropout": point["dropout"], "proj_dim": max(2, point["dim"] // 2)}
    else:
        mc = {"input_dim": input_dim, "model_dim": point["dim"], "num_layers": point["layers"],
              "num_heads": point["heads"], "dropout": point["dropout"]}
    mc.update(extra_model or {})
    tc = replace(base, lr=point["lr"], weight_decay=point["weight_decay"])
    return mc, tc


def reference_default_point(arch: str) -> dict:
    if arch == "bilstm":
        return _trial_point("bilstm", 512, 1, 4, 1, 4.2e-3, 0.45, 5.44e-5)
    return _trial_point("transformer", 448, 3, 8, 1, 2.22e-4, 0.25, 2.25e-6)


@dataclass
class SearchResult:
    best_point: dict
    best_model_config: dict
    best_train_config: TrainConfig
    best_objective: float
    trials: list = field(default_factory=list)


def hyperparameter_search(space: SearchSpace, train_set, val_set, featurizer: Featurizer, arch: str,
                          base: TrainConfig | None = None, extra_points: Sequence[dict] = (),
                          seed: int = 42, extra_model: dict | None = None,
                          on_trial: Callable[[dict], None] | None = None) -> SearchResult:
    """Evaluate ``extra_points`` first, then ``space.budget`` sampled points."""
    base = base or TrainConfig.for_architecture(arch)
    if featurizer.normalizer is None:
        featurizer.fit(train_set)
    points = [dict(p, arch=arch) for p in extra_points] + sample_points(space, arch, seed)
    trials = []
    best = None
    for i, pt in enumerate(points):
        mc, tc = point_to_configs(pt, featurizer.dim, base, extra_model)
        row = {"trial": i, **pt}
        try:
            model = build_tagger(arch, mc, seed=seed + i)
            res = train(model, train_set, val_set, featurizer, tc)
            row.update(objective=res.best_val_f1, best_epoch=res.best_epoch, status="ok")
            if best is None or res.best_val_f1 > best[0]:
                best = (res.best_val_f1, pt, mc, tc)
        except DivergenceError as exc:
            row.update(objective=float("nan"), best_epoch=0, status=f"diverged: {exc}")
        trials.append(row)
        log.info("trial %d: %s", i, row)
        if on_trial is not None:
            on_trial(row)
    if best is None:
        raise SearchError("every trial diverged")
    return SearchResult(best[1], best[2], best[3], best[0], trials)


# ---------------------------------------------------------------- Table-I style report

REPORT_MODES = ("prosody", "raw", "prosody+raw")
REPORT_INTENTS = ("Goal", "Detail", "Overall")
METRIC_COLUMNS = ("Acc", "Prec", "Rec", "F1")


def report_cells(report: MetricsReport) -> dict:
    """``{intent: (acc, prec, rec, f1)}`` with Overall = token accuracy + macro P/R/F1."""
    g, d = report.goal, report.detail
    return {
        "Goal": (g.accuracy, g.precision, g.recall, g.f1),
        "Detail": (d.accuracy, d.precision, d.recall, d.f1),
        "Overall": (report.token_accuracy, report.macro_precision, report.macro_recall, report.macro_f1),
    }


def eval_rows(model_name: str, mode: str, report: MetricsReport) -> list[dict]:
    return [
        {"model": model_name, "feature_mode": mode, "intent": intent,
         **{c.lower(): v for c, v in zip(METRIC_COLUMNS, vals)}}
        for intent, vals in report_cells(report).items()
    ]


def read_eval_rows(path_or_text) -> dict:
    """Parse eval CSV rows into ``{(model, mode): {intent: (acc, prec, rec, f1)}}``."""
    text = path_or_text if "\n" in str(path_or_text) else open(path_or_text).read()
    cells: dict = {}
    for r in csv.DictReader(io.StringIO(text)):
        key = (r["model"], r["feature_mode"])
        cells.setdefault(key, {})[r["intent"]] = tuple(float(r[c.lower()]) for c in METRIC_COLUMNS)
    return cells


def report_table(reports: dict) -> tuple[str, str]:
    """Render ``{(model, mode): MetricsReport or cells}`` as (aligned text, CSV).

    Rows are model x {Goal, Detail, Overall}; columns are feature mode x
    {Acc, Prec, Rec, F1}, as percentages with two decimals.
    """
    if not reports:
        raise ValueError("report_table needs at least one report")
    cells = {k: (report_cells(v) if isinstance(v, MetricsReport) else v) for k, v in reports.items()}
    models = list(dict.fromkeys(m for m, _ in cells))
    extra_modes = [md for _, md in cells if md not in REPORT_MODES]
    modes = list(REPORT_MODES) + list(dict.fromkeys(extra_modes))

    def fmt(v):
        return f"{100.0 * v:.2f}%"

    header = ["Model", "Intent"] + [f"{md}:{c}" for md in modes for c in METRIC_COLUMNS]
    body = []
    for model in models:
        for intent in REPORT_INTENTS:
            row = [model, intent]
            for md in modes:
                vals = cells.get((model, md), {}).get(intent)
                row.extend([fmt(v) for v in vals] if vals else ["-"] * len(METRIC_COLUMNS))
            body.append(row)
    sub = ["Model", "Intent"] + [c for _ in modes for c in METRIC_COLUMNS]
    widths = [max(len(r[i]) for r in [sub] + body) for i in range(len(sub))]
    for j, md in enumerate(modes):
        span = slice(2 + 4 * j, 6 + 4 * j)
        short = len(md) - (sum(widths[span]) + 6)
        if short > 0:
            widths[span.start] += short
    group = "  ".join([" " * widths[0], " " * widths[1]] + [
        md.center(sum(widths[2 + 4 * j: 6 + 4 * j]) + 6) for j, md in enumerate(modes)])
    lines = [group.rstrip()]
    for r in [sub] + body:
        lines.append("  ".join(v.rjust(w) if i >= 2 else v.ljust(w) for i, (v, w) in enumerate(zip(r, widths))))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    return "\n".join(lines), buf.getvalue()
