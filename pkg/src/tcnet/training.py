"""Losses, optimizer, schedule, metrics, the supervised loop and self-supervised pretraining."""
from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .correction import CorrectionBundle, correction_regularizers
from .model import CompactEncoder, PretextHeads, TCNet, forward_compact
from .nn import Module
from .tensor import Tensor, backward, ops


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 30
    patience: int = 20
    batch_size: int = 32
    alpha: float = 1e-4
    beta: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1
    class_weights: bool = False

    def __post_init__(self):
        for name in ("lr", "max_epochs", "patience", "batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"train config: {name} must be positive")
        for name in ("weight_decay", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"train config: {name} must be nonnegative")
        if self.patience > self.max_epochs:
            raise ValueError("train config: patience exceeds max_epochs")


# -- losses ------------------------------------------------------------------

def cross_entropy(logits, labels, class_weights=None) -> Tensor:
    """Mean (optionally class-weighted) softmax cross-entropy."""
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"loss: labels must lie in [0, {n_classes})")
    onehot = np.eye(n_classes)[labels]
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=np.float64)[labels]
        return -ops.sum(onehot * w[:, None] * ops.log_softmax(logits, axis=-1)) * (1.0 / w.sum())
    return -ops.sum(onehot * ops.log_softmax(logits, axis=-1)) * (1.0 / len(labels))


def total_loss(logits, labels, bundles: list[CorrectionBundle], alpha: float = 1e-4, beta: float = 1e-4,
               class_weights=None) -> tuple[Tensor, dict[str, float]]:
    """Classification loss plus weighted correction and smoothness penalties."""
    l_cls = cross_entropy(logits, labels, class_weights)
    total = l_cls
    l_delta_sum, l_tv_sum = 0.0, 0.0
    for bundle in bundles:
        if not bundle.deltas:
            continue
        l_delta, l_tv = correction_regularizers(bundle)
        total = total + alpha * l_delta + beta * l_tv
        l_delta_sum += l_delta.item()
        l_tv_sum += l_tv.item()
    return total, {"l_cls": l_cls.item(), "l_delta": l_delta_sum, "l_tv": l_tv_sum}


def balanced_class_weights(labels, n_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    return np.where(counts > 0, len(labels) / (n_classes * np.maximum(counts, 1)), 0.0)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with decoupled weight decay, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"optimizer: non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"optimizer: gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = g * (1 - beta1) if m is None else beta1 * m + (1 - beta1) * g
        v = g * g * (1 - beta2) if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_lr(epoch: int, max_epochs: int, lr0: float) -> float:
    if not 0 <= epoch <= max_epochs:
        raise ValueError(f"cosine schedule: epoch {epoch} outside [0, {max_epochs}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / max_epochs))


# -- metrics -----------------------------------------------------------------

@dataclass
class MetricsReport:
    macro_f1: float
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    confusion: np.ndarray

    def to_json(self) -> dict:
        return {"macro_f1": self.macro_f1, "accuracy": self.accuracy, "precision": self.precision.tolist(),
                "recall": self.recall.tolist(), "f1": self.f1.tolist(), "confusion": self.confusion.tolist()}


def metrics(predictions, labels, n_classes: int) -> MetricsReport:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("metrics: predictions and labels differ in length")
    if pred.size == 0:
        raise ValueError("metrics: empty input")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    pred_count, true_count = conf.sum(axis=0), conf.sum(axis=1)
    precision = np.divide(tp, pred_count, out=np.zeros(n_classes), where=pred_count > 0)
    recall = np.divide(tp, true_count, out=np.zeros(n_classes), where=true_count > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    return MetricsReport(float(f1.mean()), float(tp.sum() / pred.size), precision, recall, f1, conf)


# -- supervised loop ---------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "l_cls", "l_delta", "l_tv", "val_mf1", "val_acc")


def stratified_holdout(labels, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class shuffle; the last ``fraction`` of each class is held out."""
    labels = np.asarray(labels)
    train, held = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(fraction * len(idx)))
        if 0 < fraction and k == 0 and len(idx) > 1:
            k = 1
        train.append(idx[:len(idx) - k])
        held.append(idx[len(idx) - k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def predict(model: TCNet, windows: np.ndarray, batch: int = 128) -> np.ndarray:
    out = [model(windows[i:i + batch].astype(np.float64)).logits.data for i in range(0, len(windows), batch)]
    return np.concatenate(out, axis=0)


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_mf1: float
    stopped_early: bool

    def history_csv(self) -> str:
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in self.history:
            writer.writerow([row["epoch"]] + [f"{row[c]:.10g}" for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()


def _snapshot(model: Module) -> dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in model.state_dict().items()}


def train(model: TCNet, windows: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          val_windows: np.ndarray | None = None, val_labels: np.ndarray | None = None,
          log=None) -> TrainResult:
    """Adam + cosine schedule with early stopping on validation macro-F1.

    Without an explicit validation set, a stratified ``val_fraction`` of the
    training windows is held out.  The model ends holding the best weights.
    """
    rng = np.random.default_rng(cfg.seed)
    windows = np.asarray(windows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if val_windows is None:
        tr, va = stratified_holdout(labels, cfg.val_fraction, rng)
        val_windows, val_labels = windows[va], labels[va]
        windows, labels = windows[tr], labels[tr]
    n_classes = model.cfg.n_classes
    weights = balanced_class_weights(labels, n_classes) if cfg.class_weights else None
    model.fit_anchor_scaling(windows)
    params = model.named_parameters()
    state = AdamState()
    history: list[dict] = []
    best = (-1.0, -1, _snapshot(model))
    stale, stopped = 0, False
    for epoch in range(cfg.max_epochs):
        lr = cosine_lr(epoch, cfg.max_epochs, cfg.lr)
        order = rng.permutation(len(windows))
        sums = {"loss": 0.0, "l_cls": 0.0, "l_delta": 0.0, "l_tv": 0.0}
        n_batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            out = model(windows[idx])
            loss, parts = total_loss(out.logits, labels[idx], out.bundles, cfg.alpha, cfg.beta, weights)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"train: non-finite loss at epoch {epoch}, batch {b}")
            grads = backward(loss, wrt=params.values())
            adam_step(params, {k: grads[p] for k, p in params.items()}, state, lr, cfg.weight_decay)
            for p in params.values():
                p.grad = None
            sums["loss"] += loss.item()
            for k in ("l_cls", "l_delta", "l_tv"):
                sums[k] += parts[k]
            n_batches += 1
        report = metrics(predict(model, val_windows).argmax(axis=1), val_labels, n_classes)
        row = {"epoch": epoch, "lr": lr, "train_loss": sums["loss"] / n_batches,
               "l_cls": sums["l_cls"] / n_batches, "l_delta": sums["l_delta"] / n_batches,
               "l_tv": sums["l_tv"] / n_batches, "val_mf1": report.macro_f1, "val_acc": report.accuracy}
        history.append(row)
        if log:
            log(row)
        if report.macro_f1 > best[0]:
            best = (report.macro_f1, epoch, _snapshot(model))
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                stopped = epoch + 1 < cfg.max_epochs
                break
    model.load_state_dict(best[2])
    return TrainResult(history=history, best_epoch=best[1], best_val_mf1=best[0], stopped_early=stopped)


# -- self-supervised pretext tasks -------------------------------------------

SSL_TASKS = ("aot", "permute", "warp")


def reverse_time(window: np.ndarray) -> np.ndarray:
    return window[..., ::-1].copy()


def permute_chunks(window: np.ndarray, order) -> np.ndarray:
    length = window.shape[-1]
    if length < 40:
        raise ValueError(f"permute: window length {length} is below 4 chunks of 10 samples")
    chunks = np.array_split(window, 4, axis=-1)
    return np.concatenate([chunks[i] for i in order], axis=-1)


def time_warp(window: np.ndarray, speeds) -> np.ndarray:
    """Play four equal segments at the given speeds, then resample to the original length."""
    length = window.shape[-1]
    speeds = np.asarray(speeds, dtype=np.float64)
    knots_in = np.linspace(0.0, length - 1.0, len(speeds) + 1)
    durations = np.diff(knots_in) / speeds
    knots_out = np.concatenate([[0.0], np.cumsum(durations)])
    knots_out *= (length - 1.0) / knots_out[-1]
    source = np.interp(np.arange(length, dtype=np.float64), knots_out, knots_in)
    flat = window.reshape(-1, length)
    grid = np.arange(length, dtype=np.float64)
    return np.stack([np.interp(source, grid, row) for row in flat]).reshape(window.shape)


def ssl_transform(window: np.ndarray, kind: str, rng: np.random.Generator, p: float = 0.5):
    """Apply pretext task ``kind`` with probability ``p``; returns (window, label)."""
    window = np.asarray(window, dtype=np.float64)
    if kind == "permute" and window.shape[-1] < 40:
        raise ValueError(f"permute: window length {window.shape[-1]} is below 4 chunks of 10 samples")
    if kind not in SSL_TASKS:
        raise ValueError(f"ssl: unknown task {kind!r}")
    if rng.random() >= p:
        return window.copy(), 0
    if kind == "aot":
        return reverse_time(window), 1
    if kind == "permute":
        return permute_chunks(window, rng.permutation(4)), 1
    speeds = np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=4))
    return time_warp(window, speeds), 1


def pretext_batch(windows: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """All three tasks drawn independently per window (warp, then permute, then reversal)."""
    out = np.empty_like(windows, dtype=np.float64)
    labels = np.zeros((len(windows), 3))
    for i, w in enumerate(windows):
        w, warp = ssl_transform(w, "warp", rng)
        w, perm = ssl_transform(w, "permute", rng)
        w, aot = ssl_transform(w, "aot", rng)
        out[i] = w
        labels[i] = (aot, perm, warp)
    return out, labels


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over every element of softplus(z) - y*z."""
    return ops.mean(ops.softplus(logits) - logits * targets)


@dataclass
class PretrainResult:
    heads: PretextHeads
    history: list[dict]


def ssl_pretrain(encoder: CompactEncoder, windows: np.ndarray, cfg: TrainConfig, heads: PretextHeads | None = None,
                 anchor_weight: float = 1e-4, log=None) -> PretrainResult:
    """Jointly train the encoder and three binary pretext heads."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1] != 3:
        raise ValueError(f"pretrain: expected tri-axial windows (n, 3, L), got {windows.shape}")
    rng = np.random.default_rng(cfg.seed)
    heads = heads or PretextHeads(encoder.cfg.width, encoder.cfg.head_hidden, np.random.default_rng(cfg.seed + 1))
    encoder.fit_anchor_scaling(windows)
    params = {**{f"encoder.{k}": v for k, v in encoder.named_parameters().items()},
              **{f"heads.{k}": v for k, v in heads.named_parameters().items()}}
    state = AdamState()
    history = []
    for epoch in range(cfg.max_epochs):
        lr = cosine_lr(epoch, cfg.max_epochs, cfg.lr)
        order = rng.permutation(len(windows))
        total, correct, count, n_batches = 0.0, np.zeros(3), 0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = pretext_batch(windows[idx], rng)
            rep, bundle = forward_compact(encoder, x)
            logits = heads(rep)
            l_delta, _ = correction_regularizers(bundle)
            loss = binary_cross_entropy(logits, y) + anchor_weight * l_delta
            if not np.isfinite(loss.item()):
                raise TrainingError(f"pretrain: non-finite loss at epoch {epoch}, batch {b}")
            grads = backward(loss, wrt=params.values())
            adam_step(params, {k: grads[p] for k, p in params.items()}, state, lr, cfg.weight_decay)
            for p in params.values():
                p.grad = None
            total += loss.item()
            correct += ((logits.data > 0) == (y > 0.5)).sum(axis=0)
            count += len(idx)
            n_batches += 1
        row = {"epoch": epoch, "lr": lr, "loss": total / n_batches,
               **{f"acc_{t}": float(correct[i] / count) for i, t in enumerate(SSL_TASKS)}}
        history.append(row)
        if log:
            log(row)
    return PretrainResult(heads=heads, history=history)


def pretext_accuracy(encoder: CompactEncoder, heads: PretextHeads, windows: np.ndarray, seed: int = 0,
                     batch: int = 256) -> dict[str, float]:
    """Held-out accuracy of each head under the same independent task sampling."""
    rng = np.random.default_rng(seed)
    correct, count = np.zeros(3), 0
    for start in range(0, len(windows), batch):
        x, y = pretext_batch(np.asarray(windows[start:start + batch], dtype=np.float64), rng)
        rep, _ = forward_compact(encoder, x)
        correct += ((heads(rep).data > 0) == (y > 0.5)).sum(axis=0)
        count += len(x)
    return {t: float(correct[i] / count) for i, t in enumerate(SSL_TASKS)}


def freeze_embed(encoder: CompactEncoder, windows: np.ndarray, batch: int = 256) -> np.ndarray:
    """Concatenate the frozen representation of every tri-axial channel group."""
    windows = np.asarray(windows, dtype=np.float64)
    c = windows.shape[1]
    if c % 3:
        raise ValueError(f"freeze: channel count {c} is not divisible by 3")
    blocks = []
    for g in range(c // 3):
        part = windows[:, 3 * g:3 * g + 3]
        reps = [forward_compact(encoder, part[i:i + batch])[0].data for i in range(0, len(part), batch)]
        blocks.append(np.concatenate(reps, axis=0))
    return np.concatenate(blocks, axis=1)


def config_dict(cfg) -> dict:
    return asdict(cfg)
