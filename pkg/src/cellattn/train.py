"""Training with cross-entropy and Adam, and multi-class evaluation metrics.

Weighted F1 is the support-weighted mean of per-class F1 scores, with weights
w_i = support_i / total. Zero-division conventions: precision is 0 for a class
never predicted, recall is 0 for a class with no support, and F1 is 0 when
precision + recall = 0.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from cellattn import functional as F
from cellattn.tensor import NonFiniteError, Tensor, gradient, no_grad

log = logging.getLogger(__name__)

EVAL_BATCH = 50


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    early_stop: bool = False
    patience: int = 5

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` are Tensors, ``grads`` matching numpy arrays. Moment buffers in
    ``state`` are created (zeroed) on the first call.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise ValueError("one gradient per parameter is required")
    for g in grads:
        if not np.isfinite(g).all():
            raise NonFiniteError("adam_step", "update")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        p.data = p.data - config.lr * mhat / (np.sqrt(vhat) + config.eps)
    return state


# -- metrics ----------------------------------------------------------------

@dataclass
class MetricsReport:
    class_names: list
    confusion: np.ndarray  # rows: true class, columns: predicted class
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    weights: np.ndarray
    weighted_f1: float

    @property
    def num_samples(self):
        return int(self.confusion.sum())

    def to_text(self):
        lines = [f"samples={self.num_samples}",
                 f"accuracy={self.accuracy:.17g}",
                 f"weighted_f1={self.weighted_f1:.17g}",
                 "",
                 "[per_class]",
                 "class\tprecision\trecall\tf1\tsupport\tweight"]
        for i, name in enumerate(self.class_names):
            lines.append(f"{name}\t{self.precision[i]:.17g}\t{self.recall[i]:.17g}\t{self.f1[i]:.17g}\t"
                         f"{int(self.support[i])}\t{self.weights[i]:.17g}")
        lines += ["", "[confusion]"]
        lines.append("\t".join(["true\\pred"] + list(self.class_names)))
        for i, name in enumerate(self.class_names):
            lines.append("\t".join([name] + [str(int(v)) for v in self.confusion[i]]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        section, head, rows, conf = None, {}, [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("["):
                section = line.strip("[]")
                continue
            if section is None:
                k, _, v = line.partition("=")
                head[k] = v
            elif section == "per_class" and not line.startswith("class\t"):
                rows.append(line.split("\t"))
            elif section == "confusion" and not line.startswith("true\\pred"):
                conf.append([int(v) for v in line.split("\t")[1:]])
        return cls(
            class_names=[r[0] for r in rows],
            confusion=np.array(conf, dtype=np.int64),
            accuracy=float(head["accuracy"]),
            precision=np.array([float(r[1]) for r in rows]),
            recall=np.array([float(r[2]) for r in rows]),
            f1=np.array([float(r[3]) for r in rows]),
            support=np.array([int(r[4]) for r in rows]),
            weights=np.array([float(r[5]) for r in rows]),
            weighted_f1=float(head["weighted_f1"]),
        )


def confusion_matrix(y_true, y_pred, num_classes):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    return np.bincount(y_true * num_classes + y_pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def compute_metrics(y_true, y_pred, num_classes, class_names=None):
    cm = confusion_matrix(y_true, y_pred, num_classes)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1)
    total = support.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    weights = support / total if total else np.zeros(num_classes)
    names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
    return MetricsReport(
        class_names=names,
        confusion=cm,
        accuracy=float(tp.sum() / total) if total else 0.0,
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        weights=weights,
        weighted_f1=float((f1 * weights).sum()),
    )


# -- training / evaluation ---------------------------------------------------

def predict_logits(model, images, batch_size=EVAL_BATCH):
    """Eval-mode logits for an (N, C, H, W) array, in fixed-size batches."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                batch = Tensor(images[start:start + batch_size].astype(model_dtype(model), copy=False))
                out.append(model.logits(batch).data)
    finally:
        model.train(was_training)
    return np.concatenate(out)


def model_dtype(model):
    return model.parameters()[0].dtype


def evaluate(model, dataset):
    """Argmax predictions (ties go to the lowest class index) scored against labels."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty sample set")
    logits = predict_logits(model, dataset.images)
    preds = np.argmax(logits, axis=1)
    return compute_metrics(dataset.labels, preds, dataset.num_classes, dataset.class_names)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int | None
    best_val_accuracy: float | None


def history_csv(history):
    lines = ["epoch,train_loss,val_accuracy"]
    lines += [f"{r.epoch},{r.train_loss:.17g},{r.val_accuracy:.17g}" for r in history]
    return "\n".join(lines) + "\n"


def train(model, split, config=TrainConfig(), on_epoch=None):
    """Mini-batch Adam on cross-entropy; keeps the best-validation-accuracy weights.

    ``split`` must already be normalized. The returned model carries the
    parameters and running statistics of the best epoch (ties keep the
    earliest). Identical seeds give bit-identical results.
    """
    train_set = split.part("train")
    val_set = split.part("validation")
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("training needs non-empty train and validation splits")
    params = model.parameters()
    dtype = model_dtype(model)
    state = AdamState()
    rng = np.random.default_rng([int(config.seed), 7919])
    history = []
    best_state, best_acc, best_epoch = None, None, None
    stale = 0
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = Tensor(train_set.images[idx].astype(dtype, copy=False))
            try:
                loss = F.cross_entropy_with_logits(model.logits(x), train_set.labels[idx])
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value in forward pass at epoch {epoch}, batch {bi}: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = gradient(loss, params)
            adam_step(params, grads, state, config)
            losses.append(loss.item() * len(idx))
        train_loss = float(np.sum(losses) / n)
        val_acc = evaluate(model, val_set).accuracy
        history.append(EpochRecord(epoch, train_loss, val_acc))
        log.info("epoch %d: train_loss=%.4f val_accuracy=%.4f", epoch, train_loss, val_acc)
        if on_epoch is not None:
            on_epoch(history[-1])
        if best_acc is None or val_acc > best_acc:
            best_acc, best_epoch, best_state = val_acc, epoch, model.state_dict()
            stale = 0
        else:
            stale += 1
            if config.early_stop and stale >= config.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_acc)
