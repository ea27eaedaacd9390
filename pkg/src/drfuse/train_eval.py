"""Training loop and the multi-class metric suite.

Metrics are computed from scratch (one-vs-rest TP/TN/FP/FN per class,
macro and micro averages, threshold-swept ROC with trapezoidal AUC) so they
can be checked against independent brute-force tallies.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch
from torch import nn

from drfuse.dataset import GRADES
from drfuse.enhance import normalize_resize


class TrainEvalError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-5
    epochs: int = 60
    seed: int = 0
    optimizer: str = "adam"
    loss: str = "categorical_crossentropy"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainEvalError("learning_rate must be positive")
        if self.epochs < 1:
            raise TrainEvalError("epochs must be >= 1")


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    precision_micro: float
    recall_micro: float
    f1_micro: float
    confusion: np.ndarray
    per_class: dict
    per_class_roc: dict


def _labels_to_indices(labels, label_order):
    labels = np.asarray(labels)
    if labels.dtype.kind in "iu":
        if labels.size and (labels.min() < 0 or labels.max() >= len(label_order)):
            raise TrainEvalError("label index out of range")
        return labels.astype(np.int64)
    index = {name: i for i, name in enumerate(label_order)}
    try:
        return np.array([index[l] for l in labels], dtype=np.int64)
    except KeyError as exc:
        raise TrainEvalError(f"unknown label {exc.args[0]!r}") from None


def _epoch_pass(module, X, y, batch_size, criterion, optimizer=None, rng=None):
    n = len(X)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    total_loss = 0.0
    total_correct = 0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        xb = torch.as_tensor(np.transpose(X[idx], (0, 3, 1, 2)))
        yb = torch.as_tensor(y[idx])
        if optimizer is not None:
            optimizer.zero_grad()
            logits = module.logits(xb)
            loss = criterion(logits, yb)
            loss.backward()
            optimizer.step()
        else:
            with torch.no_grad():
                logits = module.logits(xb)
                loss = criterion(logits, yb)
        total_loss += float(loss.detach()) * len(idx)
        total_correct += int((logits.argmax(dim=1) == yb).sum())
    return total_loss / n, total_correct / n


def train(model, data, cfg):
    """Fit a model on (X_train, y_train, X_val, y_val) arrays.

    X arrays are NHWC floats in [0, 1]; y holds grade names or indices.
    The epoch with the best validation accuracy is restored at the end.
    """
    X_train, y_train, X_val, y_val = data
    if len(X_train) == 0 or len(X_val) == 0:
        raise TrainEvalError("train and val splits must be non-empty")
    X_train = np.asarray(X_train, dtype=np.float32)
    X_val = np.asarray(X_val, dtype=np.float32)
    y_train = _labels_to_indices(y_train, model.label_order)
    y_val = _labels_to_indices(y_val, model.label_order)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    module = model.module
    if cfg.optimizer != "adam":
        raise TrainEvalError(f"unsupported optimizer {cfg.optimizer!r}")
    params = [p for p in module.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    criterion = nn.CrossEntropyLoss()

    history = History()
    best_acc = -1.0
    best_state = None
    for _ in range(cfg.epochs):
        module.train()
        loss, acc = _epoch_pass(module, X_train, y_train, cfg.batch_size,
                                criterion, optimizer, rng)
        module.eval()
        val_loss, val_acc = _epoch_pass(module, X_val, y_val, cfg.batch_size, criterion)
        history.train_loss.append(loss)
        history.train_accuracy.append(acc)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_state = {k: v.detach().clone() for k, v in module.state_dict().items()}
    if best_state is not None:
        module.load_state_dict(best_state)
    module.eval()
    return model, history


def confusion(labels, predictions, label_order=GRADES):
    """Count matrix: entry (i, j) = true class i predicted as class j."""
    t = _labels_to_indices(labels, label_order)
    p = _labels_to_indices(predictions, label_order)
    if len(t) != len(p):
        raise TrainEvalError("labels and predictions differ in length")
    n = len(label_order)
    mat = np.zeros((n, n), dtype=np.int64)
    np.add.at(mat, (t, p), 1)
    return mat


def metrics(conf):
    """Per-class one-vs-rest precision/recall/F1 plus macro and micro averages.

    0/0 ratios resolve to 0.
    """
    conf = np.asarray(conf, dtype=np.int64)
    total = conf.sum()
    if total == 0:
        raise TrainEvalError("empty confusion matrix")

    def ratio(num, den):
        return num / den if den else 0.0

    per_class = {}
    tps = fps = fns = 0
    for c in range(len(conf)):
        tp = int(conf[c, c])
        fp = int(conf[:, c].sum() - tp)
        fn = int(conf[c, :].sum() - tp)
        precision = ratio(tp, tp + fp)
        recall = ratio(tp, tp + fn)
        f1 = ratio(2 * precision * recall, precision + recall)
        per_class[c] = {"precision": precision, "recall": recall, "f1": f1,
                        "support": int(conf[c, :].sum())}
        tps, fps, fns = tps + tp, fps + fp, fns + fn

    macro = {k: float(np.mean([v[k] for v in per_class.values()]))
             for k in ("precision", "recall", "f1")}
    p_micro = ratio(tps, tps + fps)
    r_micro = ratio(tps, tps + fns)
    return {
        "accuracy": float(np.trace(conf) / total),
        "precision": macro["precision"],
        "recall": macro["recall"],
        "f1": macro["f1"],
        "precision_micro": p_micro,
        "recall_micro": r_micro,
        "f1_micro": ratio(2 * p_micro * r_micro, p_micro + r_micro),
        "per_class": per_class,
    }


def roc_curve(scores, labels):
    """One-vs-rest ROC: (FPR, TPR) points swept over descending unique scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise TrainEvalError("ROC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    for i in range(len(scores)):
        tp += labels[i]
        fp += 1 - labels[i]
        # emit a point only after the last sample of a tied score group
        if i + 1 == len(scores) or scores[i + 1] != scores[i]:
            points.append((fp / neg, tp / pos))
    return points


def auc(curve):
    """Trapezoidal area under an ROC curve."""
    fpr = np.array([p[0] for p in curve])
    tpr = np.array([p[1] for p in curve])
    return float(np.trapezoid(tpr, fpr))


def evaluate(model, X, labels):
    """Full metric report on a test set: scalar metrics, confusion, ROC/AUC."""
    X = np.asarray(X, dtype=np.float32)
    if len(X) == 0:
        raise TrainEvalError("empty test split")
    y_true = _labels_to_indices(labels, model.label_order)
    probs = model.predict(X)
    preds = probs.argmax(axis=1)  # ties break toward the lowest class index
    conf = confusion(y_true, preds, model.label_order)
    scalars = metrics(conf)

    curves = {}
    aucs = []
    for c, grade in enumerate(model.label_order):
        binary = (y_true == c).astype(np.int64)
        if binary.sum() in (0, len(binary)):
            continue
        curve = roc_curve(probs[:, c], binary)
        curves[grade] = curve
        aucs.append(auc(curve))
    macro_auc = float(np.mean(aucs)) if aucs else 0.0

    return MetricsReport(
        accuracy=scalars["accuracy"],
        precision=scalars["precision"],
        recall=scalars["recall"],
        f1=scalars["f1"],
        auc=macro_auc,
        precision_micro=scalars["precision_micro"],
        recall_micro=scalars["recall_micro"],
        f1_micro=scalars["f1_micro"],
        confusion=conf,
        per_class={model.label_order[c]: v for c, v in scalars["per_class"].items()},
        per_class_roc=curves,
    )


def load_split_arrays(manifest, split, size=128):
    """Load a manifest split as (X, y) ready for train/evaluate."""
    records = manifest.subset(split)
    X = np.empty((len(records), size, size, 3), dtype=np.float32)
    y = []
    for i, rec in enumerate(records):
        img = cv2.imread(rec.path, cv2.IMREAD_COLOR)
        if img is None:
            raise TrainEvalError(f"cannot read image {rec.path}")
        X[i] = normalize_resize(cv2.cvtColor(img, cv2.COLOR_BGR2RGB), size=size)
        y.append(rec.label)
    return X, np.array(y)


def save_report(report, directory, label_order=GRADES):
    """Persist a report as delimited text plus curve point files and plots."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "metrics.txt"), "w") as fh:
        for name in ("accuracy", "precision", "recall", "f1", "auc",
                     "precision_micro", "recall_micro", "f1_micro"):
            fh.write(f"{name},{getattr(report, name):.6f}\n")
        for grade, vals in report.per_class.items():
            for key in ("precision", "recall", "f1"):
                fh.write(f"{grade}_{key},{vals[key]:.6f}\n")
    with open(os.path.join(directory, "confusion.txt"), "w") as fh:
        fh.write("\t".join(("true\\pred",) + tuple(label_order)) + "\n")
        for grade, row in zip(label_order, report.confusion):
            fh.write("\t".join([grade] + [str(int(v)) for v in row]) + "\n")
    for grade, curve in report.per_class_roc.items():
        with open(os.path.join(directory, f"roc_{grade}.txt"), "w") as fh:
            fh.write("fpr,tpr\n")
            for fpr, tpr in curve:
                fh.write(f"{fpr:.6f},{tpr:.6f}\n")
    plot_roc(report, os.path.join(directory, "roc.png"))


def plot_roc(report, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    for grade, curve in report.per_class_roc.items():
        ax.plot([p[0] for p in curve], [p[1] for p in curve], label=grade)
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(f"One-vs-rest ROC (macro AUC {report.auc:.3f})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_history(history, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    epochs = range(1, len(history) + 1)
    ax1.plot(epochs, history.train_loss, label="train")
    ax1.plot(epochs, history.val_loss, label="val")
    ax1.set_title("Loss")
    ax1.legend()
    ax2.plot(epochs, history.train_accuracy, label="train")
    ax2.plot(epochs, history.val_accuracy, label="val")
    ax2.set_title("Accuracy")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
