"""Multinomial logistic regression trained by mini-batch gradient descent.

Deliberately simple and fully deterministic: per-feature standardization
fitted on the training split, softmax cross-entropy, fixed learning rate,
seeded shuffling.  Serves as the shared linear head on top of whichever
first-layer features an experiment arm produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-8))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass
class ClassifierResult:
    weights: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)
    standardizer: Standardizer
    classes: np.ndarray
    epoch_loss: list[float] = field(default_factory=list)
    accuracy: float | None = None
    per_class_accuracy: np.ndarray | None = None


def softmax_loss_and_grad(weights, bias, x, onehot):
    """Mean cross-entropy and its gradients for logits ``x @ weights + bias``."""
    logits = x @ weights + bias
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = x.shape[0]
    eps = 1e-300
    loss = -np.mean(np.log(np.maximum((probs * onehot).sum(axis=1), eps)))
    delta = (probs - onehot) / n
    return loss, x.T @ delta, delta.sum(axis=0)


def predict(result: ClassifierResult, features: np.ndarray) -> np.ndarray:
    z = result.standardizer.transform(np.asarray(features, dtype=np.float64))
    logits = z @ result.weights + result.bias
    return result.classes[np.argmax(logits, axis=1)]


def accuracy_by_class(pred, labels, classes):
    per_class = np.array([
        np.mean(pred[labels == c] == c) if np.any(labels == c) else np.nan
        for c in classes
    ])
    return float(np.mean(pred == labels)), per_class


def train_linear_classifier(features, labels, cfg: TrainConfig,
                            eval_features=None, eval_labels=None) -> ClassifierResult:
    """Train the linear head; optionally evaluate on a held-out split.

    Raises:
        ValueError: non-finite features, fewer than two classes, or a
            diverged loss (advises lowering the learning rate).
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    classes = np.unique(labels)
    if classes.shape[0] < 2:
        raise ValueError("need at least two classes")
    std = Standardizer.fit(x)
    x = std.transform(x)
    n, dim = x.shape
    k = classes.shape[0]
    onehot = (labels[:, None] == classes[None, :]).astype(np.float64)

    rng = np.random.default_rng(cfg.seed)
    weights = np.zeros((dim, k))
    bias = np.zeros(k)
    result = ClassifierResult(weights, bias, std, classes)

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, gw, gb = softmax_loss_and_grad(weights, bias, x[idx], onehot[idx])
            if not np.isfinite(loss):
                raise ValueError(
                    "training diverged (loss is not finite); lower the learning rate"
                )
            weights -= cfg.learning_rate * gw
            bias -= cfg.learning_rate * gb
            running += loss * idx.shape[0]
        result.epoch_loss.append(running / n)

    if eval_features is not None:
        pred = predict(result, eval_features)
        result.accuracy, result.per_class_accuracy = accuracy_by_class(
            pred, np.asarray(eval_labels).reshape(-1), classes
        )
    return result
