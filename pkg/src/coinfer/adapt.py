"""Pseudo-label training of the edge model and the gate.

The edge model is fitted to cloud-assisted pseudo-labels with the gate frozen;
the gate is then fitted against the per-sample edge loss with the edge model
frozen, using ``h * l - beta * log(h)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .gating import FEATURE_DIM, Gate, GateFeatures, extract_features, gate_score, sigmoid
from .models import TrainableEdgeModel, pixel_features
from .tensors import Image, ProbMap, SemanticMask


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta: float = 0.1
    epochs: int = 50
    eps: float = 1e-6
    # None means "same as learning_rate"
    gate_learning_rate: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or self.beta <= 0 or self.epochs < 1:
            raise ValueError("learning_rate must be >= 0, beta > 0 and epochs >= 1")
        if not 0 < self.eps < 1e-3:
            raise ValueError("eps must lie in (0, 1e-3)")
        if self.gate_learning_rate is not None and self.gate_learning_rate < 0:
            raise ValueError("gate_learning_rate must be >= 0")

    @property
    def gate_lr(self) -> float:
        return self.learning_rate if self.gate_learning_rate is None else self.gate_learning_rate


class ReplayBuffer:
    """FIFO store of (image, pseudo-label) pairs awaiting a training round."""

    def __init__(self):
        self._items: list[tuple[Image, SemanticMask]] = []

    def append(self, img: Image, pseudo: SemanticMask) -> None:
        if img.shape != pseudo.shape:
            raise ValueError("pseudo-label does not match image dimensions")
        self._items.append((img, pseudo))

    def items(self) -> list[tuple[Image, SemanticMask]]:
        return list(self._items)

    def clear(self) -> None:
        self._items.clear()

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(list(self._items))


# -- edge model -------------------------------------------------------------


def loss_f(pred: ProbMap, pseudo: SemanticMask, eps: float = 1e-6) -> float:
    """Mean per-pixel cross-entropy of ``pred`` against hard pseudo-labels."""
    if pred.shape != pseudo.shape:
        raise ValueError(f"prediction is {pred.shape} but pseudo-label is {pseudo.shape}")
    p = np.take_along_axis(pred.probs, pseudo.labels[None], axis=0)[0]
    return float(np.mean(-np.log(np.maximum(p, eps))))


def _stack_batch(batch: Sequence[tuple[Image, SemanticMask]]):
    """Pixel features (5, N), labels (N,) and per-pixel weights (N,) for a batch."""
    feats, labels, weights = [], [], []
    for img, pseudo in batch:
        if img.shape != pseudo.shape:
            raise ValueError("pseudo-label does not match image dimensions")
        x = pixel_features(img)
        feats.append(x)
        labels.append(pseudo.labels.ravel())
        weights.append(np.full(len(x), 1.0 / (len(x) * len(batch))))
    return np.ascontiguousarray(np.vstack(feats).T), np.concatenate(labels), np.concatenate(weights)


def edge_loss_and_grad(model: TrainableEdgeModel, xt: np.ndarray, y: np.ndarray,
                       wts: np.ndarray, eps: float = 1e-6) -> tuple[float, np.ndarray]:
    """Weighted clamped cross-entropy and its gradient in ``model.params()`` layout.

    ``xt`` holds pixel features column-wise, shape (5, N).
    """
    # class-major layout keeps the softmax reductions on the short axis cheap
    z = model.weights @ xt + model.bias[:, None]
    z -= z.max(axis=0)
    np.exp(z, out=z)
    z /= z.sum(axis=0)
    idx = np.arange(len(y))
    py = z[y, idx]
    loss = float(np.dot(wts, -np.log(np.maximum(py, eps))))
    z[y, idx] -= 1.0
    # the clamp is flat below eps
    z *= wts * (py > eps)
    grad_w = z @ xt.T
    grad_b = z.sum(axis=1)
    return loss, np.column_stack([grad_w, grad_b]).ravel()


def update_f(model: TrainableEdgeModel, batch: Sequence[tuple[Image, SemanticMask]],
             cfg: TrainConfig) -> tuple[TrainableEdgeModel, float]:
    """Full-batch gradient descent, one step per epoch.

    Returns the updated model and the batch-mean loss before the first step.
    """
    if not batch:
        raise ValueError("cannot train on an empty batch")
    xt, y, wts = _stack_batch(batch)
    m = model.class_count
    first_loss = None
    for _ in range(cfg.epochs):
        loss, grad = edge_loss_and_grad(model, xt, y, wts, cfg.eps)
        if first_loss is None:
            first_loss = loss
        model = TrainableEdgeModel.from_params(model.params() - cfg.learning_rate * grad, m)
    return model, first_loss


def batch_loss_f(model: TrainableEdgeModel, batch: Sequence[tuple[Image, SemanticMask]],
                 eps: float = 1e-6) -> float:
    return float(np.mean([loss_f(model.infer(img), pseudo, eps) for img, pseudo in batch]))


# -- gate -------------------------------------------------------------------


def loss_h(conf: float, sample_loss: float, beta: float, eps: float = 1e-6) -> float:
    c = min(max(conf, eps), 1.0 - eps)
    return float(c * sample_loss - beta * np.log(c))


def _feature_matrix(feats: Iterable) -> np.ndarray:
    rows = [f.as_array() if isinstance(f, GateFeatures) else np.asarray(f, dtype=float)
            for f in feats]
    return np.vstack(rows).reshape(-1, FEATURE_DIM)


def gate_loss_and_grad(gate: Gate, x: np.ndarray, losses: np.ndarray, beta: float,
                       eps: float = 1e-6) -> tuple[float, np.ndarray]:
    """Batch-mean gate loss and its gradient in ``gate.to_vector()`` layout."""
    n = len(x)
    hidden = np.tanh(x @ gate.w1.T + gate.b1)
    conf = sigmoid(hidden @ gate.w2 + gate.b2)
    c = np.clip(conf, eps, 1.0 - eps)
    loss = float(np.mean(c * losses - beta * np.log(c)))
    inside = (conf > eps) & (conf < 1.0 - eps)
    d_conf = np.where(inside, losses - beta / c, 0.0) / n
    d_z = d_conf * conf * (1.0 - conf)
    grad_w2 = hidden.T @ d_z
    grad_b2 = d_z.sum()
    d_hidden = np.outer(d_z, gate.w2) * (1.0 - hidden ** 2)
    grad_w1 = d_hidden.T @ x
    grad_b1 = d_hidden.sum(axis=0)
    return loss, np.concatenate([grad_w1.ravel(), grad_b1, grad_w2, [grad_b2]])


def update_h(gate: Gate, batch: Sequence[tuple[GateFeatures, float]],
             cfg: TrainConfig) -> tuple[Gate, float]:
    """Gradient descent on the batch-mean gate loss; returns the pre-step loss."""
    if not batch:
        raise ValueError("cannot train on an empty batch")
    x = _feature_matrix(f for f, _ in batch)
    losses = np.array([l for _, l in batch], dtype=float)
    if np.any(losses < 0):
        raise ValueError("sample losses must be non-negative")
    first_loss = None
    for _ in range(cfg.epochs):
        loss, grad = gate_loss_and_grad(gate, x, losses, cfg.beta, cfg.eps)
        if first_loss is None:
            first_loss = loss
        gate = Gate.from_vector(gate.to_vector() - cfg.gate_lr * grad, gate.hidden_dim)
    return gate, first_loss


def gate_batch(model, batch: Sequence[tuple[Image, SemanticMask]],
               eps: float = 1e-6) -> list[tuple[GateFeatures, float]]:
    """Gate training pairs (features of f(x), loss of f(x) against its pseudo-label)."""
    out = []
    for img, pseudo in batch:
        pred = model.infer(img)
        out.append((extract_features(pred), loss_f(pred, pseudo, eps)))
    return out


def objective_from_values(confidences, sample_losses, beta: float, eps: float = 1e-6) -> float:
    confidences = list(confidences)
    if not confidences:
        raise ValueError("objective needs at least one sample")
    return float(np.mean([loss_h(c, l, beta, eps) for c, l in zip(confidences, sample_losses)]))


def objective_value(samples: Sequence[tuple[Image, SemanticMask]], model, gate: Gate,
                    cfg: TrainConfig) -> float:
    """Empirical mean of ``h(f(x)) * l(f(x), F(x)) - beta * log h(f(x))`` (reporting only)."""
    if not samples:
        raise ValueError("objective needs at least one sample")
    pairs = gate_batch(model, samples, cfg.eps)
    confs = [gate_score(gate, feats) for feats, _ in pairs]
    return objective_from_values(confs, [l for _, l in pairs], cfg.beta, cfg.eps)
