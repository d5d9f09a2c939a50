"""Teacher-to-student transfer with the temperature-scaled KL objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from .gnn import Adam, GnnModel, GraphBatch, ShapeError, TrainingError, accuracy, backward, model_forward, predict


class EvaluationError(ValueError):
    pass


@dataclass
class DistillConfig:
    tau: float = 2.0
    epochs: int = 400
    batch_size: int = 32
    base_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Base rate scaled linearly from 1 (first epoch) toward 0."""
        return self.base_lr * (1.0 - epoch / self.epochs)


def kd_loss_grad(teacher_logits, student_logits, tau: float) -> tuple[float, np.ndarray]:
    """tau^2 * mean_batch KL(softmax(t/tau) || softmax(s/tau)) and its gradient on the student logits."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeError(f"teacher logits {t.shape} vs student logits {s.shape}")
    log_p = log_softmax(t / tau, axis=1)
    log_q = log_softmax(s / tau, axis=1)
    p = np.exp(log_p)
    kl = np.sum(p * (log_p - log_q), axis=1)
    grad = tau * (np.exp(log_q) - p) / len(t)
    return float(tau * tau * kl.mean()), grad


def kd_loss(teacher_logits, student_logits, tau: float) -> float:
    return kd_loss_grad(teacher_logits, student_logits, tau)[0]


def evaluate(model: GnnModel, graphs: Sequence) -> float:
    """Fraction of argmax-correct eval-mode predictions."""
    if len(graphs) == 0:
        raise EvaluationError("cannot evaluate on an empty set")
    return accuracy(model, graphs)


def train_student(student: GnnModel, teacher: GnnModel, data, config: DistillConfig,
                  test: Sequence | None = None) -> tuple[GnnModel, list[dict]]:
    """Fit ``student`` to the teacher's softened outputs on ``data``.

    ``data`` is a FakeGraphSet or a plain sequence of graphs; their labels are
    never read. Returns a trained copy and per-epoch metrics.
    """
    graphs = list(getattr(data, "graphs", data))
    if student.input_dim != teacher.input_dim:
        raise ShapeError(f"student input_dim {student.input_dim} != teacher {teacher.input_dim}")
    student = student.copy()
    metrics = []
    if config.epochs == 0 or not graphs:
        return student, metrics
    teacher_logits = predict(teacher, graphs)
    rng = np.random.default_rng(config.seed)
    opt = Adam(student.parameters(), lr=config.base_lr)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(graphs))
        losses = []
        for s in range(0, len(graphs), config.batch_size):
            idx = order[s:s + config.batch_size]
            if len(idx) < 2 and student.use_bn:
                continue
            trace = model_forward(student, GraphBatch.from_graphs([graphs[i] for i in idx]), "train")
            loss, dlogits = kd_loss_grad(teacher_logits[idx], trace.logits, config.tau)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite KD loss at epoch {epoch + 1}")
            grads, _ = backward(student, trace, dlogits)
            opt.step(grads, lr=lr)
            losses.append(loss * len(idx))
        row = {"epoch": epoch + 1, "kd_loss": float(np.sum(losses) / len(graphs))}
        if test:
            row["test_acc"] = evaluate(student, test)
        metrics.append(row)
    return student, metrics
