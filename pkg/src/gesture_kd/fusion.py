"""Fusion and ensemble classifiers, distillation losses, and the joint training step."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .nn import ClassifierHead, Module
from .onlstm import ONLSTMNet
from .transformer import TransformerNet


class LogitSet(NamedTuple):
    transformer: Tensor
    onlstm: Tensor
    fusion: Tensor
    ensemble: Tensor


CLASSIFIERS = LogitSet._fields


class Losses(NamedTuple):
    transformer: float
    onlstm: float
    fusion: float

    @property
    def total(self) -> float:
        return self.transformer + self.onlstm + self.fusion


def soften(logits, temperature: float) -> Tensor:
    """Temperature-softened softmax over the last axis."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return ag.softmax(ag.as_tensor(logits) * (1.0 / temperature), axis=-1)


def ensemble_logits(logit_t, logit_o) -> Tensor:
    logit_t, logit_o = ag.as_tensor(logit_t), ag.as_tensor(logit_o)
    if logit_t.shape != logit_o.shape:
        raise ValueError(f"logit shapes differ: {logit_t.shape} vs {logit_o.shape}")
    return (logit_t + logit_o) / 2.0


def kl_divergence(teacher, student) -> Tensor:
    """Batch-mean sum_i teacher_i * ln(teacher_i / student_i) over the last axis."""
    teacher, student = ag.as_tensor(teacher), ag.as_tensor(student)
    terms = teacher * (ag.log(teacher) - ag.log(student))
    return _batch_mean(terms.sum(axis=-1))


def kd_loss(teacher_logits, student_logits, temperature: float) -> Tensor:
    """T^2-scaled KL from the softened teacher to the softened student.

    The teacher is detached, so gradients reach only the student.  The student
    side uses log-softmax to stay finite for saturated logits.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    teacher = soften(ag.as_tensor(teacher_logits).detach(), temperature)
    log_student = ag.log_softmax(ag.as_tensor(student_logits) * (1.0 / temperature), axis=-1)
    log_teacher = np.log(np.where(teacher.data > 0, teacher.data, 1.0))
    kl = (teacher * (log_teacher - log_student)).sum(axis=-1)
    return _batch_mean(kl) * (temperature ** 2)


def _batch_mean(values: Tensor) -> Tensor:
    return values.mean() if values.ndim else values


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    if labels.dtype.kind not in "iu" or labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(f"labels must be integers in [0, {num_classes}), got {labels}")
    return labels


def cross_entropy(logits, labels) -> Tensor:
    """Batch-mean CE of plain (T=1) softmax against integer class labels."""
    logits = ag.as_tensor(logits)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits.reshape(1, -1)
    labels = _check_labels(labels, logits.shape[-1])
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {logits.shape[0]}")
    picked = ag.log_softmax(logits, axis=-1)[np.arange(len(labels)), labels]
    return -picked.mean()


def sub_network_loss(logit_m, logit_f, labels, temperature: float, kd_weight: float = 1.0) -> Tensor:
    """Sub-network loss: fusion-to-sub-network distillation plus CE."""
    return kd_loss(logit_f, logit_m, temperature) * kd_weight + cross_entropy(logit_m, labels)


def fusion_loss(logit_f, logit_e, labels, temperature: float, kd_weight: float = 1.0) -> Tensor:
    """Fusion loss: ensemble-to-fusion distillation plus CE."""
    return kd_loss(logit_e, logit_f, temperature) * kd_weight + cross_entropy(logit_f, labels)


class FusionMLP(ClassifierHead):
    """Three affine layers over concatenated sub-network features."""

    def __init__(self, feature_dim: int, hidden: int, num_classes: int, dropout: float,
                 rng: np.random.Generator):
        super().__init__(2 * feature_dim, hidden, num_classes, dropout, rng)


def fusion_forward(feat_t, feat_o, params: FusionMLP) -> Tensor:
    _, logits = params(ag.concat([feat_t, feat_o], axis=-1))
    return logits


class KnowledgeSharingModel(Module):
    """Transformer + ON-LSTM sub-networks, fusion MLP, and the parameter-free ensemble head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self.transformer = TransformerNet(config, self._rng)
        self.onlstm = ONLSTMNet(config, self._rng)
        self.fusion = FusionMLP(config.fc_dim, config.fc_dim, config.num_classes, config.dropout, self._rng)

    @property
    def rng(self) -> np.random.Generator:
        return self._rng

    def forward(self, x) -> LogitSet:
        feat_t, logit_t = self.transformer(x)
        feat_o, logit_o = self.onlstm(x)
        logit_f = fusion_forward(feat_t, feat_o, self.fusion)
        return LogitSet(logit_t, logit_o, logit_f, ensemble_logits(logit_t, logit_o))


def joint_losses(logits: LogitSet, labels, temperature: float, kd_weight: float = 1.0):
    loss_t = sub_network_loss(logits.transformer, logits.fusion, labels, temperature, kd_weight)
    loss_o = sub_network_loss(logits.onlstm, logits.fusion, labels, temperature, kd_weight)
    loss_f = fusion_loss(logits.fusion, logits.ensemble, labels, temperature, kd_weight)
    return loss_t, loss_o, loss_f


def joint_training_step(model: KnowledgeSharingModel, optimizer, windows, labels, lr: float,
                        temperature: float = 3.0, kd_weight: float = 1.0) -> Losses:
    """One forward through all classifiers, one backward of L_t + L_o + L_f, one update."""
    model.train()
    model.zero_grad()
    try:
        logits = model(ag.as_tensor(windows))
        loss_t, loss_o, loss_f = joint_losses(logits, labels, temperature, kd_weight)
        total = loss_t + loss_o + loss_f
    except ag.NonFiniteError as exc:
        raise ag.NonFiniteError(f"non-finite forward pass at lr={lr}: {exc}") from exc
    ag.backward(total)
    optimizer.step(lr)
    return Losses(loss_t.item(), loss_o.item(), loss_f.item())
