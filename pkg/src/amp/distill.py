"""Distillation-based recovery and the shared training machinery.

The pruned model is trained to match the frozen original model's final
class-token and patch-token embeddings under an MSE loss; because pruning
preserves output dimensions, no adapter is needed. The optimizer is AdamW
with linear warmup and cosine decay to ``min_lr``, with the effective peak
``lr = base_lr * batch_size / 256``.

The same optimizer/schedule also backs the supervised warm-up that turns a
randomly initialized toy model into a usable stand-in for a pretrained
backbone (``train_supervised``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .criterion import cross_entropy_criterion
from .errors import ContractError, NumericError, ParameterError
from .model import ForwardRecord, VitModel, forward


@dataclass
class DistillConfig:
    epochs: int = 10
    warmup_epochs: int = 1
    base_lr: float = 5e-5
    min_lr: float = 1e-7
    batch_size: int = 64
    weight_decay: float = 0.0
    beta1: float = 0.90
    beta2: float = 0.95
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ParameterError("need 0 <= warmup_epochs < epochs")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0


@dataclass
class LossRecord:
    step: int
    loss: float
    lr: float


def lr_at(config: DistillConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warmup from 0, then cosine decay hitting min_lr at the last step."""
    if step < 0:
        raise ParameterError("step must be >= 0")
    total = config.epochs * steps_per_epoch
    warm = config.warmup_epochs * steps_per_epoch
    peak = config.peak_lr
    if step < warm:
        return peak * step / warm
    last = total - 1
    if step >= last or last == warm:
        return config.min_lr
    t = (step - warm) / (last - warm)
    return config.min_lr + 0.5 * (peak - config.min_lr) * (1.0 + math.cos(math.pi * t))


def distill_loss(teacher: ForwardRecord, student: ForwardRecord) -> Tensor:
    """(1/C)||z_cls - z_cls'||^2 + (1/(N C))||z_patch - z_patch'||^2, batch mean."""
    if teacher.z_cls.shape != student.z_cls.shape \
            or teacher.z_patch.shape != student.z_patch.shape:
        raise ContractError(
            f"teacher/student output shapes differ: {teacher.z_cls.shape} vs "
            f"{student.z_cls.shape}, {teacher.z_patch.shape} vs {student.z_patch.shape}")
    b, c = teacher.z_cls.shape
    n = teacher.z_patch.shape[1]
    dc = student.z_cls - Tensor(teacher.z_cls.data)
    dp = student.z_patch - Tensor(teacher.z_patch.data)
    cls_term = ad.scale(ad.tensor_sum(dc * dc), 1.0 / (b * c))
    patch_term = ad.scale(ad.tensor_sum(dp * dp), 1.0 / (b * n * c))
    return cls_term + patch_term


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list."""

    def __init__(self, params: list[Tensor], config: DistillConfig):
        self.params = params
        self.config = config
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.config
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = cfg.beta1 * self.m[i] + (1 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1 - cfg.beta2) * g * g
            mhat = self.m[i] / (1 - cfg.beta1**self.t)
            vhat = self.v[i] / (1 - cfg.beta2**self.t)
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + cfg.eps)
                                    + cfg.weight_decay * p.data)


def _teacher_outputs(teacher: VitModel, images: np.ndarray, batch_size: int
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Precompute frozen teacher embeddings for the whole dataset."""
    cls_parts, patch_parts = [], []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            rec = forward(teacher, images[start:start + batch_size])
            cls_parts.append(rec.z_cls.data)
            patch_parts.append(rec.z_patch.data)
    return np.concatenate(cls_parts), np.concatenate(patch_parts)


def train(student: VitModel, teacher: VitModel, dataset,
          config: DistillConfig) -> tuple[VitModel, list[LossRecord]]:
    """Distill the student against the frozen teacher; deterministic per seed."""
    records: list[LossRecord] = []
    if config.epochs == 0:
        return student, records
    n = len(dataset)
    spe = n // config.batch_size
    if spe == 0:
        raise ParameterError(f"dataset of {n} gives no full batch of {config.batch_size}")
    t_cls, t_patch = _teacher_outputs(teacher, dataset.images, config.batch_size)
    rng = np.random.default_rng(config.seed)
    opt = AdamW(list(student.params.values()), config)
    step = 0
    for _epoch in range(config.epochs):
        perm = rng.permutation(n)
        for b in range(spe):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            srec = forward(student, dataset.images[idx])
            trec = ForwardRecord(z_cls=Tensor(t_cls[idx]),
                                 z_patch=Tensor(t_patch[idx]), hidden_captures={})
            loss = distill_loss(trec, srec)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite distillation loss {value} at step {step}")
            ad.backward(loss)
            lr = lr_at(config, step, spe)
            opt.step(lr)
            records.append(LossRecord(step=step, loss=value, lr=lr))
            step += 1
    return student, records


def train_supervised(model: VitModel, num_classes: int, dataset,
                     config: DistillConfig,
                     head: dict[str, np.ndarray] | None = None
                     ) -> tuple[dict[str, np.ndarray], list[LossRecord]]:
    """Train backbone plus a linear head with one-hot cross entropy.

    Used to prepare the toy "original model". Returns the head arrays so
    the cross-entropy ablation criterion can reuse them; the backbone is
    updated in place.
    """
    if dataset.labels is None:
        raise ParameterError("supervised training requires labels")
    c = model.config.embed_dim
    if head is None:
        rng = np.random.default_rng(config.seed + 1)
        head = {"head_w": rng.normal(0.0, 0.02, size=(c, num_classes)),
                "head_b": np.zeros(num_classes)}
    head_w = Tensor(head["head_w"], requires_grad=True)
    head_b = Tensor(head["head_b"], requires_grad=True)
    records: list[LossRecord] = []
    if config.epochs == 0:
        return head, records
    n = len(dataset)
    spe = n // config.batch_size
    if spe == 0:
        raise ParameterError(f"dataset of {n} gives no full batch of {config.batch_size}")
    rng = np.random.default_rng(config.seed)
    opt = AdamW(list(model.params.values()) + [head_w, head_b], config)
    step = 0
    for _epoch in range(config.epochs):
        perm = rng.permutation(n)
        for b in range(spe):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            rec = forward(model, dataset.images[idx])
            logits = ad.matmul(rec.z_cls, head_w) + ad.reshape(head_b, (1, num_classes))
            loss = cross_entropy_criterion(logits, dataset.labels[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss {value} at step {step}")
            ad.backward(loss)
            lr = lr_at(config, step, spe)
            opt.step(lr)
            records.append(LossRecord(step=step, loss=value, lr=lr))
            step += 1
    return {"head_w": head_w.data, "head_b": head_b.data}, records


def write_loss_curve(records: list[LossRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
        for r in records:
            writer.writerow([r.step, repr(r.loss), repr(r.lr)])
