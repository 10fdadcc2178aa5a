"""Label-free information-entropy criterion and the cross-entropy baseline.

The entropy criterion is the mean Shannon entropy of the rows of the
temperature-softmaxed inter-instance cosine-similarity matrix of a batch's
class-token embeddings. It needs no labels and no classification head, so it
applies to any backbone. The one-hot cross-entropy criterion is kept as the
ablation baseline and needs logits from a trained head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ParameterError
from .model import VitModel, forward


@dataclass
class EntropyRecord:
    value: float          # nats, in [0, ln B]
    batch_size: int
    temperature: float
    dataset_tag: str
    num_batches: int = 1


def similarity(z_cls: Tensor) -> Tensor:
    """B x B cosine-similarity matrix of row embeddings, differentiable.

    Zero-norm rows raise instead of being epsilon-patched: a silent guard
    would corrupt the gradients the importance scores are built from.
    """
    if z_cls.ndim != 2 or z_cls.shape[0] < 2:
        raise ParameterError(f"need a B x C batch with B >= 2, got shape {z_cls.shape}")
    sq = ad.tensor_sum(z_cls * z_cls, axis=1, keepdims=True)
    if np.any(sq.data <= 0.0):
        raise NumericError("zero-norm embedding in similarity computation")
    zn = z_cls / ad.sqrt(sq)
    return ad.matmul(zn, ad.transpose(zn, (1, 0)))


def prediction_probs(s: Tensor, temperature: float) -> Tensor:
    """Row-wise softmax of s / temperature; the diagonal stays in the sum."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    return ad.softmax(s, axis=1, temperature=temperature)


def information_entropy(p: Tensor) -> Tensor:
    """E = -(1/B) sum_ij p_ij log p_ij, natural log."""
    rowsums = np.sum(p.data, axis=1)
    if np.max(np.abs(rowsums - 1.0)) > 1e-8:
        raise ParameterError("probability rows must sum to 1")
    b = p.shape[0]
    return ad.scale(ad.tensor_sum(p * ad.log(p)), -1.0 / b)


def entropy_criterion(z_cls: Tensor, temperature: float) -> Tensor:
    """Full differentiable pipeline: similarity -> probs -> entropy."""
    return information_entropy(prediction_probs(similarity(z_cls), temperature))


def cross_entropy_criterion(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of the labeled class."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= k:
        raise ParameterError(f"labels must be {b} ints in [0, {k})")
    p = ad.softmax(logits, axis=1)
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    return ad.scale(ad.tensor_sum(Tensor(onehot) * ad.log(p)), -1.0 / b)


def evaluate_entropy(model: VitModel, dataset, temperature: float,
                     batch_size: int) -> EntropyRecord:
    """Mean per-batch entropy over one fixed-order pass of a dataset.

    Batch composition is part of the measurement: Algorithm-style searches
    compare entropies across model configurations, so the pass never
    shuffles and a trailing partial batch is dropped.
    """
    n = len(dataset)
    if n == 0:
        raise ParameterError("empty dataset")
    if n < batch_size:
        raise ParameterError(f"dataset size {n} smaller than batch size {batch_size}")
    total = 0.0
    batches = 0
    with ad.no_grad():
        for start in range(0, n - batch_size + 1, batch_size):
            rec = forward(model, dataset.images[start:start + batch_size])
            total += entropy_criterion(rec.z_cls, temperature).item()
            batches += 1
    return EntropyRecord(value=total / batches, batch_size=batch_size,
                         temperature=temperature, dataset_tag=dataset.source_tag,
                         num_batches=batches)
