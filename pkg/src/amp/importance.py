"""First-order Taylor importance of MLP hidden neurons.

The score of neuron k in block l is |sum over batch samples and tokens of
activation x criterion-gradient|, the first-order estimate of how much the
criterion changes when that neuron's activation is zeroed. Scores are
computed once on the unpruned model and averaged over batches; ranking is a
stable descending sort with ties broken by ascending neuron index.

A criterion function has the signature ``fn(record, labels) -> Tensor``
returning a scalar; the entropy criterion ignores ``labels``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DataError
from .model import VitModel, forward


@dataclass
class ImportanceTable:
    """Running mean of per-batch score vectors, one vector per block."""
    sums: list[np.ndarray]
    batches_accumulated: int
    criterion_tag: str

    @property
    def scores(self) -> list[np.ndarray]:
        return [s / self.batches_accumulated for s in self.sums]

    def to_json(self, path) -> None:
        payload = {
            "criterion": self.criterion_tag,
            "batches_accumulated": self.batches_accumulated,
            "scores": {str(l): s.tolist() for l, s in enumerate(self.scores)},
        }
        Path(path).write_text(json.dumps(payload, indent=2))


@dataclass
class NeuronRanking:
    """Per block: neuron indices in descending importance order."""
    order: list[np.ndarray]


def taylor_scores_batch(model: VitModel, images: np.ndarray, criterion_fn,
                        labels: np.ndarray | None = None) -> list[np.ndarray]:
    """Per-block score vectors from one forward/backward on a batch."""
    blocks = tuple(range(model.config.num_blocks))
    rec = forward(model, images, capture_blocks=blocks)
    c = criterion_fn(rec, labels)
    if c.size != 1:
        raise ContractError(f"criterion must be scalar, got shape {c.shape}")
    ad.backward(c)
    scores = []
    for l in blocks:
        cap = rec.hidden_captures[l]
        s = np.abs(np.sum(cap.value * cap.grad, axis=(0, 1)))
        if np.any(np.isnan(s)):
            raise DataError(f"NaN importance score in block {l}")
        scores.append(s)
    return scores


def accumulate(table: ImportanceTable | None, batch_scores: list[np.ndarray],
               criterion_tag: str = "") -> ImportanceTable:
    """Fold one batch's scores into the running mean (pass None to start)."""
    if table is None:
        return ImportanceTable(sums=[np.array(s) for s in batch_scores],
                               batches_accumulated=1, criterion_tag=criterion_tag)
    if len(table.sums) != len(batch_scores):
        raise ContractError("block count mismatch while accumulating scores")
    for s, b in zip(table.sums, batch_scores):
        if s.shape != b.shape:
            raise ContractError("score vector length mismatch while accumulating")
        s += b
    table.batches_accumulated += 1
    return table


def score_dataset(model: VitModel, dataset, criterion_fn, batch_size: int,
                  criterion_tag: str = "entropy") -> ImportanceTable:
    """Fixed-order pass over a dataset, one Taylor backward per full batch."""
    table = None
    n = len(dataset)
    for start in range(0, n - batch_size + 1, batch_size):
        sel = slice(start, start + batch_size)
        labels = None if dataset.labels is None else dataset.labels[sel]
        batch_scores = taylor_scores_batch(model, dataset.images[sel],
                                           criterion_fn, labels)
        table = accumulate(table, batch_scores, criterion_tag)
    if table is None:
        raise ContractError(f"dataset of {n} samples yields no batch of {batch_size}")
    return table


def rank(table: ImportanceTable) -> NeuronRanking:
    """Stable descending sort per block; equal scores keep ascending index order."""
    order = []
    for l, s in enumerate(table.scores):
        if np.any(np.isnan(s)):
            raise DataError(f"NaN importance score in block {l}")
        order.append(np.argsort(-s, kind="stable"))
    return NeuronRanking(order=order)


def fidelity_check(model: VitModel, block: int, neuron: int, criterion_fn,
                   images: np.ndarray, labels: np.ndarray | None = None
                   ) -> tuple[float, float]:
    """Compare the Taylor estimate with the literal ablation delta.

    Returns (taylor_delta, true_delta) where true_delta re-runs the forward
    with the neuron's activation zeroed: C(full) - C(neuron off). Both are
    signed; the estimate drops only the Taylor remainder.
    """
    m = model.config.per_block_hidden[block]
    if not 0 <= neuron < m:
        raise ContractError(f"neuron {neuron} out of range [0, {m})")
    rec = forward(model, images, capture_blocks=(block,))
    c = criterion_fn(rec, labels)
    ad.backward(c)
    cap = rec.hidden_captures[block]
    taylor_delta = float(np.sum(cap.value[:, :, neuron] * cap.grad[:, :, neuron]))
    base = c.item()

    saved = model.hidden_masks[block]
    mask = np.ones(m) if saved is None else np.array(saved)
    mask[neuron] = 0.0
    model.hidden_masks[block] = mask
    try:
        with ad.no_grad():
            rec0 = forward(model, images)
            ablated = criterion_fn(rec0, labels).item()
    finally:
        model.hidden_masks[block] = saved
    return taylor_delta, base - ablated
