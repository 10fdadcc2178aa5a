"""kNN evaluation protocol, accounting and throughput measurement.

The kNN protocol classifies a test feature by similarity-weighted voting
among its k nearest training features under cosine similarity, with
``exp(sim / temperature)`` weights (k = 20, temperature = 0.07 by default,
the usual self-supervised-evaluation convention). Ties in similarity are
broken toward the lower train index; ties in class votes toward the lower
class index.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ParameterError
from .model import VitModel, count_flops, count_params, forward


@dataclass
class FeatureBank:
    features: np.ndarray   # num_samples x C, rows L2-normalized
    labels: np.ndarray     # num_samples ints
    split_tag: str


@dataclass
class ThroughputResult:
    images_per_second: float
    trial_seconds: list[float]


@dataclass
class EvalReport:
    knn_top1: float        # percent
    params: int
    flops: int
    throughput: float      # images / second
    config: dict

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


def extract_features(model: VitModel, dataset, batch_size: int = 64) -> FeatureBank:
    """L2-normalized class-token embeddings in canonical dataset order."""
    if dataset.labels is None:
        raise ParameterError("feature extraction requires a labeled dataset")
    parts = []
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            rec = forward(model, dataset.images[start:start + batch_size])
            parts.append(rec.z_cls.data)
    feats = np.concatenate(parts)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError("zero-norm feature embedding")
    return FeatureBank(features=feats / norms, labels=np.asarray(dataset.labels),
                       split_tag=dataset.source_tag)


def knn_predict(train: FeatureBank, test: FeatureBank, k: int = 20,
                temperature: float = 0.07) -> np.ndarray:
    """Predicted class per test row under the fixed tie rules."""
    if len(train.features) == 0 or len(test.features) == 0:
        raise ParameterError("empty feature bank")
    if not 1 <= k <= len(train.features):
        raise ParameterError(f"k must be in [1, {len(train.features)}], got {k}")
    sims = test.features @ train.features.T
    # stable argsort on -sims: equal similarities resolve to the lower index
    neighbors = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    num_classes = int(train.labels.max()) + 1
    preds = np.empty(len(test.features), dtype=np.int64)
    for i in range(len(test.features)):
        weights = np.exp(sims[i, neighbors[i]] / temperature)
        votes = np.zeros(num_classes)
        np.add.at(votes, train.labels[neighbors[i]], weights)
        preds[i] = int(np.argmax(votes))  # argmax takes the lowest class on ties
    return preds


def knn_classify(train: FeatureBank, test: FeatureBank, k: int = 20,
                 temperature: float = 0.07) -> float:
    """Top-1 accuracy percent of the kNN protocol."""
    preds = knn_predict(train, test, k=k, temperature=temperature)
    return 100.0 * float(np.mean(preds == test.labels))


def throughput(model: VitModel, batch_size: int, trials: int = 5,
               seed: int = 0) -> ThroughputResult:
    """Median wall-clock forward throughput after one warmup trial."""
    if trials < 3:
        raise ParameterError(f"trials must be >= 3, got {trials}")
    cfg = model.config
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0,
                         size=(batch_size, cfg.image_size, cfg.image_size,
                               cfg.in_channels))
    times: list[float] = []
    with ad.no_grad():
        forward(model, images)  # warmup
        for _ in range(trials):
            t0 = time.perf_counter()
            forward(model, images)
            times.append(time.perf_counter() - t0)
    return ThroughputResult(images_per_second=batch_size / float(np.median(times)),
                            trial_seconds=times)


def evaluate_model(model: VitModel, train_bank: FeatureBank, test_set,
                   k: int = 20, knn_temperature: float = 0.07,
                   throughput_batch: int = 32, throughput_trials: int = 5,
                   extract_batch: int = 64) -> EvalReport:
    """Full before/after report: kNN accuracy plus cost accounting."""
    test_bank = extract_features(model, test_set, batch_size=extract_batch)
    return EvalReport(
        knn_top1=knn_classify(train_bank, test_bank, k=k, temperature=knn_temperature),
        params=count_params(model),
        flops=count_flops(model),
        throughput=throughput(model, throughput_batch,
                              trials=throughput_trials).images_per_second,
        config={"per_block_hidden": list(model.config.per_block_hidden),
                "embed_dim": model.config.embed_dim,
                "num_blocks": model.config.num_blocks,
                "knn_k": k, "knn_temperature": knn_temperature},
    )
