"""Binary-search adaptive pruning and structural weight surgery.

Per block, last to first, a halving search finds the smallest hidden size
whose entropy increase over the running baseline stays under the threshold.
Candidates are realized by masking (activation zeroing), so rejections cost
nothing to roll back; a block's accepted mask stays on for the searches of
earlier blocks, and its accepted entropy becomes their baseline. Physical
weight removal happens once, from the final plan.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .criterion import evaluate_entropy
from .errors import ParameterError
from .importance import NeuronRanking
from .model import VitModel

log = logging.getLogger(__name__)


@dataclass
class SearchTraceRow:
    step: int
    m_t: int
    e_t: float
    accepted: bool


@dataclass
class BlockSearchResult:
    block: int
    m0: int
    m_res: int
    e0: float
    e_res: float
    trace: list[SearchTraceRow]


@dataclass
class PrunePlan:
    """Per block: kept neuron indices, ascending (surgery order)."""
    keep: list[np.ndarray]

    def sizes(self) -> list[int]:
        return [len(k) for k in self.keep]


def _top_mask(order: np.ndarray, m: int) -> np.ndarray:
    mask = np.zeros(len(order))
    mask[order[:m]] = 1.0
    return mask


def search_block(model: VitModel, block: int, order: np.ndarray, delta_e: float,
                 t_max: int, prune_set, temperature: float, batch_size: int,
                 e0: float) -> BlockSearchResult:
    """Halving search over one block's hidden size.

    Midpoints use floor division; the search stops after ``t_max`` steps or
    once the interval width reaches 1. A candidate is accepted when
    ``e_t - e0 < delta_e`` (strict; a negative delta always passes). The
    block's mask is restored before returning.
    """
    if t_max < 1:
        raise ParameterError(f"t_max must be >= 1, got {t_max}")
    m0 = model.config.per_block_hidden[block]
    saved = model.hidden_masks[block]
    m_min, m_max = 0, m0
    m_res, e_res = m0, e0
    trace: list[SearchTraceRow] = []
    try:
        for t in range(1, t_max + 1):
            if m_max - m_min <= 1:
                break
            m_t = (m_min + m_max) // 2
            model.hidden_masks[block] = _top_mask(order, m_t)
            e_t = evaluate_entropy(model, prune_set, temperature, batch_size).value
            accepted = (e_t - e0) < delta_e
            if accepted:
                m_max = m_t
                m_res, e_res = m_t, e_t
            else:
                m_min = m_t
            trace.append(SearchTraceRow(step=t, m_t=m_t, e_t=e_t, accepted=accepted))
    finally:
        model.hidden_masks[block] = saved
    return BlockSearchResult(block=block, m0=m0, m_res=m_res, e0=e0, e_res=e_res,
                             trace=trace)


def adaptive_prune(model: VitModel, ranking: NeuronRanking, delta_e: float,
                   t_max: int, prune_set, temperature: float, batch_size: int
                   ) -> tuple[PrunePlan, list[BlockSearchResult]]:
    """Run the per-block search over all blocks, last to first.

    The baseline entropy is evaluated once up front; each block's accepted
    entropy is carried forward as the next block's baseline. The model's
    masks are restored to their pre-call state before returning; apply the
    returned plan with ``apply_surgery``.
    """
    num_blocks = model.config.num_blocks
    if len(ranking.order) != num_blocks:
        raise ParameterError("ranking does not cover all blocks")
    saved_masks = list(model.hidden_masks)
    results: list[BlockSearchResult] = []
    try:
        e0 = evaluate_entropy(model, prune_set, temperature, batch_size).value
        for block in reversed(range(num_blocks)):
            res = search_block(model, block, ranking.order[block], delta_e, t_max,
                               prune_set, temperature, batch_size, e0)
            if res.m_res == 0:
                log.warning("block %d pruned to hidden size 0; its MLP degenerates "
                            "to the residual bypass", block)
            model.hidden_masks[block] = _top_mask(ranking.order[block], res.m_res)
            e0 = res.e_res
            results.append(res)
    finally:
        model.hidden_masks = saved_masks
    by_block = {r.block: r for r in results}
    plan = PrunePlan(keep=[np.sort(ranking.order[l][:by_block[l].m_res])
                           for l in range(num_blocks)])
    return plan, results


def uniform_plan(ranking: NeuronRanking, keep: int) -> PrunePlan:
    """Keep the same number of top-ranked neurons in every block."""
    return plan_from_sizes(ranking, [keep] * len(ranking.order))


def plan_from_sizes(ranking: NeuronRanking, sizes: list[int]) -> PrunePlan:
    if len(sizes) != len(ranking.order):
        raise ParameterError("one size per block required")
    for m, order in zip(sizes, ranking.order):
        if not 0 <= m <= len(order):
            raise ParameterError(f"size {m} outside [0, {len(order)}]")
    return PrunePlan(keep=[np.sort(order[:m]) for order, m in zip(ranking.order, sizes)])


def plan_mask(plan: PrunePlan, block: int, m0: int) -> np.ndarray:
    mask = np.zeros(m0)
    mask[plan.keep[block]] = 1.0
    return mask


def apply_surgery(model: VitModel, plan: PrunePlan) -> VitModel:
    """Physically remove dropped neurons; every other weight is bit-identical."""
    cfg = model.config
    if len(plan.keep) != cfg.num_blocks:
        raise ParameterError("plan does not cover all blocks")
    for l, keep in enumerate(plan.keep):
        m = cfg.per_block_hidden[l]
        if len(keep) and (keep.min() < 0 or keep.max() >= m
                          or len(np.unique(keep)) != len(keep)):
            raise ParameterError(f"invalid kept-neuron indices for block {l}")
    new_cfg = cfg.copy()
    new_cfg.per_block_hidden = [len(k) for k in plan.keep]
    arrays = {name: np.array(t.data) for name, t in model.params.items()}
    for l, keep in enumerate(plan.keep):
        arrays[f"block{l}.fc1_w"] = arrays[f"block{l}.fc1_w"][:, keep]
        arrays[f"block{l}.fc1_b"] = arrays[f"block{l}.fc1_b"][keep]
        arrays[f"block{l}.fc2_w"] = arrays[f"block{l}.fc2_w"][keep, :]
    return VitModel(new_cfg, arrays)


def search_report(results: list[BlockSearchResult]) -> dict:
    """JSON-serializable bundle of per-block search outcomes and traces."""
    return {
        "blocks": [
            {
                "block": r.block, "m0": r.m0, "m_res": r.m_res,
                "e0": r.e0, "e_res": r.e_res,
                "trace": [asdict(row) for row in r.trace],
            }
            for r in sorted(results, key=lambda r: r.block)
        ]
    }


def save_plan(plan: PrunePlan, results: list[BlockSearchResult], path) -> None:
    payload = search_report(results)
    payload["keep"] = [k.tolist() for k in plan.keep]
    Path(path).write_text(json.dumps(payload, indent=2))


def load_plan(path) -> tuple[PrunePlan, dict]:
    payload = json.loads(Path(path).read_text())
    plan = PrunePlan(keep=[np.asarray(k, dtype=np.int64) for k in payload["keep"]])
    return plan, payload
