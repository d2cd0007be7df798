"""Training objectives: next-token adaptation, the two-span task loss,
the expert load-balance penalty, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SpanLabeledBatch
from .model import LayerRouting

DEFAULT_ALPHA = 0.01


def adapt_loss_from_logits(logits: Tensor, targets, mask, normalizer: float | None = None) -> Tensor:
    return ad.cross_entropy(logits, targets, mask, normalizer=normalizer)


def adapt_loss(model, batch: SpanLabeledBatch, normalizer: float | None = None) -> Tensor:
    """Mean next-token NLL over non-padding positions."""
    mask = batch.token_mask
    if not mask.any():
        raise ValueError("adapt_loss: empty mask")
    logits, _ = model.forward(batch.inputs, token_mask=batch.input_mask)
    return ad.cross_entropy(logits, batch.targets, mask, normalizer=normalizer)


def span_task_loss(logits: Tensor, targets, detection_mask, explanation_mask,
                   normalizers: tuple[float, float] | None = None) -> Tensor:
    """(mean NLL over explanation tokens + mean NLL over detection tokens) / 2."""
    det = np.asarray(detection_mask, bool)
    exp = np.asarray(explanation_mask, bool)
    if not det.any() or not exp.any():
        raise ValueError("task_loss: batch must contain both detection and explanation spans")
    nd, ne = normalizers if normalizers is not None else (None, None)
    ld = ad.cross_entropy(logits, targets, det, normalizer=nd)
    le = ad.cross_entropy(logits, targets, exp, normalizer=ne)
    return ad.scale(le + ld, 0.5)


def task_loss_from_logits(logits: Tensor, batch: SpanLabeledBatch, normalizers=None) -> Tensor:
    return span_task_loss(logits, batch.targets, batch.detection_mask, batch.explanation_mask, normalizers)


def task_loss(model, batch: SpanLabeledBatch) -> Tensor:
    logits, _ = model.forward(batch.inputs, token_mask=batch.input_mask)
    return task_loss_from_logits(logits, batch)


@dataclass
class BalanceStats:
    """Dispatch fractions F (top-1, constant) and mean routing probabilities P."""

    layer: int
    F: np.ndarray
    P: Tensor
    n_tokens: int

    @property
    def n_experts(self) -> int:
        return self.F.shape[0]

    @classmethod
    def from_routing(cls, rec: LayerRouting) -> "BalanceStats":
        rows = np.nonzero(rec.valid)[0]
        if rows.size == 0:
            raise ValueError(f"layer {rec.layer}: no routed tokens")
        E = rec.n_experts
        counts = np.bincount(rec.indices[rows, 0], minlength=E)
        F = counts / rows.size
        if rec.probs is None:
            raise ValueError("routing record carries no router probabilities")
        P = ad.mean(ad.take(rec.probs, rows, 0), axis=0)
        return cls(rec.layer, F, P, int(rows.size))


def balance_stats(routing: Sequence[LayerRouting]) -> list[BalanceStats]:
    return [BalanceStats.from_routing(r) for r in routing]


def layer_balance_loss(stats: BalanceStats) -> Tensor:
    F = ad.Tensor(stats.F, dtype=stats.P.data.dtype)
    return ad.scale(ad.sum_(F * stats.P), float(stats.n_experts))


def balance_loss(stats: Sequence[BalanceStats]) -> Tensor:
    """Sum over MoE layers of E * sum_i F_i * P_i."""
    if not stats:
        raise ValueError("balance_loss: no routing statistics")
    total = None
    for s in stats:
        term = layer_balance_loss(s)
        total = term if total is None else total + term
    return total


def combined_loss(task: Tensor, balance: Tensor, alpha: float = DEFAULT_ALPHA) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 0:
        return task
    return task + ad.scale(balance, alpha)
