"""Detection-guided regression: pick the expert output the detector likes
best and pull every other output toward it.

The regression target is detached, so the expert that produced it receives
no gradient from this loss; the others are regressed toward it with a
mean-per-pixel L1 distance. The per-pixel mean (rather than a sum) keeps the
balance against the detection term independent of image resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch
from torch import Tensor

from .core import LossBreakdown, as_float


@dataclass
class ExpertLossTable:
    """Detection loss per routed view, index k matching the expert order."""

    breakdowns: list[LossBreakdown]

    @property
    def per_expert_total(self) -> list[float]:
        return [as_float(b.total) for b in self.breakdowns]

    def __len__(self) -> int:
        return len(self.breakdowns)


def select_best(table: Union[ExpertLossTable, Sequence[float]]) -> int:
    """Index of the smallest per-expert total; ties break to the lowest index."""
    totals = table.per_expert_total if isinstance(table, ExpertLossTable) else [as_float(t) for t in table]
    if not totals:
        raise ValueError("empty loss table")
    if any(math.isnan(t) for t in totals):
        raise FloatingPointError(f"NaN entry in loss table: {totals}")
    best = 0
    for k, t in enumerate(totals):
        if t < totals[best]:
            best = k
    return best


def dgrl_loss(images: Sequence[Tensor], b: int) -> Tensor:
    """Mean-L1 regression of all n+1 views toward the detached view b.

    (1/n) * sum_k mean|I_k - I_b.detach()|; the k = b term is kept (it is
    identically zero) so the sum matches the selection index range.
    """
    if not 0 <= b < len(images):
        raise ValueError(f"target index {b} outside [0, {len(images) - 1}]")
    shape = images[0].shape
    for k, img in enumerate(images):
        if img.shape != shape:
            raise ValueError(f"image {k} shape {tuple(img.shape)} != {tuple(shape)}")
    n = len(images) - 1
    if n == 0:
        return images[0].new_zeros(())
    target = images[b].detach()
    total = images[0].new_zeros(())
    for img in images:
        total = total + (img - target).abs().mean()
    return total / n


def stage1_loss(
    dgrl: Union[float, Tensor],
    table: Union[ExpertLossTable, Sequence[Union[float, Tensor]]],
    alpha: float,
) -> Union[float, Tensor]:
    """Composite first-stage objective: (1-a)*dgrl + a * mean detection loss."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha outside [0,1]: {alpha}")
    totals = [b.total for b in table.breakdowns] if isinstance(table, ExpertLossTable) else list(table)
    if not totals:
        raise ValueError("empty loss table")
    det_sum = totals[0]
    for t in totals[1:]:
        det_sum = det_sum + t
    return (1.0 - alpha) * dgrl + (alpha / len(totals)) * det_sum
