"""Axis-aligned box geometry and the data types shared across the library.

Boxes are stored in corner form (x1, y1, x2, y2) with real-valued, sub-pixel
coordinates. Center-form input is converted once at the ingestion boundary.
All types are immutable and all functions here are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import torch
from torch import Tensor


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, corner form. Requires x1 < x2 and y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box (need x1<x2, y1<y2): {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Annotation:
    """Ground-truth box plus class index."""

    box: BBox
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"negative class_id: {self.class_id}")


@dataclass(frozen=True)
class Detection:
    """Scored class prediction with its box."""

    box: BBox
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0,1]: {self.score}")
        if self.class_id < 0:
            raise ValueError(f"negative class_id: {self.class_id}")


Scalar = Union[float, Tensor]


def as_float(value: Scalar) -> float:
    """Plain float from a number or a 0-dim tensor (grad-safe)."""
    return value.item() if isinstance(value, Tensor) else float(value)


@dataclass
class LossBreakdown:
    """Per-image detection loss components and their weighted total.

    Fields hold plain floats or 0-dim tensors; training keeps the tensor form
    so gradients survive, logging uses :meth:`floats`.
    """

    box_loss: Scalar
    obj_loss: Scalar
    cls_loss: Scalar
    total: Scalar

    def floats(self) -> "LossBreakdown":
        return LossBreakdown(*(as_float(v) for v in
                               (self.box_loss, self.obj_loss, self.cls_loss, self.total)))


def _check_box(b) -> None:
    if not (b.x2 > b.x1 and b.y2 > b.y1):
        raise ValueError(f"degenerate box: ({b.x1}, {b.y1}, {b.x2}, {b.y2})")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    _check_box(a)
    _check_box(b)
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def ciou(a: BBox, b: BBox) -> float:
    """Complete IoU: IoU minus center-distance and aspect-ratio penalties.

    Equals plain IoU exactly when the centers coincide and the aspect ratios
    match; always <= IoU. Each penalty lies in [0, 1), so values fall in
    (-2, 1].
    """
    i = iou(a, b)
    cw = max(a.x2, b.x2) - min(a.x1, b.x1)
    ch = max(a.y2, b.y2) - min(a.y1, b.y1)
    c2 = cw * cw + ch * ch
    (acx, acy), (bcx, bcy) = a.center, b.center
    rho2 = (acx - bcx) ** 2 + (acy - bcy) ** 2
    v = (4.0 / math.pi**2) * (math.atan(a.width / a.height) - math.atan(b.width / b.height)) ** 2
    alpha = v / (1.0 - i + v + 1e-9)
    return i - rho2 / c2 - alpha * v


def iou_xyxy(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise IoU for corner-form box tensors shaped (..., 4)."""
    iw = torch.clamp(torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0]), min=0)
    ih = torch.clamp(torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1]), min=0)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter).clamp_min(1e-12)


def ciou_xyxy(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise CIoU for corner-form box tensors shaped (..., 4).

    Fully differentiable (the aspect-ratio balance term is kept in the graph
    so finite-difference and analytic gradients agree).
    """
    i = iou_xyxy(a, b)
    cw = torch.maximum(a[..., 2], b[..., 2]) - torch.minimum(a[..., 0], b[..., 0])
    ch = torch.maximum(a[..., 3], b[..., 3]) - torch.minimum(a[..., 1], b[..., 1])
    c2 = (cw * cw + ch * ch).clamp_min(1e-12)
    rho2 = ((a[..., 0] + a[..., 2]) - (b[..., 0] + b[..., 2])) ** 2 / 4.0 \
        + ((a[..., 1] + a[..., 3]) - (b[..., 1] + b[..., 3])) ** 2 / 4.0
    wa = (a[..., 2] - a[..., 0]).clamp_min(1e-12)
    ha = (a[..., 3] - a[..., 1]).clamp_min(1e-12)
    wb = (b[..., 2] - b[..., 0]).clamp_min(1e-12)
    hb = (b[..., 3] - b[..., 1]).clamp_min(1e-12)
    v = (4.0 / math.pi**2) * (torch.atan(wa / ha) - torch.atan(wb / hb)) ** 2
    alpha = v / (1.0 - i + v + 1e-9)
    return i - rho2 / c2 - alpha * v
