"""Single-scale anchor-based detector with a decomposed detection loss.

A deliberately small stand-in for a production detector: a strided
Conv-BatchNorm-ReLU backbone and a 1x1 head emitting, per anchor and grid
cell, four box offsets, an objectness logit, and per-class logits. The loss
splits into a CIoU box term over positive assignments, a binary cross-entropy
objectness term over every cell, and a binary cross-entropy class term over
positives; the weighted total backpropagates to the input image, so any
differentiable preprocessing in front of it trains too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import Annotation, BBox, Detection, LossBreakdown, ciou_xyxy, iou

# exp() offsets are clamped so decoded sizes stay within e^±4 of the anchor
SIZE_LOGIT_LIMIT = 4.0


@dataclass
class DetectorConfig:
    num_classes: int
    anchors: tuple[tuple[float, float], ...] = ((12.0, 12.0), (24.0, 24.0), (48.0, 48.0))
    grid_stride: int = 16
    backbone_width: int = 32
    loss_weights: tuple[float, float, float] = (0.05, 1.0, 0.5)  # box, obj, cls

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not self.anchors:
            raise ValueError("need at least one anchor")
        if self.grid_stride < 2 or self.grid_stride & (self.grid_stride - 1):
            raise ValueError("grid_stride must be a power of two >= 2")
        if any(w < 0 for w in self.loss_weights):
            raise ValueError("loss weights must be nonnegative")

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)


class SingleScaleDetector(nn.Module):
    """Strided CBR backbone plus 1x1 prediction head, one output scale."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        stages = int(math.log2(cfg.grid_stride))
        w = cfg.backbone_width
        widths = [w if i < stages // 2 else 2 * w for i in range(stages)]
        layers: list[nn.Module] = []
        in_ch = 3
        for out_ch in widths:
            layers += [
                nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            ]
            in_ch = out_ch
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Conv2d(in_ch, cfg.num_anchors * (5 + cfg.num_classes), 1)

    def forward(self, image: Tensor) -> Tensor:
        """(B,3,H,W) -> (B, A, 5+C, H/stride, W/stride); also accepts (3,H,W)."""
        squeeze = image.dim() == 3
        x = image.unsqueeze(0) if squeeze else image
        h, w = x.shape[-2:]
        s = self.cfg.grid_stride
        if h % s or w % s:
            raise ValueError(f"image dims {h}x{w} not divisible by stride {s}; letterbox first")
        raw = self.head(self.backbone(x))
        b = x.shape[0]
        raw = raw.view(b, self.cfg.num_anchors, 5 + self.cfg.num_classes, h // s, w // s)
        return raw.squeeze(0) if squeeze else raw


def assign_targets(
    gts: list[Annotation], cfg: DetectorConfig, grid_h: int, grid_w: int
) -> list[tuple[int, int, int, Annotation]]:
    """Map each ground truth to (anchor, row, col) of the cell holding its center.

    The anchor is the one with maximal IoU against the ground-truth extents
    (boxes co-centered for the comparison); ties break to the lowest anchor
    index. Ground truths are ordered canonically first so the result does not
    depend on annotation order, and a slot is only assigned once.
    """
    s = cfg.grid_stride
    ordered = sorted(gts, key=lambda a: (a.box.x1, a.box.y1, a.box.x2, a.box.y2, a.class_id))
    taken: set[tuple[int, int, int]] = set()
    out = []
    for gt in ordered:
        cx, cy = gt.box.center
        col = min(max(int(cx // s), 0), grid_w - 1)
        row = min(max(int(cy // s), 0), grid_h - 1)
        best_a, best_iou = 0, -1.0
        for a, (aw, ah) in enumerate(cfg.anchors):
            inter = min(gt.box.width, aw) * min(gt.box.height, ah)
            union = gt.box.area + aw * ah - inter
            v = inter / union
            if v > best_iou:
                best_a, best_iou = a, v
        key = (best_a, row, col)
        if key in taken:
            continue
        taken.add(key)
        out.append((best_a, row, col, gt))
    return out


def _decode_boxes(raw: Tensor, anchors: Tensor, rows: Tensor, cols: Tensor, stride: int) -> Tensor:
    """Decode (N, 4) offset slices into corner-form boxes; differentiable."""
    cx = (cols.to(raw.dtype) + torch.sigmoid(raw[:, 0])) * stride
    cy = (rows.to(raw.dtype) + torch.sigmoid(raw[:, 1])) * stride
    bw = anchors[:, 0] * torch.exp(raw[:, 2].clamp(-SIZE_LOGIT_LIMIT, SIZE_LOGIT_LIMIT))
    bh = anchors[:, 1] * torch.exp(raw[:, 3].clamp(-SIZE_LOGIT_LIMIT, SIZE_LOGIT_LIMIT))
    return torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-1)


def detection_loss(raw: Tensor, gts: list[Annotation], cfg: DetectorConfig) -> LossBreakdown:
    """Per-image loss over raw (A, 5+C, gh, gw) predictions.

    box: mean (1 - CIoU) over positives; obj: BCE over every anchor/cell with
    target 1 at positives; cls: BCE over positives against one-hot labels.
    With no ground truth, box and cls are zero and obj covers only negatives.
    """
    if raw.dim() != 4:
        raise ValueError(f"expected per-image raw predictions (A,5+C,gh,gw), got {tuple(raw.shape)}")
    a_n, ch, gh, gw = raw.shape
    if ch != 5 + cfg.num_classes or a_n != cfg.num_anchors:
        raise ValueError("raw prediction shape does not match the detector config")

    obj_target = torch.zeros((a_n, gh, gw), dtype=raw.dtype, device=raw.device)
    positives = assign_targets(gts, cfg, gh, gw)
    zero = raw.new_zeros(())
    if positives:
        a_idx = torch.tensor([p[0] for p in positives], device=raw.device)
        r_idx = torch.tensor([p[1] for p in positives], device=raw.device)
        c_idx = torch.tensor([p[2] for p in positives], device=raw.device)
        obj_target[a_idx, r_idx, c_idx] = 1.0

        pred = raw[a_idx, :, r_idx, c_idx]  # (N, 5+C)
        anchor_wh = torch.tensor(cfg.anchors, dtype=raw.dtype, device=raw.device)[a_idx]
        boxes = _decode_boxes(pred[:, :4], anchor_wh, r_idx, c_idx, cfg.grid_stride)
        gt_boxes = torch.tensor(
            [p[3].box.as_tuple() for p in positives], dtype=raw.dtype, device=raw.device)
        box_loss = (1.0 - ciou_xyxy(boxes, gt_boxes)).mean()

        cls_target = torch.zeros((len(positives), cfg.num_classes), dtype=raw.dtype, device=raw.device)
        for i, p in enumerate(positives):
            if p[3].class_id >= cfg.num_classes:
                raise ValueError(f"class_id {p[3].class_id} >= num_classes {cfg.num_classes}")
            cls_target[i, p[3].class_id] = 1.0
        cls_loss = F.binary_cross_entropy_with_logits(pred[:, 5:], cls_target)
    else:
        box_loss = zero
        cls_loss = zero

    obj_loss = F.binary_cross_entropy_with_logits(raw[:, 4], obj_target)
    lb, lo, lc = cfg.loss_weights
    total = lb * box_loss + lo * obj_loss + lc * cls_loss
    return LossBreakdown(box_loss, obj_loss, cls_loss, total)


def decode(raw: Tensor, conf_thresh: float, cfg: DetectorConfig) -> list[Detection]:
    """Sigmoid-decode raw (A, 5+C, gh, gw) predictions into detections.

    One candidate per anchor and cell (best class), kept when
    objectness * class probability >= conf_thresh.
    """
    if not 0.0 <= conf_thresh <= 1.0:
        raise ValueError(f"conf_thresh outside [0,1]: {conf_thresh}")
    a_n, ch, gh, gw = raw.shape
    with torch.no_grad():
        grid_r, grid_c = torch.meshgrid(
            torch.arange(gh, device=raw.device), torch.arange(gw, device=raw.device), indexing="ij")
        flat = raw.permute(0, 2, 3, 1).reshape(a_n * gh * gw, ch)
        rows = grid_r.reshape(-1).repeat(a_n)
        cols = grid_c.reshape(-1).repeat(a_n)
        anchor_wh = torch.tensor(cfg.anchors, dtype=raw.dtype, device=raw.device)
        anchor_wh = anchor_wh.repeat_interleave(gh * gw, dim=0)
        boxes = _decode_boxes(flat[:, :4], anchor_wh, rows, cols, cfg.grid_stride)
        obj = torch.sigmoid(flat[:, 4])
        cls_prob, cls_id = torch.sigmoid(flat[:, 5:]).max(dim=-1)
        scores = obj * cls_prob
        keep = scores >= conf_thresh
    out = []
    for box, cid, score in zip(boxes[keep].tolist(), cls_id[keep].tolist(), scores[keep].tolist()):
        out.append(Detection(BBox(*box), int(cid), min(float(score), 1.0)))
    return out


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy per-class suppression by descending score."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh outside (0,1): {iou_thresh}")
    survivors: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for d in dets:
        by_class.setdefault(d.class_id, []).append(d)
    for cid in sorted(by_class):
        pool = sorted(by_class[cid], key=lambda d: -d.score)
        kept: list[Detection] = []
        for cand in pool:
            if all(iou(cand.box, k.box) < iou_thresh for k in kept):
                kept.append(cand)
        survivors.extend(kept)
    return survivors
