"""Expert selection: a small residual classifier routes each image to the
enhancement (or the identity) expected to minimize detection loss.

Training labels are pseudo-labels: with experts and detector frozen, the
routed view with the lowest detection loss becomes the class target, and the
router is fit with plain cross-entropy. Inference applies exactly one expert.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import Detection
from .detector import DetectorConfig, SingleScaleDetector, decode, detection_loss, nms
from .dgrl import select_best
from .enhance import ExpertBundle


class _BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.down = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        identity = self.down(x) if self.down is not None else x
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class _Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, mid_ch: int, stride: int = 1):
        super().__init__()
        out_ch = mid_ch * self.expansion
        self.conv1 = nn.Conv2d(in_ch, mid_ch, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid_ch)
        self.conv2 = nn.Conv2d(mid_ch, mid_ch, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid_ch)
        self.conv3 = nn.Conv2d(mid_ch, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.down = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        identity = self.down(x) if self.down is not None else x
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


class ExpertSelector(nn.Module):
    """Residual classifier over the n+1 routing options.

    The desk-scale default is a four-stage basic-block network; the full
    50-layer bottleneck variant sits behind ``deep=True`` for parity with
    large-scale configurations.
    """

    def __init__(self, num_routes: int = 4, input_size: int = 224, width: int = 16,
                 blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1), deep: bool = False):
        super().__init__()
        if input_size < 64 or input_size % 32:
            # final stage reduces by 32x; smaller inputs starve batch norm
            raise ValueError(f"selector input_size must be a multiple of 32 >= 64, got {input_size}")
        self.num_routes = num_routes
        self.input_size = input_size
        if deep:
            width, blocks_per_stage, block = 64, (3, 4, 6, 3), _Bottleneck
        else:
            block = _BasicBlock
        self.stem = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        )
        stages: list[nn.Module] = []
        in_ch = width
        for i, n_blocks in enumerate(blocks_per_stage):
            ch = width * (2**i)
            for j in range(n_blocks):
                stages.append(block(in_ch, ch, stride=2 if j == 0 else 1))
                in_ch = ch * getattr(block, "expansion", 1)
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(in_ch, num_routes)

    def forward(self, image: Tensor) -> Tensor:
        """Routing logits, length num_routes; accepts (3,H,W) or (B,3,H,W)."""
        squeeze = image.dim() == 3
        x = image.unsqueeze(0) if squeeze else image
        x = F.interpolate(x, size=(self.input_size, self.input_size),
                          mode="bilinear", align_corners=False)
        x = self.stages(self.stem(x))
        x = x.mean(dim=(2, 3))
        logits = self.head(x)
        return logits.squeeze(0) if squeeze else logits


@dataclass(frozen=True)
class RoutingDecision:
    logits: tuple[float, ...]
    probs: tuple[float, ...]
    chosen: int


def route(logits: Tensor) -> RoutingDecision:
    """Argmax routing over softmax probabilities; ties break to index 0 side.

    argmax(softmax(x)) = argmax(x), so the softmax is only materialized for
    reporting.
    """
    vec = np.asarray(logits.detach().cpu().numpy(), dtype=np.float64).reshape(-1)
    if np.isnan(vec).any():
        raise FloatingPointError(f"NaN logit: {vec}")
    shifted = np.exp(vec - vec.max())
    probs = shifted / shifted.sum()
    chosen = int(np.argmax(vec))
    return RoutingDecision(tuple(vec.tolist()), tuple(probs.tolist()), chosen)


def dgce_loss(logits: Tensor, b: int) -> Tensor:
    """Cross-entropy of softmax(logits) against the pseudo-label index b."""
    if not 0 <= b < logits.numel():
        raise ValueError(f"label {b} outside [0, {logits.numel() - 1}]")
    return F.cross_entropy(logits.reshape(1, -1), torch.tensor([b], device=logits.device))


def assign_pseudo_label(
    image: Tensor,
    gts: list,
    experts: ExpertBundle,
    detector: SingleScaleDetector,
    cfg: DetectorConfig,
) -> int:
    """Index of the routed view with minimal detection loss (frozen networks)."""
    with torch.no_grad():
        views = experts.forward_all(image)
        totals = [float(detection_loss(detector(v), gts, cfg).total) for v in views]
    return select_best(totals)


def infer(
    image: Tensor,
    selector: ExpertSelector,
    experts: ExpertBundle,
    detector: SingleScaleDetector,
    cfg: DetectorConfig,
    conf_thresh: float = 0.25,
    nms_thresh: float = 0.5,
) -> tuple[list[Detection], RoutingDecision]:
    """Route, apply exactly one expert, detect, decode, suppress.

    The image must already be letterboxed to a stride-divisible size;
    detections are returned in its coordinate frame.
    """
    with torch.no_grad():
        decision = route(selector(image))
        view = experts.enhance(image, decision.chosen)
        raw = detector(view)
        dets = nms(decode(raw, conf_thresh, cfg), nms_thresh)
    return dets, decision
