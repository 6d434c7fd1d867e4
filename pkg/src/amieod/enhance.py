"""Enhancement experts: curve enhancers and a parameter-predicted filter chain.

Three experts, always in the same order behind identity index 0:

1. a frozen curve enhancer pretrained as a detection-agnostic brightener,
2. a trainable twin of it, optimized jointly with the detector,
3. an adaptive expert that predicts 15 filter parameters per image and runs
   them through a differentiable white-balance/gamma/contrast/tone/sharpen
   pipeline.

All forwards accept (3, H, W) or (B, 3, H, W) tensors in [0, 1] and return
tensors of the same shape clamped to [0, 1].
"""

from __future__ import annotations

from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import Tensor, nn

# Floor for the illumination map; bounds the gradient of the division.
ILLUM_EPS = 1e-3

# Layout of the 15-parameter vector and the legal range of each component.
# Midpoint of every slice is an identity (gains 1 is inside [0.5, 2], gamma 1
# inside [0.3, 3], uniform tone knots are an identity for any common value).
PARAM_SLICES = {
    "wb_gains": slice(0, 3),
    "gamma": slice(3, 4),
    "contrast": slice(4, 5),
    "tone_knots": slice(5, 13),
    "sharpen": slice(13, 14),
    "reserved": slice(14, 15),  # defog slot, mapped to a no-op
}
PARAM_RANGES = torch.tensor(
    [[0.5, 2.0]] * 3        # white-balance gains, per channel
    + [[0.3, 3.0]]          # gamma
    + [[0.5, 1.5]]          # contrast factor
    + [[0.5, 2.0]] * 8      # tone-curve knots
    + [[0.0, 1.0]]          # sharpen strength
    + [[0.0, 1.0]]          # reserved slot
)
NUM_PARAMS = 15


def _as_batch(image: Tensor) -> tuple[Tensor, bool]:
    if image.dim() == 3:
        return image.unsqueeze(0), True
    if image.dim() == 4:
        return image, False
    raise ValueError(f"expected (3,H,W) or (B,3,H,W) image, got shape {tuple(image.shape)}")


def _raise_if_nonfinite(out: Tensor, named_activations: list[tuple[str, Tensor]]) -> None:
    if torch.isfinite(out).all():
        return
    for name, act in named_activations:
        if not torch.isfinite(act).all():
            raise FloatingPointError(f"non-finite activations in layer '{name}'")
    raise FloatingPointError("non-finite output")


class CurveEnhancer(nn.Module):
    """Lightweight illumination-estimating enhancer.

    Two cascaded Conv-BatchNorm-ReLU blocks; their outputs are summed and
    projected to a 3-channel map. After a sigmoid, that map is added to the
    input to form an illumination estimate L >= input, and the output is
    input / L. Dividing by the estimated illumination brightens dark pixels
    while leaving already-bright ones near 1.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        self.block1 = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(width, 3, 3, padding=1)

    def forward(self, image: Tensor) -> Tensor:
        x, squeeze = _as_batch(image)
        f1 = self.block1(x)
        f2 = self.block2(f1)
        residual = torch.sigmoid(self.head(f1 + f2))
        illum = torch.clamp(x + residual, ILLUM_EPS, 1.0)
        out = torch.clamp(x / illum, 0.0, 1.0)
        _raise_if_nonfinite(out, [("block1", f1), ("block2", f2), ("head", residual)])
        return out.squeeze(0) if squeeze else out


class ParamPredictor(nn.Module):
    """Predicts the 15 filter parameters from a bilinearly resized thumbnail.

    Five Conv-LeakyReLU blocks (widths 16, 32, 32, 32, 32, each stride 2)
    followed by two fully connected layers of sizes 64 and 15. The raw output
    is mapped into the legal per-component ranges with an affine sigmoid.
    """

    def __init__(self, input_size: int = 256):
        super().__init__()
        if input_size % 32 != 0:
            raise ValueError(f"input_size must be a multiple of 32, got {input_size}")
        self.input_size = input_size
        widths = [16, 32, 32, 32, 32]
        layers: list[nn.Module] = []
        in_ch = 3
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, 3, stride=2, padding=1), nn.LeakyReLU(0.1, inplace=True)]
            in_ch = w
        self.features = nn.Sequential(*layers)
        feat = widths[-1] * (input_size // 32) ** 2
        self.fc1 = nn.Linear(feat, 64)
        self.fc2 = nn.Linear(64, NUM_PARAMS)

    def forward(self, image: Tensor) -> Tensor:
        x, squeeze = _as_batch(image)
        x = F.interpolate(x, size=(self.input_size, self.input_size),
                          mode="bilinear", align_corners=False)
        x = self.features(x)
        x = F.leaky_relu(self.fc1(x.flatten(1)), 0.1)
        raw = self.fc2(x)
        mapped = map_param_ranges(raw)
        return mapped.squeeze(0) if squeeze else mapped


def map_param_ranges(raw: Tensor) -> Tensor:
    """Squash a raw (..., 15) vector into the legal ranges: lo + (hi-lo)*sigmoid."""
    ranges = PARAM_RANGES.to(dtype=raw.dtype, device=raw.device)
    lo, hi = ranges[:, 0], ranges[:, 1]
    return lo + (hi - lo) * torch.sigmoid(raw)


def identity_params(dtype=torch.float32) -> Tensor:
    """The parameter vector under which every filter stage is an identity."""
    p = torch.empty(NUM_PARAMS, dtype=dtype)
    p[PARAM_SLICES["wb_gains"]] = 1.0
    p[PARAM_SLICES["gamma"]] = 1.0
    p[PARAM_SLICES["contrast"]] = 1.0
    p[PARAM_SLICES["tone_knots"]] = 1.0
    p[PARAM_SLICES["sharpen"]] = 0.0
    p[PARAM_SLICES["reserved"]] = 0.5
    return p


def _per_image(params: Tensor, batch: int, n: int) -> Tensor:
    if params.dim() == 1:
        params = params.unsqueeze(0).expand(batch, -1)
    if params.shape != (batch, n):
        raise ValueError(f"params shape {tuple(params.shape)} does not match batch {batch}")
    return params


def _scalar_per_image(param: Tensor, batch: int) -> Tensor:
    p = param.reshape(-1)
    if p.numel() == 1:
        p = p.expand(batch)
    elif p.numel() != batch:
        raise ValueError(f"scalar parameter count {p.numel()} does not match batch {batch}")
    return p.view(-1, 1, 1, 1)


def white_balance(image: Tensor, gains: Tensor) -> Tensor:
    """Scale each RGB channel by its gain. gains: (3,) or (B, 3)."""
    x, squeeze = _as_batch(image)
    g = _per_image(gains, x.shape[0], 3)
    out = x * g.unsqueeze(-1).unsqueeze(-1)
    return out.squeeze(0) if squeeze else out


def gamma_correct(image: Tensor, gamma: Tensor) -> Tensor:
    """Power-law brightness: x * clamp(x, eps)^(gamma-1); exact identity at 1."""
    x, squeeze = _as_batch(image)
    g = _scalar_per_image(gamma, x.shape[0])
    out = x * torch.pow(x.clamp_min(1e-6), g - 1.0)
    return out.squeeze(0) if squeeze else out


def adjust_contrast(image: Tensor, factor: Tensor) -> Tensor:
    """Scale deviation from the per-image mean intensity; identity at 1."""
    x, squeeze = _as_batch(image)
    f = _scalar_per_image(factor, x.shape[0])
    pivot = x.mean(dim=(1, 2, 3), keepdim=True)
    out = pivot + (x - pivot) * f
    return out.squeeze(0) if squeeze else out


def tone_curve(image: Tensor, knots: Tensor) -> Tensor:
    """Monotone piecewise-linear tone mapping from positive knot weights.

    out = sum_j clip(K*x - j, 0, 1) * t_j / sum(t); uniform knots reduce to
    the identity for x in [0, 1].
    """
    x, squeeze = _as_batch(image)
    t = _per_image(knots, x.shape[0], knots.shape[-1])
    k = t.shape[-1]
    total = t.sum(dim=-1).view(-1, 1, 1, 1)
    out = torch.zeros_like(x)
    for j in range(k):
        out = out + torch.clamp(k * x - j, 0.0, 1.0) * t[:, j].view(-1, 1, 1, 1)
    out = out / total
    return out.squeeze(0) if squeeze else out


@lru_cache(maxsize=4)
def _gaussian_kernel(dtype_str: str, device_str: str) -> Tensor:
    base = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    k2d = torch.outer(base, base)
    k = k2d.expand(3, 1, 5, 5).clone()
    return k.to(dtype=getattr(torch, dtype_str), device=torch.device(device_str))


def unsharp_mask(image: Tensor, strength: Tensor) -> Tensor:
    """Sharpen: x + s * (x - gaussian_blur(x)); identity at s = 0."""
    x, squeeze = _as_batch(image)
    s = _scalar_per_image(strength, x.shape[0])
    kernel = _gaussian_kernel(str(x.dtype).split(".")[-1], str(x.device))
    padded = F.pad(x, (2, 2, 2, 2), mode="reflect")
    blurred = F.conv2d(padded, kernel, groups=3)
    out = x + s * (x - blurred)
    return out.squeeze(0) if squeeze else out


def validate_params(params: Tensor) -> None:
    p = params.reshape(-1, NUM_PARAMS)
    ranges = PARAM_RANGES.to(dtype=p.dtype, device=p.device)
    lo, hi = ranges[:, 0] - 1e-6, ranges[:, 1] + 1e-6
    if (p < lo).any() or (p > hi).any():
        bad = torch.nonzero((p < lo) | (p > hi))[0]
        raise ValueError(
            f"parameter {int(bad[1])} = {float(p[bad[0], bad[1]]):.4f} outside its legal range")


def apply_filters(image: Tensor, params: Tensor) -> Tensor:
    """Run the filter chain: white balance, gamma, contrast, tone, sharpen.

    Differentiable in both the image and the parameters; the final result is
    clamped to [0, 1]. Raises ValueError when a parameter leaves its range.
    """
    validate_params(params)
    x, squeeze = _as_batch(image)
    p = _per_image(params, x.shape[0], NUM_PARAMS)
    x = white_balance(x, p[:, PARAM_SLICES["wb_gains"]])
    x = gamma_correct(x, p[:, PARAM_SLICES["gamma"]])
    x = adjust_contrast(x, p[:, PARAM_SLICES["contrast"]])
    x = tone_curve(x, p[:, PARAM_SLICES["tone_knots"]])
    x = unsharp_mask(x, p[:, PARAM_SLICES["sharpen"]])
    out = torch.clamp(x, 0.0, 1.0)
    return out.squeeze(0) if squeeze else out


class ExpertBundle(nn.Module):
    """Identity route plus the three enhancement experts, in fixed order.

    Index 0 returns the input unchanged; 1 is the frozen curve enhancer,
    2 its jointly trained twin, 3 the adaptive filter-chain expert.
    """

    def __init__(self, curve_width: int = 16, pp_input_size: int = 256):
        super().__init__()
        self.piem = CurveEnhancer(curve_width)
        self.jiem = CurveEnhancer(curve_width)
        self.pp = ParamPredictor(pp_input_size)

    @property
    def n(self) -> int:
        return 3

    def freeze_pretrained(self) -> None:
        """Lock the pretrained enhancer: no gradients, no batch-stat updates."""
        self.piem.requires_grad_(False)
        self.piem.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if not next(self.piem.parameters()).requires_grad:
            self.piem.eval()
        return self

    def trainable_parameters(self):
        for p in list(self.jiem.parameters()) + list(self.pp.parameters()):
            if p.requires_grad:
                yield p

    def enhance(self, image: Tensor, k: int) -> Tensor:
        if k == 0:
            return image
        if k == 1:
            return self.piem(image)
        if k == 2:
            return self.jiem(image)
        if k == 3:
            return apply_filters(image, self.pp(image))
        raise ValueError(f"expert index {k} outside [0, {self.n}]")

    def forward_all(self, image: Tensor) -> list[Tensor]:
        """All n+1 views of the input: [identity, expert 1, expert 2, expert 3]."""
        return [self.enhance(image, k) for k in range(self.n + 1)]

    forward = forward_all
