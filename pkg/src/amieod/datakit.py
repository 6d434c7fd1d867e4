"""Dataset ingestion, synthetic low-light scene generation, letterboxing.

The synthetic generator paints colored shapes (circle / rectangle / triangle,
class ids 0/1/2) on bright canvases, records exact pixel-extent boxes from
the rasterized masks, then degrades each canvas with a gamma + gain + noise
darkening. The bright originals are kept on the sample so the frozen
enhancer can be pretrained on (dark, bright) pairs.

On-disk format is yolo-txt: ``images/<split>/*.png``, ``labels/<split>/*.txt``
with one ``class cx cy w h`` line (normalized floats) per object, plus a
``classes.txt`` at the root. A minimal coco-json reader is included.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage
from torch import Tensor

from .core import Annotation, BBox

SHAPE_CLASSES = ("circle", "rectangle", "triangle")


@dataclass
class DatasetSpec:
    root: Path
    split: str
    format: str = "yolo-txt"
    class_names: tuple[str, ...] = SHAPE_CLASSES
    skip_missing_labels: bool = True

    def __post_init__(self):
        self.root = Path(self.root)
        if self.format not in ("yolo-txt", "coco-json"):
            raise ValueError(f"unrecognized dataset format: {self.format}")


@dataclass
class SynthConfig:
    num_images: int
    canvas_size: int = 64
    shapes_per_image: int = 2
    shape_size_range: tuple[float, float] = (0.16, 0.36)  # fraction of canvas
    gamma_range: tuple[float, float] = (2.0, 5.0)
    gain_range: tuple[float, float] = (0.1, 0.5)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for rng in (self.gamma_range, self.gain_range, self.shape_size_range):
            if rng[0] > rng[1]:
                raise ValueError("ranges must be ordered (lo, hi)")
        if self.num_images < 1 or self.canvas_size < 32 or self.shapes_per_image < 1:
            raise ValueError("num_images >= 1, canvas_size >= 32, shapes_per_image >= 1 required")


@dataclass
class Sample:
    """One dataset entry: normalized image, its annotations, optional bright original."""

    image: Tensor
    annotations: list[Annotation]
    bright: Optional[Tensor] = None
    name: str = ""


def validate_image(image: Tensor) -> Tensor:
    """Enforce the raster contract: (3,H,W), finite, in [0,1], H,W >= 32."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) image, got {tuple(image.shape)}")
    if image.shape[1] < 32 or image.shape[2] < 32:
        raise ValueError(f"image smaller than 32x32: {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    if float(image.min()) < 0.0 or float(image.max()) > 1.0:
        raise ValueError("image values outside [0,1]")
    return image


def darken(image: Tensor, gamma: float, gain: float, noise_sigma: float, seed: int = 0) -> Tensor:
    """Low-light degradation: clamp(gain * image^gamma + gaussian noise, 0, 1)."""
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    if not 0.0 < gain <= 1.0:
        raise ValueError(f"gain must be in (0,1], got {gain}")
    if noise_sigma < 0.0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    out = gain * torch.pow(image, gamma)
    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        noise = torch.from_numpy(
            rng.standard_normal(tuple(image.shape), dtype=np.float32)) * noise_sigma
        out = out + noise.to(out.dtype)
    return out.clamp(0.0, 1.0)


def _shape_mask(rng: np.random.Generator, class_id: int, size: int,
                size_range: tuple[float, float]) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    lo, hi = max(int(size * size_range[0]), 4), max(int(size * size_range[1]), 6)
    if class_id == 0:  # circle
        r = rng.integers(max(lo // 2, 3), max(hi // 2, 5))
        cx = rng.integers(r + 1, size - r - 1)
        cy = rng.integers(r + 1, size - r - 1)
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if class_id == 1:  # axis-aligned rectangle
        w = rng.integers(lo, hi)
        h = rng.integers(lo, hi)
        x0 = rng.integers(1, size - w - 1)
        y0 = rng.integers(1, size - h - 1)
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    # upward triangle via three half-plane tests
    w = rng.integers(lo, hi)
    h = rng.integers(lo, hi)
    cx = rng.integers(w // 2 + 1, size - w // 2 - 1)
    y0 = rng.integers(1, size - h - 1)
    apex = (float(cx), float(y0))
    left = (cx - w / 2.0, float(y0 + h))
    right = (cx + w / 2.0, float(y0 + h))
    pts = np.stack([xx, yy], axis=-1).astype(np.float64)

    def side(p, q):
        return (q[0] - p[0]) * (pts[..., 1] - p[1]) - (q[1] - p[1]) * (pts[..., 0] - p[0])

    return (side(apex, right) >= 0) & (side(right, left) >= 0) & (side(left, apex) >= 0)


def _mask_box(mask: np.ndarray) -> Optional[BBox]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    x1, x2 = float(xs.min()), float(xs.max() + 1)
    y1, y2 = float(ys.min()), float(ys.max() + 1)
    if x2 - x1 < 3 or y2 - y1 < 3:
        return None
    return BBox(x1, y1, x2, y2)


def synth_generate(cfg: SynthConfig) -> list[Sample]:
    """Seed-deterministic synthetic dataset of darkened shape scenes."""
    rng = np.random.default_rng(cfg.seed)
    size = cfg.canvas_size
    samples = []
    for idx in range(cfg.num_images):
        base = rng.uniform(0.75, 0.95)
        tint = rng.uniform(-0.05, 0.05, size=3)
        canvas = np.clip(base + tint, 0.0, 1.0)[:, None, None] * np.ones((3, size, size))
        annotations: list[Annotation] = []
        occupancy = np.zeros((size, size), dtype=bool)
        n_shapes = int(rng.integers(1, cfg.shapes_per_image + 1))
        for _ in range(n_shapes):
            for _attempt in range(8):
                class_id = int(rng.integers(0, len(SHAPE_CLASSES)))
                mask = _shape_mask(rng, class_id, size, cfg.shape_size_range)
                box = _mask_box(mask)
                if box is None or (mask & occupancy).any():
                    continue
                color = rng.uniform(0.0, 0.45, size=3)
                canvas[:, mask] = color[:, None]
                occupancy |= mask
                annotations.append(Annotation(box, class_id))
                break
        bright = torch.from_numpy(canvas.astype(np.float32))
        gamma = float(rng.uniform(*cfg.gamma_range))
        gain = float(rng.uniform(*cfg.gain_range))
        noise_seed = int(rng.integers(0, 2**31 - 1))
        dark = darken(bright, gamma, gain, cfg.noise_sigma, seed=noise_seed)
        samples.append(Sample(dark, annotations, bright=bright, name=f"synth_{idx:05d}"))
    return samples


@dataclass(frozen=True)
class LetterboxTransform:
    """Forward/backward mapping between original and letterboxed coordinates."""

    sx: float
    sy: float
    pad_x: float
    pad_y: float
    orig_w: int
    orig_h: int

    def apply_box(self, box: BBox) -> BBox:
        return BBox(box.x1 * self.sx + self.pad_x, box.y1 * self.sy + self.pad_y,
                    box.x2 * self.sx + self.pad_x, box.y2 * self.sy + self.pad_y)

    def invert_box(self, box: BBox) -> BBox:
        return BBox((box.x1 - self.pad_x) / self.sx, (box.y1 - self.pad_y) / self.sy,
                    (box.x2 - self.pad_x) / self.sx, (box.y2 - self.pad_y) / self.sy)

    @property
    def is_identity(self) -> bool:
        return self.sx == 1.0 and self.sy == 1.0 and self.pad_x == 0.0 and self.pad_y == 0.0


def letterbox(image: Tensor, target: int) -> tuple[Tensor, LetterboxTransform]:
    """Aspect-preserving resize plus symmetric mid-gray padding to target x target."""
    _, h, w = image.shape
    if h == target and w == target:
        return image, LetterboxTransform(1.0, 1.0, 0.0, 0.0, w, h)
    scale = min(target / w, target / h)
    nw = max(1, round(w * scale))
    nh = max(1, round(h * scale))
    resized = F.interpolate(image.unsqueeze(0), size=(nh, nw),
                            mode="bilinear", align_corners=False).squeeze(0)
    pad_left = (target - nw) // 2
    pad_top = (target - nh) // 2
    out = torch.full((3, target, target), 0.5, dtype=image.dtype)
    out[:, pad_top:pad_top + nh, pad_left:pad_left + nw] = resized
    return out.clamp(0.0, 1.0), LetterboxTransform(nw / w, nh / h, float(pad_left), float(pad_top), w, h)


def hflip(sample: Sample) -> Sample:
    """Horizontal mirror of the image and its boxes."""
    w = sample.image.shape[2]
    flipped = torch.flip(sample.image, dims=[2])
    anns = [Annotation(BBox(w - a.box.x2, a.box.y1, w - a.box.x1, a.box.y2), a.class_id)
            for a in sample.annotations]
    bright = torch.flip(sample.bright, dims=[2]) if sample.bright is not None else None
    return Sample(flipped, anns, bright=bright, name=sample.name)


def _to_pil(image: Tensor) -> PILImage.Image:
    arr = (image.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    return PILImage.fromarray(arr.transpose(1, 2, 0))


def load_image(path: Path) -> Tensor:
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1))


def write_yolo_dataset(samples: list[Sample], root: Path, split: str,
                       class_names: tuple[str, ...] = SHAPE_CLASSES) -> None:
    """Materialize samples as the yolo-txt layout (plus bright originals if present)."""
    root = Path(root)
    img_dir = root / "images" / split
    lbl_dir = root / "labels" / split
    img_dir.mkdir(parents=True, exist_ok=True)
    lbl_dir.mkdir(parents=True, exist_ok=True)
    bright_dir = root / "bright" / split
    (root / "classes.txt").write_text("".join(f"{n}\n" for n in class_names))
    for s in samples:
        _, h, w = s.image.shape
        _to_pil(s.image).save(img_dir / f"{s.name}.png")
        lines = []
        for a in s.annotations:
            cx, cy = a.box.center
            lines.append(f"{a.class_id} {cx / w:.6f} {cy / h:.6f} "
                         f"{a.box.width / w:.6f} {a.box.height / h:.6f}\n")
        (lbl_dir / f"{s.name}.txt").write_text("".join(lines))
        if s.bright is not None:
            bright_dir.mkdir(parents=True, exist_ok=True)
            _to_pil(s.bright).save(bright_dir / f"{s.name}.png")


def _parse_yolo_label(path: Path, w: int, h: int, num_classes: int) -> list[Annotation]:
    anns = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        try:
            cid = int(parts[0])
            cx, cy, bw, bh = (float(p) for p in parts[1:5])
            if len(parts) != 5:
                raise ValueError("expected 5 fields")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed label line: {line!r}") from exc
        if cid >= num_classes:
            raise ValueError(f"{path}:{lineno}: class id {cid} >= num_classes {num_classes}")
        box = BBox.from_cxcywh(cx * w, cy * h, bw * w, bh * h)
        anns.append(Annotation(box, cid))
    return anns


def _load_yolo(spec: DatasetSpec) -> list[Sample]:
    img_dir = spec.root / "images" / spec.split
    lbl_dir = spec.root / "labels" / spec.split
    if not img_dir.is_dir():
        raise FileNotFoundError(f"missing image directory: {img_dir}")
    bright_dir = spec.root / "bright" / spec.split
    samples = []
    for img_path in sorted(img_dir.iterdir()):
        if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
            continue
        image = load_image(img_path)
        label_path = lbl_dir / (img_path.stem + ".txt")
        if not label_path.exists():
            if spec.skip_missing_labels:
                continue
            raise FileNotFoundError(f"missing label file: {label_path}")
        anns = _parse_yolo_label(label_path, image.shape[2], image.shape[1], len(spec.class_names))
        bright_path = bright_dir / img_path.name
        bright = load_image(bright_path) if bright_path.exists() else None
        samples.append(Sample(image, anns, bright=bright, name=img_path.stem))
    return samples


def _load_coco(spec: DatasetSpec) -> list[Sample]:
    ann_path = spec.root / f"{spec.split}.json"
    if not ann_path.exists():
        raise FileNotFoundError(f"missing coco annotation file: {ann_path}")
    doc = json.loads(ann_path.read_text())
    cat_to_idx = {c["id"]: i for i, c in enumerate(sorted(doc["categories"], key=lambda c: c["id"]))}
    by_image: dict[int, list[Annotation]] = {img["id"]: [] for img in doc["images"]}
    for ann in doc["annotations"]:
        x, y, w, h = ann["bbox"]
        cid = cat_to_idx[ann["category_id"]]
        if cid >= len(spec.class_names):
            raise ValueError(f"category {ann['category_id']} outside declared classes")
        by_image[ann["image_id"]].append(Annotation(BBox(x, y, x + w, y + h), cid))
    samples = []
    for img in sorted(doc["images"], key=lambda i: i["file_name"]):
        path = spec.root / "images" / spec.split / img["file_name"]
        image = load_image(path)
        samples.append(Sample(image, by_image[img["id"]], name=Path(img["file_name"]).stem))
    return samples


def load_dataset(spec: DatasetSpec) -> list[Sample]:
    """Load a dataset split; images normalized to [0,1], boxes in pixel corners."""
    if spec.format == "yolo-txt":
        return _load_yolo(spec)
    return _load_coco(spec)
