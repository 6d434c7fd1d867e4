"""Two-stage training orchestration.

Stage 1 jointly optimizes the trainable experts and the detector: every view
of each image is scored by the detector, the best view becomes the detached
regression target, and the composite loss blends the regression term with
the mean detection loss. Stage 2 freezes everything trained so far and fits
the expert selector against per-sample pseudo-labels.

Both stages use SGD (momentum 0.937, weight decay 5e-4) with a constant
learning rate by default; cosine decay is available behind a config switch.
Each optimizer step appends one JSON line with every loss component.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .checkpoint import Checkpoint, collect_state, restore_state
from .config import RunConfig, TrainConfig
from .core import Annotation, as_float
from .datakit import Sample, hflip, letterbox, darken
from .detector import DetectorConfig, SingleScaleDetector, decode, detection_loss, nms
from .dgrl import dgrl_loss, select_best, stage1_loss
from .enhance import ExpertBundle
from .esm import ExpertSelector, assign_pseudo_label, route
from .evalkit import evaluate


def build_models(cfg: RunConfig) -> tuple[ExpertBundle, SingleScaleDetector]:
    experts = ExpertBundle(cfg.enhance.curve_width, cfg.enhance.pp_input_size)
    detector = SingleScaleDetector(cfg.detector)
    return experts, detector


def build_selector(cfg: RunConfig) -> ExpertSelector:
    return ExpertSelector(
        num_routes=4,
        input_size=cfg.esm.input_size,
        width=cfg.esm.width,
        blocks_per_stage=cfg.esm.blocks_per_stage,
        deep=cfg.esm.deep,
    )


def models_from_checkpoint(ckpt: Checkpoint) -> tuple[RunConfig, ExpertBundle, SingleScaleDetector,
                                                      Optional[ExpertSelector]]:
    """Rebuild and restore every module recorded in a checkpoint."""
    from .config import config_from_dict

    cfg = config_from_dict(ckpt.config)
    experts, detector = build_models(cfg)
    selector = build_selector(cfg) if any(k.startswith("esm.") for k in ckpt.tensors) else None
    restore_state(ckpt.tensors, experts=experts, detector=detector, esm=selector)
    experts.eval()
    detector.eval()
    if selector is not None:
        selector.eval()
    return cfg, experts, detector, selector


def prepare_samples(samples: list[Sample], input_size: int) -> list[Sample]:
    """Letterbox every sample (and its bright original) to the training size."""
    out = []
    for s in samples:
        img, tf = letterbox(s.image, input_size)
        anns = [Annotation(tf.apply_box(a.box), a.class_id) for a in s.annotations]
        bright = letterbox(s.bright, input_size)[0] if s.bright is not None else None
        out.append(Sample(img, anns, bright=bright, name=s.name))
    return out


def _lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))
    return cfg.lr


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


class _JsonlLogger:
    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def pretrain_piem(experts: ExpertBundle, samples: list[Sample], steps: int, lr: float,
                  batch_size: int = 8, seed: int = 0) -> None:
    """Fit the pretrained enhancer to invert synthetic darkening, then freeze it.

    Minimizes the per-pixel L1 distance between the enhanced dark image and
    the bright original. Requires samples carrying bright references.
    """
    pairs = [(s.image, s.bright) for s in samples if s.bright is not None]
    if not pairs:
        raise ValueError("no (dark, bright) pairs available for enhancer pretraining")
    rng = np.random.default_rng(seed)
    opt = torch.optim.SGD(experts.piem.parameters(), lr=lr, momentum=0.9)
    experts.piem.train()
    for _ in range(steps):
        idx = rng.integers(0, len(pairs), size=min(batch_size, len(pairs)))
        dark = torch.stack([pairs[i][0] for i in idx])
        bright = torch.stack([pairs[i][1] for i in idx])
        loss = F.l1_loss(experts.piem(dark), bright)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite enhancer pretraining loss: {as_float(loss)}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    experts.freeze_pretrained()


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def pretrain_detector_bright(detector: SingleScaleDetector, cfg: RunConfig,
                             samples: list[Sample], steps: int, lr: float,
                             batch_size: int = 8, seed: int = 0) -> None:
    """Warm up the detector on the well-lit originals before any dark input.

    Stands in for initializing from a detector pretrained on daylight data;
    both the joint pipeline and the no-enhancement baseline start from it.
    """
    pairs = [s for s in samples if s.bright is not None]
    if not pairs:
        raise ValueError("no bright references available for detector pretraining")
    rng = np.random.default_rng(seed)
    opt = torch.optim.SGD(detector.parameters(), lr=lr, momentum=0.9)
    detector.train()
    for step in range(steps):
        idx = rng.integers(0, len(pairs), size=min(batch_size, len(pairs)))
        batch = [pairs[int(i)] for i in idx]
        images = torch.stack([s.bright for s in batch])
        raw = detector(images)
        loss = sum(detection_loss(raw[i], s.annotations, cfg.detector).total
                   for i, s in enumerate(batch)) / len(batch)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite detector pretraining loss: {as_float(loss)}")
        opt.zero_grad()
        loss.backward()
        opt.step()


def train_stage1(cfg: RunConfig, samples: list[Sample],
                 log_path: Optional[Path] = None) -> Checkpoint:
    """Joint expert + detector training; returns the final checkpoint.

    The pretrained enhancer is fit first (when bright references exist) and
    stays frozen through every optimizer step; updates touch only the
    trainable twin, the parameter predictor, and the detector.
    """
    if not samples:
        raise ValueError("empty training dataset")
    tc = cfg.stage1
    torch.manual_seed(tc.seed)
    experts, detector = build_models(cfg)
    prepared = prepare_samples(samples, tc.input_size)

    if cfg.enhance.piem_pretrain_steps > 0 and any(s.bright is not None for s in prepared):
        pretrain_piem(experts, prepared, cfg.enhance.piem_pretrain_steps,
                      cfg.enhance.piem_pretrain_lr, seed=tc.seed)
    else:
        experts.freeze_pretrained()
    if tc.detector_pretrain_steps > 0:
        pretrain_detector_bright(detector, cfg, prepared, tc.detector_pretrain_steps,
                                 tc.detector_pretrain_lr, seed=tc.seed)

    params = list(experts.trainable_parameters()) + list(detector.parameters())
    opt = torch.optim.SGD(params, lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay)
    logger = _JsonlLogger(log_path)
    rng = np.random.default_rng(tc.seed)
    experts.train()
    detector.train()

    total_steps = tc.epochs * max(1, math.ceil(len(prepared) / tc.batch_size))
    step = 0
    for epoch in range(tc.epochs):
        for batch_idx in _epoch_batches(len(prepared), tc.batch_size, rng):
            batch = []
            for i in batch_idx:
                s = prepared[int(i)]
                if cfg.data.hflip and rng.random() < 0.5:
                    s = hflip(s)
                if cfg.data.darken_jitter:
                    s = Sample(darken(s.image, float(rng.uniform(1.0, 1.5)),
                                      float(rng.uniform(0.7, 1.0)), 0.0,
                                      seed=int(rng.integers(2**31))),
                               s.annotations, bright=s.bright, name=s.name)
                batch.append(s)
            images = torch.stack([s.image for s in batch])
            views = experts.forward_all(images)
            raws = [detector(v) for v in views]

            loss_sum = images.new_zeros(())
            comps = {"box": 0.0, "obj": 0.0, "cls": 0.0, "dgrl": 0.0}
            for i, s in enumerate(batch):
                breakdowns = [detection_loss(raws[k][i], s.annotations, cfg.detector)
                              for k in range(len(views))]
                totals = [bd.total for bd in breakdowns]
                flat = [as_float(t) for t in totals]
                if not all(math.isfinite(t) for t in flat):
                    raise RuntimeError(
                        f"non-finite stage-1 loss at step {step} (epoch {epoch}): "
                        f"per-expert totals {flat} for sample {s.name!r}")
                best = select_best(flat)
                reg = dgrl_loss([v[i] for v in views], best)
                loss_sum = loss_sum + stage1_loss(reg, totals, tc.alpha)
                comps["box"] += sum(as_float(b.box_loss) for b in breakdowns) / len(breakdowns)
                comps["obj"] += sum(as_float(b.obj_loss) for b in breakdowns) / len(breakdowns)
                comps["cls"] += sum(as_float(b.cls_loss) for b in breakdowns) / len(breakdowns)
                comps["dgrl"] += as_float(reg)
            loss = loss_sum / len(batch)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite stage-1 loss at step {step} (epoch {epoch}): {as_float(loss)}")
            _set_lr(opt, _lr_at(tc, step, total_steps))
            opt.zero_grad()
            loss.backward()
            opt.step()
            logger.write({"step": step, "epoch": epoch,
                          "box": comps["box"] / len(batch), "obj": comps["obj"] / len(batch),
                          "cls": comps["cls"] / len(batch), "dgrl": comps["dgrl"] / len(batch),
                          "total": as_float(loss)})
            step += 1

    return Checkpoint(
        config=cfg.to_dict(),
        stage=1,
        epoch=tc.epochs,
        tensors=collect_state(experts=experts, detector=detector),
        rng_state=torch.get_rng_state().numpy().tobytes(),
    )


def train_detector_baseline(cfg: RunConfig, samples: list[Sample],
                            log_path: Optional[Path] = None) -> Checkpoint:
    """Detector alone on the raw images: the no-enhancement comparison arm.

    Same optimizer, schedule, augmentation, and step budget as stage 1, but
    no experts and no regression term; used for ablation-style comparisons.
    """
    if not samples:
        raise ValueError("empty training dataset")
    tc = cfg.stage1
    torch.manual_seed(tc.seed)
    _, detector = build_models(cfg)
    prepared = prepare_samples(samples, tc.input_size)
    if tc.detector_pretrain_steps > 0:
        pretrain_detector_bright(detector, cfg, prepared, tc.detector_pretrain_steps,
                                 tc.detector_pretrain_lr, seed=tc.seed)
    opt = torch.optim.SGD(detector.parameters(), lr=tc.lr, momentum=tc.momentum,
                          weight_decay=tc.weight_decay)
    logger = _JsonlLogger(log_path)
    rng = np.random.default_rng(tc.seed)
    detector.train()
    total_steps = tc.epochs * max(1, math.ceil(len(prepared) / tc.batch_size))
    step = 0
    for epoch in range(tc.epochs):
        for batch_idx in _epoch_batches(len(prepared), tc.batch_size, rng):
            batch = [hflip(prepared[int(i)]) if cfg.data.hflip and rng.random() < 0.5
                     else prepared[int(i)] for i in batch_idx]
            images = torch.stack([s.image for s in batch])
            raw = detector(images)
            loss = sum(detection_loss(raw[i], s.annotations, cfg.detector).total
                       for i, s in enumerate(batch)) / len(batch)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite baseline loss at step {step}: {as_float(loss)}")
            _set_lr(opt, _lr_at(tc, step, total_steps))
            opt.zero_grad()
            loss.backward()
            opt.step()
            logger.write({"step": step, "epoch": epoch, "total": as_float(loss)})
            step += 1
    return Checkpoint(config=cfg.to_dict(), stage=1, epoch=tc.epochs,
                      tensors=collect_state(detector=detector),
                      rng_state=torch.get_rng_state().numpy().tobytes())


def train_stage2(cfg: RunConfig, samples: list[Sample], stage1_ckpt: Checkpoint,
                 log_path: Optional[Path] = None) -> Checkpoint:
    """Selector training against pseudo-labels; experts and detector frozen."""
    if not samples:
        raise ValueError("empty training dataset")
    if stage1_ckpt.stage != 1:
        raise ValueError(f"expected a stage-1 checkpoint, got stage {stage1_ckpt.stage}")
    tc = cfg.stage2
    torch.manual_seed(tc.seed)
    _, experts, detector, _ = models_from_checkpoint(stage1_ckpt)
    experts.requires_grad_(False)
    detector.requires_grad_(False)
    experts.eval()
    detector.eval()

    selector = build_selector(cfg)
    selector.train()
    opt = torch.optim.SGD(selector.parameters(), lr=tc.lr,
                          momentum=tc.momentum, weight_decay=tc.weight_decay)
    logger = _JsonlLogger(log_path)
    rng = np.random.default_rng(tc.seed)
    prepared = prepare_samples(samples, tc.input_size)

    label_cache: dict[int, int] = {}

    def pseudo_label(i: int) -> int:
        if cfg.esm.pseudo_label_cache and i in label_cache:
            return label_cache[i]
        s = prepared[i]
        b = assign_pseudo_label(s.image, s.annotations, experts, detector, cfg.detector)
        label_cache[i] = b
        return b

    total_steps = tc.epochs * max(1, math.ceil(len(prepared) / tc.batch_size))
    step = 0
    for epoch in range(tc.epochs):
        for batch_idx in _epoch_batches(len(prepared), tc.batch_size, rng):
            images = torch.stack([prepared[int(i)].image for i in batch_idx])
            labels = torch.tensor([pseudo_label(int(i)) for i in batch_idx])
            logits = selector(images)
            loss = F.cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite stage-2 loss at step {step} (epoch {epoch}): {as_float(loss)}")
            _set_lr(opt, _lr_at(tc, step, total_steps))
            opt.zero_grad()
            loss.backward()
            opt.step()
            logger.write({"step": step, "epoch": epoch, "dgce": as_float(loss)})
            step += 1

    tensors = collect_state(experts=experts, detector=detector, esm=selector)
    return Checkpoint(
        config=cfg.to_dict(),
        stage=2,
        epoch=tc.epochs,
        tensors=tensors,
        rng_state=torch.get_rng_state().numpy().tobytes(),
    )


def detections_for_view(view: Tensor, detector: SingleScaleDetector, cfg: RunConfig):
    raw = detector(view)
    return nms(decode(raw, cfg.eval.decode_thresh, cfg.detector), cfg.eval.nms_thresh)


def routing_report(cfg: RunConfig, experts: ExpertBundle, detector: SingleScaleDetector,
                   selector: Optional[ExpertSelector], samples: list[Sample],
                   random_seeds: tuple[int, ...] = (0, 1, 2)) -> dict:
    """Selection histogram plus per-routing-mode mean detection loss and mAP.

    Modes: the learned selector (when present), each fixed route 0..3, and
    uniform-random routing repeated over the given seeds.
    """
    if not samples:
        raise ValueError("empty dataset")
    prepared = prepare_samples(samples, cfg.stage2.input_size)
    experts.eval()
    detector.eval()
    n_routes = experts.n + 1

    per_route_loss = np.zeros((n_routes, len(prepared)))
    per_route_dets: list[list] = [[] for _ in range(n_routes)]
    chosen: list[int] = []
    with torch.no_grad():
        for i, s in enumerate(prepared):
            views = experts.forward_all(s.image)
            for k, v in enumerate(views):
                per_route_loss[k, i] = float(detection_loss(detector(v), s.annotations,
                                                            cfg.detector).total)
                per_route_dets[k].append(detections_for_view(v, detector, cfg))
            if selector is not None:
                chosen.append(route(selector(s.image)).chosen)

    gts = [s.annotations for s in prepared]
    num_classes = cfg.detector.num_classes

    def route_map(det_lists):
        return evaluate(list(zip(det_lists, gts)), num_classes,
                        cfg.eval.conf_thresh, cfg.eval.iou_thresh).map50

    report: dict = {
        "num_images": len(prepared),
        "fixed": {
            str(k): {
                "mean_det_loss": float(per_route_loss[k].mean()),
                "map50": route_map(per_route_dets[k]),
            }
            for k in range(n_routes)
        },
        "random": {},
    }
    rand_losses = []
    for seed in random_seeds:
        rng = np.random.default_rng(seed)
        picks = rng.integers(0, n_routes, size=len(prepared))
        mean_loss = float(per_route_loss[picks, np.arange(len(prepared))].mean())
        report["random"][str(seed)] = {"mean_det_loss": mean_loss}
        rand_losses.append(mean_loss)
    report["random"]["mean_det_loss"] = float(np.mean(rand_losses))

    if selector is not None:
        hist = {str(k): int(sum(1 for c in chosen if c == k)) for k in range(n_routes)}
        esm_loss = float(per_route_loss[chosen, np.arange(len(prepared))].mean())
        esm_dets = [per_route_dets[c][i] for i, c in enumerate(chosen)]
        report["esm"] = {
            "selection_histogram": hist,
            "mean_det_loss": esm_loss,
            "map50": route_map(esm_dets),
        }
    return report
