"""Prototype of the acceptance-8 experiment: tune before freezing the test."""
import json
import sys
import time

import numpy as np
import torch

from amieod.config import RunConfig, apply_overrides
from amieod.datakit import SynthConfig, synth_generate
from amieod.detector import SingleScaleDetector, detection_loss
from amieod.evalkit import evaluate
from amieod.pipeline import (build_models, detections_for_view, models_from_checkpoint,
                             prepare_samples, train_stage1, _epoch_batches)


def make_cfg(seed, epochs):
    cfg = RunConfig()
    apply_overrides(cfg, [
        f"seed={seed}",
        "synth.canvas_size=64", "synth.shape_size_range=[0.20,0.36]",
        "synth.gamma_range=[1.0,5.0]", "synth.gain_range=[0.03,0.9]",
        "synth.noise_sigma=0.03",
        "detector.num_classes=3", "detector.anchors=[[12,12],[17,17],[23,23]]",
        "detector.backbone_width=32", "detector.loss_weights=[1.0,1.0,0.5]",
        "enhance.curve_width=8", "enhance.pp_input_size=256",
        "enhance.piem_pretrain_steps=150", "enhance.piem_pretrain_lr=0.05",
        f"stage1.epochs={epochs}", "stage1.batch_size=8", "stage1.input_size=64",
        "stage1.detector_pretrain_steps=800",
        "stage1.detector_pretrain_lr=0.02",
    ])
    return cfg


def synth(seed, n, cfg):
    return synth_generate(SynthConfig(
        num_images=n, canvas_size=cfg.synth.canvas_size, gamma_range=cfg.synth.gamma_range,
        shape_size_range=cfg.synth.shape_size_range,
        gain_range=cfg.synth.gain_range, noise_sigma=cfg.synth.noise_sigma, seed=seed))


def eval_route(cfg, experts, detector, samples, k):
    prepared = prepare_samples(samples, cfg.stage1.input_size)
    per_image = []
    with torch.no_grad():
        for s in prepared:
            view = experts.enhance(s.image, k)
            per_image.append((detections_for_view(view, detector, cfg), s.annotations))
    return evaluate(per_image, cfg.detector.num_classes, cfg.eval.conf_thresh).map50


def eval_plain(cfg, detector, samples):
    prepared = prepare_samples(samples, cfg.stage1.input_size)
    per_image = []
    with torch.no_grad():
        for s in prepared:
            per_image.append((detections_for_view(s.image, detector, cfg), s.annotations))
    return evaluate(per_image, cfg.detector.num_classes, cfg.eval.conf_thresh).map50


def train_raw_baseline(cfg, samples):
    from amieod.pipeline import train_detector_baseline
    from amieod.checkpoint import restore_state
    from amieod.detector import SingleScaleDetector
    ckpt = train_detector_baseline(cfg, samples)
    det = SingleScaleDetector(cfg.detector)
    restore_state(ckpt.tensors, detector=det)
    return det.eval()


def main():
    epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
    seeds = [int(s) for s in sys.argv[2].split(",")] if len(sys.argv) > 2 else [0]
    for seed in seeds:
        t0 = time.time()
        cfg = make_cfg(seed, epochs)
        train = synth(cfg.seed, 200, cfg)
        test = synth(cfg.seed + 1000, 50, cfg)

        ckpt = train_stage1(cfg, train)
        t_train = time.time() - t0
        _, experts, detector, _ = models_from_checkpoint(ckpt)
        route_maps = [eval_route(cfg, experts, detector, test, k) for k in range(4)]

        torch.manual_seed(cfg.seed)
        _, untrained = build_models(cfg)
        untrained.eval()
        map_untrained = eval_plain(cfg, untrained, test)

        t1 = time.time()
        raw_det = train_raw_baseline(cfg, train)
        t_base = time.time() - t1
        map_raw = eval_plain(cfg, raw_det, test)

        print(json.dumps({
            "seed": seed, "epochs": epochs,
            "ours_routes": [round(m, 4) for m in route_maps],
            "ours_best": round(max(route_maps), 4),
            "untrained": round(map_untrained, 4),
            "raw_baseline": round(map_raw, 4),
            "t_train_s": round(t_train, 1), "t_base_s": round(t_base, 1),
            "t_total_s": round(time.time() - t0, 1),
        }))
        sys.stdout.flush()


if __name__ == "__main__":
    main()
