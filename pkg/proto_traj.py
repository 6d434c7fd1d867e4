"""Trajectory probe: route mAPs at several points during joint training."""
import time

import numpy as np
import torch

from amieod.config import RunConfig, apply_overrides
from amieod.datakit import SynthConfig, synth_generate, hflip
from amieod.detector import detection_loss
from amieod.dgrl import dgrl_loss, select_best, stage1_loss
from amieod.core import as_float
from amieod.evalkit import evaluate
from amieod.pipeline import (build_models, prepare_samples, pretrain_piem,
                             pretrain_detector_bright, _epoch_batches, detections_for_view)


def make_cfg(seed=0):
    cfg = RunConfig()
    apply_overrides(cfg, [
        f"seed={seed}",
        "synth.canvas_size=64", "synth.shape_size_range=[0.20,0.36]",
        "synth.gamma_range=[1.0,5.0]", "synth.gain_range=[0.03,0.9]",
        "synth.noise_sigma=0.03",
        "detector.num_classes=3", "detector.anchors=[[12,12],[17,17],[23,23]]",
        "detector.backbone_width=32", "detector.loss_weights=[1.0,1.0,0.5]",
        "enhance.curve_width=8", "enhance.pp_input_size=256",
        "stage1.epochs=16", "stage1.batch_size=8", "stage1.input_size=64",
        "stage1.lr_schedule=cosine",
    ])
    return cfg


def synth(cfg, seed, n):
    return synth_generate(SynthConfig(
        num_images=n, canvas_size=64, shape_size_range=(0.20, 0.36),
        gamma_range=cfg.synth.gamma_range, gain_range=cfg.synth.gain_range,
        noise_sigma=cfg.synth.noise_sigma, seed=seed))


def eval_routes(cfg, experts, detector, test_prepared):
    experts.eval(); detector.eval()
    maps = []
    for k in range(4):
        per = []
        with torch.no_grad():
            for s in test_prepared:
                view = experts.enhance(s.image, k)
                per.append((detections_for_view(view, detector, cfg), s.annotations))
        maps.append(round(evaluate(per, 3, cfg.eval.conf_thresh).map50, 3))
    experts.train(); detector.train()
    return maps


def main():
    cfg = make_cfg(0)
    train = synth(cfg, 0, 400)
    test = synth(cfg, 1000, 50)
    tp = prepare_samples(test, 64)

    torch.manual_seed(0)
    experts, detector = build_models(cfg)
    prepared = prepare_samples(train, 64)
    pretrain_piem(experts, prepared, 150, 0.05, seed=0)
    pretrain_detector_bright(detector, cfg, prepared, 400, 0.02, seed=0)
    print("init routes:", eval_routes(cfg, experts, detector, tp), flush=True)

    params = list(experts.trainable_parameters()) + list(detector.parameters())
    opt = torch.optim.SGD(params, lr=0.01, momentum=0.937, weight_decay=5e-4)
    rng = np.random.default_rng(0)
    experts.train(); detector.train()
    t0 = time.time()
    for epoch in range(16):
        for bidx in _epoch_batches(len(prepared), 8, rng):
            batch = [hflip(prepared[int(i)]) if rng.random() < 0.5 else prepared[int(i)]
                     for i in bidx]
            images = torch.stack([s.image for s in batch])
            views = experts.forward_all(images)
            raws = [detector(v) for v in views]
            loss_sum = images.new_zeros(())
            for i, s in enumerate(batch):
                bds = [detection_loss(raws[k][i], s.annotations, cfg.detector) for k in range(4)]
                totals = [bd.total for bd in bds]
                best = select_best([as_float(t) for t in totals])
                reg = dgrl_loss([v[i] for v in views], best)
                loss_sum = loss_sum + stage1_loss(reg, totals, 0.2)
            loss = loss_sum / len(batch)
            opt.zero_grad(); loss.backward(); opt.step()
        if epoch in (1, 3, 7, 11, 15):
            print(f"epoch {epoch+1}: routes {eval_routes(cfg, experts, detector, tp)} "
                  f"({time.time()-t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
