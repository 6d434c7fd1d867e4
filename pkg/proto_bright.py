"""Bright-task ceiling experiments for detector-only training."""
import sys
import time

import numpy as np
import torch

from amieod.config import RunConfig, apply_overrides
from amieod.datakit import SynthConfig, synth_generate, hflip
from amieod.detector import detection_loss, decode, nms
from amieod.pipeline import build_models, prepare_samples, _epoch_batches
from amieod.evalkit import evaluate


def run(n_train, width, epochs, lam_box, size_range, anchors, lr=0.01, canvas=64):
    cfg = RunConfig()
    apply_overrides(cfg, [
        "seed=0", "detector.num_classes=3", f"detector.anchors={anchors}",
        f"detector.backbone_width={width}", f"detector.loss_weights=[{lam_box},1.0,0.5]",
    ])
    kw = dict(canvas_size=canvas, gamma_range=(1.0, 1.0), gain_range=(1.0, 1.0),
              noise_sigma=0.0, shape_size_range=size_range)
    data = synth_generate(SynthConfig(num_images=n_train, seed=0, **kw))
    test = synth_generate(SynthConfig(num_images=50, seed=7, **kw))
    torch.manual_seed(0)
    _, det = build_models(cfg)
    prepared = prepare_samples(data, canvas)
    opt = torch.optim.SGD(det.parameters(), lr=lr, momentum=0.937, weight_decay=5e-4)
    rng = np.random.default_rng(0)
    det.train()
    t0 = time.time()
    steps = 0
    for epoch in range(epochs):
        for bidx in _epoch_batches(len(prepared), 8, rng):
            batch = [hflip(prepared[int(i)]) if rng.random() < 0.5 else prepared[int(i)]
                     for i in bidx]
            images = torch.stack([s.image for s in batch])
            raw = det(images)
            loss = sum(detection_loss(raw[i], s.annotations, cfg.detector).total
                       for i, s in enumerate(batch)) / len(bidx)
            opt.zero_grad(); loss.backward(); opt.step()
            steps += 1
    det.eval()

    def ev(samples):
        per = []
        with torch.no_grad():
            for s in prepare_samples(samples, canvas):
                raw = det(s.image.unsqueeze(0))[0]
                per.append((nms(decode(raw, 0.05, cfg.detector), 0.5), s.annotations))
        return evaluate(per, 3, 0.25).map50

    print(f"n={n_train} w={width} ep={epochs} lb={lam_box} sz={size_range} canvas={canvas} "
          f"| TRAIN {ev(data[:50]):.3f} TEST {ev(test):.3f} | {steps} steps {time.time()-t0:.0f}s",
          flush=True)


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "a"
    if which == "a":
        run(500, 16, 12, 1.0, (0.20, 0.36), "[[12,12],[17,17],[23,23]]")
    elif which == "b":
        run(500, 32, 12, 1.0, (0.20, 0.36), "[[12,12],[17,17],[23,23]]")
    elif which == "c":
        run(500, 24, 12, 1.0, (0.20, 0.36), "[[12,12],[17,17],[23,23]]")
    elif which == "d":
        run(500, 16, 12, 2.0, (0.20, 0.36), "[[12,12],[17,17],[23,23]]")
