"""Command-line entry point.

Subcommands: synth, train-stage1, train-stage2, infer, eval, route-stats.
Shared flags: --config (TOML), --set section.key=value (repeatable), --seed,
--out. Log level comes from the AMIEOD_LOG environment variable. Anticipated
failures print one structured error line and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import RunConfig, apply_overrides, load_config
from .datakit import DatasetSpec, Sample, SynthConfig, letterbox, load_dataset, load_image, \
    synth_generate, write_yolo_dataset
from .esm import infer as esm_infer
from .evalkit import emit_report, evaluate
from .pipeline import detections_for_view, models_from_checkpoint, prepare_samples, \
    routing_report, train_stage1, train_stage2

log = logging.getLogger("amieod")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amieod",
                                     description="multi-expert low-light detection toolkit")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="TOML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="config override, repeatable")
        p.add_argument("--seed", type=int, help="seed override for all stochastic parts")
        p.add_argument("--out", type=Path, default=Path("runs/out"), help="output directory")
        return p

    common(sub.add_parser("synth", help="generate the synthetic dataset"))
    common(sub.add_parser("train-stage1", help="joint expert + detector training"))
    p2 = common(sub.add_parser("train-stage2", help="selector training"))
    p2.add_argument("--stage1-checkpoint", type=Path, required=True)
    pi = common(sub.add_parser("infer", help="detect objects in one image"))
    pi.add_argument("--checkpoint", type=Path, required=True)
    pi.add_argument("--image", type=Path, required=True)
    pe = common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"))
    pe.add_argument("--checkpoint", type=Path, required=True)
    pe.add_argument("--route", default="auto",
                    help="routing mode: auto, esm, or a fixed expert index 0-3")
    pe.add_argument("--plots", action="store_true", help="also write PR/loss curve images")
    pe.add_argument("--loss-log", type=Path, help="training loss JSONL to plot")
    pr = common(sub.add_parser("route-stats", help="per-expert routing statistics"))
    pr.add_argument("--checkpoint", type=Path, required=True)
    return parser


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        apply_overrides(cfg, [f"seed={args.seed}"])
    return cfg


def _dataset(cfg: RunConfig, split: str) -> list[Sample]:
    spec = DatasetSpec(root=Path(cfg.data.root), split=split, format=cfg.data.format,
                       class_names=cfg.data.class_names)
    samples = load_dataset(spec)
    if not samples:
        raise FileNotFoundError(f"no samples in {cfg.data.root} split {split!r}")
    return samples


def _cmd_synth(cfg: RunConfig, args) -> int:
    root = Path(cfg.data.root)
    for split, count, seed in (("train", cfg.synth.num_train, cfg.seed),
                               ("test", cfg.synth.num_test, cfg.seed + 1)):
        samples = synth_generate(SynthConfig(
            num_images=count, canvas_size=cfg.synth.canvas_size,
            shapes_per_image=cfg.synth.shapes_per_image,
            shape_size_range=cfg.synth.shape_size_range, gamma_range=cfg.synth.gamma_range,
            gain_range=cfg.synth.gain_range, noise_sigma=cfg.synth.noise_sigma, seed=seed))
        write_yolo_dataset(samples, root, split, cfg.data.class_names)
        log.info("wrote %d %s images under %s", count, split, root)
    print(f"dataset written to {root}")
    return 0


def _cmd_train_stage1(cfg: RunConfig, args) -> int:
    samples = _dataset(cfg, "train")
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = train_stage1(cfg, samples, log_path=args.out / "stage1_loss.jsonl")
    path = args.out / "stage1.ckpt"
    ckpt_io.save_checkpoint(path, ckpt)
    print(f"stage-1 checkpoint written to {path}")
    return 0


def _cmd_train_stage2(cfg: RunConfig, args) -> int:
    samples = _dataset(cfg, "train")
    stage1 = ckpt_io.load_checkpoint(args.stage1_checkpoint)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = train_stage2(cfg, samples, stage1, log_path=args.out / "stage2_loss.jsonl")
    path = args.out / "stage2.ckpt"
    ckpt_io.save_checkpoint(path, ckpt)
    print(f"stage-2 checkpoint written to {path}")
    return 0


def _cmd_infer(cfg: RunConfig, args) -> int:
    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    cfg_ck, experts, detector, selector = models_from_checkpoint(ckpt)
    image = load_image(args.image)
    boxed, tf = letterbox(image, cfg_ck.stage2.input_size)
    if selector is not None:
        dets, decision = esm_infer(boxed, selector, experts, detector, cfg_ck.detector,
                                   cfg.eval.conf_thresh, cfg.eval.nms_thresh)
        chosen = decision.chosen
    else:
        chosen = 0
        import torch
        with torch.no_grad():
            view = experts.enhance(boxed, chosen)
            dets = detections_for_view(view, detector, cfg_ck)
            dets = [d for d in dets if d.score >= cfg.eval.conf_thresh]
    record = {
        "image": str(args.image),
        "route": chosen,
        "detections": [
            {"box": list(tf.invert_box(d.box).as_tuple()), "class_id": d.class_id,
             "score": d.score}
            for d in dets
        ],
    }
    args.out.mkdir(parents=True, exist_ok=True)
    out_path = args.out / "detections.json"
    out_path.write_text(json.dumps(record, indent=2) + "\n")
    print(f"{len(dets)} detections (route {chosen}) written to {out_path}")
    return 0


def _cmd_eval(cfg: RunConfig, args) -> int:
    import torch

    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    cfg_ck, experts, detector, selector = models_from_checkpoint(ckpt)
    samples = _dataset(cfg, "test")
    prepared = prepare_samples(samples, cfg_ck.stage2.input_size)

    mode = args.route
    if mode == "auto":
        mode = "esm" if selector is not None else "0"
    if mode == "esm" and selector is None:
        raise ValueError("checkpoint has no selector; use --route 0..3")
    per_image = []
    with torch.no_grad():
        for s in prepared:
            if mode == "esm":
                from .esm import route as _route
                k = _route(selector(s.image)).chosen
            else:
                k = int(mode)
            view = experts.enhance(s.image, k)
            per_image.append((detections_for_view(view, detector, cfg), s.annotations))
    result = evaluate(per_image, cfg.detector.num_classes,
                      cfg.eval.conf_thresh, cfg.eval.iou_thresh)
    written = emit_report(result, args.out, plots=args.plots, loss_log=args.loss_log)
    print(f"map50={result.map50:.4f} precision={result.precision:.4f} "
          f"recall={result.recall:.4f} -> {written[0]}")
    return 0


def _cmd_route_stats(cfg: RunConfig, args) -> int:
    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    cfg_ck, experts, detector, selector = models_from_checkpoint(ckpt)
    if selector is None:
        raise ValueError("route-stats needs a stage-2 checkpoint with a trained selector")
    samples = _dataset(cfg, "test")
    report = routing_report(cfg_ck, experts, detector, selector, samples)
    args.out.mkdir(parents=True, exist_ok=True)
    out_path = args.out / "routing.json"
    out_path.write_text(json.dumps(report, indent=2) + "\n")
    print(f"routing statistics written to {out_path}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "route-stats": _cmd_route_stats,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("AMIEOD_LOG", "WARNING").upper())
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_run_config(args)
        return _COMMANDS[args.verb](cfg, args)
    except (ValueError, FileNotFoundError, ckpt_io.CheckpointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
