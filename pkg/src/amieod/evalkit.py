"""Precision / recall / mAP at IoU 0.5 with all-points PR interpolation.

Matching is greedy by descending score: a detection claims the unmatched
same-class ground truth with the highest IoU at or above the threshold, and
each ground truth is claimed at most once. Scalar precision and recall are
reported at a single configurable confidence threshold since AP alone hides
the operating point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Annotation, Detection, iou

REPORT_VERSION = 1


@dataclass
class EvalResult:
    per_class_ap: dict[int, float]
    map50: float
    precision: float
    recall: float
    counts: dict[int, tuple[int, int, int]]  # class -> (tp, fp, fn) at conf_thresh
    conf_thresh: float
    iou_thresh: float

    def to_dict(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "map50": self.map50,
            "precision": self.precision,
            "recall": self.recall,
            "conf_thresh": self.conf_thresh,
            "iou_thresh": self.iou_thresh,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "counts": {str(k): list(v) for k, v in self.counts.items()},
        }


def match_detections(
    dets: Sequence[Detection], gts: Sequence[Annotation], iou_thresh: float = 0.5
) -> list[tuple[Detection, bool]]:
    """Greedy TP/FP flags, returned sorted by descending score."""
    order = sorted(dets, key=lambda d: -d.score)
    claimed = [False] * len(gts)
    out = []
    for det in order:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if claimed[j] or gt.class_id != det.class_id:
                continue
            v = iou(det.box, gt.box)
            if v >= iou_thresh and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            claimed[best_j] = True
            out.append((det, True))
        else:
            out.append((det, False))
    return out


def _rank_order(flags: Sequence[bool], scores: Sequence[float]) -> np.ndarray:
    # descending score; at equal score false positives rank first, so the
    # result is independent of image evaluation order (and pessimistic)
    return np.lexsort((np.asarray(flags, dtype=np.int64),
                       -np.asarray(scores, dtype=np.float64)))


def average_precision(flags: Sequence[bool], scores: Sequence[float], num_gt: int) -> float:
    """Area under the all-points interpolated PR curve."""
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0 or not flags:
        return 0.0
    order = _rank_order(flags, scores)
    tp = np.asarray(flags, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / (cum_tp + cum_fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate(
    per_image: Sequence[tuple[Sequence[Detection], Sequence[Annotation]]],
    num_classes: int,
    conf_thresh: float = 0.25,
    iou_thresh: float = 0.5,
) -> EvalResult:
    """Aggregate matching + AP over (detections, ground truths) pairs."""
    if not per_image:
        raise ValueError("empty evaluation set")
    flags: dict[int, list[bool]] = {c: [] for c in range(num_classes)}
    scores: dict[int, list[float]] = {c: [] for c in range(num_classes)}
    num_gt = {c: 0 for c in range(num_classes)}
    counts = {c: [0, 0, 0] for c in range(num_classes)}
    for dets, gts in per_image:
        for gt in gts:
            num_gt[gt.class_id] += 1
        for det, is_tp in match_detections(dets, gts, iou_thresh):
            flags[det.class_id].append(is_tp)
            scores[det.class_id].append(det.score)
            if det.score >= conf_thresh:
                counts[det.class_id][0 if is_tp else 1] += 1
    per_class_ap = {}
    for c in range(num_classes):
        counts[c][2] = num_gt[c] - counts[c][0]
        if num_gt[c] > 0:
            per_class_ap[c] = average_precision(flags[c], scores[c], num_gt[c])
    map50 = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    tp = sum(c[0] for c in counts.values())
    fp = sum(c[1] for c in counts.values())
    total_gt = sum(num_gt.values())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / total_gt if total_gt else 0.0
    return EvalResult(per_class_ap, map50, precision, recall,
                      {c: tuple(v) for c, v in counts.items()}, conf_thresh, iou_thresh)


def emit_report(
    result: EvalResult,
    out_dir: Path,
    plots: bool = False,
    pr_points: Optional[dict[int, tuple[list[float], list[float]]]] = None,
    loss_log: Optional[Path] = None,
) -> list[Path]:
    """Write report.json, plus PR and loss-curve images when plots=True."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    written.append(report_path)
    if not plots:
        return written

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if pr_points:
        fig, ax = plt.subplots(figsize=(5, 4))
        for cid, (rec, prec) in sorted(pr_points.items()):
            ax.plot(rec, prec, label=f"class {cid}")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        path = out_dir / "pr_curve.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    if loss_log is not None:
        records = [json.loads(line) for line in Path(loss_log).read_text().splitlines() if line]
        if records:
            skip = ("step", "epoch")
            components = [k for k in records[0] if k not in skip]
            steps = [r["step"] for r in records]
            for comp in components:
                fig, ax = plt.subplots(figsize=(5, 3))
                ax.plot(steps, [r[comp] for r in records])
                ax.set_xlabel("step")
                ax.set_ylabel(comp)
                fig.tight_layout()
                path = out_dir / f"loss_{comp}.png"
                fig.savefig(path)
                plt.close(fig)
                written.append(path)
    return written


def pr_curve_points(flags: Sequence[bool], scores: Sequence[float],
                    num_gt: int) -> tuple[list[float], list[float]]:
    """Raw (recall, precision) points for plotting."""
    if num_gt == 0 or not flags:
        return [], []
    order = _rank_order(flags, scores)
    tp = np.asarray(flags, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    return (cum_tp / num_gt).tolist(), (cum_tp / (cum_tp + cum_fp)).tolist()
