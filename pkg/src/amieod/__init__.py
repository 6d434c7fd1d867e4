"""Multi-expert low-light image enhancement jointly trained with a small
object detector, with detection-guided losses and a learned expert router."""

from .core import Annotation, BBox, Detection, LossBreakdown, ciou, ciou_xyxy, iou, iou_xyxy
from .enhance import (
    CurveEnhancer,
    ExpertBundle,
    ParamPredictor,
    apply_filters,
    identity_params,
    map_param_ranges,
)
from .detector import DetectorConfig, SingleScaleDetector, decode, detection_loss, nms
from .dgrl import ExpertLossTable, dgrl_loss, select_best, stage1_loss
from .esm import ExpertSelector, RoutingDecision, assign_pseudo_label, dgce_loss, infer, route
from .datakit import DatasetSpec, Sample, SynthConfig, darken, letterbox, load_dataset, synth_generate
from .evalkit import EvalResult, average_precision, evaluate, match_detections
from .config import RunConfig, TrainConfig, load_config
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .pipeline import pretrain_piem, routing_report, train_stage1, train_stage2

__version__ = "0.1.0"
