"""Two-stream mitosis detection for high-power-field histology images.

Pipeline: frames are tiled and upscaled, a U-net produces per-pixel
mitosis probability maps, and a two-stream region-based detector fuses
RGB and segmentation features bilinearly to classify proposals. Scoring
follows the contest rule: a detection counts when its centroid lies
within 32 native pixels of an unmatched ground-truth centroid.
"""

from . import config, data, detector, evaluation, geometry, pipeline, unet
from .config import RunConfig, load_config
from .data import (HpfFrame, MitosisAnnotation, SplitSpec, TileSample,
                   generate_synthetic_dataset, tile_frame,
                   tile_frame_with_annotations)
from .detector import (Detection, DetectorConfig, TwoStreamDetector,
                       load_detector, save_detector, train_detector)
from .evaluation import (EvalReport, aggregate, compare_to_published,
                         evaluate_frames, f_measure, match_detections,
                         precision, recall)
from .geometry import (assign_anchor_labels, decode_boxes, encode_boxes,
                       generate_anchors, iou, iou_matrix, nms)
from .unet import UNet, UnetConfig, load_unet, predict_mask, save_unet, train_unet

__version__ = "0.1.0"

__all__ = [
    "config", "data", "detector", "evaluation", "geometry", "pipeline",
    "unet",
    "RunConfig", "load_config",
    "HpfFrame", "MitosisAnnotation", "SplitSpec", "TileSample",
    "generate_synthetic_dataset", "tile_frame", "tile_frame_with_annotations",
    "Detection", "DetectorConfig", "TwoStreamDetector", "load_detector",
    "save_detector", "train_detector",
    "EvalReport", "aggregate", "compare_to_published", "evaluate_frames",
    "f_measure", "match_detections", "precision", "recall",
    "assign_anchor_labels", "decode_boxes", "encode_boxes",
    "generate_anchors", "iou", "iou_matrix", "nms",
    "UNet", "UnetConfig", "load_unet", "predict_mask", "save_unet",
    "train_unet",
    "__version__",
]
