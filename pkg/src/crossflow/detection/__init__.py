from crossflow.detection.boxes import Box, format_labels, iou, parse_labels, read_label_file, write_label_file
from crossflow.detection.detector import (
    DetectorConfig,
    DetectorTrainConfig,
    ToyDetector,
    decode,
    detection_loss,
    encode_targets,
    nms,
    predict,
    train_toy_detector,
)
from crossflow.detection.metrics import MapResult, average_precision, evaluate_map, match_detections
from crossflow.detection.protocol import DetectionMetrics, MeanStd, repeat_eval

__all__ = [
    "Box",
    "DetectionMetrics",
    "DetectorConfig",
    "DetectorTrainConfig",
    "MapResult",
    "MeanStd",
    "ToyDetector",
    "average_precision",
    "decode",
    "detection_loss",
    "encode_targets",
    "evaluate_map",
    "format_labels",
    "iou",
    "match_detections",
    "nms",
    "parse_labels",
    "predict",
    "read_label_file",
    "repeat_eval",
    "train_toy_detector",
    "write_label_file",
]
