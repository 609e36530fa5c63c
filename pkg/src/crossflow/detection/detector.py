"""A small grid-cell detector used as the downstream probe.

Backbone: four 3x3 convs (two stride-2) take a 32x32 single-channel image
to an 8x8 grid; a 1x1 head emits per cell [objectness, class logits...,
tx, ty, tw, th]. A box is decoded as center ((col + sig(tx)) / S,
(row + sig(ty)) / S) and size (sig(tw), sig(th)) in image fractions.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from crossflow.core import serialize
from crossflow.core.optim import Adam
from crossflow.core.tensor import Tensor, conv2d, log_softmax, no_grad, relu, sigmoid, softplus
from crossflow.detection.boxes import Box, iou
from crossflow.errors import ConfigurationError, DimensionError, TrainingError, ValidationError


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 32
    in_channels: int = 1
    num_classes: int = 2
    width: int = 32
    box_weight: float = 5.0
    noobj_weight: float = 0.5

    @property
    def grid(self) -> int:
        return self.image_size // 4

    @property
    def outputs(self) -> int:
        return 1 + self.num_classes + 4


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 2e-3


class ToyDetector:
    def __init__(self, config: DetectorConfig = DetectorConfig(), seed: int = 0):
        if config.image_size % 4:
            raise ConfigurationError("detector image size must be divisible by 4")
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        w = config.width
        shapes = {
            "c1.w": (w // 2, config.in_channels, 3, 3),
            "c2.w": (w, w // 2, 3, 3),
            "c3.w": (w, w, 3, 3),
            "c4.w": (w, w, 3, 3),
            "head.w": (config.outputs, w, 1, 1),
        }
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            fan_in = shape[1] * shape[2] * shape[3]
            scale = math.sqrt(2.0 / fan_in) if name != "head.w" else 0.01
            self.params[name] = Tensor(rng.normal(0.0, scale, size=shape).astype(np.float32), requires_grad=True, name=name)
            bias = np.zeros(shape[0], dtype=np.float32)
            if name == "head.w":
                bias[0] = -2.0  # most cells are empty
            self.params[name[:-2] + ".b"] = Tensor(bias, requires_grad=True, name=name[:-2] + ".b")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, images) -> Tensor:
        """(B, C, H, W) in [0, 1] -> raw head output (B, S, S, outputs)."""
        P = self.params
        x = images if isinstance(images, Tensor) else Tensor(images)
        expected = (self.config.in_channels, self.config.image_size, self.config.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"detector expects (B, {expected}), got {x.shape}")
        x = x * 2.0 - 1.0
        x = relu(conv2d(x, P["c1.w"], P["c1.b"], pad=1))
        x = relu(conv2d(x, P["c2.w"], P["c2.b"], stride=2, pad=1))
        x = relu(conv2d(x, P["c3.w"], P["c3.b"], stride=2, pad=1))
        x = relu(conv2d(x, P["c4.w"], P["c4.b"], pad=1))
        out = conv2d(x, P["head.w"], P["head.b"])
        return out.transpose(0, 2, 3, 1)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def state_hash(self) -> str:
        return hashlib.sha256(serialize.dumps(self.state_dict())).hexdigest()

    def save(self, path: str | os.PathLike) -> None:
        header = json.dumps({"config": asdict(self.config), "seed": self.seed}, sort_keys=True).encode()
        serialize.atomic_write_bytes(path, len(header).to_bytes(4, "little") + header + serialize.dumps(self.state_dict()))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ToyDetector":
        data = open(path, "rb").read()
        try:
            n = int.from_bytes(data[:4], "little")
            header = json.loads(data[4:4 + n])
        except (ValueError, UnicodeDecodeError) as exc:
            raise ValidationError(f"{path}: bad detector header ({exc})") from None
        model = cls(DetectorConfig(**header["config"]), header["seed"])
        for name, arr in serialize.loads(data[4 + n:]).items():
            if name not in model.params or model.params[name].shape != arr.shape:
                raise ValidationError(f"{path}: unexpected tensor {name} {arr.shape}")
            model.params[name].data[...] = arr
        return model


# -- targets and loss ----------------------------------------------------

def encode_targets(boxes_per_image: Sequence[Sequence[Box]], config: DetectorConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid targets: objectness (B,S,S), class ids (B,S,S), box params (B,S,S,4) in (0,1).

    An object is owned by the cell containing its center; on collision the
    larger box keeps the cell.
    """
    S, size = config.grid, config.image_size
    n = len(boxes_per_image)
    obj = np.zeros((n, S, S), dtype=np.float32)
    cls = np.zeros((n, S, S), dtype=np.int64)
    box = np.full((n, S, S, 4), 0.5, dtype=np.float32)
    for b, boxes in enumerate(boxes_per_image):
        for bx in sorted(boxes, key=lambda x: x.area):
            cx = (bx.x_min + bx.x_max) / 2 / size
            cy = (bx.y_min + bx.y_max) / 2 / size
            col = min(int(cx * S), S - 1)
            row = min(int(cy * S), S - 1)
            obj[b, row, col] = 1.0
            cls[b, row, col] = bx.class_id
            box[b, row, col] = (
                np.clip(cx * S - col, 1e-3, 1 - 1e-3),
                np.clip(cy * S - row, 1e-3, 1 - 1e-3),
                np.clip((bx.x_max - bx.x_min) / size, 1e-3, 1 - 1e-3),
                np.clip((bx.y_max - bx.y_min) / size, 1e-3, 1 - 1e-3),
            )
    return obj, cls, box


def detection_loss(raw: Tensor, obj: np.ndarray, cls: np.ndarray, box: np.ndarray, config: DetectorConfig) -> Tensor:
    """Objectness BCE + box MSE (positive cells) + class CE (positive cells), batch-averaged."""
    bsz = raw.shape[0]
    logit = raw[..., 0]
    pos = Tensor(obj)
    neg = Tensor(config.noobj_weight * (1.0 - obj))
    # BCE(l, y) = y * softplus(-l) + (1 - y) * softplus(l)
    bce = (pos * softplus(-logit) + neg * softplus(logit)).sum()
    n_cls = config.num_classes
    onehot = np.zeros(cls.shape + (n_cls,), dtype=np.float32)
    np.put_along_axis(onehot, cls[..., None], 1.0, axis=-1)
    ce = -(Tensor(onehot * obj[..., None]) * log_softmax(raw[..., 1:1 + n_cls], axis=-1)).sum()
    pred_box = sigmoid(raw[..., 1 + n_cls:])
    diff = (pred_box - Tensor(box)) * Tensor(obj[..., None])
    reg = (diff * diff).sum()
    return (bce + ce + config.box_weight * reg) * (1.0 / bsz)


# -- decoding -------------------------------------------------------------

def nms(boxes: list[Box], thresh: float = 0.5) -> list[Box]:
    """Class-wise greedy suppression; input order breaks score ties."""
    order = sorted(range(len(boxes)), key=lambda i: -float(boxes[i].score or 0.0))
    kept: list[Box] = []
    for i in order:
        b = boxes[i]
        if all(k.class_id != b.class_id or iou(k, b) <= thresh for k in kept):
            kept.append(b)
    return kept


def decode(raw: np.ndarray, config: DetectorConfig, score_thresh: float = 0.05, max_det: int = 20) -> list[list[Box]]:
    S, size, n_cls = config.grid, config.image_size, config.num_classes
    raw = np.asarray(raw, dtype=np.float64)
    obj = 1.0 / (1.0 + np.exp(-raw[..., 0]))
    logits = raw[..., 1:1 + n_cls]
    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    geom = 1.0 / (1.0 + np.exp(-raw[..., 1 + n_cls:]))
    out = []
    for b in range(raw.shape[0]):
        boxes = []
        for row in range(S):
            for col in range(S):
                c = int(np.argmax(probs[b, row, col]))
                score = float(obj[b, row, col] * probs[b, row, col, c])
                if score < score_thresh:
                    continue
                tx, ty, tw, th = geom[b, row, col]
                cx, cy = (col + tx) / S * size, (row + ty) / S * size
                w, h = tw * size, th * size
                bx = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, c, score).clamp(size, size)
                if bx.valid:
                    boxes.append(bx)
        out.append(nms(boxes)[:max_det])
    return out


def predict(model: ToyDetector, images: np.ndarray, batch_size: int = 128) -> list[list[Box]]:
    out: list[list[Box]] = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.extend(decode(model.forward(images[start:start + batch_size]).data, model.config))
    return out


# -- training ---------------------------------------------------------------

def train_toy_detector(
    images: np.ndarray,
    boxes: Sequence[Sequence[Box]],
    train: DetectorTrainConfig = DetectorTrainConfig(),
    seed: int = 0,
    config: DetectorConfig | None = None,
) -> ToyDetector:
    """Mini-batch Adam on grid targets; deterministic given ``seed``."""
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0 or len(images) != len(boxes):
        raise ConfigurationError(f"need a nonempty labeled set, got {len(images)} images and {len(boxes)} label lists")
    if config is None:
        config = DetectorConfig(image_size=images.shape[-1], in_channels=images.shape[1])
    model = ToyDetector(config, seed)
    obj, cls, box = encode_targets(boxes, config)
    opt = Adam(model.parameters(), lr=train.learning_rate)
    rng = np.random.default_rng([seed, 1])
    step = 0
    for _epoch in range(train.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), train.batch_size):
            idx = order[start:start + train.batch_size]
            loss = detection_loss(model.forward(images[idx]), obj[idx], cls[idx], box[idx], config)
            if not math.isfinite(float(loss.data)):
                raise TrainingError("detector loss is not finite", step)
            loss.backward()
            opt.step()
            step += 1
    return model
