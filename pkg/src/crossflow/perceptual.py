"""LPIPS-style perceptual distance over a frozen, seeded random conv backbone.

Each stage is conv3x3 (+bias) -> ReLU -> 2x2 average pool. Features are
unit-normalized along channels at every site, differenced, squared,
weighted per stage and averaged over space:

    d(x, y) = sum_l mean_hw || w_l * (phi_l(x) - phi_l(y)) ||^2

Images are (C, H, W) floats in [0, 1]; single-channel inputs are
replicated to three channels and everything is mapped to [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from crossflow.core.tensor import Tensor, avg_pool2d, conv2d, no_grad, relu
from crossflow.errors import ContractError, DimensionError

DEFAULT_SEED = 42
DEFAULT_WIDTHS = (16, 32, 64)
NORM_EPS = 1e-10


class FeatureExtractor:
    """Frozen random conv stages; parameters are a pure function of (seed, widths)."""

    def __init__(self, seed: int = DEFAULT_SEED, widths: Sequence[int] = DEFAULT_WIDTHS, weights: Sequence[float] | None = None):
        self.seed = seed
        self.widths = tuple(int(w) for w in widths)
        self.weights = tuple(float(w) for w in (weights if weights is not None else [1.0] * len(self.widths)))
        if len(self.weights) != len(self.widths) or any(w < 0 for w in self.weights):
            raise ContractError("need one non-negative weight per stage")
        rng = np.random.default_rng(seed)
        self.stages: list[tuple[np.ndarray, np.ndarray]] = []
        c_in = 3
        for c_out in self.widths:
            k = rng.normal(0.0, math.sqrt(2.0 / (c_in * 9)), size=(c_out, c_in, 3, 3)).astype(np.float32)
            b = rng.normal(0.0, 0.1, size=c_out).astype(np.float32)
            self.stages.append((k, b))
            c_in = c_out

    @staticmethod
    def prepare(images: np.ndarray) -> np.ndarray:
        """(B, C, H, W) in [0, 1] -> (B, 3, H, W) in [-1, 1]."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1] not in (1, 3):
            raise DimensionError(f"expected (B, 1|3, H, W) images, got {images.shape}")
        if images.shape[1] == 1:
            images = np.repeat(images, 3, axis=1)
        return images * 2.0 - 1.0

    def features(self, images: np.ndarray) -> list[np.ndarray]:
        """Raw stage activations for a prepared batch."""
        h = Tensor(images)
        out = []
        with no_grad():
            for k, b in self.stages:
                h = avg_pool2d(relu(conv2d(h, Tensor(k), Tensor(b), pad=1)), 2)
                out.append(h.data)
        return out


def _unit_normalize(f: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(f * f, axis=1, keepdims=True, dtype=np.float64))
    return f / (norm + NORM_EPS)


def lpips_batch(xs: np.ndarray, ys: np.ndarray, fe: FeatureExtractor) -> np.ndarray:
    """Per-pair distances for two aligned batches (B, C, H, W)."""
    xs, ys = np.asarray(xs), np.asarray(ys)
    if xs.shape != ys.shape:
        raise DimensionError(f"image shapes differ: {xs.shape} vs {ys.shape}")
    factor = 1 << len(fe.stages)
    if xs.ndim != 4 or xs.shape[-2] % factor or xs.shape[-1] % factor:
        raise DimensionError(f"expected (B, C, H, W) with H, W divisible by {factor}, got {xs.shape}")
    fx = fe.features(fe.prepare(xs))
    fy = fe.features(fe.prepare(ys))
    total = np.zeros(len(xs), dtype=np.float64)
    for w, a, b in zip(fe.weights, fx, fy):
        diff = w * (_unit_normalize(a) - _unit_normalize(b))
        total += np.sum(diff * diff, axis=1).mean(axis=(1, 2))
    return total


def lpips(x: np.ndarray, y: np.ndarray, fe: FeatureExtractor | None = None) -> float:
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    return float(lpips_batch(x[None], y[None], fe or FeatureExtractor())[0])


@dataclass
class LpipsReport:
    values: list[float]
    ids: list[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        # sample std, 0 for a single pair
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else 0.0

    def to_json(self) -> dict:
        ids = self.ids or [str(i) for i in range(self.count)]
        return {
            "mean": self.mean,
            "std": self.std,
            "count": self.count,
            "per_image": [{"id": i, "value": v} for i, v in zip(ids, self.values)],
        }


def mean_lpips(pairs, fe: FeatureExtractor | None = None, ids: Sequence[str] | None = None, batch_size: int = 64) -> LpipsReport:
    """Aggregate distances over (synthetic, real) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("mean_lpips needs at least one pair")
    fe = fe or FeatureExtractor()
    values: list[float] = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        xs = np.stack([np.asarray(p[0], dtype=np.float32) for p in chunk])
        ys = np.stack([np.asarray(p[1], dtype=np.float32) for p in chunk])
        values.extend(float(v) for v in lpips_batch(xs, ys, fe))
    return LpipsReport(values, list(ids) if ids is not None else [])
