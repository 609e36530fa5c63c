"""Procedural cross-spectral toy world.

Each sample is a colored-shape RGB scene plus a pixel-aligned rendering of
the same geometry in a target modality:

* ``ir_like``: per-class "temperature" intensities over a background whose
  warmth follows its visible luminance, Gaussian blur (sigma 1) and
  additive sensor noise. Classes: warm-disc, cool-rect.
* ``sar_like``: a reflectivity map with multiplicative unit-mean gamma
  speckle, then log compression. Classes: bridge-bar, harbor-arc.

Each class draws its RGB color from its own hue band (warm classes reddish,
cool ones bluish) over a low-saturation background, so visible color
carries a noisy cue to the target-modality intensity. Generation of sample ``i`` depends only on
(spec, i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import colorsys

import numpy as np
from scipy import ndimage

from crossflow.detection.boxes import Box
from crossflow.errors import ConfigurationError

MODALITY_CLASSES = {
    "ir_like": ("warm-disc", "cool-rect"),
    "sar_like": ("bridge-bar", "harbor-arc"),
}


@dataclass(frozen=True)
class ToyWorldSpec:
    image_size: int = 32
    modality: str = "ir_like"
    min_objects: int = 1
    max_objects: int = 3
    seed: int = 0
    id_prefix: str = "toy"

    def __post_init__(self):
        if self.modality not in MODALITY_CLASSES:
            raise ConfigurationError(f"unknown modality {self.modality!r}; expected one of {sorted(MODALITY_CLASSES)}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigurationError(f"bad object range [{self.min_objects}, {self.max_objects}]")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be >= 16")

    @property
    def classes(self) -> tuple[str, ...]:
        return MODALITY_CLASSES[self.modality]


@dataclass
class PairedSample:
    id: str
    source: np.ndarray  # (3, H, W) in [0, 1]
    target: np.ndarray | None = None  # (1, H, W) in [0, 1]
    boxes: list[Box] | None = field(default=None)

    def __post_init__(self):
        if self.target is not None and self.target.shape[1:] != self.source.shape[1:]:
            raise ConfigurationError(
                f"sample {self.id}: source {self.source.shape} and target {self.target.shape} are not pixel-aligned"
            )


def _quantize(x: np.ndarray) -> np.ndarray:
    # match 8-bit PNG storage exactly
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _smooth_field(rng, size: int, coarse: int = 4) -> np.ndarray:
    low = rng.uniform(0.0, 1.0, size=(coarse, coarse))
    return ndimage.zoom(low, size / coarse, order=1, mode="nearest")[:size, :size]


def _shape_mask(rng, cls: int, modality: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if modality == "ir_like":
        if cls == 0:
            r = rng.uniform(3.0, 6.0)
            cx, cy = rng.uniform(r + 1, size - r - 1, size=2)
            return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        w, h = rng.integers(5, 12, size=2)
        x0 = rng.integers(1, size - w - 1)
        y0 = rng.integers(1, size - h - 1)
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    if cls == 0:
        length, thick = int(rng.integers(10, 19)), int(rng.integers(2, 4))
        w, h = (length, thick) if rng.uniform() < 0.5 else (thick, length)
        x0 = rng.integers(1, size - w - 1)
        y0 = rng.integers(1, size - h - 1)
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    r = rng.uniform(5.0, 8.0)
    cx, cy = rng.uniform(r + 1, size - r - 1, size=2)
    start = rng.uniform(0, 2 * np.pi)
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    angle = (np.arctan2(yy - cy, xx - cx) - start) % (2 * np.pi)
    return (np.abs(dist - r) <= 1.1) & (angle <= np.pi)


def _mask_box(mask: np.ndarray, cls: int) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1), cls)


def _place_objects(rng, spec: ToyWorldSpec):
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    occupied = np.zeros((spec.image_size, spec.image_size), dtype=bool)
    objects = []
    for _ in range(count):
        for _attempt in range(50):
            cls = int(rng.integers(0, len(spec.classes)))
            mask = _shape_mask(rng, cls, spec.modality, spec.image_size)
            if not mask.any():
                continue
            grown = ndimage.binary_dilation(mask, iterations=1)
            if not (grown & occupied).any():
                occupied |= grown
                objects.append((cls, mask))
                break
    return objects


# (hue center, half width) per class index; hues in [0, 1)
_CLASS_HUES = ((0.02, 0.07), (0.60, 0.07))


def _object_color(rng, cls: int) -> np.ndarray:
    center, width = _CLASS_HUES[cls]
    hue = (center + rng.uniform(-width, width)) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.55, 1.0), rng.uniform(0.55, 1.0)))


def _luminance(rgb: np.ndarray) -> np.ndarray:
    return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]


def render_sample(spec: ToyWorldSpec, index: int) -> PairedSample:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    base_color = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.35), rng.uniform(0.35, 0.7)))
    texture = _smooth_field(rng, size)
    rgb = base_color[:, None, None] * (0.7 + 0.6 * texture)[None]
    rgb = rgb + rng.normal(0.0, 0.03, size=rgb.shape)

    objects = _place_objects(rng, spec)
    for cls, mask in objects:
        color = _object_color(rng, cls)
        shade = 0.85 + 0.15 * rng.uniform(size=(size, size))
        for ch in range(3):
            rgb[ch][mask] = (color[ch] * shade)[mask]
    source = _quantize(rgb)

    if spec.modality == "ir_like":
        lum = _luminance(source)
        bg_lum = ndimage.uniform_filter(lum, size=5)
        ir = 0.3 + 0.35 * bg_lum
        for cls, mask in objects:
            temp = (0.9 if cls == 0 else 0.08) + rng.uniform(-0.04, 0.04)
            ir[mask] = temp
        ir = ndimage.gaussian_filter(ir, sigma=1.0, mode="nearest")
        target = ir + rng.normal(0.0, 0.02, size=ir.shape)
    else:
        refl = 0.04 + 0.08 * texture
        for cls, mask in objects:
            refl[mask] = 1.0 if cls == 0 else 0.45
        looks = 4.0
        speckle = rng.gamma(looks, 1.0 / looks, size=refl.shape)
        target = np.log1p(50.0 * refl * speckle) / np.log1p(50.0)

    boxes = [_mask_box(mask, cls) for cls, mask in objects]
    return PairedSample(f"{spec.id_prefix}_{index:05d}", source, _quantize(target)[None], boxes)


def toy_world_generate(spec: ToyWorldSpec, n: int, start: int = 0) -> list[PairedSample]:
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    return [render_sample(spec, i) for i in range(start, start + n)]
