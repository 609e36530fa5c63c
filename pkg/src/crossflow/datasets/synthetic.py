"""Synthetic detection sets: translated images paired with the untouched source labels."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from crossflow.core.serialize import atomic_write_bytes
from crossflow.datasets.storage import (
    LABEL_DIR,
    MANIFEST,
    SOURCE_DIR,
    TARGET_DIR,
    content_hash,
    ids_in_dir,
    load_png,
    read_manifest,
    save_png,
    write_json,
)
from crossflow.detection.boxes import Box, read_label_file
from crossflow.errors import ValidationError
from crossflow.seeds import derive_seed

SYNTH_PREFIX = "synth_"
REGIMES = ("real_only", "synthetic_only", "real_synthetic")


def _source_ids(source_dir: Path) -> list[str]:
    if (source_dir / MANIFEST).exists():
        return list(read_manifest(source_dir)["ids"])
    if not (source_dir / SOURCE_DIR).is_dir():
        raise ValidationError(f"{source_dir}: no {SOURCE_DIR}/ directory")
    return ids_in_dir(source_dir / SOURCE_DIR, ".png")


def build_synthetic_detection_set(
    translator: Callable[[np.ndarray, Sequence[int]], np.ndarray],
    source_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    adapter_id: str,
    seed: int,
    prefix: str = SYNTH_PREFIX,
    batch_size: int = 100,
) -> dict:
    """Translate every source image of a labeled split and copy its label file byte for byte.

    Outputs land in ``out_dir/target`` and ``out_dir/labels`` under
    ``prefix + source id``. Image ``id`` starts from noise seeded by
    derive_seed(seed, id), so a set does not depend on batching.
    """
    source_dir, out_dir = Path(source_dir), Path(out_dir)
    ids = _source_ids(source_dir)
    if not ids:
        raise ValidationError(f"{source_dir}: no source images")
    missing = [i for i in ids if not (source_dir / LABEL_DIR / f"{i}.txt").is_file()]
    if missing:
        raise ValidationError(f"{source_dir}: missing label files for {len(missing)} ids: {missing}")

    records = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        sources = np.stack([load_png(source_dir / SOURCE_DIR / f"{i}.png") for i in chunk])
        seeds = [derive_seed(seed, "synth", i) for i in chunk]
        outputs = translator(sources, seeds)
        if outputs.shape[0] != len(chunk) or outputs.shape[2:] != sources.shape[2:]:
            raise ValidationError(f"translator returned {outputs.shape} for sources {sources.shape}")
        for sample_id, image, image_seed in zip(chunk, outputs, seeds):
            new_id = prefix + sample_id
            save_png(out_dir / TARGET_DIR / f"{new_id}.png", image)
            label_bytes = (source_dir / LABEL_DIR / f"{sample_id}.txt").read_bytes()
            atomic_write_bytes(out_dir / LABEL_DIR / f"{new_id}.txt", label_bytes)
            records.append({"id": new_id, "source_id": sample_id, "adapter_id": adapter_id, "seed": image_seed})

    new_ids = [r["id"] for r in records]
    manifest = {
        "split": out_dir.name,
        "ids": new_ids,
        "counts": {"images": len(new_ids), "labels": len(new_ids)},
        "content_hash": content_hash(out_dir, new_ids),
        "adapter_id": adapter_id,
        "seed": seed,
        "source_split": str(source_dir),
        "records": records,
    }
    write_json(out_dir / MANIFEST, manifest)
    return manifest


@dataclass
class DetectionSet:
    """Images (N, C, H, W) in [0, 1] with their pixel-space boxes."""

    ids: list[str]
    images: np.ndarray
    boxes: list[list[Box]]
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.ids) == len(self.images) == len(self.boxes)):
            raise ValidationError(f"detection set sizes differ: {len(self.ids)} ids, {len(self.images)} images, {len(self.boxes)} box lists")

    def __len__(self) -> int:
        return len(self.ids)


def load_detection_set(split_dir: str | os.PathLike, image_dir: str = TARGET_DIR) -> DetectionSet:
    """Images from ``image_dir`` (target modality by default) and labels of one split."""
    split_dir = Path(split_dir)
    ids = _source_ids(split_dir) if (split_dir / MANIFEST).exists() else ids_in_dir(split_dir / image_dir, ".png")
    images, boxes = [], []
    for sample_id in ids:
        img_path = split_dir / image_dir / f"{sample_id}.png"
        label_path = split_dir / LABEL_DIR / f"{sample_id}.txt"
        if not img_path.exists() or not label_path.exists():
            raise ValidationError(f"{split_dir}: sample {sample_id!r} lacks {image_dir} image or label file")
        img = load_png(img_path)
        images.append(img)
        boxes.append(read_label_file(label_path, img.shape[2], img.shape[1]))
    if not images:
        raise ValidationError(f"{split_dir}: empty detection set")
    return DetectionSet(list(ids), np.stack(images), boxes)


def merge_sets(real: DetectionSet, synthetic: DetectionSet, regime: str) -> DetectionSet:
    if regime not in REGIMES:
        raise ValidationError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    clash = sorted(set(real.ids) & set(synthetic.ids))
    if clash:
        raise ValidationError(f"id collision between real and synthetic sets: {clash[:10]}")
    parts = {"real_only": (real,), "synthetic_only": (synthetic,), "real_synthetic": (real, synthetic)}[regime]
    n_real = len(real) if regime != "synthetic_only" else 0
    n_synth = len(synthetic) if regime != "real_only" else 0
    counts = {"real": n_real, "synthetic": n_synth, "total": n_real + n_synth}
    if len(parts) == 1:
        p = parts[0]
        return DetectionSet(list(p.ids), p.images, list(p.boxes), counts)
    if real.images.shape[1:] != synthetic.images.shape[1:]:
        raise ValidationError(f"image shapes differ: {real.images.shape[1:]} vs {synthetic.images.shape[1:]}")
    return DetectionSet(
        real.ids + synthetic.ids,
        np.concatenate([real.images, synthetic.images]),
        real.boxes + synthetic.boxes,
        counts,
    )
