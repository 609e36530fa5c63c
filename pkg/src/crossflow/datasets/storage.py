"""On-disk dataset layout.

    <root>/<split>/source/<id>.png   RGB, 8-bit
    <root>/<split>/target/<id>.png   grayscale, 8-bit (optional)
    <root>/<split>/labels/<id>.txt   normalized ``class cx cy w h`` lines
    <root>/<split>/manifest.json     {split, ids, counts, content_hash, ...}

Every file is written to a temp name and renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from crossflow.core.serialize import atomic_write_bytes, sha256_file
from crossflow.datasets.toyworld import PairedSample
from crossflow.detection.boxes import format_labels, read_label_file
from crossflow.errors import ValidationError

SOURCE_DIR, TARGET_DIR, LABEL_DIR = "source", "target", "labels"
MANIFEST = "manifest.json"


def encode_png(image: np.ndarray) -> bytes:
    """(C, H, W) float image in [0, 1] -> PNG bytes (C=3 RGB, C=1 grayscale)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValidationError(f"expected a (1|3, H, W) image, got shape {arr.shape}")
    pixels = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        img = Image.fromarray(pixels[0])
    else:
        img = Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_png(path: str | os.PathLike, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_png(image))


def load_png(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            arr = np.asarray(img)
    except OSError as exc:
        raise ValidationError(f"{path}: unreadable image ({exc})") from None
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr[..., :3].transpose(2, 0, 1)
    return arr.astype(np.float32) / 255.0


def write_json(path: str | os.PathLike, payload) -> None:
    atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_json(path: str | os.PathLike):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"{path}: missing") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def content_hash(split_dir: str | os.PathLike, ids: Sequence[str]) -> str:
    """sha256 over (id, per-file digests) of every sample file that exists."""
    split_dir = Path(split_dir)
    h = hashlib.sha256()
    for sample_id in ids:
        h.update(sample_id.encode("utf-8") + b"\0")
        for sub, ext in ((SOURCE_DIR, ".png"), (TARGET_DIR, ".png"), (LABEL_DIR, ".txt")):
            path = split_dir / sub / f"{sample_id}{ext}"
            h.update(f"{sub}:{sha256_file(path) if path.exists() else '-'}\n".encode("ascii"))
    return h.hexdigest()


def write_split(root: str | os.PathLike, split: str, samples: Iterable[PairedSample], extra: dict | None = None) -> dict:
    split_dir = Path(root) / split
    ids = []
    counts = {"images": 0, "targets": 0, "labels": 0, "boxes": 0}
    for s in samples:
        ids.append(s.id)
        save_png(split_dir / SOURCE_DIR / f"{s.id}.png", s.source)
        counts["images"] += 1
        if s.target is not None:
            save_png(split_dir / TARGET_DIR / f"{s.id}.png", s.target)
            counts["targets"] += 1
        if s.boxes is not None:
            h, w = s.source.shape[1:]
            atomic_write_bytes(split_dir / LABEL_DIR / f"{s.id}.txt", format_labels(s.boxes, w, h).encode("ascii"))
            counts["labels"] += 1
            counts["boxes"] += len(s.boxes)
    manifest = {"split": split, "ids": ids, "counts": counts, "content_hash": content_hash(split_dir, ids)}
    manifest.update(extra or {})
    write_json(split_dir / MANIFEST, manifest)
    return manifest


def read_manifest(split_dir: str | os.PathLike) -> dict:
    manifest = read_json(Path(split_dir) / MANIFEST)
    if not isinstance(manifest, dict) or not isinstance(manifest.get("ids"), list):
        raise ValidationError(f"{Path(split_dir) / MANIFEST}: no id list")
    return manifest


def ids_in_dir(directory: Path, ext: str) -> list[str]:
    return sorted(p.name[: -len(ext)] for p in directory.iterdir() if p.name.endswith(ext) and not p.name.startswith("."))


def read_split(split_dir: str | os.PathLike, targets: bool = True, labels: bool = True) -> list[PairedSample]:
    """Load a split; ids come from the manifest when present, else from ``source/``."""
    split_dir = Path(split_dir)
    if (split_dir / MANIFEST).exists():
        ids = read_manifest(split_dir)["ids"]
    elif (split_dir / SOURCE_DIR).is_dir():
        ids = ids_in_dir(split_dir / SOURCE_DIR, ".png")
    else:
        raise ValidationError(f"{split_dir}: no {MANIFEST} and no {SOURCE_DIR}/ directory")
    samples = []
    for sample_id in ids:
        src_path = split_dir / SOURCE_DIR / f"{sample_id}.png"
        if not src_path.exists():
            raise ValidationError(f"{src_path}: missing source image")
        source = load_png(src_path)
        target = None
        if targets and (split_dir / TARGET_DIR / f"{sample_id}.png").exists():
            target = load_png(split_dir / TARGET_DIR / f"{sample_id}.png")
        boxes = None
        label_path = split_dir / LABEL_DIR / f"{sample_id}.txt"
        if labels and label_path.exists():
            boxes = read_label_file(label_path, source.shape[2], source.shape[1])
        try:
            samples.append(PairedSample(sample_id, source, target, boxes))
        except ValueError as exc:
            raise ValidationError(f"{split_dir}: {exc}") from None
    return samples


def load_external_dataset(directory: str | os.PathLike) -> list[PairedSample]:
    """Labeled source-only corpus in the split layout (``source/`` + ``labels/``).

    Any ``target/`` directory is ignored and never opened.
    """
    directory = Path(directory)
    src_dir, label_dir = directory / SOURCE_DIR, directory / LABEL_DIR
    if not src_dir.is_dir():
        raise ValidationError(f"{src_dir}: expected a directory of source PNGs")
    if not label_dir.is_dir():
        raise ValidationError(f"{label_dir}: expected a directory of label files")
    ids = ids_in_dir(src_dir, ".png")
    if not ids:
        raise ValidationError(f"{src_dir}: no images")
    missing = [i for i in ids if not (label_dir / f"{i}.txt").exists()]
    if missing:
        raise ValidationError(f"{label_dir}: missing labels for {len(missing)} images: {missing[:10]}")
    out = []
    for sample_id in ids:
        source = load_png(src_dir / f"{sample_id}.png")
        boxes = read_label_file(label_dir / f"{sample_id}.txt", source.shape[2], source.shape[1])
        out.append(PairedSample(sample_id, source, None, boxes))
    return out
