"""Write a toy world to disk in the five-split layout."""

from __future__ import annotations

import os
from pathlib import Path

from crossflow.datasets.splits import DESK_SPLIT_SIZES, SplitSet, make_splits
from crossflow.datasets.storage import read_json, write_json, write_split
from crossflow.datasets.toyworld import ToyWorldSpec, toy_world_generate

SPLITS_FILE = "splits.json"


def write_toy_world(root: str | os.PathLike, spec: ToyWorldSpec, sizes=DESK_SPLIT_SIZES, split_seed: int = 0) -> dict:
    """Render sum(sizes) samples, partition them and write every split.

    Returns {split name: manifest}; ``splits.json`` records the assignment.
    """
    root = Path(root)
    n = sum(sizes.values()) if isinstance(sizes, dict) else sum(sizes)
    samples = toy_world_generate(spec, n)
    by_id = {s.id: s for s in samples}
    splits = make_splits(list(by_id), sizes, split_seed)
    manifests = {}
    for name, ids in splits.items():
        extra = {"toy_world": {**spec.__dict__}, "split_seed": split_seed}
        manifests[name] = write_split(root, name, (by_id[i] for i in ids), extra)
    write_json(root / SPLITS_FILE, splits.to_json())
    return manifests


def read_splits(root: str | os.PathLike) -> SplitSet:
    return SplitSet.from_json(read_json(Path(root) / SPLITS_FILE))
