from crossflow.datasets.generate import read_splits, write_toy_world
from crossflow.datasets.splits import DESK_SPLIT_SIZES, PAPER_SPLIT_SIZES, SPLIT_NAMES, SplitSet, make_splits
from crossflow.datasets.storage import (
    content_hash,
    load_external_dataset,
    load_png,
    read_manifest,
    read_split,
    save_png,
    write_split,
)
from crossflow.datasets.synthetic import (
    REGIMES,
    SYNTH_PREFIX,
    DetectionSet,
    build_synthetic_detection_set,
    load_detection_set,
    merge_sets,
)
from crossflow.datasets.toyworld import PairedSample, ToyWorldSpec, render_sample, toy_world_generate

__all__ = [
    "DESK_SPLIT_SIZES",
    "PAPER_SPLIT_SIZES",
    "REGIMES",
    "SPLIT_NAMES",
    "SYNTH_PREFIX",
    "DetectionSet",
    "PairedSample",
    "SplitSet",
    "ToyWorldSpec",
    "build_synthetic_detection_set",
    "content_hash",
    "load_detection_set",
    "load_external_dataset",
    "load_png",
    "make_splits",
    "merge_sets",
    "read_manifest",
    "read_split",
    "read_splits",
    "render_sample",
    "save_png",
    "toy_world_generate",
    "write_split",
    "write_toy_world",
]
