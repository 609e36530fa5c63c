"""Five-way split discipline: two small sensor splits for adapter work, three detection splits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from crossflow.errors import ConfigurationError, ValidationError

SPLIT_NAMES = ("sensor_sample", "sensor_val", "train", "val", "test")
PAPER_SPLIT_SIZES = {"sensor_sample": 100, "sensor_val": 50, "train": 800, "val": 200, "test": 911}
DESK_SPLIT_SIZES = {"sensor_sample": 100, "sensor_val": 50, "train": 200, "val": 50, "test": 200}


@dataclass(frozen=True)
class SplitSet:
    sensor_sample: tuple[str, ...]
    sensor_val: tuple[str, ...]
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        self.verify()

    def items(self):
        return [(name, getattr(self, name)) for name in SPLIT_NAMES]

    def sizes(self) -> dict[str, int]:
        return {name: len(ids) for name, ids in self.items()}

    def verify(self) -> None:
        seen: dict[str, str] = {}
        for name, ids in self.items():
            for sample_id in ids:
                if sample_id in seen:
                    raise ValidationError(f"id {sample_id!r} appears in both {seen[sample_id]} and {name}")
                seen[sample_id] = name

    def to_json(self) -> dict:
        return {name: list(ids) for name, ids in self.items()}

    @classmethod
    def from_json(cls, payload: Mapping) -> "SplitSet":
        unknown = set(payload) - set(SPLIT_NAMES)
        missing = set(SPLIT_NAMES) - set(payload)
        if unknown or missing:
            raise ValidationError(f"split file: unknown {sorted(unknown)}, missing {sorted(missing)}")
        return cls(*(tuple(payload[name]) for name in SPLIT_NAMES))


def _normalize_sizes(sizes) -> dict[str, int]:
    if isinstance(sizes, Mapping):
        unknown = set(sizes) - set(SPLIT_NAMES)
        if unknown:
            raise ConfigurationError(f"unknown split names {sorted(unknown)}")
        out = {name: int(sizes.get(name, 0)) for name in SPLIT_NAMES}
    else:
        sizes = list(sizes)
        if len(sizes) != len(SPLIT_NAMES):
            raise ConfigurationError(f"expected {len(SPLIT_NAMES)} split sizes, got {len(sizes)}")
        out = dict(zip(SPLIT_NAMES, (int(s) for s in sizes)))
    if any(v < 0 for v in out.values()):
        raise ConfigurationError(f"split sizes must be non-negative: {out}")
    return out


def make_splits(ids: Sequence[str], sizes=DESK_SPLIT_SIZES, seed: int = 0) -> SplitSet:
    """Seeded shuffle of ``ids`` cut into consecutive blocks in SPLIT_NAMES order.

    Input order does not matter: ids are sorted before shuffling.
    """
    sizes = _normalize_sizes(sizes)
    pool = sorted(ids)
    if len(set(pool)) != len(pool):
        raise ConfigurationError("duplicate ids")
    need = sum(sizes.values())
    if need > len(pool):
        raise ConfigurationError(f"splits need {need} ids but only {len(pool)} are available")
    order = np.random.default_rng(seed).permutation(len(pool))
    shuffled = [pool[i] for i in order]
    cuts, start = {}, 0
    for name in SPLIT_NAMES:
        cuts[name] = tuple(shuffled[start:start + sizes[name]])
        start += sizes[name]
    return SplitSet(**cuts)
