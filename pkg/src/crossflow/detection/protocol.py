"""Repeated train/test runs summarized as mean and sample std."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from crossflow.errors import ContractError

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "MeanStd":
        arr = np.asarray(values, dtype=np.float64)
        return cls(float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0)

    def __str__(self) -> str:
        return f"{self.mean:.2f} ± {self.std:.2f}"


@dataclass
class DetectionMetrics:
    map50: MeanStd
    map5095: MeanStd
    per_class: dict[str, MeanStd] = field(default_factory=dict)
    runs: int = 0
    raw: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "map50": {"mean": self.map50.mean, "std": self.map50.std, "text": str(self.map50)},
            "map5095": {"mean": self.map5095.mean, "std": self.map5095.std, "text": str(self.map5095)},
            "per_class": {k: {"mean": v.mean, "std": v.std} for k, v in sorted(self.per_class.items())},
            "runs": self.runs,
            "raw": self.raw,
        }


def repeat_eval(run: Callable[[int], Mapping], seeds: Sequence[int] = DEFAULT_SEEDS) -> DetectionMetrics:
    """Call ``run(seed)`` once per seed and aggregate its metrics.

    ``run`` returns a mapping with ``map50`` and ``map5095`` and optionally
    ``per_class`` ({class: ap50}).
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ContractError(f"repeat_eval needs at least 2 seeds, got {len(seeds)}")
    results = [dict(run(s)) for s in seeds]
    tables = [{str(k): float(v) for k, v in r.get("per_class", {}).items()} for r in results]
    classes = sorted({k for t in tables for k in t})
    per_class = {c: MeanStd.of([t.get(c, 0.0) for t in tables]) for c in classes}
    return DetectionMetrics(
        MeanStd.of([r["map50"] for r in results]),
        MeanStd.of([r["map5095"] for r in results]),
        per_class,
        len(results),
        [{"seed": s, "map50": r["map50"], "map5095": r["map5095"]} for s, r in zip(seeds, results)],
    )
