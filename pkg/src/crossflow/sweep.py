"""LoRA hyperparameter grid, resumable sweep, min-LPIPS selection and the LPIPS/mAP study.

The results file is JSON lines, one record per config, always in grid
order. Records are appended by the parent process only, each as a single
flushed and fsynced write; a resumed sweep drops a torn trailing line,
checks every kept record against the grid, and continues after it.
Nothing in a record depends on wall-clock time or the output directory, so
a resumed file is byte-identical to an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from crossflow.core.serialize import atomic_write_bytes
from crossflow.errors import ConfigurationError, CrossflowError, SelectionError, SweepError, ValidationError
from crossflow.flowmatch.model import FlowModel
from crossflow.flowmatch.sample import DEFAULT_STEPS, translate_batch
from crossflow.flowmatch.train import TrainHyper, train_lora
from crossflow.lora import AttachPlan, save_adapters
from crossflow.perceptual import FeatureExtractor, mean_lpips
from crossflow.seeds import derive_seed
from crossflow.stats import CorrelationReport

LEARNING_RATES = (1e-4, 5e-4)
RANKS = (16, 32)
SHORT_STEPS = (1000, 3000, 6000)
LONG_STEPS = (10000, 30000, 40000)
LONG_LR, LONG_RANK = 5e-4, 16
PROFILE_SCALES = {"paper": 1.0, "desk": 0.01}
RESULTS_FILE = "sweep.jsonl"


@dataclass(frozen=True)
class LoraConfig:
    index: int
    learning_rate: float
    rank: int
    steps: int

    @property
    def alpha(self) -> float:
        return float(self.rank)

    @property
    def key(self) -> str:
        return f"c{self.index:02d}_s{self.steps}_lr{self.learning_rate:.0e}_r{self.rank}"

    def to_json(self) -> dict:
        return {"index": self.index, "learning_rate": self.learning_rate, "rank": self.rank, "alpha": self.alpha, "steps": self.steps}

    @classmethod
    def from_json(cls, payload: Mapping) -> "LoraConfig":
        return cls(int(payload["index"]), float(payload["learning_rate"]), int(payload["rank"]), int(payload["steps"]))


def profile_scale(profile: str | float) -> float:
    if isinstance(profile, str):
        if profile not in PROFILE_SCALES:
            raise ConfigurationError(f"unknown profile {profile!r}; expected one of {sorted(PROFILE_SCALES)}")
        return PROFILE_SCALES[profile]
    if not 0 < float(profile) <= 1:
        raise ConfigurationError(f"step scale must be in (0, 1], got {profile}")
    return float(profile)


def grid(profile: str | float = "paper") -> list[LoraConfig]:
    """The 12 (lr x rank x short steps) configs, then 3 long runs at lr 5e-4, r 16."""
    scale = profile_scale(profile)

    def scaled(steps):
        return max(1, int(round(steps * scale)))

    points = [(lr, r, s) for s in SHORT_STEPS for lr in LEARNING_RATES for r in RANKS]
    points += [(LONG_LR, LONG_RANK, s) for s in LONG_STEPS]
    return [LoraConfig(i, lr, r, scaled(s)) for i, (lr, r, s) in enumerate(points)]


# -- records ------------------------------------------------------------------

@dataclass
class SweepRecord:
    config: LoraConfig
    status: str
    lpips_mean: float | None = None
    lpips_std: float | None = None
    adapter_path: str | None = None
    loss_path: str | None = None
    per_image: list[float] | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> dict:
        payload = {
            "config": self.config.to_json(),
            "lpips_mean": self.lpips_mean,
            "lpips_std": self.lpips_std,
            "adapter_path": self.adapter_path,
            "loss_path": self.loss_path,
            "status": self.status,
            "per_image": self.per_image,
        }
        if self.error is not None:
            payload["error"] = self.error
        return payload

    @classmethod
    def from_json(cls, payload: Mapping) -> "SweepRecord":
        return cls(
            LoraConfig.from_json(payload["config"]),
            payload["status"],
            payload.get("lpips_mean"),
            payload.get("lpips_std"),
            payload.get("adapter_path"),
            payload.get("loss_path"),
            payload.get("per_image"),
            payload.get("error"),
        )


@dataclass
class SweepResult:
    records: list[SweepRecord]
    base_hash: str | None = None
    out_dir: str | None = None

    @property
    def best(self) -> LoraConfig:
        return select_best(self)

    def record_for(self, config: LoraConfig) -> SweepRecord:
        for r in self.records:
            if r.config == config:
                return r
        raise ValidationError(f"no record for {config.key}")


def _line(record: SweepRecord) -> str:
    return json.dumps(record.to_json(), sort_keys=True, separators=(",", ":")) + "\n"


def read_results(path: str | os.PathLike, repair: bool = False) -> list[SweepRecord]:
    """Parse a results file. With ``repair`` a torn trailing line is cut off on disk."""
    path = Path(path)
    if not path.exists():
        return []
    data = path.read_bytes()
    complete = data[: data.rfind(b"\n") + 1]
    if len(complete) != len(data):
        if not repair:
            raise ValidationError(f"{path}: trailing partial record")
        with open(path, "r+b") as fh:
            fh.truncate(len(complete))
    records = []
    for lineno, line in enumerate(complete.decode("utf-8").splitlines(), 1):
        try:
            records.append(SweepRecord.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}:{lineno}: bad sweep record ({exc})") from None
    return records


def load_sweep(out_dir: str | os.PathLike) -> SweepResult:
    out_dir = Path(out_dir)
    meta_path = out_dir / "sweep_meta.json"
    base_hash = json.loads(meta_path.read_text()).get("base_hash") if meta_path.exists() else None
    return SweepResult(read_results(out_dir / RESULTS_FILE), base_hash, str(out_dir))


# -- one config -----------------------------------------------------------------

@dataclass
class SweepInputs:
    sample_pairs: list[tuple[np.ndarray, np.ndarray]]
    val_sources: np.ndarray
    val_targets: np.ndarray
    val_ids: list[str]
    seed: int
    instruction: int = 1
    translate_steps: int = DEFAULT_STEPS
    plan: AttachPlan | None = None
    val_seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.sample_pairs:
            raise ConfigurationError("sensor sample split is empty")
        if len(self.val_sources) == 0 or len(self.val_sources) != len(self.val_targets) or len(self.val_ids) != len(self.val_sources):
            raise ConfigurationError("sensor val sources, targets and ids must be non-empty and equally long")
        if not self.val_seeds:
            # shared across configs: every adapter sees the same starting noise
            self.val_seeds = [derive_seed(self.seed, "val", i) for i in self.val_ids]


def config_seed(sweep_seed: int, config: LoraConfig) -> int:
    return derive_seed(sweep_seed, "config", config.index)


def run_config(base: FlowModel, inputs: SweepInputs, config: LoraConfig, out_dir: Path, fe: FeatureExtractor) -> SweepRecord:
    adapter_rel = f"adapters/{config.key}.lora"
    loss_rel = f"losses/{config.key}.csv"
    try:
        hyper = TrainHyper(config.learning_rate, config.steps, config_seed(inputs.seed, config), config.rank, config.alpha, inputs.instruction)
        plan = inputs.plan or base.full_plan()
        adapters = train_lora(base, plan, inputs.sample_pairs, hyper, log_path=out_dir / loss_rel)
        save_adapters(out_dir / adapter_rel, adapters)
        fake = translate_batch(base, adapters, inputs.val_sources, inputs.val_seeds, inputs.translate_steps, inputs.instruction, out_channels=inputs.val_targets.shape[1])
        report = mean_lpips(list(zip(fake, inputs.val_targets)), fe, inputs.val_ids)
    except (CrossflowError, FloatingPointError, ValueError) as exc:
        return SweepRecord(config, "failed", error=f"{type(exc).__name__}: {exc}")
    return SweepRecord(config, "ok", report.mean, report.std, adapter_rel, loss_rel, [round(v, 10) for v in report.values])


_WORKER: dict = {}


def _init_worker(base_bytes: bytes, inputs: SweepInputs, out_dir: str, fe_seed: int):
    _WORKER["base"] = FlowModel.loads(base_bytes)
    _WORKER["inputs"] = inputs
    _WORKER["out_dir"] = Path(out_dir)
    _WORKER["fe"] = FeatureExtractor(fe_seed)


def _worker_run(config: LoraConfig) -> tuple[SweepRecord, str]:
    base = _WORKER["base"]
    record = run_config(base, _WORKER["inputs"], config, _WORKER["out_dir"], _WORKER["fe"])
    return record, base.state_hash()


# -- sweep ----------------------------------------------------------------------

def _append(path: Path, record: SweepRecord) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(_line(record))
        fh.flush()
        os.fsync(fh.fileno())


def _check_prefix(done: list[SweepRecord], configs: Sequence[LoraConfig], path: Path) -> None:
    if len(done) > len(configs):
        raise ValidationError(f"{path}: {len(done)} records but only {len(configs)} configs")
    for rec, cfg in zip(done, configs):
        if rec.config != cfg:
            raise ValidationError(f"{path}: record {rec.config.key} does not match config {cfg.key}; not resumable")


def run_sweep(
    base: FlowModel,
    inputs: SweepInputs,
    configs: Sequence[LoraConfig],
    out_dir: str | os.PathLike,
    workers: int = 1,
    resume: bool = False,
    fe_seed: int = 42,
    progress=None,
) -> SweepResult:
    """Train, translate and score every config; results land in ``out_dir/sweep.jsonl``.

    Without ``resume`` an existing results file is discarded. Failed configs
    are recorded and skipped; if none succeeds a SweepError is raised after
    the file is complete.
    """
    if workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {workers}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESULTS_FILE
    base.freeze()
    base_hash = base.state_hash()
    meta_path = out_dir / "sweep_meta.json"
    if resume and meta_path.exists():
        if json.loads(meta_path.read_text()).get("base_hash") != base_hash:
            raise ValidationError(f"{meta_path}: base checkpoint differs from the one this sweep started with")
    meta = {"base_hash": base_hash, "configs": [c.to_json() for c in configs]}
    atomic_write_bytes(meta_path, (json.dumps(meta, indent=2) + "\n").encode("utf-8"))

    if resume:
        done = read_results(path, repair=True)
        _check_prefix(done, configs, path)
    else:
        path.write_text("")
        done = []
    pending = list(configs[len(done):])
    records = list(done)

    def accept(record: SweepRecord, worker_hash: str):
        if worker_hash != base_hash:
            raise SweepError(f"base weights changed while training {record.config.key}")
        _append(path, record)
        records.append(record)
        if progress:
            progress(record)

    if workers == 1 or len(pending) <= 1:
        fe = FeatureExtractor(fe_seed)
        for cfg in pending:
            accept(run_config(base, inputs, cfg, out_dir, fe), base.state_hash())
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(base.dumps(), inputs, str(out_dir), fe_seed)) as pool:
            # map yields in submission order, which keeps the file in grid order
            for record, worker_hash in pool.map(_worker_run, pending):
                accept(record, worker_hash)

    if base.state_hash() != base_hash:
        raise SweepError("base weights changed during the sweep")
    result = SweepResult(records, base_hash, str(out_dir))
    if not any(r.ok for r in records):
        raise SweepError(f"all {len(records)} sweep configs failed")
    return result


# -- selection and correlation --------------------------------------------------

def select_best(result: SweepResult | Sequence[SweepRecord]) -> LoraConfig:
    """argmin mean LPIPS; ties go to fewer steps, then lower lr, then lower rank."""
    records = result.records if isinstance(result, SweepResult) else list(result)
    ok = [r for r in records if r.ok and r.lpips_mean is not None]
    if not ok:
        raise SelectionError("no successful sweep configs to select from")
    best = min(ok, key=lambda r: (r.lpips_mean, r.config.steps, r.config.learning_rate, r.config.rank))
    return best.config


def correlate_sweep(result: SweepResult, detection_runs: Mapping[str, object]) -> CorrelationReport:
    """Pair each successful config's LPIPS with its repeated-run mAP@0.50.

    ``detection_runs`` maps config key to a DetectionMetrics or to a list of
    per-run mAP@0.50 values.
    """
    ok = [r for r in result.records if r.ok]
    keys = {r.config.key for r in ok}
    if set(detection_runs) != keys:
        raise ValidationError(
            f"detection runs cover {len(detection_runs)} configs, sweep has {len(keys)} successful; "
            f"missing {sorted(keys - set(detection_runs))[:5]}, extra {sorted(set(detection_runs) - keys)[:5]}"
        )
    lpips_values, means, points = [], [], []
    for rec in ok:
        runs = detection_runs[rec.config.key]
        if hasattr(runs, "map50"):
            mean, std = runs.map50.mean, runs.map50.std
        else:
            arr = np.asarray(runs, dtype=np.float64)
            mean, std = float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        lpips_values.append(rec.lpips_mean)
        means.append(mean)
        points.append({
            "config": rec.config.key,
            "lpips": rec.lpips_mean,
            "map_mean": mean,
            "map_std": std,
            "steps": rec.config.steps,
            "lr": rec.config.learning_rate,
            "rank": rec.config.rank,
        })
    return CorrelationReport.build(lpips_values, means, points)


PLOT_COLUMNS = ("config", "lpips", "map_mean", "map_std", "steps", "lr", "rank")


def write_plot_csv(report: CorrelationReport, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PLOT_COLUMNS)
        writer.writeheader()
        for point in report.points:
            writer.writerow({k: point[k] for k in PLOT_COLUMNS})
    os.replace(tmp, path)


__all__ = [
    "LoraConfig",
    "SweepInputs",
    "SweepRecord",
    "SweepResult",
    "config_seed",
    "correlate_sweep",
    "grid",
    "load_sweep",
    "read_results",
    "run_sweep",
    "select_best",
    "write_plot_csv",
]
