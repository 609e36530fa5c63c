"""Study stages over one run directory.

    <run>/data/<split>/...          toy world + the pre-training corpus
    <run>/base/base.ckpt            frozen base translator
    <run>/sweep/sweep.jsonl         one record per LoRA config, adapters/
    <run>/select/selection.json     the min-LPIPS config
    <run>/synth/<config key>/       synthetic Train set per config
    <run>/detect/<config key>.json  repeated detector runs on each synthetic set
    <run>/regimes/<regime>.json     real-only / synthetic-only / real+synthetic
    <run>/correlate/                CorrelationReport JSON + plot-data CSV
    <run>/report/                   summary.json, correlation.csv, regimes.csv
    <run>/manifests/<stage>.json    one RunManifest per stage

Stage seeds are derive_seed(master seed, stage name).
"""

from __future__ import annotations

import csv
import json
import os
import time
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from crossflow import __version__
from crossflow.config import MODALITY_INSTRUCTIONS
from crossflow.core.serialize import atomic_write_bytes, sha256_file
from crossflow.datasets import (
    DetectionSet,
    PairedSample,
    ToyWorldSpec,
    build_synthetic_detection_set,
    load_detection_set,
    merge_sets,
    read_manifest,
    read_split,
    toy_world_generate,
    write_split,
    write_toy_world,
)
from crossflow.datasets.toyworld import MODALITY_CLASSES
from crossflow.detection import DetectorConfig, DetectorTrainConfig, evaluate_map, predict, repeat_eval, train_toy_detector
from crossflow.detection.protocol import DetectionMetrics
from crossflow.errors import CrossflowError, ValidationError
from crossflow.flowmatch import FlowConfig, FlowModel, PretrainConfig, Translator, pretrain_base
from crossflow.lora import load_adapters
from crossflow.seeds import derive_seed
from crossflow.sweep import (
    SweepInputs,
    correlate_sweep,
    grid,
    load_sweep,
    run_sweep,
    select_best,
    write_plot_csv,
)

STAGES = ("gen-data", "pretrain", "sweep", "select", "build-synth", "detect", "correlate", "report")
STAGE_DIRS = {
    "gen-data": "data",
    "pretrain": "base",
    "sweep": "sweep",
    "select": "select",
    "build-synth": "synth",
    "detect": "detect",
    "correlate": "correlate",
    "report": "report",
}
REGIME_ORDER = ("real_only", "synthetic_only", "real_synthetic")
REGIME_LABELS = {"real_only": "Real only", "synthetic_only": "Synthetic only", "real_synthetic": "Real + Synthetic"}


class StageError(CrossflowError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def stage_seed(cfg: Mapping, stage: str) -> int:
    return derive_seed(cfg["seed"], stage)


# -- manifests ----------------------------------------------------------------

def _write_json(path: Path, payload) -> None:
    atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"{path}: missing") from None


def _digest(path: Path) -> str:
    if path.is_dir():
        inner = path / "manifest.json"
        return sha256_file(inner) if inner.exists() else "dir"
    return sha256_file(path)


def write_run_manifest(run: Path, stage: str, cfg: Mapping, inputs, outputs, seed: int | None, extra: dict | None = None) -> dict:
    run = Path(run)
    manifest = {
        "command": stage,
        "config": cfg,
        "inputs": {str(Path(p).relative_to(run)): _digest(Path(p)) for p in inputs},
        "outputs": {str(Path(p).relative_to(run)): _digest(Path(p)) for p in outputs},
        "seed": seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "tool_version": __version__,
    }
    manifest.update(extra or {})
    _write_json(run / "manifests" / f"{stage}.json", manifest)
    return manifest


def stage_done(run: Path, stage: str) -> bool:
    path = Path(run) / "manifests" / f"{stage}.json"
    if not path.exists():
        return False
    manifest = json.loads(path.read_text())
    return all((Path(run) / rel).exists() for rel in manifest["outputs"])


# -- stages ---------------------------------------------------------------------

def _toy_spec(cfg: Mapping, seed: int, prefix: str) -> ToyWorldSpec:
    d = cfg["data"]
    return ToyWorldSpec(d["image_size"], d["modality"], d["min_objects"], d["max_objects"], seed, prefix)


def gen_data(cfg: Mapping, run: Path) -> dict:
    run = Path(run)
    data = run / "data"
    manifests = write_toy_world(data, _toy_spec(cfg, stage_seed(cfg, "data"), "toy"), cfg["data"]["splits"], stage_seed(cfg, "split"))
    # the base never sees target-modality images: keep sources only
    corpus = toy_world_generate(_toy_spec(cfg, stage_seed(cfg, "pretrain-corpus"), "pre"), cfg["data"]["pretrain_images"])
    manifests["pretrain"] = write_split(data, "pretrain", (PairedSample(s.id, s.source) for s in corpus))
    outputs = [data / name for name in manifests] + [data / "splits.json"]
    write_run_manifest(run, "gen-data", cfg, [], outputs, stage_seed(cfg, "data"))
    return manifests


def flow_config(cfg: Mapping) -> FlowConfig:
    return FlowConfig(image_size=cfg["data"]["image_size"], **cfg["model"])


def pretrain(cfg: Mapping, run: Path) -> FlowModel:
    run = Path(run)
    corpus_dir = run / "data" / "pretrain"
    corpus = np.stack([s.source for s in read_split(corpus_dir, targets=False, labels=False)])
    p = cfg["pretrain"]
    seed = stage_seed(cfg, "pretrain")
    model = pretrain_base(
        corpus,
        PretrainConfig(p["steps"], p["batch_size"], p["learning_rate"], p["warmup"]),
        seed=seed,
        model_config=flow_config(cfg),
        log_path=run / "base" / "loss.csv",
    )
    model.save(run / "base" / "base.ckpt")
    write_run_manifest(run, "pretrain", cfg, [corpus_dir], [run / "base" / "base.ckpt", run / "base" / "loss.csv"], seed,
                       {"base_hash": model.state_hash(), "meta": model.meta.get("pretrain")})
    return model


def sweep_configs(cfg: Mapping):
    configs = grid(cfg["profile"])
    chosen = cfg["sweep"]["configs"]
    return configs if chosen is None else [c for c in configs if c.index in set(chosen)]


def instruction_for(cfg: Mapping) -> int:
    return MODALITY_INSTRUCTIONS[cfg["data"]["modality"]]


def sweep(cfg: Mapping, run: Path, workers: int = 1, resume: bool = False, progress=None):
    run = Path(run)
    base = FlowModel.load(run / "base" / "base.ckpt")
    sample = read_split(run / "data" / "sensor_sample")
    val = read_split(run / "data" / "sensor_val")
    inputs = SweepInputs(
        [(s.source, s.target) for s in sample],
        np.stack([s.source for s in val]),
        np.stack([s.target for s in val]),
        [s.id for s in val],
        seed=stage_seed(cfg, "sweep"),
        instruction=instruction_for(cfg),
        translate_steps=cfg["sweep"]["translate_steps"],
    )
    result = run_sweep(base, inputs, sweep_configs(cfg), run / "sweep", workers=workers, resume=resume,
                       fe_seed=cfg["sweep"]["fe_seed"], progress=progress)
    outputs = [run / "sweep" / "sweep.jsonl"] + [run / "sweep" / r.adapter_path for r in result.records if r.ok]
    write_run_manifest(run, "sweep", cfg, [run / "base" / "base.ckpt", run / "data" / "sensor_sample", run / "data" / "sensor_val"],
                       outputs, inputs.seed, {"base_hash_after": base.state_hash(), "workers": workers})
    return result


def select(cfg: Mapping, run: Path) -> dict:
    run = Path(run)
    result = load_sweep(run / "sweep")
    best = select_best(result)
    record = result.record_for(best)
    payload = {"config": best.to_json(), "key": best.key, "lpips_mean": record.lpips_mean, "lpips_std": record.lpips_std,
               "adapter_path": f"sweep/{record.adapter_path}"}
    _write_json(run / "select" / "selection.json", payload)
    write_run_manifest(run, "select", cfg, [run / "sweep" / "sweep.jsonl"], [run / "select" / "selection.json"], None)
    return payload


def translator(cfg: Mapping, base: FlowModel, adapter_path: Path) -> Translator:
    return Translator(base, load_adapters(adapter_path), cfg["sweep"]["translate_steps"], instruction_for(cfg), out_channels=1)


def build_synth(cfg: Mapping, run: Path, resume: bool = False, progress=None) -> dict:
    """One synthetic Train set per successful sweep config, all from the same noise seeds."""
    run = Path(run)
    base = FlowModel.load(run / "base" / "base.ckpt")
    result = load_sweep(run / "sweep")
    train_dir = run / "data" / "train"
    n_train = len(read_manifest(train_dir)["ids"])
    seed = stage_seed(cfg, "synth")
    out = {}
    for rec in (r for r in result.records if r.ok):
        target = run / "synth" / rec.config.key
        if resume and (target / "manifest.json").exists() and len(read_manifest(target)["ids"]) == n_train:
            out[rec.config.key] = read_manifest(target)
            continue
        out[rec.config.key] = build_synthetic_detection_set(
            translator(cfg, base, run / "sweep" / rec.adapter_path), train_dir, target, rec.config.key, seed
        )
        if progress:
            progress(rec.config.key)
    write_run_manifest(run, "build-synth", cfg, [train_dir, run / "sweep" / "sweep.jsonl"],
                       [run / "synth" / k for k in out], seed)
    return out


def detector_configs(cfg: Mapping) -> tuple[DetectorConfig, DetectorTrainConfig]:
    d = cfg["detector"]
    classes = MODALITY_CLASSES[cfg["data"]["modality"]]
    return (
        DetectorConfig(image_size=cfg["data"]["image_size"], in_channels=1, num_classes=len(classes), width=d["width"]),
        DetectorTrainConfig(d["epochs"], d["batch_size"], d["learning_rate"]),
    )


def detector_seeds(cfg: Mapping) -> list[int]:
    # shared by every config and regime, so differences come from the data
    return [derive_seed(stage_seed(cfg, "detect"), i) for i in range(cfg["detector"]["runs"])]


def fit_and_score(train_set: DetectionSet, test_set: DetectionSet, seed: int, cfg: Mapping) -> dict:
    dcfg, tcfg = detector_configs(cfg)
    classes = MODALITY_CLASSES[cfg["data"]["modality"]]
    model = train_toy_detector(train_set.images, train_set.boxes, tcfg, seed, dcfg)
    preds = predict(model, test_set.images)
    result = evaluate_map(dict(zip(test_set.ids, preds)), dict(zip(test_set.ids, test_set.boxes)), classes=range(len(classes)))
    return {
        "map50": result.map50,
        "map5095": result.map5095,
        "per_class": {classes[c]: v["ap50"] for c, v in result.per_class.items()},
    }


def evaluate_set(train_set: DetectionSet, test_set: DetectionSet, cfg: Mapping, seeds=None) -> DetectionMetrics:
    return repeat_eval(lambda s: fit_and_score(train_set, test_set, s, cfg), seeds or detector_seeds(cfg))


def detect(cfg: Mapping, run: Path, resume: bool = False, progress: Callable[[str], None] | None = None) -> dict:
    """Repeated detector runs: each synthetic set alone, then the three regimes around the selected config."""
    run = Path(run)
    test = load_detection_set(run / "data" / "test")
    real = load_detection_set(run / "data" / "train")
    selection = _read_json(run / "select" / "selection.json")
    result = load_sweep(run / "sweep")
    outputs, per_config = [], {}

    def cached(path: Path, compute):
        if resume and path.exists():
            return _read_json(path)
        payload = compute()
        _write_json(path, payload)
        return payload

    for rec in (r for r in result.records if r.ok):
        key = rec.config.key
        path = run / "detect" / f"{key}.json"

        def compute(key=key):
            synth = load_detection_set(run / "synth" / key)
            return {"config": key, "train_count": len(synth), **evaluate_set(synth, test, cfg).to_json()}

        per_config[key] = cached(path, compute)
        outputs.append(path)
        if progress:
            progress(key)

    synth_best = load_detection_set(run / "synth" / selection["key"])
    regimes = {}
    for regime in REGIME_ORDER:
        path = run / "regimes" / f"{regime}.json"

        def compute(regime=regime):
            merged = merge_sets(real, synth_best, regime)
            if regime == "synthetic_only":
                metrics = per_config[selection["key"]]
                return {"regime": regime, "counts": merged.counts, "adapter": selection["key"], **{k: metrics[k] for k in ("map50", "map5095", "per_class", "runs", "raw")}}
            return {"regime": regime, "counts": merged.counts, "adapter": selection["key"], **evaluate_set(merged, test, cfg).to_json()}

        regimes[regime] = cached(path, compute)
        outputs.append(path)
        if progress:
            progress(regime)
    write_run_manifest(run, "detect", cfg, [run / "data" / "test", run / "data" / "train", run / "synth"], outputs,
                       stage_seed(cfg, "detect"), {"detector_seeds": detector_seeds(cfg)})
    return {"configs": per_config, "regimes": regimes}


def correlate(cfg: Mapping, run: Path):
    run = Path(run)
    result = load_sweep(run / "sweep")
    runs = {}
    for rec in (r for r in result.records if r.ok):
        payload = _read_json(run / "detect" / f"{rec.config.key}.json")
        runs[rec.config.key] = [r["map50"] for r in payload["raw"]]
    report = correlate_sweep(result, runs)
    _write_json(run / "correlate" / "report.json", report.to_json())
    write_plot_csv(report, run / "correlate" / "plot.csv")
    write_run_manifest(run, "correlate", cfg, [run / "sweep" / "sweep.jsonl", run / "detect"],
                       [run / "correlate" / "report.json", run / "correlate" / "plot.csv"], None)
    return report


REPORT_REQUIRES = ("gen-data", "pretrain", "sweep", "select", "build-synth", "detect", "correlate")


def _fmt(stat: Mapping) -> str:
    return f"{stat['mean']:.2f} ± {stat['std']:.2f}"


def report(cfg: Mapping | None, run: Path) -> dict:
    """summary.json, correlation.csv and regimes.csv from a finished run."""
    run = Path(run)
    missing = [s for s in REPORT_REQUIRES if not stage_done(run, s)]
    orphans = [s for s in STAGES if s != "report" and (run / STAGE_DIRS[s]).exists() and not (run / "manifests" / f"{s}.json").exists()]
    if orphans:
        raise ValidationError(f"{run}: stage outputs without a manifest: {orphans}")
    if missing:
        raise ValidationError(f"{run}: incomplete run, missing stages: {missing}")
    cfg = cfg or _read_json(run / "manifests" / "gen-data.json")["config"]
    selection = _read_json(run / "select" / "selection.json")
    corr = _read_json(run / "correlate" / "report.json")
    regimes = {r: _read_json(run / "regimes" / f"{r}.json") for r in REGIME_ORDER}
    out = run / "report"
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for point in corr["points"]:
        rows.append({**point, "selected": int(point["config"] == selection["key"])})
    tmp = out / ".correlation.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["config", "steps", "lr", "rank", "lpips", "map_mean", "map_std", "selected"])
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, out / "correlation.csv")

    tmp = out / ".regimes.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["regime", "n_real", "n_synth", "map50", "map5095", "runs"])
        for r in REGIME_ORDER:
            p = regimes[r]
            writer.writerow([REGIME_LABELS[r], p["counts"]["real"], p["counts"]["synthetic"], _fmt(p["map50"]), _fmt(p["map5095"]), p["runs"]])
    os.replace(tmp, out / "regimes.csv")

    summary = {
        "seed": cfg["seed"],
        "profile": cfg["profile"],
        "modality": cfg["data"]["modality"],
        "selected": selection,
        "correlation": {k: corr[k] for k in ("n", "pearson", "spearman", "fit")},
        "regimes": {r: {"counts": regimes[r]["counts"], "map50": regimes[r]["map50"], "map5095": regimes[r]["map5095"],
                        "map50_text": _fmt(regimes[r]["map50"])} for r in REGIME_ORDER},
        "configs": corr["points"],
        "tool_version": __version__,
    }
    _write_json(out / "summary.json", summary)
    write_run_manifest(run, "report", cfg, [run / "correlate" / "report.json"] + [run / "regimes" / f"{r}.json" for r in REGIME_ORDER],
                       [out / "summary.json", out / "correlation.csv", out / "regimes.csv"], None)
    return summary


def run_pipeline(cfg: Mapping, run: Path, workers: int = 1, resume: bool = False, log: Callable[[str], None] = lambda m: None) -> dict:
    """gen-data -> pretrain -> sweep -> select -> build-synth -> detect -> correlate -> report."""
    run = Path(run)
    run.mkdir(parents=True, exist_ok=True)
    steps = [
        ("gen-data", lambda: gen_data(cfg, run)),
        ("pretrain", lambda: pretrain(cfg, run)),
        ("sweep", lambda: sweep(cfg, run, workers, resume, progress=lambda r: log(f"  sweep {r.config.key}: {r.status} lpips={r.lpips_mean}"))),
        ("select", lambda: select(cfg, run)),
        ("build-synth", lambda: build_synth(cfg, run, resume, progress=lambda k: log(f"  synth {k}"))),
        ("detect", lambda: detect(cfg, run, resume, progress=lambda k: log(f"  detect {k}"))),
        ("correlate", lambda: correlate(cfg, run)),
        ("report", lambda: report(cfg, run)),
    ]
    summary = None
    for name, fn in steps:
        if resume and name in ("gen-data", "pretrain", "select", "correlate") and stage_done(run, name):
            log(f"[{name}] done, skipping")
            continue
        log(f"[{name}]")
        t0 = time.time()
        try:
            value = fn()
        except CrossflowError as exc:
            raise StageError(name, exc) from exc
        except (OSError, ValueError, ArithmeticError) as exc:
            raise StageError(name, exc) from exc
        log(f"[{name}] {time.time() - t0:.1f}s")
        if name == "report":
            summary = value
    return summary
