"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every subcommand works on a run directory (``--out``, default ``run``)
laid out as described in crossflow.pipeline; path flags override the
conventional locations.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from crossflow import __version__, pipeline
from crossflow.config import load_config
from crossflow.datasets import build_synthetic_detection_set, load_detection_set, load_png, read_split, save_png
from crossflow.datasets.storage import TARGET_DIR, ids_in_dir, write_json
from crossflow.detection import ToyDetector, evaluate_map, predict, read_label_file, train_toy_detector
from crossflow.errors import ConfigurationError, CrossflowError
from crossflow.flowmatch import FlowModel, TrainHyper, train_lora
from crossflow.lora import save_adapters
from crossflow.perceptual import FeatureExtractor, mean_lpips
from crossflow.seeds import derive_seed

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    sup = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=sup, help="master seed (overrides the config)")
    p.add_argument("--out", default=sup, help="run directory (default: run)")
    p.add_argument("--config", default=sup, help="JSON config file")
    p.add_argument("--workers", type=int, default=sup, help="parallel sweep workers")
    p.add_argument("--profile", choices=("paper", "desk"), default=sup, help="step-count profile")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="crossflow", parents=[common], description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"crossflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    add("gen-data", "render the toy world and its five splits")
    add("pretrain", "train the frozen base translator")

    p = add("train-lora", "fit one adapter on a paired split")
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--base")
    p.add_argument("--data", help="paired split directory (default: sensor_sample)")
    p.add_argument("--output", help="adapter file (default: <out>/lora/adapter.lora)")

    p = add("sweep", "run the LoRA grid and score each config by LPIPS")
    p.add_argument("--resume", action="store_true")

    add("select", "pick the min-LPIPS config")

    p = add("translate", "translate a split's source images")
    p.add_argument("--adapter", help="adapter file (default: the selected config)")
    p.add_argument("--base")
    p.add_argument("--input", help="split directory (default: sensor_val)")
    p.add_argument("--output", help="output directory (default: <out>/translate)")

    p = add("build-synth", "translate a labeled split and reuse its labels")
    p.add_argument("--adapter", help="single adapter; default builds one set per sweep config")
    p.add_argument("--base")
    p.add_argument("--input", help="labeled split or external corpus (default: train)")
    p.add_argument("--output")
    p.add_argument("--resume", action="store_true")

    p = add("train-detector", "train the toy detector on one or more labeled sets")
    p.add_argument("--data", nargs="+", help="set directories (default: train)")
    p.add_argument("--output", help="checkpoint (default: <out>/detector/detector.ckpt)")

    p = add("detect", "repeated detector runs for every config and the three regimes")
    p.add_argument("--resume", action="store_true")

    p = add("eval-map", "mAP of a detector or of prediction files on a labeled set")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--detector")
    group.add_argument("--predictions", help="directory of <id>.txt prediction files")
    p.add_argument("--data", help="labeled set (default: test)")

    p = add("eval-lpips", "mean LPIPS between matching PNGs of two directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--strip-prefix", default="", help="removed from predicted ids before matching")

    add("correlate", "LPIPS vs mAP correlation over the sweep")

    p = add("pipeline", "every stage end to end")
    p.add_argument("--resume", action="store_true")

    add("report", "summary.json, correlation.csv and regimes.csv")
    return parser


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _settings(args) -> tuple[dict, Path, int]:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "profile", None) is not None:
        overrides["profile"] = args.profile
    cfg = load_config(getattr(args, "config", None), overrides)
    workers = getattr(args, "workers", 1)
    if workers < 1:
        raise ConfigurationError(f"--workers must be >= 1, got {workers}")
    return cfg, Path(getattr(args, "out", "run")), workers


def _selected_adapter(run: Path) -> Path:
    selection = json.loads((run / "select" / "selection.json").read_text())
    return run / selection["adapter_path"]


def cmd_train_lora(cfg, run, args):
    base = FlowModel.load(args.base or run / "base" / "base.ckpt")
    samples = read_split(args.data or run / "data" / "sensor_sample")
    pairs = [(s.source, s.target) for s in samples if s.target is not None]
    if not pairs:
        raise ConfigurationError("training split has no paired target images")
    hyper = TrainHyper(args.lr, args.steps, derive_seed(cfg["seed"], "train-lora"), args.rank, None, pipeline.instruction_for(cfg))
    out = Path(args.output or run / "lora" / "adapter.lora")
    adapters = train_lora(base, base.full_plan(), pairs, hyper, log_path=out.with_suffix(".loss.csv"))
    save_adapters(out, adapters)
    _emit({"adapter": str(out), "steps": args.steps, "learning_rate": args.lr, "rank": args.rank, "base_hash": base.state_hash()})


def cmd_translate(cfg, run, args):
    base = FlowModel.load(args.base or run / "base" / "base.ckpt")
    translate = pipeline.translator(cfg, base, Path(args.adapter) if args.adapter else _selected_adapter(run))
    samples = read_split(args.input or run / "data" / "sensor_val", targets=False, labels=False)
    out = Path(args.output or run / "translate")
    seed = derive_seed(cfg["seed"], "translate")
    images = translate(np.stack([s.source for s in samples]), [derive_seed(seed, s.id) for s in samples])
    for s, img in zip(samples, images):
        save_png(out / TARGET_DIR / f"{s.id}.png", img)
    write_json(out / "manifest.json", {"split": out.name, "ids": [s.id for s in samples], "seed": seed})
    _emit({"output": str(out), "count": len(samples)})


def cmd_build_synth(cfg, run, args):
    if args.adapter is None:
        built = pipeline.build_synth(cfg, run, args.resume, progress=lambda k: _log(f"synth {k}"))
        _emit({k: m["counts"] for k, m in built.items()})
        return
    base = FlowModel.load(args.base or run / "base" / "base.ckpt")
    adapter = Path(args.adapter)
    out = Path(args.output or run / "synth" / adapter.stem)
    manifest = build_synthetic_detection_set(pipeline.translator(cfg, base, adapter), args.input or run / "data" / "train",
                                             out, adapter.stem, pipeline.stage_seed(cfg, "synth"))
    _emit({"output": str(out), "counts": manifest["counts"], "content_hash": manifest["content_hash"]})


def cmd_train_detector(cfg, run, args):
    sets = [load_detection_set(d) for d in (args.data or [run / "data" / "train"])]
    images = np.concatenate([s.images for s in sets])
    boxes = [b for s in sets for b in s.boxes]
    dcfg, tcfg = pipeline.detector_configs(cfg)
    seed = pipeline.detector_seeds(cfg)[0]
    model = train_toy_detector(images, boxes, tcfg, seed, dcfg)
    out = Path(args.output or run / "detector" / "detector.ckpt")
    model.save(out)
    _emit({"detector": str(out), "images": len(images), "seed": seed, "state_hash": model.state_hash()})


def cmd_eval_map(cfg, run, args):
    test = load_detection_set(args.data or run / "data" / "test")
    if args.predictions:
        size = test.images.shape[2:]
        preds = {}
        for sample_id in ids_in_dir(Path(args.predictions), ".txt"):
            preds[sample_id] = read_label_file(Path(args.predictions) / f"{sample_id}.txt", size[1], size[0], with_score=True)
    else:
        model = ToyDetector.load(args.detector or run / "detector" / "detector.ckpt")
        preds = dict(zip(test.ids, predict(model, test.images)))
    result = evaluate_map(preds, dict(zip(test.ids, test.boxes)))
    _emit(result.to_json())


def cmd_eval_lpips(cfg, run, args):
    pred_dir, real_dir = Path(args.pred), Path(args.real)
    pred_ids = ids_in_dir(pred_dir, ".png")
    if not pred_ids:
        raise ConfigurationError(f"{pred_dir}: no PNG files")
    pairs, ids = [], []
    for pid in pred_ids:
        rid = pid[len(args.strip_prefix):] if args.strip_prefix and pid.startswith(args.strip_prefix) else pid
        real = real_dir / f"{rid}.png"
        if not real.exists():
            raise ConfigurationError(f"{real}: no real image for prediction {pid}")
        pairs.append((load_png(pred_dir / f"{pid}.png"), load_png(real)))
        ids.append(rid)
    _emit(mean_lpips(pairs, FeatureExtractor(cfg["sweep"]["fe_seed"]), ids).to_json())


def dispatch(args, cfg, run, workers) -> None:
    c = args.command
    if c == "gen-data":
        manifests = pipeline.gen_data(cfg, run)
        _emit({k: m["counts"] for k, m in manifests.items()})
    elif c == "pretrain":
        model = pipeline.pretrain(cfg, run)
        _emit({"checkpoint": str(run / "base" / "base.ckpt"), "state_hash": model.state_hash(), "pretrain": model.meta.get("pretrain")})
    elif c == "train-lora":
        cmd_train_lora(cfg, run, args)
    elif c == "sweep":
        result = pipeline.sweep(cfg, run, workers, args.resume, progress=lambda r: _log(f"{r.config.key}: {r.status} lpips={r.lpips_mean}"))
        _emit({"records": len(result.records), "ok": sum(r.ok for r in result.records), "results": str(run / "sweep" / "sweep.jsonl")})
    elif c == "select":
        _emit(pipeline.select(cfg, run))
    elif c == "translate":
        cmd_translate(cfg, run, args)
    elif c == "build-synth":
        cmd_build_synth(cfg, run, args)
    elif c == "train-detector":
        cmd_train_detector(cfg, run, args)
    elif c == "detect":
        out = pipeline.detect(cfg, run, args.resume, progress=lambda k: _log(f"detect {k}"))
        _emit({r: p["map50"] for r, p in out["regimes"].items()})
    elif c == "eval-map":
        cmd_eval_map(cfg, run, args)
    elif c == "eval-lpips":
        cmd_eval_lpips(cfg, run, args)
    elif c == "correlate":
        _emit(pipeline.correlate(cfg, run).to_json())
    elif c == "pipeline":
        summary = pipeline.run_pipeline(cfg, run, workers, args.resume, log=_log)
        _emit({k: summary[k] for k in ("selected", "correlation", "regimes")})
    elif c == "report":
        _emit(pipeline.report(None, run))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        cfg, run, workers = _settings(args)
        dispatch(args, cfg, run, workers)
    except ConfigurationError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except pipeline.StageError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE if isinstance(exc.cause, ConfigurationError) else EXIT_FAILURE
    except (CrossflowError, OSError, ValueError) as exc:
        _log(f"error: {type(exc).__name__}: {exc}")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
