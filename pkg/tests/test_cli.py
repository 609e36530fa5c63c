import csv
import hashlib
import json
from pathlib import Path

import pytest

from crossflow.cli import main
from crossflow.config import DEFAULTS, build_config, load_config
from crossflow.detection import Box, write_label_file
from crossflow.errors import ConfigurationError
from crossflow.seeds import derive_seed

TINY_CFG = {
    "version": 1,
    "seed": 3,
    "data": {"image_size": 16, "splits": {"sensor_sample": 6, "sensor_val": 4, "train": 10, "val": 2, "test": 8}, "pretrain_images": 20},
    "model": {"patch": 4, "dim": 64, "heads": 2, "stem_channels": 4, "time_freqs": 8, "head_channels": 4},
    "pretrain": {"steps": 15, "warmup": 5},
    "sweep": {"configs": [0, 1, 12], "translate_steps": 2},
    "detector": {"epochs": 2, "runs": 2, "width": 8},
}


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY_CFG))
    return path


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY_CFG))
    assert main(["pipeline", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root / "run", cfg


# -- config ---------------------------------------------------------------------

def test_defaults_are_valid():
    assert build_config() == build_config({"version": 1})
    assert build_config()["profile"] == "desk"


@pytest.mark.parametrize("bad", [
    {"sweeep": {}},
    {"sweep": {"translate_step": 3}},
    {"data": {"splits": {"trian": 5}}},
    {"seed": "zero"},
    {"pretrain": {"steps": 1.5}},
    {"model": {"conditioning": 3}},
    {"version": 2},
    {"profile": "huge"},
    {"sweep": {"configs": [99]}},
    {"detector": {"runs": 1}},
])
def test_config_rejections(bad):
    with pytest.raises(ConfigurationError):
        build_config({"version": 1, **bad})


def test_config_int_for_float_ok():
    assert build_config({"pretrain": {"learning_rate": 1}})["pretrain"]["learning_rate"] == 1


def test_load_config_file_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "nope.json")
    (tmp_path / "a.json").write_text("{")
    with pytest.raises(ConfigurationError, match="invalid JSON"):
        load_config(tmp_path / "a.json")
    (tmp_path / "b.json").write_text("{}")
    with pytest.raises(ConfigurationError, match="version"):
        load_config(tmp_path / "b.json")


def test_overrides_apply_after_file(cfg_file):
    cfg = load_config(cfg_file, {"seed": 11, "profile": "paper"})
    assert cfg["seed"] == 11 and cfg["profile"] == "paper" and cfg["data"]["image_size"] == 16
    assert DEFAULTS["seed"] == 0


def test_derive_seed_stable():
    assert derive_seed(0, "sweep") == derive_seed(0, "sweep")
    assert derive_seed(0, "sweep") != derive_seed(1, "sweep") != derive_seed(0, "synth")
    assert 0 <= derive_seed(123, "a", 4) < 2 ** 63
    assert derive_seed(7, "config", 3) == int.from_bytes(hashlib.sha256(b"7/config/3").digest()[:8], "big") & (2 ** 63 - 1)


# -- exit codes -------------------------------------------------------------------

def test_missing_config_exit_2(tmp_path, capsys):
    missing = tmp_path / "missing.json"
    assert main(["pretrain", "--config", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"version": 1, "sweep": {"grid": []}}))
    assert main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2


def test_usage_error_exit_2():
    assert main(["no-such-command"]) == 2
    assert main(["train-lora", "--steps", "3"]) == 2


def test_runtime_failure_exit_1(tmp_path, cfg_file, capsys):
    # no data yet
    assert main(["pretrain", "--config", str(cfg_file), "--out", str(tmp_path / "empty")]) == 1
    assert "pretrain" in capsys.readouterr().err


def test_pretrain_rerun_same_hash(tmp_path, cfg_file):
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["gen-data", "--config", str(cfg_file), "--out", out]) == 0
        assert main(["--config", str(cfg_file), "--out", out, "pretrain"]) == 0
    assert sha(tmp_path / "a" / "base" / "base.ckpt") == sha(tmp_path / "b" / "base" / "base.ckpt")
    assert sha(tmp_path / "a" / "data" / "train" / "manifest.json") == sha(tmp_path / "b" / "data" / "train" / "manifest.json")


# -- full run ---------------------------------------------------------------------

def test_pipeline_outputs(finished_run):
    run, _ = finished_run
    summary = json.loads((run / "report" / "summary.json").read_text())
    assert summary["correlation"]["n"] == 3
    with open(run / "report" / "regimes.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["regime"] for r in rows] == ["Real only", "Synthetic only", "Real + Synthetic"]
    assert [(int(r["n_real"]), int(r["n_synth"])) for r in rows] == [(10, 0), (0, 10), (10, 10)]
    for r in rows:
        mean, pm, std = r["map50"].split(" ")
        assert pm == "±" and len(mean.split(".")[1]) == 2 and len(std.split(".")[1]) == 2
    with open(run / "report" / "correlation.csv") as fh:
        corr = list(csv.DictReader(fh))
    assert len(corr) == 3 and {"steps", "lr", "rank", "lpips", "map_mean", "map_std"} <= set(corr[0])
    assert sum(int(r["selected"]) for r in corr) == 1
    for stage in ("gen-data", "pretrain", "sweep", "select", "build-synth", "detect", "correlate", "report"):
        manifest = json.loads((run / "manifests" / f"{stage}.json").read_text())
        assert manifest["command"] == stage and manifest["tool_version"]
        assert all((run / p).exists() for p in manifest["outputs"])


def test_pipeline_deterministic(finished_run, tmp_path):
    run, cfg = finished_run
    assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    for rel in ("sweep/sweep.jsonl", "base/base.ckpt", "correlate/report.json", "regimes/real_synthetic.json"):
        assert sha(run / rel) == sha(tmp_path / "again" / rel), rel


def test_resume_of_finished_run_is_noop(finished_run):
    run, cfg = finished_run
    before = sha(run / "sweep" / "sweep.jsonl")
    assert main(["pipeline", "--config", str(cfg), "--out", str(run), "--resume"]) == 0
    assert sha(run / "sweep" / "sweep.jsonl") == before


def test_report_incomplete_and_orphans(tmp_path, cfg_file, capsys):
    out = tmp_path / "r"
    assert main(["gen-data", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert main(["report", "--out", str(out)]) == 1
    assert "missing stages" in capsys.readouterr().err
    (out / "sweep").mkdir()
    assert main(["report", "--out", str(out)]) == 1
    assert "without a manifest" in capsys.readouterr().err


def test_single_stage_commands(finished_run, tmp_path, capsys):
    run, cfg = finished_run
    common = ["--config", str(cfg), "--out", str(run)]
    adapter = tmp_path / "one.lora"
    assert main(["train-lora", *common, "--lr", "5e-4", "--steps", "3", "--rank", "16", "--output", str(adapter)]) == 0
    assert adapter.exists()
    assert main(["translate", *common, "--adapter", str(adapter), "--output", str(tmp_path / "tr")]) == 0
    assert len(list((tmp_path / "tr" / "target").glob("*.png"))) == 4
    capsys.readouterr()
    assert main(["eval-lpips", *common, "--pred", str(tmp_path / "tr" / "target"), "--real", str(run / "data" / "sensor_val" / "target")]) == 0
    assert json.loads(capsys.readouterr().out)["count"] == 4
    assert main(["build-synth", *common, "--adapter", str(adapter), "--output", str(tmp_path / "syn")]) == 0
    labels = sorted((tmp_path / "syn" / "labels").iterdir())
    assert len(labels) == 10
    for path in labels:
        assert sha(path) == sha(run / "data" / "train" / "labels" / path.name.removeprefix("synth_"))
    det = tmp_path / "det.ckpt"
    assert main(["train-detector", *common, "--data", str(run / "data" / "train"), str(tmp_path / "syn"), "--output", str(det)]) == 0
    capsys.readouterr()
    assert main(["eval-map", *common, "--detector", str(det)]) == 0
    assert 0.0 <= json.loads(capsys.readouterr().out)["map50"] <= 1.0


def test_eval_map_from_prediction_files(finished_run, tmp_path, capsys):
    run, cfg = finished_run
    preds = tmp_path / "preds"
    for label in (run / "data" / "test" / "labels").iterdir():
        lines = [line.split() for line in label.read_text().splitlines() if line.strip()]
        boxes = []
        for c, cx, cy, w, h in lines:
            cx, cy, w, h = (float(v) * 16 for v in (cx, cy, w, h))
            boxes.append(Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, int(c), 0.9))
        write_label_file(preds / label.name, boxes, 16, 16)
    assert main(["eval-map", "--config", str(cfg), "--out", str(run), "--predictions", str(preds)]) == 0
    assert json.loads(capsys.readouterr().out)["map50"] == pytest.approx(1.0)
