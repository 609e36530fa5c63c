import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from crossflow.datasets import (
    DESK_SPLIT_SIZES,
    PAPER_SPLIT_SIZES,
    SPLIT_NAMES,
    DetectionSet,
    ToyWorldSpec,
    build_synthetic_detection_set,
    load_detection_set,
    load_external_dataset,
    load_png,
    make_splits,
    merge_sets,
    read_manifest,
    read_split,
    read_splits,
    save_png,
    toy_world_generate,
    write_split,
    write_toy_world,
)
from crossflow.detection.boxes import Box
from crossflow.errors import ConfigurationError, ValidationError
from crossflow.seeds import derive_seed


def luminance_translator(sources, seeds):
    # deterministic stand-in for the flow translator
    return sources.mean(axis=1, keepdims=True)


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- toy world ------------------------------------------------------------------

@pytest.mark.parametrize("modality", ["ir_like", "sar_like"])
def test_toy_world_deterministic(modality):
    spec = ToyWorldSpec(modality=modality, seed=3)
    a, b = toy_world_generate(spec, 6), toy_world_generate(spec, 6)
    for x, y in zip(a, b):
        assert x.id == y.id and x.boxes == y.boxes
        np.testing.assert_array_equal(x.source, y.source)
        np.testing.assert_array_equal(x.target, y.target)


@pytest.mark.parametrize("modality", ["ir_like", "sar_like"])
def test_toy_world_alignment_and_ranges(modality):
    spec = ToyWorldSpec(modality=modality, min_objects=1, max_objects=3)
    samples = toy_world_generate(spec, 500)
    for s in samples:
        assert s.source.shape == (3, 32, 32) and s.target.shape == (1, 32, 32)
        assert 1 <= len(s.boxes) <= 3
        for b in s.boxes:
            assert 0 <= b.x_min < b.x_max <= 32 and 0 <= b.y_min < b.y_max <= 32
            assert b.class_id in (0, 1)


def test_toy_world_bad_n():
    with pytest.raises(ConfigurationError):
        toy_world_generate(ToyWorldSpec(), 0)


# -- png + layout ---------------------------------------------------------------

def test_png_roundtrip_is_lossless_on_8bit(tmp_path):
    rng = np.random.default_rng(0)
    rgb = (rng.integers(0, 256, size=(3, 8, 12)) / 255.0).astype(np.float32)
    gray = (rng.integers(0, 256, size=(1, 8, 12)) / 255.0).astype(np.float32)
    save_png(tmp_path / "a.png", rgb)
    save_png(tmp_path / "b.png", gray)
    np.testing.assert_array_equal(load_png(tmp_path / "a.png"), rgb)
    np.testing.assert_array_equal(load_png(tmp_path / "b.png"), gray)


def test_write_and_read_split(tmp_path):
    samples = toy_world_generate(ToyWorldSpec(), 5)
    manifest = write_split(tmp_path, "train", samples)
    assert manifest["counts"] == {"images": 5, "targets": 5, "labels": 5, "boxes": sum(len(s.boxes) for s in samples)}
    assert read_manifest(tmp_path / "train")["content_hash"] == manifest["content_hash"]
    back = read_split(tmp_path / "train")
    for s, r in zip(samples, back):
        assert s.id == r.id
        np.testing.assert_array_equal(s.source, r.source)
        np.testing.assert_array_equal(s.target, r.target)
        for b0, b1 in zip(s.boxes, r.boxes):
            assert b0.class_id == b1.class_id
            assert np.allclose([b0.x_min, b0.y_min, b0.x_max, b0.y_max], [b1.x_min, b1.y_min, b1.x_max, b1.y_max], atol=1e-4)
    assert not list((tmp_path / "train").rglob("*.tmp"))


def test_content_hash_pure_function_of_spec(tmp_path):
    spec = ToyWorldSpec(seed=5)
    h1 = write_split(tmp_path / "a", "s", toy_world_generate(spec, 4))["content_hash"]
    h2 = write_split(tmp_path / "b", "s", toy_world_generate(spec, 4))["content_hash"]
    h3 = write_split(tmp_path / "c", "s", toy_world_generate(ToyWorldSpec(seed=6), 4))["content_hash"]
    assert h1 == h2 != h3


def test_read_split_misaligned_is_validation_error(tmp_path):
    samples = toy_world_generate(ToyWorldSpec(), 1)
    write_split(tmp_path, "x", samples)
    save_png(tmp_path / "x" / "target" / f"{samples[0].id}.png", np.zeros((1, 16, 16)))
    with pytest.raises(ValidationError):
        read_split(tmp_path / "x")


# -- splits ---------------------------------------------------------------------

def test_paper_split_sizes_partition():
    ids = [f"f{i:05d}" for i in range(2061)]
    splits = make_splits(ids, PAPER_SPLIT_SIZES, seed=0)
    assert splits.sizes() == PAPER_SPLIT_SIZES
    parts = [set(v) for _, v in splits.items()]
    assert set().union(*parts) == set(ids)
    for i in range(5):
        for j in range(i + 1, 5):
            assert not parts[i] & parts[j]


def test_split_determinism_and_order_independence():
    ids = [f"f{i}" for i in range(700)]
    a = make_splits(ids, DESK_SPLIT_SIZES, seed=4)
    assert a == make_splits(list(reversed(ids)), DESK_SPLIT_SIZES, seed=4)
    assert a != make_splits(ids, DESK_SPLIT_SIZES, seed=5)


def test_split_errors():
    with pytest.raises(ConfigurationError):
        make_splits([f"f{i}" for i in range(10)], (5, 5, 5, 0, 0), seed=0)
    with pytest.raises(ConfigurationError):
        make_splits(["a", "a", "b"], (1, 0, 0, 0, 0), seed=0)
    with pytest.raises(ConfigurationError):
        make_splits(["a"], {"bogus": 1}, seed=0)


def test_write_toy_world(tmp_path):
    sizes = {"sensor_sample": 4, "sensor_val": 3, "train": 5, "val": 2, "test": 2}
    manifests = write_toy_world(tmp_path, ToyWorldSpec(seed=1), sizes, split_seed=2)
    assert set(manifests) == set(SPLIT_NAMES)
    splits = read_splits(tmp_path)
    assert splits.sizes() == sizes
    for name in SPLIT_NAMES:
        assert read_manifest(tmp_path / name)["ids"] == list(getattr(splits, name))


# -- synthetic sets ---------------------------------------------------------------

@pytest.fixture
def train_dir(tmp_path):
    write_split(tmp_path, "train", toy_world_generate(ToyWorldSpec(), 12))
    return tmp_path / "train"


def test_build_synth_label_byte_identity(train_dir, tmp_path):
    manifest = build_synthetic_detection_set(luminance_translator, train_dir, tmp_path / "synth", "adapter-x", seed=9, batch_size=5)
    src_ids = read_manifest(train_dir)["ids"]
    assert manifest["counts"]["images"] == len(src_ids) == 12
    for rec in manifest["records"]:
        assert rec["id"] == "synth_" + rec["source_id"]
        assert rec["adapter_id"] == "adapter-x" and rec["seed"] == derive_seed(9, "synth", rec["source_id"])
        assert sha(tmp_path / "synth" / "labels" / f"{rec['id']}.txt") == sha(train_dir / "labels" / f"{rec['source_id']}.txt")
    assert len(list((tmp_path / "synth" / "target").glob("*.png"))) == 12


def test_build_synth_independent_of_batching(train_dir, tmp_path):
    def noisy(sources, seeds):
        return np.stack([np.random.default_rng(s).uniform(size=(1,) + src.shape[1:]) for src, s in zip(sources, seeds)])

    a = build_synthetic_detection_set(noisy, train_dir, tmp_path / "a", "ad", seed=1, batch_size=5)
    b = build_synthetic_detection_set(noisy, train_dir, tmp_path / "b", "ad", seed=1, batch_size=100)
    assert a["content_hash"] == b["content_hash"]


def test_build_synth_missing_label_lists_ids(train_dir, tmp_path):
    ids = read_manifest(train_dir)["ids"]
    (train_dir / "labels" / f"{ids[3]}.txt").unlink()
    with pytest.raises(ValidationError, match=ids[3]):
        build_synthetic_detection_set(luminance_translator, train_dir, tmp_path / "s", "ad", seed=0)


def test_load_detection_set(train_dir, tmp_path):
    build_synthetic_detection_set(luminance_translator, train_dir, tmp_path / "synth", "ad", seed=0)
    real = load_detection_set(train_dir)
    synth = load_detection_set(tmp_path / "synth")
    assert real.images.shape == synth.images.shape == (12, 1, 32, 32)
    for a, b in zip(real.boxes, synth.boxes):
        assert a == b


def _fake_set(n, prefix):
    return DetectionSet([f"{prefix}{i}" for i in range(n)], np.zeros((n, 1, 2, 2), np.float32), [[Box(0, 0, 1, 1, 0)] for _ in range(n)])


@pytest.mark.parametrize("regime,expect", [("real_only", (1600, 0)), ("synthetic_only", (0, 5000)), ("real_synthetic", (1600, 5000))])
def test_merge_regimes(regime, expect):
    real, synth = _fake_set(1600, "r"), _fake_set(5000, "synth_")
    merged = merge_sets(real, synth, regime)
    assert (merged.counts["real"], merged.counts["synthetic"]) == expect
    assert len(merged) == merged.counts["total"] == sum(expect)
    if regime == "real_only":
        assert merged.ids == real.ids and merged.boxes == real.boxes
        np.testing.assert_array_equal(merged.images, real.images)


def test_merge_errors():
    with pytest.raises(ValidationError):
        merge_sets(_fake_set(3, "a"), _fake_set(3, "a"), "real_synthetic")
    with pytest.raises(ValidationError):
        merge_sets(_fake_set(3, "a"), _fake_set(3, "b"), "mixed")


# -- external corpora -------------------------------------------------------------

@pytest.mark.parametrize("n", [400, 500])
def test_load_external_counts(tmp_path, n):
    write_split(tmp_path, "ext", toy_world_generate(ToyWorldSpec(seed=11), n))
    loaded = load_external_dataset(tmp_path / "ext")
    assert len(loaded) == n
    assert all(s.target is None and s.boxes is not None for s in loaded)


def test_load_external_leaves_target_untouched(tmp_path):
    write_split(tmp_path, "ext", toy_world_generate(ToyWorldSpec(), 4))
    before = {p.name: sha(p) for p in (tmp_path / "ext" / "target").iterdir()}
    load_external_dataset(tmp_path / "ext")
    assert before == {p.name: sha(p) for p in (tmp_path / "ext" / "target").iterdir()}


def test_load_external_malformed(tmp_path):
    with pytest.raises(ValidationError, match="source"):
        load_external_dataset(tmp_path)
    write_split(tmp_path, "ext", toy_world_generate(ToyWorldSpec(), 2))
    next((tmp_path / "ext" / "labels").iterdir()).write_text("0 0.5 0.5\n")
    with pytest.raises(ValidationError, match="labels"):
        load_external_dataset(tmp_path / "ext")


def test_manifest_is_json(train_dir):
    payload = json.loads((train_dir / "manifest.json").read_text())
    assert set(payload) >= {"split", "ids", "counts", "content_hash"}
