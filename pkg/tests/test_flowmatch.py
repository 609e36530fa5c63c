import numpy as np
import pytest

from crossflow.core import Tensor, precision
from crossflow.errors import ConfigurationError, ContractError, DimensionError, TrainingError, ValidationError
from crossflow.flowmatch import (
    FlowConfig,
    FlowModel,
    PretrainConfig,
    TrainHyper,
    Translator,
    euler_integrate,
    fm_loss,
    from_model_space,
    interpolate,
    pretrain_base,
    to_model_space,
    train_lora,
    translate,
    translate_batch,
)
from crossflow.datasets.toyworld import ToyWorldSpec, toy_world_generate
from crossflow.flowmatch.train import pretext_target
from crossflow.lora import AttachPlan, init_adapters
from gradcheck import numeric_grad, relative_error

TINY = FlowConfig(image_size=16, patch=4, dim=16, depth=2, heads=2, stem_channels=4, time_freqs=8, head_channels=4)


def _images(n, seed=0, channels=3, size=16):
    return np.random.default_rng(seed).uniform(size=(n, channels, size, size)).astype(np.float32)


def _randomized_adapters(model, rank=2, seed=0):
    ads = init_adapters(model.projection_shapes(), model.full_plan(), rank, float(rank), seed)
    rng = np.random.default_rng(seed + 100)
    for ad in ads.values():
        ad.up.data[...] = rng.normal(0, 0.3, size=ad.up.shape)
    return ads


def _live_model():
    # a zero output head would cut the adapters off from the loss
    model = FlowModel(TINY, seed=0)
    model.params["out.w"].data[...] = np.random.default_rng(0).normal(0, 0.1, size=model.params["out.w"].shape)
    return model


# -- interpolation and loss ---------------------------------------------

def test_interpolate_endpoints():
    x0, x1 = _images(2, 1), _images(2, 2)
    np.testing.assert_array_equal(interpolate(x0, x1, 0.0)[0], x0)
    np.testing.assert_array_equal(interpolate(x0, x1, 1.0)[0], x1)


def test_interpolate_midpoint_example():
    z, u = interpolate(np.zeros((2, 2)), 2 * np.ones((2, 2)), 0.5)
    np.testing.assert_array_equal(z, np.ones((2, 2)))
    np.testing.assert_array_equal(u, 2 * np.ones((2, 2)))


@pytest.mark.parametrize("t", [-0.1, 1.5])
def test_interpolate_rejects_t(t):
    with pytest.raises(ContractError):
        interpolate(np.zeros(3), np.ones(3), t)


def test_interpolate_shape_error():
    with pytest.raises(DimensionError):
        interpolate(np.zeros(3), np.ones(4), 0.5)


@pytest.mark.parametrize("offset,want", [(0.0, 0.0), (1.0, 1.0)])
def test_fm_loss_exact_and_offset(offset, want):
    x0, x1 = _images(2, 3), _images(2, 4)

    def model(z, t, cond, instruction, adapters=None):
        return Tensor(x1 - x0 + offset)

    assert float(fm_loss(model, x1, None, None, x0, [0.3, 0.8]).data) == pytest.approx(want, abs=1e-6)


def test_fm_loss_finite_nonneg():
    model = FlowModel(TINY, seed=0)
    x1, cond = to_model_space(_images(3, 5)), to_model_space(_images(3, 6))
    x0 = np.random.default_rng(0).standard_normal(x1.shape).astype(np.float32)
    value = float(fm_loss(model, x1, cond, [0, 1, 2], x0, [0.1, 0.5, 0.9]).data)
    assert np.isfinite(value) and value >= 0


# -- model --------------------------------------------------------------

def test_model_output_shape_matches_input():
    model = FlowModel(TINY, seed=0)
    z = Tensor(np.zeros((2, 3, 16, 16)))
    assert model(z, [0.2, 0.4], np.zeros((2, 3, 16, 16)), [0, 1]).shape == (2, 3, 16, 16)


def test_model_rejects_bad_shape():
    model = FlowModel(TINY, seed=0)
    with pytest.raises(DimensionError):
        model(np.zeros((1, 3, 8, 8)), [0.5], np.zeros((1, 3, 8, 8)), [0])


@pytest.mark.parametrize("kwargs", [dict(patch=5), dict(heads=3), dict(depth=0), dict(conditioning="x"), dict(prediction="eps")])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        FlowConfig(**{**TINY.__dict__, **kwargs})


def test_sequence_conditioning_runs():
    model = FlowModel(FlowConfig(**{**TINY.__dict__, "conditioning": "sequence", "prediction": "v"}), seed=0)
    out = model(np.zeros((1, 3, 16, 16)), [0.5], np.zeros((1, 3, 16, 16)), [0])
    assert out.shape == (1, 3, 16, 16) and out.is_valid()


def test_checkpoint_roundtrip(tmp_path):
    model = FlowModel(TINY, seed=3)
    model.meta["note"] = "x"
    model.save(tmp_path / "m.ckpt")
    back = FlowModel.load(tmp_path / "m.ckpt")
    assert back.config == TINY and back.seed == 3 and back.meta == {"note": "x"}
    assert back.state_hash() == model.state_hash()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValidationError):
        FlowModel.loads(b"XXXX" + bytes(20))


def test_model_space_roundtrip():
    imgs = _images(2, 7)
    np.testing.assert_allclose(from_model_space(to_model_space(imgs)), imgs, atol=1e-6)
    gray = _images(2, 8, channels=1)
    np.testing.assert_allclose(from_model_space(to_model_space(gray, 3), out_channels=1), gray, atol=1e-6)


def test_model_space_clamps():
    assert from_model_space(np.full((1, 3, 2, 2), 5.0)).max() == 1.0


# -- LoRA on the model --------------------------------------------------

def test_fresh_adapters_leave_output_identical():
    model = FlowModel(TINY, seed=0)
    ads = init_adapters(model.projection_shapes(), model.full_plan(), 2, 2.0, seed=1)
    z, cond = np.random.default_rng(0).normal(size=(2, 2, 3, 16, 16)).astype(np.float32)
    a = model(z, [0.3, 0.6], cond, [1, 1]).data
    b = model(z, [0.3, 0.6], cond, [1, 1], ads).data
    assert a.tobytes() == b.tobytes()


def test_gradients_reach_only_adapters():
    model = _live_model()
    ads = _randomized_adapters(model)
    for ad in ads.values():
        for p in ad.parameters():
            p.requires_grad = True
    x1, cond = to_model_space(_images(1, 1)), to_model_space(_images(1, 2))
    x0 = np.random.default_rng(0).standard_normal(x1.shape).astype(np.float32)
    fm_loss(model, x1, cond, [1], x0, [0.4], ads).backward()
    assert all(p.grad is None for p in model.parameters())
    assert all(p.grad is not None and np.abs(p.grad).max() > 0 for ad in ads.values() for p in ad.parameters())


def test_fm_loss_adapter_gradient_matches_finite_differences():
    with precision(np.float64):
        model = _live_model()
        ads = _randomized_adapters(model, seed=2)
        rng = np.random.default_rng(1)
        x1 = rng.uniform(-1, 1, size=(2, 3, 16, 16))
        cond = Tensor(rng.uniform(-1, 1, size=(2, 3, 16, 16)))
        x0 = rng.standard_normal(x1.shape)
        t, instr = [0.25, 0.7], [1, 2]
        checked = ["block0.attn.q", "block1.mlp.fc2"]
        params = [p for name in checked for p in ads[name].parameters()]
        for p in params:
            p.requires_grad = True
        fm_loss(model, x1, cond, instr, x0, t, ads).backward()

        def f():
            return float(fm_loss(model, x1, cond, instr, x0, t, ads).data)

        for p in params:
            assert np.linalg.norm(p.grad) > 1e-6
            assert relative_error(p.grad, numeric_grad(f, p.data, step=1e-5)) < 1e-3


def test_fm_loss_base_gradient_matches_finite_differences():
    with precision(np.float64):
        model = FlowModel(TINY, seed=0)
        model.params["out.w"].data[...] = np.random.default_rng(4).normal(0, 0.2, size=model.params["out.w"].shape)
        rng = np.random.default_rng(5)
        x1 = rng.uniform(-1, 1, size=(1, 3, 16, 16))
        cond = Tensor(rng.uniform(-1, 1, size=(1, 3, 16, 16)))
        x0 = rng.standard_normal(x1.shape)
        model.set_trainable(True)
        fm_loss(model, x1, cond, [0], x0, [0.5]).backward()

        def f():
            return float(fm_loss(model, x1, cond, [0], x0, [0.5]).data)

        for name in ["fuse.w", "block0.attn.k.w", "block1.ln2.g", "head.w", "cond_stem.w", "instruction"]:
            p = model.params[name]
            assert np.linalg.norm(p.grad) > 1e-6, name
            assert relative_error(p.grad, numeric_grad(f, p.data, step=1e-5)) < 1e-3, name


# -- sampling -----------------------------------------------------------

@pytest.mark.parametrize("steps", [1, 3, 20])
def test_euler_constant_field_exact(steps):
    z0 = np.random.default_rng(0).normal(size=(2, 3)).astype(np.float32)
    vbar = np.random.default_rng(1).normal(size=(2, 3)).astype(np.float32)
    np.testing.assert_allclose(euler_integrate(lambda z, t: vbar, z0, steps), z0 + vbar, atol=1e-5)


@pytest.mark.parametrize("steps", [1, 4, 20])
def test_euler_time_only_field_exact(steps):
    # v(t) = a + b t integrates to a + b / 2 over [0, 1]
    a, b = np.float32(0.7), np.float32(-1.3)
    out = euler_integrate(lambda z, t: np.full_like(z, a + b * t), np.zeros(4, dtype=np.float32), steps)
    np.testing.assert_allclose(out, a + b / 2, atol=1e-5)


def test_euler_rejects_zero_steps():
    with pytest.raises(ContractError):
        euler_integrate(lambda z, t: z, np.zeros(2), 0)


def test_translate_deterministic_and_shaped():
    model = FlowModel(TINY, seed=0)
    ads = _randomized_adapters(model)
    src = _images(1, 3)[0]
    a = translate(model, ads, src, steps=4, seed=9)
    b = translate(model, ads, src, steps=4, seed=9)
    assert a.tobytes() == b.tobytes()
    assert a.shape == src.shape and 0.0 <= a.min() and a.max() <= 1.0
    assert translate(model, ads, src, steps=4, seed=10).tobytes() != a.tobytes()


def test_translate_batch_independent_of_batching():
    model = FlowModel(TINY, seed=0)
    src = _images(5, 4)
    full = translate_batch(model, None, src, list(range(5)), steps=3, batch_size=5)
    split = translate_batch(model, None, src, list(range(5)), steps=3, batch_size=2)
    np.testing.assert_allclose(full, split, atol=1e-6)


def test_translator_grayscale_output():
    model = FlowModel(TINY, seed=0)
    out = Translator(model, steps=2, out_channels=1)(_images(2, 5), [0, 1])
    assert out.shape == (2, 1, 16, 16)


def test_translate_seed_count_mismatch():
    with pytest.raises(ContractError):
        translate_batch(FlowModel(TINY), None, _images(2), [0], steps=2)


# -- training -----------------------------------------------------------

def test_pretext_targets():
    imgs = _images(2, 6)
    np.testing.assert_array_equal(pretext_target(imgs, 0), imgs)
    lum = pretext_target(imgs, 1)
    assert lum.shape == imgs.shape and np.allclose(lum[:, 0], lum[:, 2])
    np.testing.assert_allclose(pretext_target(imgs, 2), 1.0 - lum, atol=1e-6)
    with pytest.raises(ConfigurationError):
        pretext_target(imgs, 3)


def test_pretrain_improves_and_is_deterministic(tmp_path):
    corpus = np.stack([s.source for s in toy_world_generate(ToyWorldSpec(image_size=16), 40)])
    cfg = PretrainConfig(steps=60, batch_size=4, learning_rate=3e-3, warmup=5)
    a = pretrain_base(corpus, cfg, seed=1, model_config=TINY, log_path=tmp_path / "log.csv")
    b = pretrain_base(corpus, cfg, seed=1, model_config=TINY)
    assert a.dumps() == b.dumps()
    meta = a.meta["pretrain"]
    assert meta["heldout_end"] < meta["heldout_start"]
    rows = (tmp_path / "log.csv").read_text().splitlines()
    assert rows[0] == "step,loss" and len(rows) == 61
    out = translate(a, None, corpus[0], steps=4, seed=0, instruction=0)
    assert np.isfinite(out).all()


def test_pretrain_rejects_empty():
    with pytest.raises(ConfigurationError):
        pretrain_base(np.zeros((0, 3, 16, 16)), model_config=TINY)


def test_pretrain_nan_reports_step():
    with pytest.raises(TrainingError, match="step 1"):
        pretrain_base(_images(10), PretrainConfig(steps=3, batch_size=2, learning_rate=float("nan")), model_config=TINY)


def _pairs(n=6):
    src, tgt = _images(n, 10), _images(n, 11, channels=1)
    return [(s, t) for s, t in zip(src, tgt)]


def test_train_lora_keeps_base_frozen(tmp_path):
    model = _live_model()
    before = model.state_hash()
    ads = train_lora(model, model.full_plan(), _pairs(), TrainHyper(1e-3, 15, seed=3, rank=2), tmp_path / "l.csv")
    assert model.state_hash() == before
    assert any(ad.up.data.any() for ad in ads.values())
    assert len((tmp_path / "l.csv").read_text().splitlines()) == 16


def test_train_lora_zero_steps_is_fresh_init():
    model = FlowModel(TINY, seed=0)
    ads = train_lora(model, model.full_plan(), _pairs(), TrainHyper(1e-3, 0, seed=3, rank=2))
    src = _images(1, 12)
    a = translate_batch(model, None, src, [0], steps=3)
    b = translate_batch(model, ads, src, [0], steps=3)
    assert a.tobytes() == b.tobytes()


def test_train_lora_deterministic():
    model = FlowModel(TINY, seed=0)
    h = TrainHyper(1e-3, 8, seed=5, rank=2)
    a = train_lora(model, model.full_plan(), _pairs(), h)
    b = train_lora(model, model.full_plan(), _pairs(), h)
    for name in a:
        assert a[name].up.data.tobytes() == b[name].up.data.tobytes()


def test_train_lora_partial_plan():
    model = FlowModel(TINY, seed=0)
    ads = train_lora(model, AttachPlan(["block0.attn.q"]), _pairs(), TrainHyper(1e-3, 3, seed=0, rank=2))
    assert list(ads) == ["block0.attn.q"]


def test_train_lora_errors():
    model = FlowModel(TINY, seed=0)
    with pytest.raises(ConfigurationError):
        train_lora(model, model.full_plan(), [], TrainHyper(1e-3, 3, seed=0, rank=2))
    with pytest.raises(ConfigurationError):
        TrainHyper(0.0, 3, seed=0)
    with pytest.raises(TrainingError):
        train_lora(model, model.full_plan(), _pairs(), TrainHyper(float("inf"), 3, seed=0, rank=2))
