import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossflow.core import (
    Adam,
    AdamState,
    Tensor,
    adam_update,
    avg_pool2d,
    concat,
    conv2d,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    precision,
    relu,
    sigmoid,
    softmax,
    softplus,
    tanh,
)
from crossflow.core import serialize
from crossflow.errors import ContractError, DimensionError, ValidationError
from gradcheck import numeric_grad, relative_error


# -- matmul -------------------------------------------------------------

def test_matmul_identity():
    out = matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_zero():
    out = matmul(Tensor([[1, 0], [0, 1]]), Tensor(np.zeros((2, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_dot():
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_float32_storage():
    assert Tensor([1.0]).data.dtype == np.float32


# -- backward -----------------------------------------------------------

def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_constant_function():
    x = Tensor(3.0, requires_grad=True)
    (x * 0.0 + 5.0).backward()
    assert x.grad == 0.0


def test_backward_non_scalar_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_backward_accumulates():
    x = Tensor(2.0, requires_grad=True)
    (x * x).backward()
    (x * x).backward()
    assert x.grad == pytest.approx(8.0)


def test_backward_shared_subexpression():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (y + y * x).backward()  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad == pytest.approx(4 + 12)


def test_sum_wv_matches_finite_differences():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        W = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        v = Tensor(rng.normal(size=(3, 1)))
        matmul(W, v).sum().backward()

        def f():
            return float(matmul(Tensor(W.data), v).data.sum())

        numeric = numeric_grad(f, W.data)
    assert relative_error(W.grad, numeric) < 1e-3


def _mlp_loss(params, x, depth):
    h = x
    acts = [tanh, sigmoid, gelu, relu, softplus]
    for i in range(depth):
        h = matmul(h, params[f"w{i}"]) + params[f"b{i}"]
        h = acts[i % len(acts)](h)
    return (h * h).mean()


@pytest.mark.parametrize("depth", [1, 3, 5])
def test_random_networks_match_finite_differences(depth):
    rng = np.random.default_rng(depth)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(4, 6)))
        params = {}
        for i in range(depth):
            params[f"w{i}"] = Tensor(rng.normal(size=(6, 6)) * 0.6, requires_grad=True)
            params[f"b{i}"] = Tensor(rng.normal(size=(6,)) * 0.1, requires_grad=True)
        _mlp_loss(params, x, depth).backward()
        for name, p in params.items():
            numeric = numeric_grad(lambda: float(_mlp_loss(params, x, depth).data), p.data)
            assert relative_error(p.grad, numeric) < 1e-3, name


def test_composite_ops_match_finite_differences():
    rng = np.random.default_rng(7)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
        gamma = Tensor(rng.normal(size=(5,)), requires_grad=True)
        beta = Tensor(rng.normal(size=(5,)), requires_grad=True)
        other = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)

        def loss():
            h = layer_norm(x, gamma, beta)
            att = softmax(matmul(h, other), axis=-1)
            mixed = concat([att, log_softmax(h[:, :, :3], axis=-1)], axis=1)
            return (mixed * mixed).sum() / (x.transpose(0, 2, 1).reshape(-1)[3] + 4.0)

        loss().backward()
        for t in (x, gamma, beta, other):
            numeric = numeric_grad(lambda: float(loss().data), t.data)
            assert relative_error(t.grad, numeric) < 1e-3


# -- conv2d -------------------------------------------------------------

def _sliding_window_oracle(x, k, stride, pad):
    c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((f, ho, wo))
    for fi in range(f):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[fi, i, j] = float((patch * k[fi]).sum())
    return out


def test_conv_unit_kernel_is_identity():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_kernel():
    x = np.random.default_rng(0).normal(size=(2, 5, 5))
    out = conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), pad=1)
    assert not out.data.any()


def test_conv_windowed_sums():
    x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2))))
    expected = _sliding_window_oracle(x, np.ones((1, 1, 2, 2)), 1, 0)
    np.testing.assert_array_equal(out.data, expected)
    np.testing.assert_array_equal(out.data[0], [[8, 12], [20, 24]])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 2))
    with precision(np.float64):
        out = conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, _sliding_window_oracle(x, k, stride, pad), atol=1e-10)


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 2, 6, 6)).astype(np.float32)
    k = Tensor(rng.normal(size=(4, 2, 3, 3)))
    batched = conv2d(Tensor(x), k, stride=2, pad=1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv2d(Tensor(x[i]), k, stride=2, pad=1).data, atol=1e-5)


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)

        def loss():
            y = conv2d(x, k, b, stride=2, pad=1)
            return (avg_pool2d(relu(y) + 0.1 * y, 1) ** 2).sum()

        loss().backward()
        for t in (x, k, b):
            numeric = numeric_grad(lambda: float(loss().data), t.data)
            assert relative_error(t.grad, numeric) < 1e-3


@pytest.mark.parametrize("stride,pad", [(0, 0), (1, -1), (1.5, 0)])
def test_conv_invalid_stride_pad(stride, pad):
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=stride, pad=pad)


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# -- adam ---------------------------------------------------------------

def test_adam_zero_grad_leaves_param():
    p = Tensor([1.0, -2.0])
    p.grad = np.zeros(2, dtype=np.float32)
    adam_update(p, AdamState.for_param(p), lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert p.grad is None


def test_adam_first_step_moves_by_lr():
    # m_hat = v_hat = 1 after one step with g = 1: delta = lr * 1 / (1 + eps)
    p = Tensor(0.5)
    p.grad = np.array(1.0, dtype=np.float32)
    state = AdamState.for_param(p)
    adam_update(p, state, lr=0.1)
    assert float(p.data) == pytest.approx(0.5 - 0.1 / (1 + 1e-8), abs=1e-7)
    assert state.step == 1


def test_adam_missing_grad():
    with pytest.raises(ContractError):
        adam_update(Tensor(1.0), AdamState.for_param(Tensor(1.0)), 0.1)


def test_adam_deterministic():
    results = []
    for _ in range(2):
        p = Tensor([0.3, 0.7])
        s = AdamState.for_param(p)
        for g in ([0.1, -0.2], [0.5, 0.5], [-1.0, 0.25]):
            p.grad = np.asarray(g, dtype=np.float32)
            adam_update(p, s, 0.01)
        results.append(p.data.copy())
    np.testing.assert_array_equal(results[0], results[1])


def test_adam_wrapper_skips_unused_params():
    used, unused = Tensor(1.0, requires_grad=True), Tensor(2.0, requires_grad=True)
    opt = Adam([used, unused], lr=0.1)
    (used * used).backward()
    opt.step()
    assert float(unused.data) == 2.0 and opt.states[1].step == 0
    assert float(used.data) < 1.0


# -- invariants ---------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ops_are_deterministic_and_do_not_mutate(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4)).astype(np.float32)
    b = rng.normal(size=(4, 2)).astype(np.float32)
    a0, b0 = a.copy(), b.copy()
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    out1 = softmax(matmul(ta, tb)).data.copy()
    out2 = softmax(matmul(Tensor(a), Tensor(b))).data
    assert out1.tobytes() == out2.tobytes()
    np.testing.assert_array_equal(a, a0)
    np.testing.assert_array_equal(b, b0)
    np.testing.assert_array_equal(ta.data, a0)


def test_validity_check():
    assert Tensor([1.0, 2.0]).is_valid()
    assert not Tensor([1.0, np.nan]).is_valid()
    assert not Tensor([np.inf]).is_valid()


# -- serialization -----------------------------------------------------

def test_record_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"w": rng.normal(size=(3, 4)).astype(np.float32), "scalar": np.float32(2.5), "ünï": np.ones((2, 1, 2), np.float32)}
    path = tmp_path / "t.cft"
    serialize.save_tensors(path, tensors)
    loaded = serialize.load_tensors(path)
    assert list(loaded) == list(tensors)
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], tensors[name])


def test_record_layout_is_little_endian():
    blob = serialize.dumps({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    expected = (
        b"CFT1"
        + (2).to_bytes(4, "little") + b"ab"
        + (2).to_bytes(4, "little")
        + (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
        + np.array([1.0, 2.0], dtype="<f4").tobytes()
    )
    assert blob == expected


def test_bad_magic_and_truncation():
    with pytest.raises(ValidationError):
        serialize.loads(b"NOPE")
    blob = serialize.dumps({"x": np.ones(4, np.float32)})
    with pytest.raises(ValidationError):
        serialize.read_records(io.BytesIO(blob[:-3]))
