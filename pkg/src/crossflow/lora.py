"""Low-rank adapters for frozen projection weights.

A weight ``W`` (d_out x d_in) is adapted as ``W + (alpha / r) * A @ B`` with
``A`` (d_out x r) initialised to zeros and ``B`` (r x d_in) Kaiming-uniform,
so a fresh adapter leaves the model's output bit-identical.

Adapter file layout (little-endian)::

    b"LORA", u8 version, u32 adapter_count
    per adapter:
        u32 name_length, target name (UTF-8)
        u32 rank, f32 alpha
        core tensor records "A" and "B" (see ``crossflow.core.serialize``)
"""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from crossflow.core import serialize
from crossflow.core.tensor import Tensor, as_tensor, linear, matmul, transpose
from crossflow.errors import ConfigurationError, DimensionError, ValidationError

ADAPTER_MAGIC = b"LORA"
ADAPTER_VERSION = 1

ATTENTION_PROJECTIONS = ("q", "k", "v", "o")
MLP_PROJECTIONS = ("fc1", "fc2")


@dataclass
class LoraAdapter:
    up: Tensor  # A, d_out x r
    down: Tensor  # B, r x d_in
    rank: int
    alpha: float
    target_name: str = ""

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def d_out(self) -> int:
        return self.up.shape[0]

    @property
    def d_in(self) -> int:
        return self.down.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.up, self.down]

    def num_parameters(self) -> int:
        return self.up.size + self.down.size


@dataclass(frozen=True)
class AttachPlan:
    targets: tuple[str, ...]

    @classmethod
    def full(cls, depth: int) -> "AttachPlan":
        """Every attention q/k/v/o projection and both MLP projections."""
        names = []
        for i in range(depth):
            names += [f"block{i}.attn.{p}" for p in ATTENTION_PROJECTIONS]
            names += [f"block{i}.mlp.{p}" for p in MLP_PROJECTIONS]
        return cls(tuple(names))

    @classmethod
    def empty(cls) -> "AttachPlan":
        return cls(())

    def __len__(self) -> int:
        return len(self.targets)

    def __iter__(self):
        return iter(self.targets)


def kaiming_uniform_bound(fan_in: int, a: float = math.sqrt(5)) -> float:
    gain = math.sqrt(2.0 / (1.0 + a * a))
    return gain * math.sqrt(3.0 / fan_in)


def init_adapter(d_out: int, d_in: int, r: int, alpha: float, seed: int, target_name: str = "") -> LoraAdapter:
    if d_out < 1 or d_in < 1:
        raise ConfigurationError(f"adapter dimensions must be positive, got {d_out}x{d_in}")
    if r < 1:
        raise ConfigurationError(f"rank must be >= 1, got {r}")
    if r > min(d_out, d_in) / 2:
        raise ConfigurationError(f"rank {r} too large for a {d_out}x{d_in} projection (max {min(d_out, d_in) // 2})")
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    bound = kaiming_uniform_bound(d_in)
    down = rng.uniform(-bound, bound, size=(r, d_in))
    return LoraAdapter(
        up=Tensor(np.zeros((d_out, r)), requires_grad=True, name=f"{target_name}.A"),
        down=Tensor(down, requires_grad=True, name=f"{target_name}.B"),
        rank=r,
        alpha=float(alpha),
        target_name=target_name,
    )


def adapter_delta(adapter: LoraAdapter) -> np.ndarray:
    """(alpha / r) A B as a plain array."""
    return (adapter.scale * (adapter.up.data @ adapter.down.data)).astype(adapter.up.data.dtype)


def _check_shapes(W, adapter: LoraAdapter) -> None:
    shape = as_tensor(W).shape if not isinstance(W, np.ndarray) else W.shape
    if tuple(shape) != (adapter.d_out, adapter.d_in):
        raise DimensionError(f"weight {tuple(shape)} does not match adapter {adapter.d_out}x{adapter.d_in}")


def merge(W, adapter: LoraAdapter) -> np.ndarray:
    """W + delta as a new array; W is left untouched."""
    W = np.asarray(W.data if isinstance(W, Tensor) else W)
    _check_shapes(W, adapter)
    return W + adapter_delta(adapter)


def lora_linear(x, weight, bias=None, adapter: LoraAdapter | None = None) -> Tensor:
    """Row-vector linear layer with an optional unmerged low-rank path.

    ``x`` is (..., d_in). The adapter contribution is computed as
    ``scale * (x B^T) A^T`` so the d_out x d_in delta is never built.
    """
    y = linear(x, weight, bias)
    if adapter is None:
        return y
    low = matmul(x, transpose(adapter.down))
    return y + matmul(low, transpose(adapter.up)) * adapter.scale


def adapted_forward(x, W, adapter: LoraAdapter) -> Tensor:
    """W x + (alpha/r) A (B x) for a single column vector ``x`` of length d_in."""
    x = as_tensor(x)
    _check_shapes(W, adapter)
    if x.ndim != 1 or x.shape[0] != adapter.d_in:
        raise DimensionError(f"expected a vector of length {adapter.d_in}, got shape {x.shape}")
    return lora_linear(x.reshape(1, -1), W, None, adapter).reshape(-1)


def init_adapters(
    shapes: Mapping[str, tuple[int, int]], plan: AttachPlan, rank: int, alpha: float, seed: int
) -> dict[str, LoraAdapter]:
    """One adapter per plan target; each target draws from its own seed stream."""
    missing = [t for t in plan if t not in shapes]
    if missing:
        raise ConfigurationError(f"unknown LoRA targets: {missing}")
    adapters = {}
    for i, target in enumerate(plan):
        d_out, d_in = shapes[target]
        sub_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        adapters[target] = init_adapter(d_out, d_in, rank, alpha, sub_seed, target)
    return adapters


def _projection_shapes(model) -> Mapping[str, tuple[int, int]]:
    if hasattr(model, "projection_shapes"):
        return model.projection_shapes()
    return model


def trainable_parameter_count(model, plan: AttachPlan, rank: int) -> int:
    """Element count of all A and B matrices the plan would attach."""
    shapes = _projection_shapes(model)
    missing = [t for t in plan if t not in shapes]
    if missing:
        raise ConfigurationError(f"unknown LoRA targets: {missing}")
    return sum(rank * (shapes[t][0] + shapes[t][1]) for t in plan)


def parameter_report(model, plan: AttachPlan, rank: int) -> dict:
    trainable = trainable_parameter_count(model, plan, rank)
    frozen = model.num_parameters()
    return {
        "trainable": trainable,
        "frozen": frozen,
        "fraction": trainable / frozen if frozen else 0.0,
        "rank": rank,
        "targets": len(plan),
    }


def adapter_parameters(adapters: Mapping[str, LoraAdapter]) -> list[Tensor]:
    return [p for a in adapters.values() for p in a.parameters()]


# -- persistence -------------------------------------------------------

def dumps_adapters(adapters: Iterable[LoraAdapter] | Mapping[str, LoraAdapter]) -> bytes:
    items = list(adapters.values()) if isinstance(adapters, Mapping) else list(adapters)
    buf = io.BytesIO()
    buf.write(ADAPTER_MAGIC)
    buf.write(struct.pack("<BI", ADAPTER_VERSION, len(items)))
    for a in items:
        name = a.target_name.encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<If", a.rank, a.alpha))
        serialize.write_records(buf, {"A": a.up.data, "B": a.down.data})
    return buf.getvalue()


def loads_adapters(data: bytes) -> dict[str, LoraAdapter]:
    stream = io.BytesIO(data)
    if stream.read(4) != ADAPTER_MAGIC:
        raise ValidationError("not an adapter file (bad magic)")
    version, count = struct.unpack("<BI", stream.read(5))
    if version != ADAPTER_VERSION:
        raise ValidationError(f"unsupported adapter file version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", stream.read(4))
        name = stream.read(name_len).decode("utf-8")
        rank, alpha = struct.unpack("<If", stream.read(8))
        recs = serialize.read_records(stream, count=2)
        out[name] = LoraAdapter(
            up=Tensor(recs["A"], requires_grad=True, name=f"{name}.A"),
            down=Tensor(recs["B"], requires_grad=True, name=f"{name}.B"),
            rank=rank,
            alpha=float(alpha),
            target_name=name,
        )
    return out


def save_adapters(path: str | os.PathLike, adapters) -> None:
    serialize.atomic_write_bytes(path, dumps_adapters(adapters))


def load_adapters(path: str | os.PathLike) -> dict[str, LoraAdapter]:
    with open(path, "rb") as fh:
        return loads_adapters(fh.read())
