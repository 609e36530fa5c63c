"""Small conditional rectified-flow transformer.

Image tokens come from a strided patch embedding of the noisy state z_t.
The source image passes through a conv stem and its own patch embedding
and carries a learned per-dataset instruction vector. Two ways of joining
the streams are supported:

* ``channel`` (default): each image token is concatenated feature-wise
  with the source token of the same patch and fused by a projection.
* ``sequence``: source tokens are appended to the token sequence and
  reached through attention only (in-context editing).

A sinusoidal time embedding is added to every token. Image-token outputs
are projected to a per-pixel feature map and a 3x3 conv head yields an
image-shaped output. With ``prediction="x"`` that output is
read as a clean-image estimate x1_hat and turned into the velocity
(x1_hat - z_t) / max(1 - t, t_clip); ``prediction="v"`` returns it as the
velocity directly.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from crossflow.core import serialize
from crossflow.core.tensor import (
    Tensor,
    concat,
    conv2d,
    gelu,
    layer_norm,
    matmul,
    relu,
    softmax,
)
from crossflow.errors import ConfigurationError, DimensionError, ValidationError
from crossflow.lora import AttachPlan, LoraAdapter, lora_linear

CHECKPOINT_MAGIC = b"CFCK"


@dataclass(frozen=True)
class FlowConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 8
    dim: int = 256
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    stem_channels: int = 16
    n_instructions: int = 4
    time_freqs: int = 64
    conditioning: str = "channel"
    head_channels: int = 16
    prediction: str = "x"
    t_clip: float = 0.2

    def __post_init__(self):
        if self.prediction not in ("x", "v"):
            raise ConfigurationError(f"prediction must be 'x' or 'v', got {self.prediction!r}")
        if not 0.0 < self.t_clip < 1.0:
            raise ConfigurationError(f"t_clip must lie in (0, 1), got {self.t_clip}")
        if self.conditioning not in ("channel", "sequence"):
            raise ConfigurationError(f"conditioning must be 'channel' or 'sequence', got {self.conditioning!r}")
        if self.image_size % self.patch:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid


def grid_position_table(grid: int, dim: int) -> np.ndarray:
    """2D sinusoidal position table (grid*grid, dim), roughly unit variance."""
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        args = coord[:, None] * freqs[None, :]
        parts += [np.sin(args), np.cos(args)]
    table = np.concatenate(parts, axis=1)
    out = np.zeros((grid * grid, dim))
    out[:, : table.shape[1]] = table
    return out * math.sqrt(2.0)


def timestep_embedding(t: np.ndarray, freqs: int) -> np.ndarray:
    half = freqs // 2
    scales = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * scales[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class FlowModel:
    """Velocity predictor v(z_t, t, source, instruction)."""

    def __init__(self, config: FlowConfig, seed: int = 0, params: Mapping[str, np.ndarray] | None = None):
        self.config = config
        self.seed = seed
        self.meta: dict = {}
        arrays = dict(params) if params is not None else self._init_params(config, seed)
        expected = self._param_shapes(config)
        if set(arrays) != set(expected):
            raise ValidationError(f"parameter names do not match config: {sorted(set(arrays) ^ set(expected))}")
        self.params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != shape:
                raise ValidationError(f"parameter {name} has shape {arrays[name].shape}, expected {shape}")
            self.params[name] = Tensor(arrays[name], requires_grad=False, name=name)

    # -- parameter layout ----------------------------------------------
    @staticmethod
    def _param_shapes(cfg: FlowConfig) -> dict[str, tuple[int, ...]]:
        d, p, c, s = cfg.dim, cfg.patch, cfg.channels, cfg.stem_channels
        hidden = cfg.mlp_ratio * d
        shapes: dict[str, tuple[int, ...]] = {
            "img_embed.w": (d, c, p, p),
            "img_embed.b": (d,),
            "cond_stem.w": (s, c, 3, 3),
            "cond_stem.b": (s,),
            "cond_embed.w": (d, s, p, p),
            "cond_embed.b": (d,),
            "pos": (cfg.tokens, d),
            "stream": (2, d),
            "instruction": (cfg.n_instructions, d),
            "time.fc1.w": (d, cfg.time_freqs),
            "time.fc1.b": (d,),
            "time.fc2.w": (d, d),
            "time.fc2.b": (d,),
        }
        if cfg.conditioning == "channel":
            shapes["fuse.w"] = (d, 2 * d)
            shapes["fuse.b"] = (d,)
        for i in range(cfg.depth):
            b = f"block{i}"
            shapes[f"{b}.ln1.g"] = (d,)
            shapes[f"{b}.ln1.b"] = (d,)
            for proj in ("q", "k", "v", "o"):
                shapes[f"{b}.attn.{proj}.w"] = (d, d)
                shapes[f"{b}.attn.{proj}.b"] = (d,)
            shapes[f"{b}.ln2.g"] = (d,)
            shapes[f"{b}.ln2.b"] = (d,)
            shapes[f"{b}.mlp.fc1.w"] = (hidden, d)
            shapes[f"{b}.mlp.fc1.b"] = (hidden,)
            shapes[f"{b}.mlp.fc2.w"] = (d, hidden)
            shapes[f"{b}.mlp.fc2.b"] = (d,)
        shapes["final_ln.g"] = (d,)
        shapes["final_ln.b"] = (d,)
        shapes["out.w"] = (p * p * cfg.head_channels, d)
        shapes["out.b"] = (p * p * cfg.head_channels,)
        shapes["head.w"] = (c, cfg.head_channels, 3, 3)
        shapes["head.b"] = (c,)
        return shapes

    @classmethod
    def _init_params(cls, cfg: FlowConfig, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        out = {}
        for name, shape in cls._param_shapes(cfg).items():
            if name.endswith(".g"):
                out[name] = np.ones(shape)
            elif name.endswith(".b") or name == "out.w":
                out[name] = np.zeros(shape)
            elif len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
                out[name] = rng.normal(0.0, math.sqrt(1.0 / fan_in), size=shape)
            elif name == "pos":
                out[name] = grid_position_table(cfg.grid, cfg.dim)
            elif name == "instruction":
                # unit scale so edits are distinguishable from the first step
                out[name] = rng.normal(0.0, 1.0, size=shape)
            elif name == "stream":
                out[name] = rng.normal(0.0, 0.02, size=shape)
            else:
                out[name] = rng.normal(0.0, math.sqrt(1.0 / shape[1]), size=shape)
        return {k: v.astype(np.float32) for k, v in out.items()}

    def projection_shapes(self) -> dict[str, tuple[int, int]]:
        """(d_out, d_in) of every projection an adapter may wrap."""
        shapes = {}
        for i in range(self.config.depth):
            for proj in ("q", "k", "v", "o"):
                shapes[f"block{i}.attn.{proj}"] = self.params[f"block{i}.attn.{proj}.w"].shape
            for proj in ("fc1", "fc2"):
                shapes[f"block{i}.mlp.{proj}"] = self.params[f"block{i}.mlp.{proj}.w"].shape
        return shapes

    def full_plan(self) -> AttachPlan:
        return AttachPlan.full(self.config.depth)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def freeze(self) -> None:
        self.set_trainable(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    # -- forward -------------------------------------------------------
    def _linear(self, x, name: str, adapters: Mapping[str, LoraAdapter] | None):
        adapter = adapters.get(name) if adapters else None
        return lora_linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"], adapter)

    def _patch_tokens(self, image_tokens: Tensor) -> Tensor:
        b, d = image_tokens.shape[0], image_tokens.shape[1]
        return image_tokens.reshape(b, d, self.config.tokens).transpose(0, 2, 1)

    def __call__(self, z, t, cond, instruction, adapters=None) -> Tensor:
        return self.forward(z, t, cond, instruction, adapters)

    def forward(self, z, t, cond, instruction, adapters: Mapping[str, LoraAdapter] | None = None) -> Tensor:
        """z, cond: (B, C, H, W) in model space; t: (B,); instruction: (B,) ints."""
        cfg, P = self.config, self.params
        z = z if isinstance(z, Tensor) else Tensor(z)
        cond = cond if isinstance(cond, Tensor) else Tensor(cond)
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if z.ndim != 4 or z.shape[1:] != expected or cond.shape != z.shape:
            raise DimensionError(f"expected z and cond of shape (B, {expected}), got {z.shape} and {cond.shape}")
        bsz = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (bsz,))
        instruction = np.broadcast_to(np.asarray(instruction, dtype=np.int64).reshape(-1), (bsz,))

        temb = Tensor(timestep_embedding(t, cfg.time_freqs))
        temb = gelu(temb @ P["time.fc1.w"].transpose() + P["time.fc1.b"])
        temb = (temb @ P["time.fc2.w"].transpose() + P["time.fc2.b"]).reshape(bsz, 1, cfg.dim)

        x = self._patch_tokens(conv2d(z, P["img_embed.w"], P["img_embed.b"], stride=cfg.patch))
        x = x + P["pos"] + P["stream"][0] + temb

        c = relu(conv2d(cond, P["cond_stem.w"], P["cond_stem.b"], pad=1))
        c = self._patch_tokens(conv2d(c, P["cond_embed.w"], P["cond_embed.b"], stride=cfg.patch))
        instr = P["instruction"][instruction].reshape(bsz, 1, cfg.dim)
        c = c + P["pos"] + P["stream"][1] + instr + temb

        if cfg.conditioning == "channel":
            h = concat([x, c], axis=-1) @ P["fuse.w"].transpose() + P["fuse.b"]
        else:
            h = concat([x, c], axis=1)
        for i in range(cfg.depth):
            h = h + self._attention(layer_norm(h, P[f"block{i}.ln1.g"], P[f"block{i}.ln1.b"]), i, adapters)
            h = h + self._mlp(layer_norm(h, P[f"block{i}.ln2.g"], P[f"block{i}.ln2.b"]), i, adapters)

        h = layer_norm(h[:, : cfg.tokens], P["final_ln.g"], P["final_ln.b"])
        out = h @ P["out.w"].transpose() + P["out.b"]
        g, p, hc = cfg.grid, cfg.patch, cfg.head_channels
        out = out.reshape(bsz, g, g, hc, p, p).transpose(0, 3, 1, 4, 2, 5)
        out = out.reshape(bsz, hc, cfg.image_size, cfg.image_size)
        # pixel-space conv mixes across patch borders
        out = conv2d(gelu(out), P["head.w"], P["head.b"], pad=1)
        if cfg.prediction == "v":
            return out
        # head estimates the clean image; convert to velocity along the straight path
        inv = 1.0 / np.maximum(1.0 - t, cfg.t_clip)
        return (out - z) * Tensor(inv.reshape(bsz, 1, 1, 1))

    def _attention(self, h: Tensor, i: int, adapters) -> Tensor:
        cfg = self.config
        bsz, length, d = h.shape
        nh, dh = cfg.heads, d // cfg.heads
        prefix = f"block{i}.attn"

        def heads(x):
            return x.reshape(bsz, length, nh, dh).transpose(0, 2, 1, 3)

        q = heads(self._linear(h, f"{prefix}.q", adapters))
        k = heads(self._linear(h, f"{prefix}.k", adapters))
        v = heads(self._linear(h, f"{prefix}.v", adapters))
        att = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
        o = matmul(att, v).transpose(0, 2, 1, 3).reshape(bsz, length, d)
        return self._linear(o, f"{prefix}.o", adapters)

    def _mlp(self, h: Tensor, i: int, adapters) -> Tensor:
        prefix = f"block{i}.mlp"
        return self._linear(gelu(self._linear(h, f"{prefix}.fc1", adapters)), f"{prefix}.fc2", adapters)

    # -- persistence ---------------------------------------------------
    def dumps(self) -> bytes:
        header = json.dumps({"config": asdict(self.config), "seed": self.seed, "meta": self.meta}, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        serialize.write_records(buf, self.state_dict())
        return buf.getvalue()

    def save(self, path: str | os.PathLike) -> None:
        serialize.atomic_write_bytes(path, self.dumps())

    @classmethod
    def loads(cls, data: bytes) -> "FlowModel":
        stream = io.BytesIO(data)
        if stream.read(4) != CHECKPOINT_MAGIC:
            raise ValidationError("not a model checkpoint (bad magic)")
        (n,) = struct.unpack("<I", stream.read(4))
        header = json.loads(stream.read(n).decode())
        params = serialize.read_records(stream)
        model = cls(FlowConfig(**header["config"]), seed=header["seed"], params=params)
        model.meta = header.get("meta", {})
        return model

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FlowModel":
        with open(path, "rb") as fh:
            return cls.loads(fh.read())


def to_model_space(images: np.ndarray, channels: int = 3) -> np.ndarray:
    """[0,1] images (B, c, H, W) -> [-1,1] with grayscale replicated to ``channels``."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1] == 1 and channels != 1:
        images = np.repeat(images, channels, axis=1)
    if images.shape[1] != channels:
        raise DimensionError(f"cannot map {images.shape[1]}-channel images to {channels} channels")
    return images * 2.0 - 1.0


def from_model_space(images: np.ndarray, out_channels: int | None = None) -> np.ndarray:
    out = np.clip((np.asarray(images) + 1.0) * 0.5, 0.0, 1.0).astype(np.float32)
    if out_channels == 1 and out.shape[1] != 1:
        out = out.mean(axis=1, keepdims=True)
    return out
