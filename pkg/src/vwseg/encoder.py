"""Convolutional per-pixel embedding encoder.

A stack of same-padded 3x3 conv+relu layers, then a constant bias channel
is appended and a 1x1 projection maps to the embedding dimension. Output
is an (H, W, d) grid, one embedding per pixel, at input resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from . import tensor as T
from .errors import BadFrameShape, MissingInput, ShapeMismatch

MIN_SIDE = 6


@dataclass
class EncoderConfig:
    embed_dim: int = 16
    conv_layers: int = 4
    width: int = 32
    kernel_size: int = 3
    bias_channel: float = 1.0


@dataclass
class EmbeddingMap:
    """Per-pixel embeddings plus where they came from."""

    tensor: T.Tensor
    video: str | None = None
    frame_index: int | None = None

    @property
    def grid(self) -> np.ndarray:
        return self.tensor.data


class EncoderParams:
    """Named parameter tensors of one encoder."""

    def __init__(self, config: EncoderConfig, layers, proj, proj_bias):
        self.config = config
        self.layers = layers
        self.proj = proj
        self.proj_bias = proj_bias

    def named(self):
        for i, (k, b) in enumerate(self.layers):
            yield f"conv{i}.kernel", k
            yield f"conv{i}.bias", b
        yield "proj.kernel", self.proj
        yield "proj.bias", self.proj_bias

    def tensors(self) -> list[T.Tensor]:
        return [t for _, t in self.named()]

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def cast(self, dtype) -> "EncoderParams":
        layers = [(T.Tensor(k.data.astype(dtype), requires_grad=k.requires_grad),
                   T.Tensor(b.data.astype(dtype), requires_grad=b.requires_grad))
                  for k, b in self.layers]
        proj = T.Tensor(self.proj.data.astype(dtype), requires_grad=self.proj.requires_grad)
        pb = T.Tensor(self.proj_bias.data.astype(dtype), requires_grad=self.proj_bias.requires_grad)
        return EncoderParams(self.config, layers, proj, pb)

    @property
    def dtype(self):
        return self.layers[0][0].data.dtype


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Kaiming fan-in normal kernels, zero biases."""
    rng = np.random.default_rng(seed)
    ks = config.kernel_size
    layers = []
    cin = 3
    for _ in range(config.conv_layers):
        fan_in = ks * ks * cin
        k = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(ks, ks, cin, config.width))
        layers.append((
            T.Tensor(k.astype(np.float32), requires_grad=True),
            T.Tensor(np.zeros(config.width, dtype=np.float32), requires_grad=True),
        ))
        cin = config.width
    fan_in = cin + 1
    proj = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(1, 1, cin + 1, config.embed_dim))
    return EncoderParams(
        config,
        layers,
        T.Tensor(proj.astype(np.float32), requires_grad=True),
        T.Tensor(np.zeros(config.embed_dim, dtype=np.float32), requires_grad=True),
    )


def encode(params: EncoderParams, frame, video: str | None = None,
           frame_index: int | None = None) -> EmbeddingMap:
    """Embed every pixel of an (H, W, 3) frame with values in [0, 1]."""
    arr = np.asarray(getattr(frame, "data", frame))
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise BadFrameShape(f"frame shape {arr.shape}, expected (H, W, 3)")
    if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
        raise BadFrameShape(f"frame {arr.shape[:2]} smaller than {MIN_SIDE}x{MIN_SIDE}")
    dt = params.dtype
    h = T.Tensor(arr.astype(dt, copy=False))
    for k, b in params.layers:
        h = T.relu(T.add(T.conv2d(h, k), b))
    ones = T.Tensor(np.full(arr.shape[:2] + (1,), params.config.bias_channel, dtype=dt))
    h = T.concat([h, ones], axis=2)
    out = T.add(T.conv2d(h, params.proj), params.proj_bias)
    return EmbeddingMap(out, video=video, frame_index=frame_index)


def receptive_radius(config: EncoderConfig) -> int:
    return config.conv_layers * (config.kernel_size // 2)


def save_checkpoint(params: EncoderParams, path_base) -> None:
    """One .vwt bundle of named records plus a .json header."""
    base = Path(path_base)
    names = [n for n, _ in params.named()]
    with open(base.with_suffix(".vwt"), "wb") as f:
        for _, t in params.named():
            dataio.write_tensor(f, t.data)
    header = {
        "format": "vwt-bundle",
        "names": names,
        "encoder": {
            "embed_dim": params.config.embed_dim,
            "conv_layers": params.config.conv_layers,
            "width": params.config.width,
            "kernel_size": params.config.kernel_size,
            "bias_channel": params.config.bias_channel,
        },
    }
    base.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")


def load_checkpoint(path_base) -> EncoderParams:
    base = Path(path_base)
    if not base.with_suffix(".json").is_file() or not base.with_suffix(".vwt").is_file():
        raise MissingInput(f"checkpoint {base} not found")
    header = json.loads(base.with_suffix(".json").read_text())
    config = EncoderConfig(**header["encoder"])
    arrays = {}
    with open(base.with_suffix(".vwt"), "rb") as f:
        for name in header["names"]:
            arrays[name] = dataio.read_tensor(f)
    layers = []
    for i in range(config.conv_layers):
        layers.append((
            T.Tensor(arrays[f"conv{i}.kernel"], requires_grad=True),
            T.Tensor(arrays[f"conv{i}.bias"], requires_grad=True),
        ))
    expect = (1, 1, config.width + 1, config.embed_dim)
    if arrays["proj.kernel"].shape != expect:
        raise ShapeMismatch(f"projection {arrays['proj.kernel'].shape}, expected {expect}")
    return EncoderParams(
        config,
        layers,
        T.Tensor(arrays["proj.kernel"], requires_grad=True),
        T.Tensor(arrays["proj.bias"], requires_grad=True),
    )
