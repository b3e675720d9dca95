"""Pluggable feature extractors producing the (c, h, w) map the attention
modules consume.

Two kinds: a tiny trainable convolutional network (three stride-2 stages
with ReLU, trained jointly with the rest of the model), and a loader for
feature maps precomputed elsewhere.  Downstream code never inspects which
produced the map.

General k x k convolution lives here and nowhere else; the attention
modules only ever need the 1x1 case.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, DimensionError, FormatError, dimension_error

MANIFEST_NAME = "manifest.txt"
FEATURES_NAME = "features.bin"


@dataclass
class BackboneConfig:
    """Shape and seeding of the feature extractor.

    ``out_spatial`` must be at least 2: spatial attention is vacuous on a
    1x1 map.  For the tiny convolutional backbone the input image side must
    be exactly 8 * out_spatial (three stride-2 stages).
    """

    kind: str = "tiny_conv"
    out_channels: int = 16
    out_spatial: int = 4
    widths: tuple[int, int] = (16, 32)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("tiny_conv", "precomputed"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.out_channels < 4:
            raise ConfigError(f"out_channels must be >= 4, got {self.out_channels}")
        if self.out_spatial < 2:
            raise ConfigError(f"out_spatial must be >= 2, got {self.out_spatial}")

    @property
    def image_size(self) -> int:
        return self.out_spatial * 8

    @property
    def map_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.out_spatial, self.out_spatial)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    """Fan-scaled uniform init, bound sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv2d(
    inp: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Strided 2-d convolution of (c, h, w) or batched (n, c, h, w) input
    with a (c_out, c_in, k, k) kernel.  Differentiable in all arguments."""
    batched = inp.data.ndim == 4
    x = inp.data if batched else inp.data[None]
    if x.ndim != 4 or kernel.data.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise dimension_error("conv2d", inp.shape, kernel.shape)
    n, c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    if kernel.shape[2] != kernel.shape[3]:
        raise dimension_error("conv2d (square kernels only)", kernel.shape)
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise dimension_error("conv2d (empty output)", inp.shape, kernel.shape)

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = np.ascontiguousarray(windows[:, :, ::stride, ::stride])  # (n,c,ho,wo,k,k)
    out = np.einsum("ncxykl,ockl->noxy", cols, kernel.data, optimize=True)
    if bias is not None:
        if bias.shape != (c_out,):
            raise dimension_error("conv2d bias", bias.shape, kernel.shape)
        out = out + bias.data[None, :, None, None]

    def backward_fn(g: np.ndarray) -> None:
        gb = g if batched else g[None]
        kernel.accumulate_grad(np.einsum("noxy,ncxykl->ockl", gb, cols, optimize=True))
        if bias is not None:
            bias.accumulate_grad(gb.sum(axis=(0, 2, 3)))
        dxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                patch = np.einsum("noxy,oc->ncxy", gb, kernel.data[:, :, ki, kj], optimize=True)
                dxp[:, :, ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride] += patch
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        inp.accumulate_grad(dxp if batched else dxp[0])

    return ad._emit(out if batched else out[0], backward_fn, "conv2d")


class TinyBackbone:
    """3 -> widths[0] -> widths[1] -> out_channels, each stage a 3x3
    stride-2 convolution (padding 1) followed by ReLU.

    Maps a (3, 8s, 8s) image to a (out_channels, s, s) feature map and is
    differentiable end to end, so it trains jointly with the embedding
    head.  Biases start at zero; weights use fan-scaled uniform init.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, dtype=np.float64):
        self.config = config
        w1, w2 = config.widths
        plan = [(3, w1), (w1, w2), (w2, config.out_channels)]
        self.params: list[Parameter] = []
        self._stages = []
        for i, (cin, cout) in enumerate(plan, start=1):
            fan_in, fan_out = cin * 9, cout * 9
            weight = Parameter(
                glorot_uniform(rng, (cout, cin, 3, 3), fan_in, fan_out, dtype),
                name=f"backbone.stage{i}.weight",
            )
            bias = Parameter(np.zeros(cout, dtype=dtype), name=f"backbone.stage{i}.bias")
            self.params.extend([weight, bias])
            self._stages.append((weight, bias))

    def forward(self, image: Tensor) -> Tensor:
        """Single (3, h, w) image to a (c, s, s) feature map."""
        if image.data.ndim != 3 or image.shape[0] != 3:
            raise dimension_error("tiny_backbone_forward", image.shape)
        return self._run(image)

    def forward_batch(self, images: Tensor) -> Tensor:
        """Batched (n, 3, h, w) images to (n, c, s, s) feature maps."""
        if images.data.ndim != 4 or images.shape[1] != 3:
            raise dimension_error("tiny_backbone_forward (batch)", images.shape)
        return self._run(images)

    def _run(self, x: Tensor) -> Tensor:
        side = x.shape[-1]
        if x.shape[-2] != side or side != self.config.image_size:
            raise DimensionError(
                f"backbone expects {self.config.image_size}x{self.config.image_size} images, "
                f"got shape {x.shape}"
            )
        for weight, bias in self._stages:
            x = conv2d(x, weight.tensor, bias.tensor, stride=2, padding=1)
            x = ad.pointwise_activation(x, "relu")
        return x


def save_precomputed_features(directory, pairs) -> None:
    """Write (image_id, feature map) pairs as a manifest plus one tensor
    file, in manifest order."""
    os.makedirs(directory, exist_ok=True)
    ids = []
    with open(os.path.join(directory, FEATURES_NAME), "wb") as f:
        for image_id, fmap in pairs:
            ids.append(image_id)
            ad.write_tensor(f, np.asarray(fmap))
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as f:
        for image_id in ids:
            f.write(image_id + "\n")


def load_precomputed_features(
    directory, expected_shape: Optional[tuple[int, int, int]] = None
) -> Iterator[tuple[str, np.ndarray]]:
    """Yield (image_id, feature map) pairs in manifest order.

    ``expected_shape`` (c, h, w), when given, is checked against each map;
    a mismatch is a format error naming the map's byte offset.
    """
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    features_path = os.path.join(directory, FEATURES_NAME)
    with open(manifest_path, encoding="utf-8") as f:
        ids = [line.strip() for line in f if line.strip()]
    with open(features_path, "rb") as f:
        for image_id in ids:
            offset = f.tell()
            fmap = ad.read_tensor(f)
            if expected_shape is not None and fmap.shape != tuple(expected_shape):
                raise FormatError(
                    f"feature map for {image_id!r} at byte {offset} has extents "
                    f"{fmap.shape}, expected {tuple(expected_shape)}"
                )
            yield image_id, fmap
        trailing = f.read(1)
        if trailing:
            raise FormatError(
                f"feature file has {len(trailing)}+ trailing bytes at byte {f.tell() - 1} "
                "beyond the manifest's entries"
            )
