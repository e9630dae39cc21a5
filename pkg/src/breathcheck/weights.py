"""Darknet ``.weights`` loading with batch-norm folding.

Layout (little-endian): a 16- or 20-byte header, then per convolutional
layer in config order either ``biases, scales, rolling_mean, rolling_var,
weights`` (with ``batch_normalize=1``) or ``biases, weights``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .cfg import NetworkConfig, input_shapes
from .errors import NegativeVariance, NonFiniteValue, TrailingBytes, TruncatedFile

BN_EPSILON = 1e-6


@dataclass(frozen=True)
class WeightsHeader:
    major: int = 0
    minor: int = 2
    revision: int = 0
    seen: int = 0

    def __post_init__(self):
        if min(self.major, self.minor, self.revision) < 0:
            raise ValueError("header version fields must be non-negative")

    @property
    def wide_seen(self) -> bool:
        return self.major * 10 + self.minor >= 2

    @property
    def size(self) -> int:
        return 20 if self.wide_seen else 16

    def pack(self) -> bytes:
        fmt = "<iiiQ" if self.wide_seen else "<iiiI"
        return struct.pack(fmt, self.major, self.minor, self.revision, self.seen)

    @classmethod
    def unpack(cls, data: bytes) -> "WeightsHeader":
        if len(data) < 12:
            raise TruncatedFile(16, len(data))
        major, minor, revision = struct.unpack_from("<iii", data)
        wide = major * 10 + minor >= 2
        need = 20 if wide else 16
        if len(data) < need:
            raise TruncatedFile(need, len(data))
        (seen,) = struct.unpack_from("<Q" if wide else "<I", data, 12)
        return cls(major, minor, revision, seen)


@dataclass
class ConvWeights:
    """Folded convolution parameters: ``weight`` is (filters, in_c, k, k)."""

    weight: np.ndarray
    bias: np.ndarray
    folded_bn: bool = False

    @property
    def filters(self) -> int:
        return self.weight.shape[0]


@dataclass
class ModelWeights:
    header: WeightsHeader
    layers: dict[int, ConvWeights] = field(default_factory=dict)

    def __getitem__(self, index: int) -> ConvWeights:
        return self.layers[index]

    def __len__(self) -> int:
        return len(self.layers)


def _conv_layouts(cfg: NetworkConfig):
    for i, (layer, (c, _, _)) in enumerate(zip(cfg.layers, input_shapes(cfg))):
        if layer.kind == "convolutional":
            n = layer.get_int("filters")
            k = layer.get_int("size", 1)
            yield i, n, c, k, layer.batch_normalize


def stored_floats(cfg: NetworkConfig) -> int:
    total = 0
    for _, n, c, k, bn in _conv_layouts(cfg):
        total += n * (4 if bn else 1) + n * c * k * k
    return total


def expected_size(cfg: NetworkConfig, header: WeightsHeader | None = None) -> int:
    """Exact byte length of a weights file matching ``cfg``."""
    header = header or WeightsHeader()
    return header.size + 4 * stored_floats(cfg)


def fold_batchnorm(weight, bias, scales, means, variances, eps: float = BN_EPSILON, *, layer: int = -1):
    """Fold inference-time batch norm into the preceding convolution.

    Returns ``(w', b')`` with ``w' = w * g / sqrt(v + eps)`` per filter and
    ``b' = bias - g * m / sqrt(v + eps)``.
    """
    variances = np.asarray(variances, dtype=np.float64)
    bad = np.flatnonzero(variances < 0)
    if bad.size:
        raise NegativeVariance(layer, int(bad[0]))
    inv_std = np.asarray(scales, dtype=np.float64) / np.sqrt(variances + eps)
    weight = np.asarray(weight, dtype=np.float64)
    shape = (-1,) + (1,) * (weight.ndim - 1)
    folded_w = weight * inv_std.reshape(shape)
    folded_b = np.asarray(bias, dtype=np.float64) - inv_std * np.asarray(means, dtype=np.float64)
    return folded_w.astype(np.float32), folded_b.astype(np.float32)


def read_weights(data: bytes, cfg: NetworkConfig) -> ModelWeights:
    """Load ``data`` against ``cfg``; the stream must be consumed exactly."""
    header = WeightsHeader.unpack(data)
    expected = expected_size(cfg, header)
    if len(data) < expected:
        raise TruncatedFile(expected, len(data))
    if len(data) > expected:
        raise TrailingBytes(len(data) - expected)

    floats = np.frombuffer(data, dtype="<f4", offset=header.size)
    bad = np.flatnonzero(~np.isfinite(floats))
    model = ModelWeights(header)
    pos = 0
    for i, n, c, k, bn in _conv_layouts(cfg):
        start = pos
        count = n * (4 if bn else 1) + n * c * k * k
        if bad.size and start <= bad[0] < start + count:
            raise NonFiniteValue(i, int(bad[0] - start))
        bias = floats[pos:pos + n]
        pos += n
        if bn:
            scales, means, variances = (floats[pos + j * n:pos + (j + 1) * n] for j in range(3))
            pos += 3 * n
        weight = floats[pos:pos + n * c * k * k].reshape(n, c, k, k)
        pos += n * c * k * k
        if bn:
            w, b = fold_batchnorm(weight, bias, scales, means, variances, layer=i)
            model.layers[i] = ConvWeights(w, b, folded_bn=True)
        else:
            model.layers[i] = ConvWeights(weight.astype(np.float32), bias.astype(np.float32))
    return model


def load_weights(path, cfg: NetworkConfig) -> ModelWeights:
    with open(path, "rb") as fh:
        return read_weights(fh.read(), cfg)


def random_weights_bytes(cfg: NetworkConfig, seed: int = 0, header: WeightsHeader | None = None) -> bytes:
    """A synthetic weights file for ``cfg`` with sane, finite statistics.

    Conv weights use He-style scaling so activations stay bounded through
    deep stacks; rolling variances are strictly positive.
    """
    header = header or WeightsHeader()
    rng = np.random.default_rng(seed)
    chunks = [header.pack()]
    for _, n, c, k, bn in _conv_layouts(cfg):
        fan_in = c * k * k
        chunks.append(rng.normal(0.0, 0.01, n).astype("<f4").tobytes())
        if bn:
            chunks.append(rng.uniform(0.8, 1.2, n).astype("<f4").tobytes())
            chunks.append(rng.normal(0.0, 0.05, n).astype("<f4").tobytes())
            chunks.append(rng.uniform(0.8, 1.2, n).astype("<f4").tobytes())
        w = rng.normal(0.0, np.sqrt(1.0 / fan_in), n * fan_in)
        chunks.append(w.astype("<f4").tobytes())
    return b"".join(chunks)


def random_weights(cfg: NetworkConfig, seed: int = 0) -> ModelWeights:
    return read_weights(random_weights_bytes(cfg, seed), cfg)
