"""Tensor kernels and the network forward pass.

Tensors are C-contiguous float32 numpy arrays shaped (channels, height,
width), i.e. Darknet's channel-major layout, so weight blocks from
:mod:`breathcheck.weights` apply without permutation.

Convolution has two interchangeable implementations:

``reference``
    the literal six-deep loop nest, compiled with numba;
``optimized``
    im2col lowering into a reusable scratch patch matrix, tiled over output
    rows so each tile's patch matrix stays cache-sized, followed by an sgemm
    per tile.  Output filters may be split across threads; a single dot
    product is never split, so results do not depend on the thread count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .cfg import (
    NetworkConfig,
    compute_output_shapes,
    conv_padding,
    input_shapes,
    maxpool_padding,
    resolve_refs,
)
from .errors import ChannelMismatch, InputShapeMismatch, SpatialMismatch, TensorShapeMismatch
from .weights import ModelWeights

LEAKY_SLOPE = np.float32(0.1)
# floats per patch-matrix tile; 2M floats = 8 MiB
TILE_FLOATS = 1 << 21


def as_tensor(x) -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=np.float32)
    if t.ndim != 3 or min(t.shape) < 1:
        raise TensorShapeMismatch(f"expected a (c, h, w) tensor with positive dims, got {t.shape}")
    return t


def conv_output_size(h: int, w: int, size: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - size) // stride + 1, (w + 2 * pad - size) // stride + 1


# -------------------------------------------------------------- workspace


@dataclass
class Workspace:
    """Per-execution scratch state; one per concurrent forward call."""

    buffer: np.ndarray = field(default_factory=lambda: np.empty(0, np.float32))
    allocations: int = 0
    threads: int = 1
    _pool: ThreadPoolExecutor | None = field(default=None, repr=False)

    @classmethod
    def for_config(cls, cfg: NetworkConfig, threads: int = 1) -> "Workspace":
        ws = cls(threads=threads)
        ws.reserve(scratch_floats(cfg))
        return ws

    def reserve(self, floats: int) -> None:
        if floats > self.buffer.size:
            self.buffer = np.empty(floats, np.float32)
            self.allocations += 1

    def view(self, *shape: int) -> np.ndarray:
        need = int(np.prod(shape))
        self.reserve(need)
        return self.buffer[:need].reshape(shape)

    def pool(self) -> ThreadPoolExecutor | None:
        if self.threads <= 1:
            return None
        if self._pool is None:
            self._pool = ThreadPoolExecutor(self.threads)
        return self._pool

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def _tile_rows(ckk: int, oh: int, ow: int) -> int:
    return max(1, min(oh, TILE_FLOATS // max(1, ckk * ow)))


def scratch_floats(cfg: NetworkConfig) -> int:
    """Scratch size covering every layer's patch tile and elementwise temp."""
    need = 0
    for layer, (c, h, w), (oc, oh, ow) in zip(cfg.layers, input_shapes(cfg), compute_output_shapes(cfg)):
        if layer.kind == "convolutional":
            k = layer.get_int("size", 1)
            ckk = c * k * k
            need = max(need, ckk * _tile_rows(ckk, oh, ow) * ow, oc * oh * ow)
    return need


# ------------------------------------------------------------ convolution


@numba.njit(cache=True)
def _conv_loops(x, w, b, stride, pad, out):
    c_in, h, wd = x.shape
    n, _, k, _ = w.shape
    _, oh, ow = out.shape
    for f in range(n):
        for oy in range(oh):
            for ox in range(ow):
                acc = np.float32(0.0)
                for c in range(c_in):
                    for ky in range(k):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= wd:
                                continue
                            acc += x[c, iy, ix] * w[f, c, ky, kx]
                out[f, oy, ox] = acc + b[f]


def _check_conv(x, weight, stride, pad):
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise TensorShapeMismatch(f"weight block must be (n, c, k, k), got {weight.shape}")
    if weight.shape[1] != x.shape[0]:
        raise ChannelMismatch(f"weights expect {weight.shape[1]} channels, input has {x.shape[0]}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    oh, ow = conv_output_size(x.shape[1], x.shape[2], weight.shape[2], stride, pad)
    if oh <= 0 or ow <= 0:
        raise TensorShapeMismatch(f"convolution output {oh}x{ow} is empty")
    return oh, ow


def convolve_reference(x, weight, bias, stride: int = 1, pad: int = 0) -> np.ndarray:
    x = as_tensor(x)
    weight = np.ascontiguousarray(weight, dtype=np.float32)
    bias = np.ascontiguousarray(bias, dtype=np.float32)
    oh, ow = _check_conv(x, weight, stride, pad)
    out = np.empty((weight.shape[0], oh, ow), np.float32)
    _conv_loops(x, weight, bias, stride, pad, out)
    return out


def _im2col_rows(x, cols, k, stride, pad, y0, y1, ow):
    """Fill ``cols`` (c, k, k, y1-y0, ow) with the patches for output rows y0..y1."""
    _, h, w = x.shape
    for ky in range(k):
        # output row y reads input row y*stride + ky - pad
        lo = max(y0, -((ky - pad) // stride))
        hi = min(y1, (h - 1 - ky + pad) // stride + 1)
        hi = max(hi, lo)
        for kx in range(k):
            xlo = max(0, -((kx - pad) // stride))
            xhi = max(xlo, min(ow, (w - 1 - kx + pad) // stride + 1))
            dst = cols[:, ky, kx]
            if lo > y0:
                dst[:, : lo - y0] = 0
            if hi < y1:
                dst[:, hi - y0:] = 0
            if xlo > 0:
                dst[:, :, :xlo] = 0
            if xhi < ow:
                dst[:, :, xhi:] = 0
            if hi > lo and xhi > xlo:
                r0 = lo * stride + ky - pad
                c0 = xlo * stride + kx - pad
                dst[:, lo - y0:hi - y0, xlo:xhi] = x[
                    :, r0:r0 + (hi - lo - 1) * stride + 1:stride, c0:c0 + (xhi - xlo - 1) * stride + 1:stride
                ]


def _gemm(wmat, cols, out, pool, threads):
    n = wmat.shape[0]
    if pool is None or n < 2 * threads:
        np.matmul(wmat, cols, out=out)
        return
    step = -(-n // threads)
    jobs = [
        pool.submit(np.matmul, wmat[f0:f0 + step], cols, out=out[f0:f0 + step])
        for f0 in range(0, n, step)
    ]
    for job in jobs:
        job.result()


def convolve_optimized(x, weight, bias, stride: int = 1, pad: int = 0, workspace: Workspace | None = None):
    x = as_tensor(x)
    weight = np.ascontiguousarray(weight, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    oh, ow = _check_conv(x, weight, stride, pad)
    ws = workspace or Workspace()
    n, c, k, _ = weight.shape
    ckk = c * k * k
    wmat = weight.reshape(n, ckk)
    out = np.empty((n, oh * ow), np.float32)
    pool = ws.pool()
    if k == 1 and stride == 1 and pad == 0:
        _gemm(wmat, x.reshape(c, -1), out, pool, ws.threads)
    else:
        rows = _tile_rows(ckk, oh, ow)
        for y0 in range(0, oh, rows):
            y1 = min(oh, y0 + rows)
            cols = ws.view(c, k, k, y1 - y0, ow)
            _im2col_rows(x, cols, k, stride, pad, y0, y1, ow)
            _gemm(wmat, cols.reshape(ckk, -1), out[:, y0 * ow:y1 * ow], pool, ws.threads)
    out += bias[:, None]
    return out.reshape(n, oh, ow)


def convolve(x, weight, bias, stride: int = 1, pad: int = 0, *, impl: str = "optimized",
             workspace: Workspace | None = None) -> np.ndarray:
    """Cross-correlation plus per-filter bias with zero padding."""
    if impl == "reference":
        return convolve_reference(x, weight, bias, stride, pad)
    if impl == "optimized":
        return convolve_optimized(x, weight, bias, stride, pad, workspace)
    raise ValueError(f"unknown convolution implementation {impl!r}")


# ----------------------------------------------------------- elementwise


def leaky_relu(x, out: np.ndarray | None = None, scratch: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if out is None:
        return np.maximum(x, x * LEAKY_SLOPE)
    tmp = scratch if scratch is not None else np.empty_like(x)
    np.multiply(x, LEAKY_SLOPE, out=tmp)
    np.maximum(x, tmp, out=out)
    return out


def maxpool(x, size: int, stride: int, padding: int | None = None) -> np.ndarray:
    """Darknet max pooling.

    ``padding`` defaults to ``size - 1``; windows start at ``-(padding // 2)``
    and out-of-range entries count as -inf, so size=2/stride=1 keeps H x W.
    """
    x = as_tensor(x)
    if size < 1 or stride < 1:
        raise ValueError("size and stride must be >= 1")
    if padding is None:
        padding = size - 1
    c, h, w = x.shape
    oh = (h + padding - size) // stride + 1
    ow = (w + padding - size) // stride + 1
    offset = -(padding // 2)
    out = np.full((c, oh, ow), -np.inf, np.float32)
    for ky in range(size):
        lo = max(0, -((ky + offset) // stride))
        hi = max(lo, min(oh, (h - 1 - ky - offset) // stride + 1))
        for kx in range(size):
            xlo = max(0, -((kx + offset) // stride))
            xhi = max(xlo, min(ow, (w - 1 - kx - offset) // stride + 1))
            if hi <= lo or xhi <= xlo:
                continue
            r0 = lo * stride + ky + offset
            c0 = xlo * stride + kx + offset
            src = x[:, r0:r0 + (hi - lo - 1) * stride + 1:stride, c0:c0 + (xhi - xlo - 1) * stride + 1:stride]
            dst = out[:, lo:hi, xlo:xhi]
            np.maximum(dst, src, out=dst)
    return out


def upsample(x, stride: int) -> np.ndarray:
    x = as_tensor(x)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    c, h, w = x.shape
    out = np.empty((c, h * stride, w * stride), np.float32)
    out.reshape(c, h, stride, w, stride)[...] = x[:, :, None, :, None]
    return out


def route(inputs) -> np.ndarray:
    tensors = [as_tensor(t) for t in inputs]
    if not tensors:
        raise ValueError("route needs at least one input")
    hw = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != hw:
            raise SpatialMismatch(f"route inputs disagree spatially: {hw} vs {t.shape[1:]}")
    if len(tensors) == 1:
        return tensors[0]
    return np.concatenate(tensors, axis=0)


def shortcut(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise TensorShapeMismatch(f"shortcut shapes differ: {a.shape} vs {b.shape}")
    return a + b


# -------------------------------------------------------------- forward


@dataclass
class LayerTiming:
    index: int
    kind: str
    seconds: float


@dataclass
class ForwardStats:
    """Optional instrumentation filled by :func:`forward`."""

    timings: list[LayerTiming] = field(default_factory=list)
    # activations retained after each layer (input and returned heads excluded)
    live_after: list[int] = field(default_factory=list)
    # largest bytes held at once: input, live activations, heads so far
    peak_live_bytes: int = 0

    @property
    def total_seconds(self) -> float:
        return sum(t.seconds for t in self.timings)


def last_uses(cfg: NetworkConfig) -> list[int]:
    """For each layer, the index of the last layer that reads its output.

    Layers nobody reads (yolo heads, which are returned instead) map to
    their own index.
    """
    last = list(range(len(cfg.layers)))
    for i in range(len(cfg.layers)):
        for ref in resolve_refs(cfg, i):
            last[ref] = max(last[ref], i)
    return last


def _activate(out: np.ndarray, activation: str, ws: Workspace) -> np.ndarray:
    if activation == "leaky":
        return leaky_relu(out, out=out, scratch=ws.view(*out.shape))
    if activation == "linear":
        return out
    if activation == "relu":
        np.maximum(out, 0, out=out)
        return out
    if activation == "logistic":
        np.negative(out, out=out)
        np.exp(out, out=out)
        out += 1
        np.reciprocal(out, out=out)
        return out
    raise ValueError(f"unsupported activation {activation!r}")


def forward(cfg: NetworkConfig, weights: ModelWeights, x, *, workspace: Workspace | None = None,
            impl: str = "optimized", stats: ForwardStats | None = None) -> list[np.ndarray]:
    """Run the network on one (c, h, w) input; return each yolo layer's input map."""
    x = as_tensor(x)
    if x.shape != cfg.input_shape:
        raise InputShapeMismatch(f"network expects {cfg.input_shape}, got {x.shape}")
    ws = workspace or Workspace.for_config(cfg)
    last = last_uses(cfg)
    live: dict[int, np.ndarray] = {}
    heads: list[np.ndarray] = []
    prev = x
    clock = time.perf_counter
    for i, layer in enumerate(cfg.layers):
        t0 = clock()
        kind = layer.kind
        if kind == "convolutional":
            cw = weights[i]
            out = convolve(prev, cw.weight, cw.bias, layer.get_int("stride", 1), conv_padding(layer),
                           impl=impl, workspace=ws)
            out = _activate(out, layer.activation, ws)
        elif kind == "maxpool":
            size = layer.get_int("size", 1)
            out = maxpool(prev, size, layer.get_int("stride", 1), maxpool_padding(layer))
        elif kind == "upsample":
            out = upsample(prev, layer.get_int("stride", 2))
        elif kind == "route":
            out = route([live[r] for r in resolve_refs(cfg, i)])
        elif kind == "shortcut":
            primary, other = resolve_refs(cfg, i)
            out = _activate(shortcut(live[primary], live[other]), layer.activation, ws)
        elif kind == "yolo":
            out = prev
            heads.append(out)
        else:  # pragma: no cover - rejected by the parser
            raise ValueError(kind)
        live[i] = out
        if stats is not None:
            held = {id(a): a.nbytes for a in [x, *live.values(), *heads]}
            stats.peak_live_bytes = max(stats.peak_live_bytes, sum(held.values()))
        for j in [j for j in live if last[j] <= i]:
            del live[j]
        prev = out
        if stats is not None:
            stats.timings.append(LayerTiming(i, kind, clock() - t0))
            stats.live_after.append(len(live))
    return heads
