"""3D convolution primitives: dense, sparse, pooling, upsampling.

All spatiotemporal activations are rank-4 float64 arrays laid out as
[channels, time, height, width].  Convolutions use odd kernel extents
with same-padding and stride 1, computed as cross-correlations (no
kernel flip), so a unit impulse reproduces the reversed kernel
footprint around its position.

The dense path lowers to a single BLAS matmul per call via an im2col
buffer filled slab-by-slab (one contiguous copy per kernel offset),
which is considerably faster here than strided transposes.  The input
gradient is itself a convolution of the output gradient with the
channel-swapped, index-reversed kernel, so it reuses the same core.
Padded inputs and im2col buffers are recycled through a small pool:
they are hot-loop temporaries, and letting them die young costs more
in page faults than the pool costs in memory.

The sparse path gathers coordinates of nonzero input sites and
scatters their contributions per kernel offset; within one offset all
targets are distinct, so fancy-index accumulation is collision-free.
Cost scales with the number of active sites, so it only pays off when
few sites are active; above a density threshold the call dispatches
to the dense core, which computes the identical result.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, _accumulate, _node, grad_enabled

# density above which the gather/scatter path loses to one BLAS call
_SPARSE_DENSITY_CUTOFF = 0.05

# recycled scratch buffers, keyed by shape; capped so pathological
# shape churn cannot hoard memory
_POOL: dict[tuple, list[np.ndarray]] = {}
_POOL_BYTES_MAX = 512 * 1024 * 1024
_pool_bytes = 0


def _take(shape: tuple) -> np.ndarray:
    global _pool_bytes
    stack = _POOL.get(shape)
    if stack:
        arr = stack.pop()
        _pool_bytes -= arr.nbytes
        return arr
    return np.empty(shape)


def _give(arr: np.ndarray) -> None:
    global _pool_bytes
    if _pool_bytes + arr.nbytes > _POOL_BYTES_MAX:
        return
    _POOL.setdefault(arr.shape, []).append(arr)
    _pool_bytes += arr.nbytes


@dataclass
class ConvKernel3D:
    """Weights [c_out, c_in, kt, kh, kw] with optional bias [c_out]."""

    weights: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        w = self.weights.data
        if w.ndim != 5:
            raise DimensionError(f"kernel weights must be rank 5, got shape {w.shape}")
        if any(k % 2 == 0 for k in w.shape[2:]):
            raise DimensionError(f"kernel extents must be odd, got shape {w.shape}")
        if self.bias is not None and self.bias.data.shape != (w.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.data.shape} does not match c_out={w.shape[0]}"
            )

    @property
    def c_out(self) -> int:
        return self.weights.data.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.data.shape[1]


def _check_activation(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise DimensionError(f"{op}: expected rank-4 [c,t,h,w] input, got shape {x.data.shape}")


def _conv_core(xd: np.ndarray, wd: np.ndarray, bd, keep_cols: bool):
    """Cross-correlation with same padding; optionally returns the im2col buffer.

    A returned buffer belongs to the caller, who should hand it back
    via ``_give`` once the weight gradient has consumed it.
    """
    c_out, c_in, kt, kh, kw = wd.shape
    _, t, h, w = xd.shape
    xp = _take((c_in, t + kt - 1, h + kh - 1, w + kw - 1))
    xp.fill(0.0)
    xp[:, kt // 2 : kt // 2 + t, kh // 2 : kh // 2 + h, kw // 2 : kw // 2 + w] = xd

    cols = _take((kt * kh * kw * c_in, t * h * w))
    view = cols.reshape(kt * kh * kw, c_in, t, h, w)
    j = 0
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                view[j] = xp[:, a : a + t, b : b + h, d : d + w]
                j += 1
    _give(xp)

    w2 = wd.transpose(0, 2, 3, 4, 1).reshape(c_out, -1)
    out = w2 @ cols
    if bd is not None:
        out += bd[:, None]
    if not keep_cols:
        _give(cols)
        cols = None
    return out.reshape(c_out, t, h, w), cols


def _swap_flip(wd: np.ndarray) -> np.ndarray:
    # kernel for the input gradient: swap in/out channels, reverse taps
    return wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)


def _dense_node(x: Tensor, kernel: ConvKernel3D) -> Tensor:
    w, b = kernel.weights, kernel.bias
    c_out, c_in, kt, kh, kw = w.data.shape
    need_w = grad_enabled() and w.requires_grad
    out_data, cols = _conv_core(x.data, w.data, None if b is None else b.data, keep_cols=need_w)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(out):
        g2 = out.grad.reshape(c_out, -1)
        if b is not None and b.requires_grad:
            _accumulate(b, out.grad.sum(axis=(1, 2, 3)))
        if w.requires_grad:
            dw = (g2 @ cols.T).reshape(c_out, kt, kh, kw, c_in).transpose(0, 4, 1, 2, 3)
            _accumulate(w, np.ascontiguousarray(dw))
            _give(cols)
        if x.requires_grad:
            dx, _ = _conv_core(out.grad, _swap_flip(w.data), None, False)
            _accumulate(x, dx)

    return _node(out_data, parents, bwd)


def conv3d(x: Tensor, kernel: ConvKernel3D) -> Tensor:
    """Dense 3D convolution of ``x`` [c_in,t,h,w] -> [c_out,t,h,w]."""
    _check_activation(x, "conv3d")
    c_in = kernel.c_in
    if x.data.shape[0] != c_in:
        raise DimensionError(
            f"conv3d: input shape {x.data.shape} has {x.data.shape[0]} channels, "
            f"kernel {kernel.weights.data.shape} expects {c_in}"
        )
    return _dense_node(x, kernel)


def sparse_conv3d(x: Tensor, kernel: ConvKernel3D) -> Tensor:
    """Convolution that touches only nonzero input sites.

    Matches ``conv3d`` output exactly for any input (zero sites
    contribute nothing regardless of the kernel), so results carry no
    density-dependent error.  The kernel must be bias-free: this op
    serves accumulation paths that rely on linearity.  Inputs too
    dense to profit are dispatched to the dense core unchanged.
    """
    _check_activation(x, "sparse_conv3d")
    if kernel.bias is not None:
        raise ContractError("sparse_conv3d requires a bias-free kernel")
    w = kernel.weights
    c_out, c_in, kt, kh, kw = w.data.shape
    if x.data.shape[0] != c_in:
        raise DimensionError(
            f"sparse_conv3d: input shape {x.data.shape} has {x.data.shape[0]} channels, "
            f"kernel {w.data.shape} expects {c_in}"
        )
    _, t, h, wd_ = x.data.shape

    ts, ys, xs = np.nonzero(np.any(x.data != 0.0, axis=0))
    if ts.size > _SPARSE_DENSITY_CUTOFF * (t * h * wd_):
        return _dense_node(x, kernel)
    vals = x.data[:, ts, ys, xs]  # [c_in, sites]

    out_data = np.zeros((c_out, t, h, wd_))
    if ts.size:
        for a in range(kt):
            for bb in range(kh):
                for d in range(kw):
                    tt = ts + (kt // 2 - a)
                    yy = ys + (kh // 2 - bb)
                    xx = xs + (kw // 2 - d)
                    m = (
                        (tt >= 0) & (tt < t)
                        & (yy >= 0) & (yy < h)
                        & (xx >= 0) & (xx < wd_)
                    )
                    contrib = w.data[:, :, a, bb, d] @ vals[:, m]
                    out_data[:, tt[m], yy[m], xx[m]] += contrib

    def bwd(out):
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            if ts.size:
                for a in range(kt):
                    for bb in range(kh):
                        for d in range(kw):
                            tt = ts + (kt // 2 - a)
                            yy = ys + (kh // 2 - bb)
                            xx = xs + (kw // 2 - d)
                            m = (
                                (tt >= 0) & (tt < t)
                                & (yy >= 0) & (yy < h)
                                & (xx >= 0) & (xx < wd_)
                            )
                            dw[:, :, a, bb, d] = out.grad[:, tt[m], yy[m], xx[m]] @ vals[:, m].T
            _accumulate(w, dw)
        if x.requires_grad:
            # every input site influences the output, active or not
            dx, _ = _conv_core(out.grad, _swap_flip(w.data), None, False)
            _accumulate(x, dx)

    return _node(out_data, (x, w), bwd)


def maxpool_spatial(x: Tensor, factor: int = 2) -> Tensor:
    """2x2 spatial max pooling; gradient routes to the first maximal
    element of each block in row-major scan order."""
    _check_activation(x, "maxpool_spatial")
    if factor != 2:
        raise ContractError(f"maxpool_spatial supports factor 2 only, got {factor}")
    c, t, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool_spatial: spatial dims of {x.data.shape} must be even")
    hh, wh = h // 2, w // 2
    blocks = np.ascontiguousarray(
        x.data.reshape(c, t, hh, 2, wh, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(c, t, hh, wh, 4)

    need_grad = grad_enabled() and x.requires_grad
    if need_grad:
        idx = blocks.argmax(axis=-1)
        out_data = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    else:
        out_data = blocks.max(axis=-1)

    def bwd(out):
        if x.requires_grad:
            g4 = np.zeros((c, t, hh, wh, 4))
            np.put_along_axis(g4, idx[..., None], out.grad[..., None], axis=-1)
            dx = g4.reshape(c, t, hh, wh, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(c, t, h, w)
            _accumulate(x, np.ascontiguousarray(dx))

    return _node(out_data, (x,), bwd)


def upsample_spatial(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour 2x upsample in height and width."""
    _check_activation(x, "upsample_spatial")
    if factor != 2:
        raise ContractError(f"upsample_spatial supports factor 2 only, got {factor}")
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(out):
        if x.requires_grad:
            c, t, h, w = x.data.shape
            dx = out.grad.reshape(c, t, h, 2, w, 2).sum(axis=(3, 5))
            _accumulate(x, dx)

    return _node(out_data, (x,), bwd)
