"""Differentiable image primitives in channel-last ``[N, H, W, C]`` layout."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, Tensor, concat, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class DegenerateBatchError(ValueError):
    """Raised when a batch is too small for the requested statistic."""


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded stride-1 convolution (cross-correlation).

    ``x`` is ``[N, H, W, Cin]`` and ``weight`` is ``[kH, kW, Cin, Cout]`` with
    odd kernel sides. Zero padding keeps the spatial size.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    kh, kw, cin, cout = weight.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d input has {c} channels, weight expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel sides must be odd")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    wd = weight.data
    out = np.zeros((n * h * w, cout), dtype=np.result_type(x.data, wd))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + h, j : j + w, :].reshape(-1, cin)
            out += patch @ wd[i, j]
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, cout)

    def _bw(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + h, j : j + w, :] += (g2 @ wd[i, j].T).reshape(n, h, w, cin)
            gx = gxp[:, ph : ph + h, pw : pw + w, :]
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, i : i + h, j : j + w, :].reshape(-1, cin)
                    gw[i, j] = patch.T @ g2
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, _bw)


class BatchNormState:
    """Running mean/variance for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: Optional[BatchNormState] = None,
    training: bool = True,
) -> Tensor:
    """Per-channel normalisation over N, H, W.

    In training mode batch statistics are used and ``state`` is updated with
    momentum 0.9; in eval mode the running statistics are used.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm scale/shift must have one entry per channel")
    axes = tuple(range(x.ndim - 1))
    count = x.size // c
    if training:
        if count < 2:
            raise DegenerateBatchError(f"batchnorm needs N*H*W >= 2 in train mode, got {count}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state is not None:
            unbiased = var * count / (count - 1)
            state.mean = (BN_MOMENTUM * state.mean + (1 - BN_MOMENTUM) * mu).astype(state.mean.dtype)
            state.var = (BN_MOMENTUM * state.var + (1 - BN_MOMENTUM) * unbiased).astype(state.var.dtype)
    else:
        if state is None:
            raise ValueError("eval-mode batchnorm needs running statistics")
        mu = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def _bw(g):
        gg = g.sum(axis=axes) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = (
                    inv_std
                    / count
                    * (count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
                )
            else:
                gx = gxhat * inv_std
        return gx, ggamma, gg

    return make_node(out, (x, gamma, beta), _bw)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling; ties route the gradient to the first element in row-major order."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(n, h, w, c),)

    return make_node(out, (x,), _bw)


def _upsample_matrix(size: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped (align_corners=False)
    out = np.zeros((2 * size, size), dtype=dtype)
    for o in range(2 * size):
        src = (o + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        out[o, min(max(lo, 0), size - 1)] += 1.0 - frac
        out[o, min(max(lo + 1, 0), size - 1)] += frac
    return out


def upsample_bilinear2x(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    uh = _upsample_matrix(h, x.dtype)
    uw = _upsample_matrix(w, x.dtype)
    out = np.einsum("oh,nhwc->nowc", uh, x.data)
    out = np.einsum("pw,nowc->nopc", uw, out)

    def _bw(g):
        gx = np.einsum("pw,nopc->nowc", uw, g)
        return (np.einsum("oh,nowc->nhwc", uh, gx),)

    return make_node(out, (x,), _bw)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    lead = xs[0].shape[:-1]
    for t in xs:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_channels: {t.shape[:-1]} != {lead}")
    return concat(xs, axis=-1)


def channel_softmax(x: Tensor, groups: int) -> Tensor:
    """Softmax over consecutive blocks of ``groups`` channels.

    Returns a tensor shaped ``[..., C, groups]``; each block sums to one.
    """
    total = x.shape[-1]
    if groups < 1 or total % groups:
        raise ShapeError(f"{total} channels cannot be split into groups of {groups}")
    z = x.data.reshape(x.shape[:-1] + (total // groups, groups))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        gz = s * (g - (g * s).sum(axis=-1, keepdims=True))
        return (gz.reshape(x.shape),)

    return make_node(s, (x,), _bw)


def sparse_matvec(kernel, alpha: Tensor) -> Tensor:
    """``K @ alpha`` for a sparse kernel; ``alpha`` may carry leading axes
    whose trailing flattened size equals the kernel dimension."""
    mat = kernel.to_scipy() if hasattr(kernel, "to_scipy") else sp.csr_matrix(kernel)
    n = mat.shape[1]
    trailing = [int(np.prod(alpha.shape[k:])) for k in range(alpha.ndim)]
    if n not in trailing:
        raise ShapeError(f"kernel dimension {n} does not match vector shape {alpha.shape}")
    flat = alpha.data.reshape(-1, n)
    out = (mat @ flat.T).T.astype(alpha.dtype, copy=False).reshape(alpha.shape)
    mat_t = mat.T.tocsr()

    def _bw(g):
        return ((mat_t @ g.reshape(-1, n).T).T.astype(g.dtype, copy=False).reshape(alpha.shape),)

    return make_node(out, (alpha,), _bw)


def _box_along(x: np.ndarray, axis: int, lo: int, hi: int) -> np.ndarray:
    size = x.shape[axis]
    csum = np.cumsum(x, axis=axis)
    zero = np.zeros_like(np.take(csum, [0], axis=axis))
    csum = np.concatenate([zero, csum], axis=axis)
    idx = np.arange(size)
    top = np.clip(idx + hi + 1, 0, size)
    bottom = np.clip(idx + lo, 0, size)
    bottom = np.minimum(bottom, top)
    return np.take(csum, top, axis=axis) - np.take(csum, bottom, axis=axis)


def box_sum(x: Tensor, lo: int, hi: int, axes: tuple[int, int] = (1, 2)) -> Tensor:
    """Sum of ``x`` over the window ``[i+lo, i+hi]`` on both spatial axes.

    Samples outside the grid are absent (contribute zero). The adjoint is the
    same operation with the window mirrored.
    """

    def _apply(a, l, u):
        for ax in axes:
            a = _box_along(a, ax, l, u)
        return a

    out = _apply(x.data, lo, hi)
    return make_node(out, (x,), lambda g: (_apply(g, -hi, -lo),))


def _shift_data(a: np.ndarray, dy: int, dx: int, axes=(1, 2)) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape[axes[0]], a.shape[axes[1]]
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    src[axes[0]] = slice(max(dy, 0), h + min(dy, 0))
    dst[axes[0]] = slice(max(-dy, 0), h + min(-dy, 0))
    src[axes[1]] = slice(max(dx, 0), w + min(dx, 0))
    dst[axes[1]] = slice(max(-dx, 0), w + min(-dx, 0))
    out[tuple(dst)] = a[tuple(src)]
    return out


def shift(x: Tensor, dy: int, dx: int, axes: tuple[int, int] = (1, 2)) -> Tensor:
    """``out[i, j] = x[i + dy, j + dx]`` with zeros outside the grid."""
    return make_node(
        _shift_data(x.data, dy, dx, axes),
        (x,),
        lambda g: (_shift_data(g, -dy, -dx, axes),),
    )


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes {pred.shape} and {target.shape}")
    diff = pred - target
    return (diff * diff).mean()
