"""Convolution, transposed convolution, padding and instance normalization.

All kernels use an im2col layout so the heavy lifting is a single GEMM; the
scatter back (col2im) loops over kernel offsets in a fixed order, which keeps
results bit-reproducible when BLAS runs single-threaded.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, NonFiniteError, Tensor, make_result


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N*Ho*Wo, C*kh*kw)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, out_shape: tuple, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add (N*Ho*Wo, C*kh*kw) into ``out_shape``."""
    n, c = out_shape[:2]
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(out_shape, dtype=DTYPE)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, :, i, j]
    return out


def _zero_pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``weight[K,C,kh,kw]``, zero padding."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"bias shape {bias.shape} does not match {k} output channels")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("non-finite values in conv2d input")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = _zero_pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(k, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _col2im(g2 @ wmat, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0, output_padding=0) -> Tensor:
    """Fractionally-strided convolution, ``weight[C_in, K_out, kh, kw]``.

    The forward map is the input-gradient operator of :func:`conv2d` with the
    same weight; output size is ``(H-1)*stride - 2*padding + kh + output_padding``.
    ``output_padding`` is an int or a per-axis ``(rows, cols)`` pair.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cw, k, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv_transpose2d channel mismatch: input has {c}, weight expects {cw}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    oph, opw = (output_padding, output_padding) if np.isscalar(output_padding) else output_padding
    if not (0 <= oph < stride and 0 <= opw < stride):
        raise ValueError("output_padding must satisfy 0 <= output_padding < stride")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"bias shape {bias.shape} does not match {k} output channels")

    ho = (h - 1) * stride - 2 * padding + kh + oph
    wo = (w - 1) * stride - 2 * padding + kw + opw
    if ho < 1 or wo < 1:
        raise ValueError("conv_transpose2d output would be empty")
    full_shape = (n, k, (h - 1) * stride + kh + oph, (w - 1) * stride + kw + opw)
    wmat = weight.data.reshape(c, -1)
    xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    full = _col2im(xmat @ wmat, full_shape, kh, kw, stride, h, w)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros(full_shape, dtype=DTYPE)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        cols = _im2col(gfull, kh, kw, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((cols @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (xmat.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def pad2d(x: Tensor, p: int, mode: str = "zeros") -> Tensor:
    """Pad the two spatial axes by ``p`` on every side ("zeros" or "reflect")."""
    if p == 0:
        return x
    h, w = x.shape[2:]
    if mode == "zeros":
        out = _zero_pad(x.data, p)
    elif mode == "reflect":
        if p >= h or p >= w:
            raise ValueError(f"reflect padding {p} needs spatial dims > {p}, got {h}x{w}")
        out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
    else:
        raise ValueError(f"unknown padding mode {mode!r}")

    def backward(g):
        g = g.copy()
        if mode == "reflect":
            for k in range(1, p + 1):
                g[:, :, p + k, :] += g[:, :, p - k, :]
                g[:, :, p + h - 1 - k, :] += g[:, :, p + h - 1 + k, :]
            for k in range(1, p + 1):
                g[:, :, :, p + k] += g[:, :, :, p - k]
                g[:, :, :, p + w - 1 - k] += g[:, :, :, p + w - 1 + k]
        return (np.ascontiguousarray(g[:, :, p:p + h, p:p + w]),)

    return make_result(out, (x,), backward)


def instance_norm(x: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Standardize every (sample, channel) plane: ``(x - mean) / sqrt(var + eps)``."""
    if x.data.ndim != 4:
        raise ValueError(f"instance_norm expects [N,C,H,W], got {x.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = (1.0 / np.sqrt(var + DTYPE(epsilon))).astype(DTYPE)
    xhat = centered * inv_std

    def backward(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv_std * (g - gm - xhat * gxm),)

    return make_result(xhat, (x,), backward)
