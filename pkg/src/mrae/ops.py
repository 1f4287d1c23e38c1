"""Differentiable array ops used by the backbone, fusion and head networks.

All feature maps use (batch, channels, height, width) layout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, ShapeError, Tensor, as_tensor

COSINE_EPS = 1e-12


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) strided view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``weight`` plus per-channel ``bias``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: weight expects {wcin} input channels, input has {cin} (input {x.shape}, weight {weight.shape})")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, kh, kw, stride)
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Window maximum; gradient goes to the first maximal element in row-major order."""
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise ShapeError(f"max_pool2d: kernel {kernel} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if padding > kernel // 2:
        raise ShapeError(f"max_pool2d: padding {padding} exceeds half the kernel {kernel}")
    ho, wo = _out_extent(h, kernel, stride, padding), _out_extent(w, kernel, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = _windows(xp, kernel, kernel, stride).reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        rows = np.arange(ho)[:, None] * stride + arg // kernel
        cols = np.arange(wo)[None, :] * stride + arg % kernel
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        np.add.at(gxp, (ni, ci, rows, cols), g)
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

    return Tensor._from_op(out, (x,), backward, "max_pool2d")


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial maximum, (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_max_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, arg[..., None], g[..., None], axis=-1)
        return (gx.reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward, "global_max_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return Tensor._from_op(out, (x,), backward, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "linear")


def bilinear_matrix(size: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(factor*size, size) interpolation matrix, half-pixel centres, edge-clamped."""
    dst = np.arange(size * factor)
    src = np.maximum((dst + 0.5) / factor - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    lam = src - i0
    m = np.zeros((size * factor, size), dtype=dtype)
    np.add.at(m, (dst, i0), 1.0 - lam)
    np.add.at(m, (dst, i1), lam)
    return m


def upsample(x: Tensor, factor: int, mode: str = "bilinear") -> Tensor:
    if factor not in (2, 4):
        raise ValueError(f"upsample: unsupported factor {factor} (expected 2 or 4)")
    if x.ndim != 4:
        raise ShapeError(f"upsample expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

        def backward(g):
            return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    elif mode == "bilinear":
        rh = bilinear_matrix(h, factor, x.dtype)
        rw = bilinear_matrix(w, factor, x.dtype)
        out = np.matmul(np.matmul(rh, x.data), rw.T)

        def backward(g):
            return (np.matmul(np.matmul(rh.T, g), rw),)

    else:
        raise ValueError(f"upsample: unknown mode {mode!r}")
    return Tensor._from_op(out, (x,), backward, f"upsample_{mode}")


def softmax(logits: Tensor) -> Tensor:
    """Softmax over a 1-d vector with max subtraction."""
    logits = as_tensor(logits)
    if logits.ndim != 1 or logits.size < 1:
        raise ShapeError(f"softmax expects a non-empty 1-d tensor, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("softmax: non-finite logits")
    e = np.exp(logits.data - logits.data.max())
    s = e / e.sum()

    def backward(g):
        return (s * (g - np.dot(g, s)),)

    return Tensor._from_op(s, (logits,), backward, "softmax")


def cosine_similarity(u: Tensor, v: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine of the angle between two vectors; 0 if either norm is below ``eps``."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: lengths differ or not vectors ({u.shape} vs {v.shape})")
    nu, nv = np.linalg.norm(u.data), np.linalg.norm(v.data)
    if nu < eps or nv < eps:
        zero = np.zeros((), dtype=u.dtype)
        return Tensor._from_op(zero, (u, v), lambda g: (None, None), "cosine_similarity")
    cos = np.dot(u.data, v.data) / (nu * nv)
    cos = np.clip(cos, -1.0, 1.0)

    def backward(g):
        gu = (v.data / (nu * nv) - cos * u.data / (nu * nu)) * g
        gv = (u.data / (nu * nv) - cos * v.data / (nv * nv)) * g
        return gu, gv

    return Tensor._from_op(np.asarray(cos, dtype=u.dtype), (u, v), backward, "cosine_similarity")
