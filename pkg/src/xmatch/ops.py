"""Convolution, pooling and normalization primitives on NHWC tensors."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError
from .tensor import Tensor, make_node


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return int(a), int(b)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """View of shape (N, Ho, Wo, kh, kw, C) over a padded NHWC array."""
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, shape=(n, ho, wo, kh, kw, c), strides=(s0, s1 * sh, s2 * sw, s1, s2, s3), writeable=False)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        from .tensor import reshape
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected an HxWxC or NxHxWxC tensor, got shape {x.shape}")
    return x, False


def _unbatch(out: Tensor, squeezed: bool) -> Tensor:
    if squeezed:
        from .tensor import reshape
        return reshape(out, out.shape[1:])
    return out


def conv2d(x: Tensor, kernel: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is NxHxWxC_in (or HxWxC_in), ``kernel`` is kh x kw x C_in x C_out.
    """
    x, squeezed = _batched(x)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be kh x kw x C_in x C_out, got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    n, h, w, c = x.shape
    if c != cin:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {cin}")
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
    if ho <= 0 or wo <= 0 or kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(f"conv2d: non-positive output extent for input {h}x{w}, kernel {kh}x{kw}")

    xd, kd = x.data, kernel.data
    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        xs = xd[:, ::sh, ::sw, :][:, :ho, :wo, :]
        cols = xs.reshape(-1, cin)
    else:
        xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else xd
        cols = _windows(np.ascontiguousarray(xp), kh, kw, sh, sw, ho, wo).reshape(-1, kh * kw * cin)
    kmat = kd.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kd.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, h + 2 * ph, w + 2 * pw, cin), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, ph:ph + h, pw:pw + w, :]
        return gx, gk

    return _unbatch(make_node(out, (x, kernel), backward, "conv2d"), squeezed)


def max_pool2d(x: Tensor, kernel=(3, 3), stride=(2, 2), padding=(1, 1)) -> Tensor:
    """Windowed max; padded cells never win. Gradient goes to the first maximum."""
    x, squeezed = _batched(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, h, w, c = x.shape
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"max_pool2d: non-positive output extent for input {h}x{w}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)), constant_values=-np.inf)
    win = _windows(xp, kh, kw, sh, sw, ho, wo).reshape(n, ho, wo, kh * kw, c)
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                hit = arg == (i * kw + j)
                gxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += np.where(hit, g, 0)
        return (gxp[:, ph:ph + h, pw:pw + w, :],)

    return _unbatch(make_node(out, (x,), backward, "max_pool2d"), squeezed)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel max over all spatial positions: NxHxWxC -> NxC (HxWxC -> C).

    Ties go to the first position in row-major order.
    """
    x, squeezed = _batched(x)
    n, h, w, c = x.shape
    if h < 1 or w < 1:
        raise DimensionError("global_max_pool: empty spatial extent")
    flat = x.data.reshape(n, h * w, c)
    arg = flat.argmax(axis=1)
    out = np.take_along_axis(flat, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[:, None, :], g[:, None, :], axis=1)
        return (gf.reshape(n, h, w, c),)

    node = make_node(out, (x,), backward, "global_max_pool")
    if squeezed:
        from .tensor import reshape
        return reshape(node, (c,))
    return node


def global_avg_pool(x: Tensor) -> Tensor:
    x, squeezed = _batched(x)
    n, h, w, c = x.shape
    if h < 1 or w < 1:
        raise DimensionError("global_avg_pool: empty spatial extent")
    out = x.data.reshape(n, h * w, c).mean(axis=1)
    scale = np.asarray(1.0 / (h * w), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, None, None, :], (n, h, w, c)).copy(),)

    node = make_node(out, (x,), backward, "global_avg_pool")
    if squeezed:
        from .tensor import reshape
        return reshape(node, (c,))
    return node


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis but the last.

    In training mode batch statistics are used and the running buffers are
    updated in place.
    """
    xd = x.data
    c = xd.shape[-1]
    axes = tuple(range(xd.ndim - 1))
    if training:
        m = xd.size // c
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu) * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            if training:
                m = xd.size // c
                gx = inv / m * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = gxhat * inv
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), backward, "batch_norm")
