"""Differentiable operators on ``(batch, channels, height, width)`` tensors.

Convolutions are cross-correlations (the deep-learning convention): output
``p`` gathers ``input[p*stride - padding + t*dilation] * kernel[t]``. A true
convolution is the same operator with the kernel flipped.

All reductions use a fixed order, so results are reproducible run to run.
"""
from __future__ import annotations

import numpy as np

from .core import Tensor, as_tensor, make_result


def _pair_check(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- im2col machinery ----------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def transpose_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            cols[:, :, i, j] = xp[:, :, y0:y0 + hspan:stride, x0:x0 + wspan:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols, c, kh, kw, stride, dilation, ho, wo, hp, wp):
    n = cols.shape[0]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            out[:, :, y0:y0 + hspan:stride, x0:x0 + wspan:stride] += cols[:, :, i, j]
    return out


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x, p):
    if p == 0:
        return x
    return x[:, :, p:x.shape[2] - p, p:x.shape[3] - p]


def conv2d(input, kernel, bias=None, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Dilated, strided 2-D cross-correlation.

    ``input`` is ``(N, C, H, W)``, ``kernel`` is ``(O, C, kh, kw)``, ``bias``
    is ``(O,)`` or None.
    """
    x, w = as_tensor(input), as_tensor(kernel)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} dilation={dilation} padding={padding}")
    b = as_tensor(bias) if bias is not None else None
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(wd, kw, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {x.shape} too small for kernel {w.shape} with dilation {dilation}")

    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    w2 = w.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def grad(g, needs):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if needs[0]:
            dcols = np.matmul(w2.T, g2)
            gx = _unpad(_col2im(dcols, c, kh, kw, stride, dilation, ho, wo, *xp.shape[2:]), padding)
        if needs[1]:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is not None and needs[2]:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_result(out, inputs, grad, "conv2d")


def conv2d_transpose(input, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (the input-gradient of :func:`conv2d`).

    ``kernel`` is ``(C_in, C_out, kh, kw)``; the output spatial size is
    ``(in - 1) * stride - 2 * padding + k``.
    """
    x, w = as_tensor(input), as_tensor(kernel)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv2d_transpose: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d_transpose: invalid stride={stride} padding={padding}")
    b = as_tensor(bias) if bias is not None else None
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"conv2d_transpose: bias {b.shape} does not match kernel {w.shape}")
    n, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    hf = transpose_output_size(h, kh, stride, 0)
    wf = transpose_output_size(wd, kw, stride, 0)
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise ValueError(f"conv2d_transpose: padding {padding} too large for output {hf}x{wf}")

    x2 = x.data.reshape(n, ci, h * wd)
    w2 = w.data.reshape(ci, co * kh * kw)
    cols = np.matmul(w2.T, x2)
    out = _unpad(_col2im(cols, co, kh, kw, stride, 1, h, wd, hf, wf), padding)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def grad(g, needs):
        gcols = _im2col(_pad(g, padding), kh, kw, stride, 1, h, wd)
        gx = gw = gb = None
        if needs[0]:
            gx = np.matmul(w2, gcols).reshape(x.shape)
        if needs[1]:
            gw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_result(out, inputs, grad, "conv2d_transpose")


def prelu(input, slope) -> Tensor:
    """Per-channel parametric ReLU: ``x`` if ``x >= 0`` else ``slope[c] * x``."""
    x, a = as_tensor(input), as_tensor(slope)
    if a.ndim != 1 or x.ndim < 2 or a.shape[0] != x.shape[1]:
        raise ValueError(f"prelu: slope {a.shape} does not match channels of {x.shape}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    av = a.data.reshape(bshape)
    pos = x.data >= 0
    out = np.where(pos, x.data, av * x.data)

    def grad(g, needs):
        gx = np.where(pos, g, av * g) if needs[0] else None
        ga = None
        if needs[1]:
            axes = (0,) + tuple(range(2, x.ndim))
            ga = np.where(pos, 0, g * x.data).sum(axis=axes)
        return gx, ga

    return make_result(out, (x, a), grad, "prelu")


def add(a, b) -> Tensor:
    """Elementwise sum; constants may broadcast, tensors of equal shape are typical."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}") from None

    def grad(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return make_result(out, (a, b), grad, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}") from None

    def grad(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                -_unbroadcast(g, b.shape) if needs[1] else None)

    return make_result(out, (a, b), grad, "sub")


def scale(a, s) -> Tensor:
    """Multiply `a` by the scalar `s`; differentiable in both."""
    a = as_tensor(a)
    s = as_tensor(s, dtype=a.dtype)
    if s.data.size != 1:
        raise ValueError(f"scale: factor must be a scalar, got shape {s.shape}")
    sv = s.data.reshape(())
    out = a.data * sv

    def grad(g, needs):
        ga = g * sv if needs[0] else None
        gs = np.sum(g * a.data).reshape(s.shape) if needs[1] else None
        return ga, gs

    return make_result(out.astype(a.dtype, copy=False), (a, s), grad, "scale")


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def grad(g, needs):
        return (g[:, :ca] if needs[0] else None, g[:, ca:] if needs[1] else None)

    return make_result(out, (a, b), grad, "concat_channels")


def mse(a, b) -> Tensor:
    """Mean over all elements of ``(a - b)**2`` as a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    _pair_check(a, b, "mse")
    diff = a.data - b.data
    count = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=diff.dtype)

    def grad(g, needs):
        d = diff * (2.0 * g / count)
        return (d if needs[0] else None, -d if needs[1] else None)

    return make_result(out, (a, b), grad, "mse")


def clamp(input, lo, hi) -> Tensor:
    """Clamp into ``[lo, hi]`` (constant bounds).

    The gradient passes through where the input is inside the box and is
    zero where it was clipped.
    """
    x = as_tensor(input)
    lo = np.asarray(lo.data if isinstance(lo, Tensor) else lo, dtype=x.dtype)
    hi = np.asarray(hi.data if isinstance(hi, Tensor) else hi, dtype=x.dtype)
    try:
        inside = (x.data >= lo) & (x.data <= hi)
    except ValueError:
        raise ValueError(f"clamp: bounds {lo.shape}/{hi.shape} incompatible with input {x.shape}") from None
    out = np.minimum(np.maximum(x.data, lo), hi)

    def grad(g, needs):
        return (np.where(inside, g, 0).astype(g.dtype),)

    return make_result(out, (x,), grad, "clamp")
