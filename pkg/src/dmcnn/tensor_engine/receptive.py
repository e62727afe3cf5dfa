"""Receptive fields: closed-form interval propagation and an impulse probe.

The analytic route walks a layer sequence from one output position back to
the input, mapping the index interval each layer reads. For plain and
dilated convolutions this is the familiar recurrence
``r <- r + (k - 1) * d * jump``; transposed convolutions are handled exactly
(their footprint depends on output phase, so the default reports the
largest footprint over one phase period).

The probe seeds a unit gradient at one output pixel of a real network,
backpropagates, and measures the bounding box of nonzero input gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Tape, Tensor, backward
from .ops import conv2d, conv2d_transpose, prelu

KINDS = ("conv", "transposed", "elementwise")


@dataclass(frozen=True)
class LayerSpec:
    kind: str = "conv"
    kernel: tuple = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(f"invalid layer spec {self}")
        if min(self.kernel) < 1:
            raise ValueError(f"kernel dims must be positive, got {self.kernel}")

    @classmethod
    def same(cls, k: int = 3, dilation: int = 1):
        """Stride-1 convolution with size-preserving padding."""
        return cls("conv", (k, k), 1, dilation, dilation * (k - 1) // 2)


def _input_interval(spec: LayerSpec, lo: int, hi: int, axis: int):
    k = spec.kernel[axis]
    s, d, p = spec.stride, spec.dilation, spec.padding
    if spec.kind == "elementwise":
        return lo, hi
    if spec.kind == "conv":
        return lo * s - p, hi * s - p + (k - 1) * d
    # transposed: output o reads input i whenever o = i*s - p + t*d for a tap t
    return -((-(lo + p - (k - 1) * d)) // s), (hi + p) // s


def footprint(layers, position: int, axis: int = 0) -> int:
    """Input extent (pixels) read by output index `position` along one axis."""
    lo = hi = position
    for spec in reversed(list(layers)):
        lo, hi = _input_interval(spec, lo, hi, axis)
    return hi - lo + 1


def _period(layers) -> int:
    p = 1
    for spec in layers:
        if spec.kind != "elementwise":
            p *= spec.stride
    return p


def receptive_field(layers, position=None):
    """Receptive field ``(height, width)`` of a layer sequence.

    With `position` ``(y, x)`` the footprint of that output pixel is
    returned; otherwise the maximum over a full phase period, which is the
    receptive field of the sequence.
    """
    layers = list(layers)
    if position is not None:
        return footprint(layers, position[0], 0), footprint(layers, position[1], 1)
    period = _period(layers)
    return tuple(max(footprint(layers, q, axis) for q in range(period)) for axis in (0, 1))


def impulse_footprint(forward, input_shape, position, seed: int = 0, dtype=np.float64):
    """Measure the receptive field of `forward` at one output pixel.

    `forward` maps an input Tensor of `input_shape` to an output Tensor of
    shape ``(N, C, H, W)``. A unit gradient is placed at output pixel
    `position` (all channels) and pulled back to the input; the result is
    the bounding box ``(height, width)`` of nonzero input gradient, together
    with the box itself ``(y0, y1, x0, x1)``.
    """
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(input_shape), requires_grad=True, dtype=dtype)
    with Tape() as tape:
        out = forward(x)
    seed_grad = np.zeros(out.shape, dtype=out.dtype)
    seed_grad[:, :, position[0], position[1]] = 1.0
    g = backward(out, tape, wrt=[x], grad_output=seed_grad)[x]
    mask = np.abs(g).sum(axis=(0, 1)) > 0
    if not mask.any():
        return (0, 0), None
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = (int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))
    return (box[1] - box[0] + 1, box[3] - box[2] + 1), box


def random_stack(layers, channels: int = 2, seed: int = 0, dtype=np.float64):
    """Build a random-weight network from `layers` for probing.

    Returns ``forward(x)``; every weight is nonzero with probability one and
    PReLU slopes are nonzero, so no gradient path is cancelled.
    """
    rng = np.random.default_rng(seed)
    params = []
    for spec in layers:
        kh, kw = spec.kernel
        if spec.kind == "conv":
            params.append(Tensor(rng.uniform(0.5, 1.5, (channels, channels, kh, kw)), dtype=dtype))
        elif spec.kind == "transposed":
            params.append(Tensor(rng.uniform(0.5, 1.5, (channels, channels, kh, kw)), dtype=dtype))
        else:
            params.append(Tensor(np.full(channels, 0.1), dtype=dtype))

    def forward(x):
        for spec, p in zip(layers, params):
            if spec.kind == "conv":
                x = conv2d(x, p, None, spec.stride, spec.dilation, spec.padding)
            elif spec.kind == "transposed":
                if spec.dilation != 1:
                    raise ValueError("probe does not support dilated transposed convolutions")
                x = conv2d_transpose(x, p, None, spec.stride, spec.padding)
            else:
                x = prelu(x, p)
        return x

    return forward


def probe_receptive_field(layers, channels: int = 2, seed: int = 0, margin: int = 8):
    """Impulse-probe a random network built from `layers`.

    Every output phase of one period is probed near the centre of the
    output and the maximum footprint is returned. The input starts large
    enough for the analytic footprint plus `margin` and is doubled whenever
    a probe reaches the border.
    """
    layers = list(layers)
    period = _period(layers)
    down = 1
    for spec in layers:
        if spec.kind == "conv":
            down *= spec.stride
    size = down * math.ceil((2 * max(receptive_field(layers)) + 2 * margin) / down)
    fwd = random_stack(layers, channels, seed)
    for _ in range(8):
        out_h = fwd(Tensor(np.zeros((1, channels, size, size)), dtype=np.float64)).shape[2]
        if out_h < 2 * period + 2:
            size *= 2
            continue
        c = out_h // 2 - (out_h // 2) % period
        best, clear = [0, 0], True
        for q in range(period):
            (h, w), box = impulse_footprint(fwd, (1, channels, size, size), (c + q, c + q), seed)
            if box is None or min(box[0], box[2]) < margin or max(box[1], box[3]) > size - 1 - margin:
                clear = False
                break
            best = [max(best[0], h), max(best[1], w)]
        if clear:
            return tuple(best)
        size *= 2
    raise RuntimeError("probe footprint keeps reaching the input border")
