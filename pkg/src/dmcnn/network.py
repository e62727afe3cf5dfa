"""The dual-domain multi-scale restoration network and its training loss.

Two auto-encoders run in sequence. The DCT branch refines the quantized
block-DCT coefficients, projects them back into their quantization box and
decodes them to pixels; the pixel branch sees the JPEG input together with
that estimate and predicts residuals at full, half and quarter scale. The
final output mixes input, DCT estimate and pixel residual through a
learnable scalar ``r``::

    o_d = idct(clamp_box(cdct + f(cdct)))
    o_0 = g(C, o_d) + r * o_d + (1 - r) * C

Layout of the pixel branch (``c`` = base_channels)::

    enc0  3x3        2  -> c     /1
    enc1  3x3 s2     c  -> 2c    /2
    enc2  3x3        2c -> 2c    /2
    enc3  3x3 s2     2c -> 4c    /4
    enc4  3x3        4c -> 4c    /4
    mid*  3x3 dil    4c -> 4c    /4   (one per bottleneck dilation)
    dec0  3x3        4c -> 4c    /4   in: mid + enc4   -> head_quarter (1x1)
    dec1  4x4 T s2   4c -> 2c    /2
    dec2  3x3        2c -> 2c    /2   in: dec1 + enc2  -> head_half (1x1)
    dec3  4x4 T s2   2c -> c     /1
    dec4  3x3        c  -> 1     /1   in: dec3 + enc0  (full-scale residual)

The DCT branch works on the 64-channel coefficient grid at 1/8 resolution:
``e`` encoder convs, the dilated bottleneck, then ``e`` decoder layers with
additive shortcuts from the mirrored encoder layers; its last layer is a
1x1 projection back to 64 coefficients.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import jpeg_core
from .errors import ConfigurationError
from .imaging import BLOCK, pad_to_block_multiple
from .tensor_engine import (
    LayerSpec,
    Tensor,
    add,
    clamp,
    concat_channels,
    conv2d,
    conv2d_transpose,
    get_precision,
    mse,
    no_grad,
    prelu,
    scale,
    sub,
)

PIXEL_NORM = 255.0
COEFF_NORM = 8.0 * 255.0


@dataclass
class NetworkConfig:
    pixel_depth: int = 15
    dct_depth: int = 9
    base_channels: int = 64
    bottleneck_dilations: tuple = (2, 4, 8)
    r_init: float = 0.5
    prelu_init: float = 0.1
    lam: float = 0.9
    theta: float = 0.618
    scales: int = 3
    pixel_norm: float = PIXEL_NORM
    coeff_norm: float = COEFF_NORM

    def __post_init__(self):
        self.bottleneck_dilations = tuple(int(d) for d in self.bottleneck_dilations)

    def validate(self) -> "NetworkConfig":
        nd = len(self.bottleneck_dilations)
        if nd == 0 or any(d < 1 for d in self.bottleneck_dilations):
            raise ConfigurationError(f"bottleneck_dilations must be non-empty and >= 1, got {self.bottleneck_dilations}")
        if self.scales != 3:
            raise ConfigurationError(f"scales is fixed at 3, got {self.scales}")
        if self.pixel_depth != 12 + nd:
            raise ConfigurationError(
                f"pixel_depth must be 12 + len(bottleneck_dilations) = {12 + nd} for this layout, got {self.pixel_depth}")
        if self.dct_depth < nd + 2 or (self.dct_depth - nd) % 2:
            raise ConfigurationError(
                f"dct_depth - len(bottleneck_dilations) must be a positive even number, got dct_depth={self.dct_depth}")
        if self.base_channels < 1:
            raise ConfigurationError(f"base_channels must be positive, got {self.base_channels}")
        for name in ("lam", "theta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.pixel_norm <= 0 or self.coeff_norm <= 0:
            raise ConfigurationError("normalization constants must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bottleneck_dilations"] = list(self.bottleneck_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown network config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    """Network estimates, each a ``(N, 1, h, w)`` tensor in pixel units."""

    o0: Tensor
    o1: Tensor
    o2: Tensor
    od: Tensor
    r: Tensor
    coeffs: Tensor = None
    extras: dict = field(default_factory=dict)


class Model:
    """Parameter container plus the forward computation."""

    def __init__(self, config: NetworkConfig, params: dict, dtype=None):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype or next(iter(params.values())).dtype).type

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k!r}: shape {arr.shape} does not match {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)

    # -- branches --------------------------------------------------------

    def _conv(self, name, x, stride=1, dilation=1, act=True):
        w = self.params[f"{name}.weight"]
        k = w.shape[-1]
        y = conv2d(x, w, self.params[f"{name}.bias"], stride, dilation, dilation * (k - 1) // 2)
        return prelu(y, self.params[f"{name}.slope"]) if act else y

    def _up(self, name, x):
        y = conv2d_transpose(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], 2, 1)
        return prelu(y, self.params[f"{name}.slope"])

    def dct_branch(self, coeffs: Tensor) -> Tensor:
        """Normalized coefficient residual for a ``(N, 64, bh, bw)`` grid."""
        cfg = self.config
        e = (cfg.dct_depth - len(cfg.bottleneck_dilations)) // 2
        enc = []
        x = coeffs
        for i in range(e):
            x = self._conv(f"dct.enc{i}", x)
            enc.append(x)
        for i, d in enumerate(cfg.bottleneck_dilations):
            x = self._conv(f"dct.mid{i}", x, dilation=d)
        for j in range(e):
            x = add(x, enc[e - 1 - j])
            x = self._conv(f"dct.dec{j}", x, act=j < e - 1)
        return x

    def pixel_branch(self, x: Tensor):
        """Normalized residuals ``(full, half, quarter)`` for a 2-channel input."""
        e0 = self._conv("pix.enc0", x)
        e1 = self._conv("pix.enc1", e0, stride=2)
        e2 = self._conv("pix.enc2", e1)
        e3 = self._conv("pix.enc3", e2, stride=2)
        y = e4 = self._conv("pix.enc4", e3)
        for i, d in enumerate(self.config.bottleneck_dilations):
            y = self._conv(f"pix.mid{i}", y, dilation=d)
        d0 = self._conv("pix.dec0", add(y, e4))
        quarter = self._conv("pix.head_quarter", d0, act=False)
        d1 = self._up("pix.dec1", d0)
        d2 = self._conv("pix.dec2", add(d1, e2))
        half = self._conv("pix.head_half", d2, act=False)
        d3 = self._up("pix.dec3", d2)
        full = self._conv("pix.dec4", add(d3, e0), act=False)
        return full, half, quarter

    def pixel_layer_specs(self):
        """Layer sequence along the deepest path of the pixel branch."""
        s = [LayerSpec.same(3), LayerSpec("conv", 3, 2, 1, 1), LayerSpec.same(3),
             LayerSpec("conv", 3, 2, 1, 1), LayerSpec.same(3)]
        s += [LayerSpec.same(3, d) for d in self.config.bottleneck_dilations]
        s += [LayerSpec.same(3), LayerSpec("transposed", 4, 2, 1, 1), LayerSpec.same(3),
              LayerSpec("transposed", 4, 2, 1, 1), LayerSpec.same(3)]
        return s

    def dct_layer_specs(self):
        """Deepest path of the DCT branch in pixel units, DCT and IDCT included."""
        cfg = self.config
        e = (cfg.dct_depth - len(cfg.bottleneck_dilations)) // 2
        s = [LayerSpec("conv", BLOCK, BLOCK, 1, 0)]
        s += [LayerSpec.same(3)] * e
        s += [LayerSpec.same(3, d) for d in cfg.bottleneck_dilations]
        s += [LayerSpec.same(3)] * (e - 1) + [LayerSpec.same(1)]
        s += [LayerSpec("transposed", BLOCK, BLOCK, 1, 0)]
        return s

    def pixel_conv_count(self) -> int:
        return sum(1 for k in self.params if k.startswith("pix.") and k.endswith(".weight"))

    def dct_conv_count(self) -> int:
        return sum(1 for k in self.params if k.startswith("dct.") and k.endswith(".weight"))

    # -- full forward ------------------------------------------------------

    def forward(self, degraded, cdct, table) -> ForwardOutput:
        """Run both branches on a plane or a stack of planes.

        `degraded` is ``(H, W)`` or ``(N, H, W)`` with sides that are
        multiples of 8; `cdct` the matching ``(..., H/8, W/8, 64)`` grid.
        """
        cfg = self.config
        dt = self.dtype
        c_np = np.asarray(degraded, dtype=np.float64)
        q_np = np.asarray(cdct, dtype=np.float64)
        if c_np.ndim == 2:
            c_np = c_np[None]
        if q_np.ndim == 3:
            q_np = q_np[None]
        if c_np.ndim != 3 or q_np.ndim != 4 or q_np.shape[-1] != 64:
            raise ValueError(f"forward: bad input shapes degraded {np.shape(degraded)}, cdct {np.shape(cdct)}")
        n, h, w = c_np.shape
        if h % BLOCK or w % BLOCK:
            raise ValueError(f"forward: image {h}x{w} is not a multiple of {BLOCK}; pad first")
        if q_np.shape[:3] != (n, h // BLOCK, w // BLOCK):
            raise ValueError(f"forward: coefficient grid {q_np.shape} does not match image batch {c_np.shape}")
        lo, hi = jpeg_core.feasible_interval(q_np, table)

        to_nchw = (0, 3, 1, 2)
        cin = Tensor(q_np.transpose(to_nchw), dtype=dt)
        c_img = Tensor(c_np[:, None], dtype=dt)

        res = self.dct_branch(Tensor(q_np.transpose(to_nchw) / cfg.coeff_norm, dtype=dt))
        coef = clamp(add(scale(res, cfg.coeff_norm), cin), lo.transpose(to_nchw), hi.transpose(to_nchw))
        od = conv2d_transpose(coef, _idct_kernel(dt), Tensor([jpeg_core.LEVEL_SHIFT], dtype=dt), BLOCK, 0)

        half_range = cfg.pixel_norm / 2.0
        c_norm = Tensor((c_np[:, None] - half_range) / cfg.pixel_norm, dtype=dt)
        od_norm = scale(sub(od, Tensor(half_range, dtype=dt)), 1.0 / cfg.pixel_norm)
        full, half, quarter = self.pixel_branch(concat_channels(c_norm, od_norm))

        r = self.params["mix.r"]
        o0 = add(add(c_img, scale(full, cfg.pixel_norm)), scale(sub(od, c_img), r))
        o1 = add(Tensor(avg_pool(c_np, 2)[:, None], dtype=dt), scale(half, cfg.pixel_norm))
        o2 = add(Tensor(avg_pool(c_np, 4)[:, None], dtype=dt), scale(quarter, cfg.pixel_norm))
        return ForwardOutput(o0, o1, o2, od, r, coef)


_IDCT_KERNELS = {}


def _idct_kernel(dt) -> Tensor:
    """Fixed ``(64, 1, 8, 8)`` kernel: a stride-8 transposed conv with it is the block IDCT."""
    dt = np.dtype(dt).type
    if dt not in _IDCT_KERNELS:
        _IDCT_KERNELS[dt] = Tensor(jpeg_core.dct_basis()[:, None], dtype=dt)
    return _IDCT_KERNELS[dt]


def avg_pool(planes, factor: int) -> np.ndarray:
    """Non-overlapping ``factor x factor`` mean pooling over the last two axes."""
    planes = np.asarray(planes, dtype=np.float64)
    h, w = planes.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"cannot pool {h}x{w} by {factor}")
    lead = planes.shape[:-2]
    return planes.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


def downscale_target(clean, level: int) -> np.ndarray:
    """Target at scale ``2**-level`` by average pooling; level 0 is the identity."""
    if level not in (0, 1, 2):
        raise ValueError(f"level must be 0, 1 or 2, got {level}")
    clean = np.asarray(clean, dtype=np.float64)
    if level == 0:
        return clean.copy()
    f = 2 ** level
    h, w = clean.shape[-2:]
    if h % f or w % f:
        raise ValueError(f"dimensions {h}x{w} not divisible by {f}")
    return avg_pool(clean, f)


# -- construction ---------------------------------------------------------

def _layer_table(cfg: NetworkConfig):
    """(name, kind, c_in, c_out, kernel, activated) for every conv, in init order."""
    c = cfg.base_channels
    nd = len(cfg.bottleneck_dilations)
    e = (cfg.dct_depth - nd) // 2
    rows = []
    for i in range(e):
        rows.append((f"dct.enc{i}", "conv", 64 if i == 0 else c, c, 3, True))
    for i in range(nd):
        rows.append((f"dct.mid{i}", "conv", c, c, 3, True))
    for j in range(e):
        last = j == e - 1
        rows.append((f"dct.dec{j}", "conv", c, 64 if last else c, 1 if last else 3, not last))
    rows += [
        ("pix.enc0", "conv", 2, c, 3, True),
        ("pix.enc1", "conv", c, 2 * c, 3, True),
        ("pix.enc2", "conv", 2 * c, 2 * c, 3, True),
        ("pix.enc3", "conv", 2 * c, 4 * c, 3, True),
        ("pix.enc4", "conv", 4 * c, 4 * c, 3, True),
    ]
    for i in range(nd):
        rows.append((f"pix.mid{i}", "conv", 4 * c, 4 * c, 3, True))
    rows += [
        ("pix.dec0", "conv", 4 * c, 4 * c, 3, True),
        ("pix.head_quarter", "conv", 4 * c, 1, 1, False),
        ("pix.dec1", "transposed", 4 * c, 2 * c, 4, True),
        ("pix.dec2", "conv", 2 * c, 2 * c, 3, True),
        ("pix.head_half", "conv", 2 * c, 1, 1, False),
        ("pix.dec3", "transposed", 2 * c, c, 4, True),
        ("pix.dec4", "conv", c, 1, 3, False),
    ]
    return rows


def build(config: NetworkConfig | None = None, seed: int = 0, dtype=None) -> Model:
    """Construct a model with seeded Kaiming-uniform (fan-in) initialization.

    Kernels are drawn in a fixed layer order with the gain of the layer's
    own nonlinearity (PReLU at its initial slope, or linear for output
    heads). The DCT branch's output projection and all biases start at
    zero, PReLU slopes at ``config.prelu_init`` and the mixing weight at
    ``config.r_init``.
    """
    cfg = (config or NetworkConfig()).validate()
    dt = np.dtype(dtype or get_precision()).type
    rng = np.random.default_rng(seed)
    gain_sq = 2.0 / (1.0 + cfg.prelu_init ** 2)
    params = {}
    dct_out = f"dct.dec{(cfg.dct_depth - len(cfg.bottleneck_dilations)) // 2 - 1}"
    for name, kind, cin, cout, k, act in _layer_table(cfg):
        if kind == "conv":
            shape = (cout, cin, k, k)
            fan_in = cin * k * k
        else:
            shape = (cin, cout, k, k)
            fan_in = cin * k * k // 4
        bound = np.sqrt(3.0 * (gain_sq if act else 1.0) / fan_in)
        kernel = rng.uniform(-bound, bound, shape)
        if name == dct_out:
            # start the DCT branch at the quantized input so the box clamp
            # is not saturated (saturated coefficients get no gradient)
            kernel[...] = 0.0
        params[f"{name}.weight"] = Tensor(kernel, requires_grad=True, dtype=dt)
        params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True, dtype=dt)
        if act:
            params[f"{name}.slope"] = Tensor(np.full(cout, cfg.prelu_init), requires_grad=True, dtype=dt)
    params["mix.r"] = Tensor(cfg.r_init, requires_grad=True, dtype=dt)
    for k, t in params.items():
        t.name = k
    return Model(cfg, params, dt)


def forward(model: Model, degraded, cdct, table) -> ForwardOutput:
    return model.forward(degraded, cdct, table)


def loss(out: ForwardOutput, clean, config: NetworkConfig | None = None) -> Tensor:
    """Multi-scale reconstruction loss plus the weighted DCT-branch term.

    ``sum_i theta**i * MSE(o_i, clean_i) + lam * MSE(o_d, clean)``, where
    ``clean_i`` is `clean` average-pooled by ``2**i``.
    """
    cfg = config or NetworkConfig()
    dt = out.o0.dtype
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim == 2:
        clean = clean[None]
    if clean[:, None].shape != out.o0.shape:
        raise ValueError(f"loss: clean shape {clean.shape} does not match estimate {out.o0.shape}")
    targets = [Tensor(downscale_target(clean, i)[:, None], dtype=dt) for i in range(3)]
    total = mse(out.o0, targets[0])
    for i, est in ((1, out.o1), (2, out.o2)):
        total = add(total, scale(mse(est, targets[i]), cfg.theta ** i))
    return add(total, scale(mse(out.od, targets[0]), cfg.lam))


def restore(model: Model, degraded, cdct, table) -> np.ndarray:
    """Restore one degraded plane; output is clamped to [0, 255] and has the input's size."""
    degraded = np.asarray(degraded, dtype=np.float64)
    if degraded.ndim != 2:
        raise ValueError(f"restore expects a single 2-D plane, got shape {degraded.shape}")
    cdct = np.asarray(cdct, dtype=np.float64)
    padded, size = pad_to_block_multiple(degraded)
    grid_hw = (cdct.shape[0] * BLOCK, cdct.shape[1] * BLOCK)
    if padded.shape != grid_hw:
        raise ValueError(f"restore: image {degraded.shape} does not match coefficient grid {cdct.shape}")
    with no_grad():
        out = model.forward(padded, cdct, table)
    o0 = out.o0.data[0, 0].astype(np.float64)
    return np.clip(o0, 0.0, 255.0)[: size[0], : size[1]]


def pixel_branch_footprint(model: Model, margin: int = 16, seed: int = 0):
    """Impulse-probe the full-scale output of the actual pixel branch.

    Every output phase of the branch's period (4, from two stride-2 stages)
    is probed at the centre of an input large enough that the footprint
    stays clear of the border; the largest ``(height, width)`` is returned.
    """
    from .tensor_engine import impulse_footprint, receptive_field

    specs = model.pixel_layer_specs()
    period = 4
    need = max(receptive_field(specs)) + 2 * margin + 2 * period
    size = -(-need // BLOCK) * BLOCK
    best = [0, 0]
    dt = model.params["mix.r"].data.dtype
    for q in range(period):
        c = size // 2 - (size // 2) % period + q
        (h, w), box = impulse_footprint(lambda x: model.pixel_branch(x)[0], (1, 2, size, size), (c, c), seed, dt)
        if box is None or min(box[0], box[2]) == 0 or max(box[1], box[3]) == size - 1:
            raise RuntimeError("pixel-branch footprint reaches the probe border")
        best = [max(best[0], h), max(best[1], w)]
    return tuple(best)
