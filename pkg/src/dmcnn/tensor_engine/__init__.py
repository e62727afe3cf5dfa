"""Minimal reverse-mode automatic differentiation for the DMCNN operator set."""
from .core import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    dump_tensor,
    get_precision,
    load_tensor,
    no_grad,
    precision,
    set_precision,
)
from .ops import (
    add,
    clamp,
    concat_channels,
    conv2d,
    conv2d_transpose,
    conv_output_size,
    mse,
    prelu,
    scale,
    sub,
    transpose_output_size,
)
from .receptive import (
    LayerSpec,
    footprint,
    impulse_footprint,
    probe_receptive_field,
    random_stack,
    receptive_field,
)

__all__ = [
    "LayerSpec", "Tape", "Tensor", "add", "as_tensor", "backward", "clamp", "concat_channels",
    "conv2d", "conv2d_transpose", "conv_output_size", "current_tape", "dump_tensor", "footprint",
    "get_precision", "impulse_footprint", "load_tensor", "mse", "no_grad", "precision", "prelu",
    "probe_receptive_field", "random_stack", "receptive_field", "scale", "set_precision", "sub",
    "transpose_output_size",
]
