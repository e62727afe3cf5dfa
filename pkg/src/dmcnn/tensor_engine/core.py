"""Tensors, the gradient tape, and reverse-mode backpropagation."""
from __future__ import annotations

import contextlib
import struct
import threading

import numpy as np

from ..errors import NumericFault, TapeError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()
_default_dtype = np.float32


def get_precision():
    return getattr(_state, "dtype", None) or _default_dtype


def set_precision(name) -> None:
    """Set the process-wide default dtype: ``"float32"`` (training) or ``"float64"``."""
    global _default_dtype
    _default_dtype = _resolve(name)


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the default dtype for the current thread."""
    prev = getattr(_state, "dtype", None)
    _state.dtype = _resolve(name)
    try:
        yield
    finally:
        _state.dtype = prev


def _resolve(name):
    if isinstance(name, str):
        try:
            return _DTYPES[name]
        except KeyError:
            raise ValueError(f"unknown precision {name!r}; use 'float32' or 'float64'") from None
    dt = np.dtype(name).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {name!r}")
    return dt


class Tensor:
    """A float array that can take part in a recorded computation.

    Tensors hash by identity, so they can key gradient dictionaries.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.array(data, dtype=_resolve(dtype) if dtype is not None else get_precision())
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap `x` as a constant tensor unless it already is one."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Operations are recorded while the tape is active (``with Tape() as t:``)
    and at least one input requires a gradient. A tape supports exactly one
    call to :func:`backward`.
    """

    def __init__(self):
        self.records = []
        self.used = False

    def __enter__(self):
        if self.used:
            raise TapeError("tape already consumed by backward(); record a new forward pass")
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def _append(self, out, inputs, backward):
        if self.used:
            raise TapeError("cannot record onto a tape that has already been consumed")
        self.records.append((out, inputs, backward))


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording on the current thread."""
    saved = list(_tape_stack())
    _state.tapes = []
    try:
        yield
    finally:
        _state.tapes = saved


def check_finite(arr, op: str):
    if not np.isfinite(arr).all():
        raise NumericFault(f"{op} produced non-finite values")


def make_result(data, inputs, backward, op: str) -> Tensor:
    """Wrap an op's output and record it on the active tape if needed.

    `backward(grad_out, needs)` must return one gradient (or None) per input;
    `needs[i]` tells whether input i requires one.
    """
    check_finite(data, op)
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._append(out, tuple(inputs), backward)
    return out


def backward(loss: Tensor, tape: Tape, wrt=None, grad_output=None):
    """Reverse-mode gradients of `loss` with respect to leaf tensors.

    Returns a dict mapping each leaf tensor that requires a gradient to its
    gradient array. If `wrt` is given, exactly those tensors are returned,
    with zero gradients for any the loss does not depend on.

    `grad_output` seeds a non-scalar output (a vector-Jacobian product);
    without it the loss must be a scalar.
    """
    if tape.used:
        raise TapeError("tape already consumed; each forward recording supports one backward pass")
    if grad_output is None:
        if loss.data.ndim != 0:
            raise TapeError(f"loss must be a scalar tensor, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(grad_output, dtype=loss.dtype)
        if seed.shape != loss.shape:
            raise TapeError(f"grad_output shape {seed.shape} does not match output shape {loss.shape}")

    tape.used = True
    grads = {id(loss): seed}
    produced = {id(rec[0]) for rec in tape.records}
    if id(loss) not in produced and not loss.requires_grad:
        tape.records = []
        raise TapeError("loss was not recorded on this tape")

    leaves = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in inputs)
        parts = fn(g, needs)
        for t, need, gi in zip(inputs, needs, parts):
            if not need or gi is None:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            if key not in produced:
                leaves.setdefault(key, t)
    tape.records = []

    if wrt is None:
        return {t: grads[k] for k, t in leaves.items() if k in grads}
    out = {}
    for t in wrt:
        g = grads.get(id(t)) if id(t) in leaves else None
        out[t] = g if g is not None else np.zeros_like(t.data)
    return out


# -- debug dump -------------------------------------------------------------
# uint32 ndim, ndim x uint32 dims, uint8 itemsize (4 or 8), then the values as
# little-endian IEEE floats in C order. All integers little-endian.

def dump_tensor(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    arr = np.asarray(arr, dtype=arr.dtype.newbyteorder("<"), order="C")
    header = struct.pack(f"<I{arr.ndim}IB", arr.ndim, *arr.shape, arr.dtype.itemsize)
    return header + arr.tobytes()


def load_tensor(data: bytes) -> Tensor:
    if len(data) < 4:
        raise ValueError("tensor dump truncated")
    (ndim,) = struct.unpack_from("<I", data, 0)
    head = 4 + 4 * ndim + 1
    if len(data) < head:
        raise ValueError("tensor dump truncated in header")
    shape = struct.unpack_from(f"<{ndim}I", data, 4)
    (itemsize,) = struct.unpack_from("<B", data, 4 + 4 * ndim)
    if itemsize not in (4, 8):
        raise ValueError(f"unsupported item size {itemsize}")
    dt = np.dtype("<f4" if itemsize == 4 else "<f8")
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) != head + count * itemsize:
        raise ValueError(f"tensor dump has {len(data) - head} payload bytes, expected {count * itemsize}")
    arr = np.frombuffer(data, dtype=dt, offset=head).reshape(shape)
    return Tensor._wrap(arr.astype(dt.newbyteorder("=")))
