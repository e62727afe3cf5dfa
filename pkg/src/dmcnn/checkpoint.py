"""Model checkpoints.

File layout::

    DMCNN-CKPT 1\\n
    <manifest: one line of JSON>\\n
    <payload bytes>

The manifest carries the network config, training provenance and, for each
parameter in order, its name, shape, dtype (``<f4`` or ``<f8``) and the
byte offset/length of its little-endian payload relative to the start of
the payload section. Writing is deterministic: the same parameters and
metadata always produce the same bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .network import Model, NetworkConfig
from .tensor_engine import Tensor

MAGIC = b"DMCNN-CKPT 1\n"


@dataclass
class ModelCheckpoint:
    model: Model
    trained_qf: int | None = None
    step: int = 0
    validation_loss: float | None = None
    init_digest: str | None = None

    @property
    def config(self) -> NetworkConfig:
        return self.model.config

    @property
    def digest(self) -> str:
        return parameter_digest(self.model)


def parameter_digest(model) -> str:
    """SHA-256 over parameter names, dtypes, shapes and values."""
    h = hashlib.sha256()
    params = model.params if isinstance(model, Model) else model
    for name, t in params.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        arr = np.asarray(arr, dtype=arr.dtype.newbyteorder("<"), order="C")
        h.update(f"{name}|{arr.dtype.str}|{arr.shape}\n".encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def to_bytes(ckpt: ModelCheckpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, t in ckpt.model.params.items():
        arr = np.asarray(t.data, dtype=t.data.dtype.newbyteorder("<"), order="C")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "config": ckpt.model.config.to_dict(),
        "trained_qf": ckpt.trained_qf,
        "step": int(ckpt.step),
        "validation_loss": None if ckpt.validation_loss is None else float(ckpt.validation_loss),
        "init_digest": ckpt.init_digest,
        "payload_bytes": offset,
        "tensors": entries,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return MAGIC + text.encode("utf-8") + b"\n" + b"".join(chunks)


def from_bytes(data: bytes, config: NetworkConfig | None = None, source: str = "<bytes>") -> ModelCheckpoint:
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{source}: bad magic; not a DMCNN checkpoint (field: magic)")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{source}: truncated manifest (field: manifest)")
    try:
        manifest = json.loads(data[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt manifest (field: manifest): {exc}") from exc
    payload = data[end + 1:]
    if len(payload) != manifest.get("payload_bytes", -1):
        raise CheckpointError(
            f"{source}: payload is {len(payload)} bytes, manifest says {manifest.get('payload_bytes')} (field: payload_bytes)")

    try:
        stored = NetworkConfig.from_dict(manifest["config"])
    except Exception as exc:
        raise CheckpointError(f"{source}: invalid config (field: config): {exc}") from exc
    if config is not None:
        want, have = config.to_dict(), stored.to_dict()
        for key in want:
            if want[key] != have.get(key):
                raise CheckpointError(
                    f"{source}: config mismatch in field {key!r}: checkpoint has {have.get(key)!r}, expected {want[key]!r}")

    params = {}
    dtypes = set()
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"])
        if dt.str not in ("<f4", "<f8"):
            raise CheckpointError(f"{source}: unsupported dtype {e['dtype']} (field: {e['name']})")
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        if len(chunk) != e["nbytes"] or e["nbytes"] != count * dt.itemsize:
            raise CheckpointError(f"{source}: truncated tensor (field: {e['name']})")
        params[e["name"]] = np.frombuffer(chunk, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
        dtypes.add(dt.newbyteorder("=").type)
    if len(dtypes) != 1:
        raise CheckpointError(f"{source}: mixed parameter dtypes (field: dtype)")

    from .network import build

    model = build(stored, seed=0, dtype=dtypes.pop())
    missing = set(model.params) - set(params)
    extra = set(params) - set(model.params)
    if missing or extra:
        field = sorted(missing or extra)[0]
        raise CheckpointError(f"{source}: parameter set does not match architecture (field: {field})")
    for name, t in model.params.items():
        if tuple(t.shape) != params[name].shape:
            raise CheckpointError(f"{source}: shape {params[name].shape} != {t.shape} (field: {name})")
        t.data = params[name].copy()
    return ModelCheckpoint(model, manifest.get("trained_qf"), manifest.get("step", 0),
                           manifest.get("validation_loss"), manifest.get("init_digest"))


def save_checkpoint(ckpt, path) -> None:
    """Write a checkpoint (or a bare model) atomically to `path`."""
    if isinstance(ckpt, Model):
        ckpt = ModelCheckpoint(ckpt)
    path = Path(path)
    data = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent if str(path.parent) else ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, config: NetworkConfig | None = None) -> ModelCheckpoint:
    """Read a checkpoint; with `config`, any architecture difference is an error."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {str(path)!r}: {exc}") from exc
    return from_bytes(data, config, str(path))
