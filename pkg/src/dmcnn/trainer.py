"""Training: Adam, plateau learning-rate decay and a patch-size/QF curriculum."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import ModelCheckpoint, parameter_digest
from .errors import ConfigurationError, NumericFault
from .imaging import BLOCK, load_corpus, sample_patches
from .metrics import list_images
from .network import Model, NetworkConfig, build, loss
from .tensor_engine import Tape, Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class Stage:
    patch_size: int = 56
    qf: int = 20
    steps: int = 100

    @classmethod
    def coerce(cls, s) -> "Stage":
        if isinstance(s, Stage):
            return s
        if isinstance(s, dict):
            return cls(**s)
        return cls(*s)


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    lr_decay_factor: float = 3.0
    plateau_patience: int = 3
    batch_size: int = 8
    curriculum: list = field(default_factory=lambda: [Stage(56, 20, 500)])
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.2
    val_interval: int = 50
    val_count: int = 8
    fixed_batch: bool = False
    select: str = "best"
    precision: str = "float32"

    def __post_init__(self):
        self.curriculum = [Stage.coerce(s) for s in self.curriculum]

    def validate(self) -> "TrainConfig":
        if not self.curriculum:
            raise ConfigurationError("curriculum must contain at least one stage")
        for s in self.curriculum:
            if s.patch_size <= 0 or s.patch_size % BLOCK:
                raise ConfigurationError(f"patch size {s.patch_size} is not a positive multiple of {BLOCK}")
            if not 1 <= s.qf <= 100:
                raise ConfigurationError(f"stage qf {s.qf} outside 1..100")
            if s.steps < 0:
                raise ConfigurationError(f"stage steps must be non-negative, got {s.steps}")
        for a, b in zip(self.curriculum, self.curriculum[1:]):
            if a.qf == b.qf and b.patch_size < a.patch_size:
                raise ConfigurationError("patch sizes must not decrease within a QF stage")
        if self.lr_decay_factor <= 1:
            raise ConfigurationError(f"lr_decay_factor must exceed 1, got {self.lr_decay_factor}")
        if self.lr_init <= 0 or self.batch_size < 1 or self.val_interval < 1 or self.plateau_patience < 1:
            raise ConfigurationError("lr_init, batch_size, val_interval and plateau_patience must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.select not in ("best", "last"):
            raise ConfigurationError(f"select must be 'best' or 'last', got {self.select!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"precision must be float32 or float64, got {self.precision!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curriculum"] = [asdict(s) for s in self.curriculum]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(_arr(p)) for k, p in params.items()},
                   {k: np.zeros_like(_arr(p)) for k, p in params.items()}, 0)


def _arr(p):
    return p.data if isinstance(p, Tensor) else p


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, config: TrainConfig | None = None):
    """One bias-corrected Adam update, applied in place.

    `params` maps names to arrays or tensors; `grads` and the moments in
    `state` must have exactly the same names. Raises NumericFault if the
    moments overflow, rather than silently freezing the parameter.
    """
    cfg = config or TrainConfig()
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    for keys, what in ((grads, "gradient"), (state.m, "first moment"), (state.v, "second moment")):
        if set(keys) != set(params):
            odd = sorted(set(keys) ^ set(params))
            raise KeyError(f"{what} keys do not match parameters; first mismatch: {odd[0]!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in params:
        p = _arr(params[name])
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        with np.errstate(over="ignore"):
            v += (1 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        if not (np.isfinite(v).all() and np.isfinite(update).all()):
            raise NumericFault(f"Adam moments of {name!r} are no longer finite (gradient overflow)")
        p -= update.astype(p.dtype, copy=False)
    return params, state


def batch_loss(model: Model, batch):
    """Multi-scale loss of `model` on a :class:`PatchBatch`."""
    out = model.forward(batch.degraded, batch.coeffs, batch.table)
    return loss(out, batch.clean, model.config)


def validate(model: Model, val_set, chunk: int = 8) -> float:
    """Mean loss over a validation batch, computed without recording."""
    n = len(val_set)
    if n == 0:
        raise ConfigurationError("validation set is empty")
    total = 0.0
    with no_grad():
        for start in range(0, n, chunk):
            part = val_set.subset(np.arange(start, min(n, start + chunk)))
            total += float(batch_loss(model, part).data) * len(part)
    return total / n


def train_step(model: Model, batch, state: AdamState, lr: float, config: TrainConfig) -> float:
    """Forward, backward and one Adam update on `batch`; returns the loss."""
    with Tape() as tape:
        value = batch_loss(model, batch)
    grads = backward(value, tape, wrt=model.parameters())
    named = {name: grads[t] for name, t in model.params.items()}
    adam_step(model.params, named, state, lr, config)
    return float(value.data)


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def split_corpus(paths, val_fraction: float, seed: int):
    """Deterministic train/validation split of a path list."""
    paths = sorted(paths)
    if val_fraction <= 0 or len(paths) < 2:
        return paths, paths
    order = np.random.default_rng(_derive_seed(seed, 7)).permutation(len(paths))
    n_val = max(1, int(round(val_fraction * len(paths))))
    n_val = min(n_val, len(paths) - 1)
    val = sorted(paths[i] for i in order[:n_val])
    train = sorted(paths[i] for i in order[n_val:])
    return train, val


class PlateauSchedule:
    """Divide the learning rate after `patience` evaluations without a new minimum."""

    def __init__(self, lr: float, factor: float, patience: int):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def observe(self, value: float) -> bool:
        """Record a validation loss; return True if it is a new best."""
        if value < self.best:
            self.best = value
            self.bad = 0
            return True
        self.bad += 1
        if self.bad >= self.patience:
            self.lr /= self.factor
            self.bad = 0
        return False


def _corpus_paths(corpus):
    if isinstance(corpus, (str, Path)):
        if not Path(corpus).is_dir():
            raise ConfigurationError(f"corpus directory not found: {corpus}")
        paths = list_images(corpus)
    else:
        paths = [Path(p) for p in corpus]
    if not paths:
        raise ConfigurationError(f"corpus {corpus} contains no images")
    return paths


def fixed_batch_for(corpus, config: TrainConfig, stage_index: int = 0):
    """The fixed training batch :func:`train` uses for a stage when ``fixed_batch`` is set."""
    cfg = config.validate()
    train_paths, _ = split_corpus(_corpus_paths(corpus), cfg.val_fraction, cfg.seed)
    planes, _ = load_corpus(train_paths)
    stage = cfg.curriculum[stage_index]
    return sample_patches(planes, stage.patch_size, cfg.batch_size, stage.qf, _derive_seed(cfg.seed, stage_index, 2))


def train(corpus, config: TrainConfig | None = None, init: ModelCheckpoint | None = None,
          net_config: NetworkConfig | None = None, log_fn=None) -> ModelCheckpoint:
    """Train through the curriculum and return the resulting checkpoint.

    `corpus` is a directory of images or a list of image paths. With `init`
    the model starts from that checkpoint's parameters (its architecture
    must match `net_config` when both are given).

    Every stage draws a fixed validation batch from the held-out images.
    With ``select="best"`` each stage ends by restoring its best-validation
    parameters, which the next stage continues from; ``"last"`` keeps the
    final parameters instead.

    `log_fn` receives one dict per event: ``{"event": "stage", ...}`` at
    each stage start (with the parameter digest) and ``{"event": "val",
    "step", "stage", "lr", "train_loss", "val_loss"}`` at every validation.
    Each record is also logged as a JSON line.
    """
    cfg = (config or TrainConfig()).validate()
    paths = _corpus_paths(corpus)

    dtype = np.float64 if cfg.precision == "float64" else np.float32
    if init is not None:
        if net_config is not None and init.config.to_dict() != net_config.to_dict():
            diff = [k for k, v in net_config.to_dict().items() if init.config.to_dict().get(k) != v]
            raise ConfigurationError(f"init checkpoint architecture differs in field {diff[0]!r}")
        model = build(init.config, seed=cfg.seed, dtype=dtype)
        model.load_state(init.model.state())
        init_digest = parameter_digest(init.model)
    else:
        model = build(net_config or NetworkConfig(), seed=cfg.seed, dtype=dtype)
        init_digest = None

    def emit(record):
        log.info(json.dumps(record))
        if log_fn is not None:
            log_fn(record)

    train_paths, val_paths = split_corpus(paths, cfg.val_fraction, cfg.seed)
    train_planes, _ = load_corpus(train_paths)
    val_planes, _ = load_corpus(val_paths)

    state = AdamState.zeros_like(model.params)
    sched = PlateauSchedule(cfg.lr_init, cfg.lr_decay_factor, cfg.plateau_patience)
    best_state, best_val, best_step = model.state(), None, 0
    step = 0
    for si, stage in enumerate(cfg.curriculum):
        emit({"event": "stage", "stage": si, "step": step, "patch_size": stage.patch_size,
              "qf": stage.qf, "digest": parameter_digest(model)})
        val_set = sample_patches(val_planes, stage.patch_size, cfg.val_count, stage.qf, _derive_seed(cfg.seed, si, 1))
        fixed = None
        if cfg.fixed_batch:
            fixed = sample_patches(train_planes, stage.patch_size, cfg.batch_size, stage.qf, _derive_seed(cfg.seed, si, 2))
        # a new stage has a new validation batch, so its losses open a fresh plateau window
        sched.best, sched.bad = math.inf, 0
        last_val = None
        for k in range(stage.steps):
            if fixed is not None:
                batch = fixed
            else:
                batch = sample_patches(train_planes, stage.patch_size, cfg.batch_size, stage.qf,
                                       _derive_seed(cfg.seed, si, 3, k))
            lr_used = sched.lr
            train_loss = train_step(model, batch, state, lr_used, cfg)
            step += 1
            if (k + 1) % cfg.val_interval == 0 or k + 1 == stage.steps:
                last_val = validate(model, val_set)
                if sched.observe(last_val):
                    best_state, best_val, best_step = model.state(), last_val, step
                emit({"event": "val", "step": step, "stage": si, "lr": lr_used,
                      "train_loss": train_loss, "val_loss": last_val})
        if stage.steps and cfg.select == "best":
            model.load_state(best_state)
        elif stage.steps:
            best_val, best_step = last_val, step
    return ModelCheckpoint(model, trained_qf=cfg.curriculum[-1].qf, step=best_step,
                           validation_loss=best_val, init_digest=init_digest)
