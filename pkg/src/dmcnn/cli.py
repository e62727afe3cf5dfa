"""Command-line entry point: ``dmcnn degrade|train|restore|eval|rf-report``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric fault.
Summaries go to stdout, logs to stderr; ``DMCNN_LOG_LEVEL`` sets verbosity.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import jpeg_core
from .errors import CheckpointError, ConfigurationError, ImageDecodeError, NumericFault

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _qf(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"quality factor must be an integer, got {text!r}") from None
    if not 1 <= v <= 100:
        raise argparse.ArgumentTypeError(f"quality factor must lie in 1..100, got {v}")
    return v


def _table_path(coeff_path) -> Path:
    return Path(str(coeff_path) + ".qtable")


# -- degrade -------------------------------------------------------------------

def cmd_degrade(args) -> int:
    from .imaging import load_luma, save_luma

    plane = load_luma(args.input)
    degraded, cdct, table = jpeg_core.degrade(plane, args.qf)
    save_luma(degraded, args.output)
    if args.dump_coeffs:
        jpeg_core.write_coeffs(args.dump_coeffs, cdct)
        jpeg_core.write_table(_table_path(args.dump_coeffs), table)
    print(f"degraded {args.input} at QF {args.qf} -> {args.output} ({plane.shape[1]}x{plane.shape[0]})")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc


def _train_fields():
    from .trainer import TrainConfig

    return [f for f in dataclasses.fields(TrainConfig)]


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_train_overrides(p):
    from .trainer import TrainConfig

    defaults = TrainConfig()
    for f in _train_fields():
        value = getattr(defaults, f.name)
        if f.name == "curriculum":
            p.add_argument(_flag(f.name), dest=f"ov_{f.name}", metavar="JSON",
                           help='stages as JSON, e.g. [[56, 20, 500], [112, 20, 500]]')
        elif isinstance(value, bool):
            p.add_argument(_flag(f.name), dest=f"ov_{f.name}", choices=("true", "false"))
        else:
            p.add_argument(_flag(f.name), dest=f"ov_{f.name}", type=type(value), metavar=type(value).__name__.upper())


def _resolve_configs(args):
    from .network import NetworkConfig
    from .trainer import TrainConfig

    raw = _load_json(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigurationError("config file must hold a JSON object")
    unknown = set(raw) - {"network", "train"}
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {sorted(unknown)}")
    train = dict(raw.get("train", {}))
    for f in _train_fields():
        v = getattr(args, f"ov_{f.name}", None)
        if v is None:
            continue
        if f.name == "curriculum":
            try:
                v = json.loads(v)
            except json.JSONDecodeError as exc:
                raise UsageError(f"--curriculum is not valid JSON: {exc}") from exc
        elif isinstance(getattr(TrainConfig(), f.name), bool):
            v = v == "true"
        train[f.name] = v
    net = NetworkConfig.from_dict(raw["network"]) if "network" in raw else None
    try:
        tcfg = TrainConfig.from_dict(train)
    except TypeError as exc:
        raise ConfigurationError(f"bad training config: {exc}") from exc
    return net, tcfg


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .trainer import train

    net, tcfg = _resolve_configs(args)
    init = None
    if args.init_checkpoint:
        init = load_checkpoint(args.init_checkpoint, config=net)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    lines = []
    ckpt = train(args.corpus, tcfg, init=init, net_config=net, log_fn=lambda r: lines.append(json.dumps(r)))
    save_checkpoint(ckpt, args.out)
    jpeg_core.atomic_write(log_path, ("\n".join(lines) + "\n").encode())
    vl = "n/a" if ckpt.validation_loss is None else f"{ckpt.validation_loss:.6g}"
    print(f"trained QF {ckpt.trained_qf}: checkpoint {args.out} (step {ckpt.step}, validation loss {vl}, "
          f"digest {ckpt.digest[:16]})")
    return EXIT_OK


# -- restore -------------------------------------------------------------------

def cmd_restore(args) -> int:
    from .checkpoint import load_checkpoint
    from .imaging import load_luma, pad_to_block_multiple, save_luma
    from .network import restore

    ckpt = load_checkpoint(args.checkpoint)
    degraded = load_luma(args.input)
    if args.coeffs:
        cdct = jpeg_core.read_coeffs(args.coeffs)
        table_file = _table_path(args.coeffs)
        if not table_file.exists():
            raise FileNotFoundError(f"quantization table {table_file} missing next to {args.coeffs}")
        table = jpeg_core.read_table(table_file)
    else:
        table = jpeg_core.luminance_table(args.qf)
        padded, _ = pad_to_block_multiple(degraded)
        cdct = jpeg_core.quantize(jpeg_core.block_dct(padded), table)
    restored = restore(ckpt.model, degraded, cdct, table)
    save_luma(restored, args.output)
    print(f"restored {args.input} -> {args.output} ({restored.shape[1]}x{restored.shape[0]})")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import evaluate_dataset

    model = None
    if args.checkpoint:
        if args.qf is None:
            raise UsageError("--checkpoint requires --qf")
        model = load_checkpoint(args.checkpoint).model
    if args.test_dir is None and args.qf is None:
        raise UsageError("give --test-dir, or --qf (optionally with --checkpoint)")
    if args.test_dir is not None and (args.qf is not None or model is not None):
        raise UsageError("--test-dir cannot be combined with --qf/--checkpoint")
    if args.test_dir:
        label = f"{args.clean_dir} vs {args.test_dir}"
    else:
        label = f"{args.clean_dir}, QF {args.qf}, {'restored' if model else 'JPEG'}"
    report = evaluate_dataset(args.clean_dir, args.test_dir, model=model, qf=args.qf, label=label)
    print(report.to_table(), end="")
    if args.report:
        jpeg_core.atomic_write(Path(args.report), report.to_lines().encode())
    return EXIT_OK


# -- rf-report -----------------------------------------------------------------

def cmd_rf_report(args) -> int:
    from .network import NetworkConfig, build, pixel_branch_footprint
    from .tensor_engine import LayerSpec, probe_receptive_field, receptive_field

    raw = _load_json(args.config) if args.config else {}
    rows = []
    if "layers" in raw:
        specs = [LayerSpec(**({**s, "kernel": tuple(s["kernel"])} if isinstance(s.get("kernel"), list) else s))
                 for s in raw["layers"]]
        rows.append(("layers", receptive_field(specs), probe_receptive_field(specs)))
    else:
        cfg = NetworkConfig.from_dict(raw.get("network", raw)).validate()
        model = build(cfg, seed=0, dtype=np.float64)
        rows.append(("pixel branch", receptive_field(model.pixel_layer_specs()), pixel_branch_footprint(model)))
        dct_specs = model.dct_layer_specs()
        rows.append(("dct branch", receptive_field(dct_specs), probe_receptive_field(dct_specs)))
    ok = True
    for name, analytic, probe in rows:
        agree = tuple(analytic) == tuple(probe)
        ok &= agree
        print(f"{name}: analytic {analytic[0]}x{analytic[1]}, impulse {probe[0]}x{probe[1]}"
              f"{'' if agree else '  MISMATCH'}")
    if not ok:
        return _fail(EXIT_NUMERIC, "analytic receptive field disagrees with the impulse probe")
    return EXIT_OK


# -- wiring --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dmcnn", description="JPEG artifact removal with a dual-domain multi-scale CNN.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("degrade", help="JPEG-degrade the luma of an image")
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--qf", required=True, type=_qf)
    d.add_argument("--dump-coeffs", metavar="PATH", help="also write quantized coefficients (+ PATH.qtable)")
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", help="train a model on a directory of images")
    t.add_argument("--corpus", required=True)
    t.add_argument("--config", help="JSON file with optional 'network' and 'train' sections")
    t.add_argument("--init-checkpoint")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="training log path (default: OUT.log)")
    _add_train_overrides(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", help="restore a degraded image")
    r.add_argument("--input", required=True)
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--qf", type=_qf)
    src.add_argument("--coeffs")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--output", required=True)
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("eval", help="PSNR / SSIM / PSNR-B over a directory")
    e.add_argument("--clean-dir", required=True)
    e.add_argument("--test-dir")
    e.add_argument("--checkpoint")
    e.add_argument("--qf", type=_qf)
    e.add_argument("--report", help="write the tab-separated per-image report here")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("rf-report", help="receptive field: analytic vs impulse probe")
    f.add_argument("--config", help="JSON network config, or {'layers': [...]} of layer specs")
    f.set_defaults(func=cmd_rf_report)
    return p


def _fail(code: int, message: str) -> int:
    print(f"dmcnn: error: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DMCNN_LOG_LEVEL", "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        # overflow surfaces as NumericFault; numpy's own warning would only duplicate it
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as exc:
        return _fail(EXIT_NUMERIC, f"numeric fault: {exc}")
    except (ImageDecodeError, CheckpointError, ConfigurationError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        return _fail(EXIT_DATA, str(exc))


if __name__ == "__main__":
    sys.exit(main())
