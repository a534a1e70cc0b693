"""``inrv`` command line.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Settings resolve as flag > ``--config`` JSON section > built-in default.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import bench, codec, metrics, numerics
from .resample import DEFAULT_A, downsample
from .siren import SirenConfig, param_count
from .superres import SrConfig, SrTrainConfig, make_sr_pairs, sr_train
from .trainer import TrainConfig
from .volume import VolumeFormatError, format_dims, load_raw, parse_dims, save_raw, sidecar_path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CLI_LAYERS = range(1, 5)

log = logging.getLogger("inrv")


class UsageError(Exception):
    pass


DEFAULTS = {
    "compress": {"lr_dims": None, "layers": 2, "width": 128, "iters": 50_000, "seed": 0,
                 "batch_size": 65536, "learning_rate": 0.0015, "eval_interval": 250,
                 "omega0": 30.0, "omega_hidden": 30.0, "lanczos_a": DEFAULT_A, "sr_model": None},
    "decompress": {"sr_model": None},
    "downsample": {"dims": None, "lanczos_a": DEFAULT_A},
    "train-sr": {"pairs": 200, "patch": 8, "iters": 3000, "batch_size": 8, "learning_rate": 2e-3,
                 "eval_interval": 100, "seed": 0, "blocks": 8, "layers_per_block": 8, "growth": 16,
                 "low_level_channels": 128, "bottleneck_channels": 256, "scale": 4, "phantom_seeds": None,
                 "phantom_dims": "256x256"},
    "phantom": {"dims": "256x256", "seed": 0},
}


def _settings(args, command: str) -> dict:
    defaults = DEFAULTS.get(command, {})
    section = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        section = cfg.get(command, {})
        unknown = sorted(set(section) - set(defaults))
        unknown_sections = sorted(set(cfg) - set(DEFAULTS))
        if unknown or unknown_sections:
            raise UsageError(f"unknown config keys: {', '.join(unknown_sections + unknown)}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else section.get(key, default)
    if args.verbose:
        for key, value in out.items():
            print(f"[{command}] {key} = {value}", file=sys.stderr)
    return out


def _emit(args, payload: dict, text_lines: list[str]):
    if args.json:
        if getattr(args, "no_timing", False):
            payload = {k: v for k, v in payload.items() if k != "timing"}
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in text_lines:
            print(line)


def _load_input(path: str):
    p = Path(path)
    if not sidecar_path(p).exists():
        raise UsageError(f"missing sidecar header {sidecar_path(p)} for {p}")
    if not p.exists():
        raise UsageError(f"input {p} does not exist")
    return load_raw(p)


def _dims(text, what):
    try:
        return parse_dims(text)
    except ValueError as exc:
        raise UsageError(f"{what}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands

def cmd_compress(args) -> int:
    s = _settings(args, "compress")
    if s["lr_dims"] is None:
        raise UsageError("--lr-dims is required")
    if s["layers"] not in CLI_LAYERS:
        raise UsageError(f"--layers {s['layers']} unsupported; supported: {CLI_LAYERS.start}..{CLI_LAYERS.stop - 1}")
    vol = _load_input(args.input)
    lr_dims = _dims(s["lr_dims"], "--lr-dims")
    if vol.is_2d and lr_dims[0] != 1:
        raise UsageError("--lr-dims has a depth but the input is a 2D slice")
    scfg = SirenConfig(in_dim=2 if vol.is_2d else 3, hidden_width=s["width"], hidden_layers=s["layers"],
                       omega0=s["omega0"], omega_hidden=s["omega_hidden"], seed=s["seed"])
    tcfg = TrainConfig(learning_rate=s["learning_rate"], batch_size=s["batch_size"], iterations=s["iters"],
                       eval_interval=s["eval_interval"], seed=s["seed"])
    sr_hash = codec.CodecFile.read(s["sr_model"]).content_hash() if s["sr_model"] else None

    def progress(rec):
        if args.verbose:
            print(f"iter {rec.iteration:6d}  loss {rec.loss:.3e}  psnr {rec.psnr_db:.3f}", file=sys.stderr)

    file = codec.compress(vol, lr_dims, scfg, tcfg, s["lanczos_a"], sr_model_hash=sr_hash, progress=progress)
    file.write(args.output)
    size = Path(args.output).stat().st_size
    rate = codec.compression_rate(vol, file)
    tlog = file.log
    payload = {"output": str(args.output), "lr_psnr_db": metrics.format_psnr(tlog.best_psnr_db),
               "best_iteration": tlog.best_iteration, "param_count": file.param_count,
               "payload_bytes": file.payload_bytes, "file_bytes": size, "compression_rate": rate,
               "timing": {"train_seconds": tlog.train_seconds}}
    _emit(args, payload, [
        f"PSNR (LR fit): {metrics.format_psnr(tlog.best_psnr_db)} dB at iteration {tlog.best_iteration}",
        f"parameters: {file.param_count}  payload: {file.payload_bytes} bytes  file: {size} bytes",
        f"compression rate: {rate:.4f}",
    ])
    return EXIT_OK


def cmd_decompress(args) -> int:
    s = _settings(args, "decompress")
    file = codec.CodecFile.read(args.input)
    sr = codec.CodecFile.read(s["sr_model"]) if s["sr_model"] else None
    vol = codec.decompress(file, sr)
    if vol.meta.get("fallback"):
        print(f"warning: no SR model given; upsampled {format_dims(file.header['lr_dims'])} -> "
              f"{format_dims(vol.dims)} with Lanczos", file=sys.stderr)
    if vol.meta.get("sr_hash_mismatch"):
        print("warning: SR model differs from the one recorded at encode time", file=sys.stderr)
    save_raw(vol, args.output)
    _emit(args, {"output": str(args.output), "dims": list(vol.dims), "upsampler": vol.meta["upsampler"],
                 "fallback": vol.meta["fallback"]},
          [f"wrote {args.output} ({format_dims(vol.dims)}, upsampler: {vol.meta['upsampler']})"])
    return EXIT_OK


def cmd_eval(args) -> int:
    _settings(args, "eval")
    a, b = _load_input(args.a), _load_input(args.b)
    if a.dims != b.dims:
        raise VolumeFormatError(f"dims differ: {a.dims} vs {b.dims}")
    q = metrics.quality(a, b)
    _emit(args, q.as_dict(), [f"PSNR: {metrics.format_psnr(q.psnr_db)}", f"MSE: {q.mse}"])
    return EXIT_OK


def cmd_downsample(args) -> int:
    s = _settings(args, "downsample")
    if s["dims"] is None:
        raise UsageError("--dims is required")
    vol = _load_input(args.input)
    target = _dims(s["dims"], "--dims")
    if vol.is_2d and target[0] != 1:
        raise UsageError("--dims has a depth but the input is a 2D slice")
    out = downsample(vol, target, s["lanczos_a"])
    save_raw(out, args.output)
    _emit(args, {"output": str(args.output), "dims": list(out.dims), "voxels": out.voxel_count},
          [f"wrote {args.output} ({format_dims(out.dims)}, {out.voxel_count} voxels)"])
    return EXIT_OK


def cmd_train_sr(args) -> int:
    s = _settings(args, "train-sr")
    cfg = SrConfig(blocks=s["blocks"], layers_per_block=s["layers_per_block"], growth=s["growth"],
                   low_level_channels=s["low_level_channels"], bottleneck_channels=s["bottleneck_channels"],
                   scale=s["scale"], seed=s["seed"])
    if args.inputs:
        vols = [_load_input(p) for p in args.inputs]
    else:
        seeds = s["phantom_seeds"] or [100, 101, 102, 103]
        vols = [bench.make_phantom(_dims(s["phantom_dims"], "--phantom-dims"), sd) for sd in seeds]
    per = int(math.ceil(s["pairs"] / len(vols)))
    pairs = []
    for i, v in enumerate(vols):
        pairs += make_sr_pairs(v, min(per, s["pairs"] - len(pairs)), s["patch"], cfg.scale, seed=s["seed"] + i)
    tcfg = SrTrainConfig(iterations=s["iters"], batch_size=s["batch_size"], learning_rate=s["learning_rate"],
                         eval_interval=s["eval_interval"], seed=s["seed"])

    def progress(rec):
        if args.verbose:
            print(f"iter {rec[0]:6d}  val psnr {rec[2]:.3f}", file=sys.stderr)

    model, slog = sr_train(pairs, cfg, tcfg, progress=progress)
    file = codec.sr_to_file(model, best_val_psnr_db=metrics.format_psnr(slog.best_val_psnr_db))
    file.write(args.output)
    _emit(args, {"output": str(args.output), "param_count": file.param_count,
                 "best_val_psnr_db": metrics.format_psnr(slog.best_val_psnr_db),
                 "content_hash": file.content_hash()},
          [f"wrote {args.output}: {file.param_count} parameters, validation PSNR "
           f"{slog.best_val_psnr_db:.3f} dB", f"hash: {file.content_hash()}"])
    return EXIT_OK


def cmd_bench(args) -> int:
    _settings(args, "bench")
    try:
        plan = bench.BenchPlan.load(args.plan)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid plan {args.plan}: {exc}") from exc

    def progress(cell):
        if args.verbose:
            print(f"{cell.pipeline}/{cell.layers}/{cell.seed}: psnr {cell.psnr_db:.3f} ({cell.status})",
                  file=sys.stderr)

    out = Path(args.output)
    report = bench.run(plan, out, progress=progress)
    failed = sum(not c.ok for c in report.cells)
    _emit(args, {"output_dir": str(out), "cells": len(report.cells), "failed": failed,
                 "psnr_db": [metrics.format_psnr(c.psnr_db) for c in report.cells]},
          [report_line for report_line in bench.report_render(report, "markdown").splitlines()])
    return EXIT_OK


def cmd_phantom(args) -> int:
    s = _settings(args, "phantom")
    dims = _dims(s["dims"], "--dims")
    vol = bench.make_phantom(dims, s["seed"])
    save_raw(vol, args.output)
    _emit(args, {"output": str(args.output), "dims": list(vol.dims), "mean": float(vol.data.mean())},
          [f"wrote {args.output} ({format_dims(vol.dims)})"])
    return EXIT_OK


def cmd_inspect(args) -> int:
    _settings(args, "inspect")
    file = codec.CodecFile.read(args.input)
    info = {"model_kind": file.model_kind, "version": file.version, "param_count": file.param_count,
            "payload_bytes": file.payload_bytes, "content_hash": file.content_hash(),
            "roundtrip_ok": codec.roundtrip_check(file.encode_bytes()), "header": file.header}
    if file.model_kind == "siren":
        info["expected_param_count"] = param_count(SirenConfig.from_dict(file.header["arch"]))
    lines = [f"{k}: {v}" for k, v in info.items() if k != "header"]
    lines += [f"header.{k}: {json.dumps(v)}" for k, v in sorted(file.header.items())]
    _emit(args, info, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--no-timing", action="store_true", help="drop timing fields from --json output")
    common.add_argument("--verbose", "-v", action="store_true", help="echo effective settings and progress")
    common.add_argument("--config", help="JSON file with per-subcommand sections")

    p = argparse.ArgumentParser(prog="inrv", description="Neural volume compression codec.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compress", parents=[common], help="fit a coordinate network to a volume")
    c.add_argument("input")
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--lr-dims", dest="lr_dims")
    c.add_argument("--layers", type=int)
    c.add_argument("--width", type=int)
    c.add_argument("--iters", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--batch-size", dest="batch_size", type=int)
    c.add_argument("--lr", dest="learning_rate", type=float)
    c.add_argument("--eval-interval", dest="eval_interval", type=int)
    c.add_argument("--omega0", type=float)
    c.add_argument("--omega-hidden", dest="omega_hidden", type=float)
    c.add_argument("--lanczos-a", dest="lanczos_a", type=int)
    c.add_argument("--sr-model", dest="sr_model", help="SR model whose hash is recorded in the file")
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", parents=[common], help="decode a .inrv file to raw")
    d.add_argument("input")
    d.add_argument("-o", "--output", required=True)
    d.add_argument("--sr-model", dest="sr_model")
    d.set_defaults(func=cmd_decompress)

    e = sub.add_parser("eval", parents=[common], help="PSNR/MSE between two raw volumes")
    e.add_argument("a")
    e.add_argument("b")
    e.set_defaults(func=cmd_eval)

    ds = sub.add_parser("downsample", parents=[common], help="Lanczos downsample a raw volume")
    ds.add_argument("input")
    ds.add_argument("--dims")
    ds.add_argument("--lanczos-a", dest="lanczos_a", type=int)
    ds.add_argument("-o", "--output", required=True)
    ds.set_defaults(func=cmd_downsample)

    t = sub.add_parser("train-sr", parents=[common], help="train the super-resolution network")
    t.add_argument("inputs", nargs="*", help="HR raw volumes (default: bundled phantoms)")
    t.add_argument("-o", "--output", required=True)
    for flag in ("pairs", "patch", "iters", "batch-size", "eval-interval", "seed", "blocks",
                 "layers-per-block", "growth", "low-level-channels", "bottleneck-channels", "scale"):
        t.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--phantom-seeds", dest="phantom_seeds", type=int, nargs="+")
    t.add_argument("--phantom-dims", dest="phantom_dims")
    t.set_defaults(func=cmd_train_sr)

    b = sub.add_parser("bench", parents=[common], help="run a benchmark plan")
    b.add_argument("plan")
    b.add_argument("-o", "--output", default="bench_out")
    b.set_defaults(func=cmd_bench)

    ph = sub.add_parser("phantom", parents=[common], help="write the synthetic phantom")
    ph.add_argument("--dims")
    ph.add_argument("--seed", type=int)
    ph.add_argument("-o", "--output", required=True)
    ph.set_defaults(func=cmd_phantom)

    i = sub.add_parser("inspect", parents=[common], help="print a .inrv header")
    i.add_argument("input")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # user-facing warnings are printed by the subcommands; library logging only when asked
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"inrv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (numerics.NonFiniteError, FloatingPointError) as exc:
        print(f"inrv {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (codec.CodecError, VolumeFormatError, ValueError, OSError) as exc:
        print(f"inrv {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
