"""Command-line entry points.

Subcommands: synth | ingest | pretrain | finetune | eval | estimate.
Every hyper-parameter is settable by flag or by a key=value config file
(flags win). Each training/eval run writes run_info.txt (config, seed,
git describe) beside its outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from .data import ContainerError, DataError, Dataset, read_clip
from .models import build_tap_readouts, estimate_rppg
from .params import load_checkpoint, read_sidecar
from .pipeline import (
    ConfigError,
    RunConfig,
    SplitError,
    desk_preset,
    evaluate,
    finetune,
    paper_preset,
    pretrain,
    read_config_file,
    write_run_info,
)
from .spectrum import RppgSignal, SignalError, estimate_hr
from .synth import generate_raw_dataset, ingest_dataset
from .tensor import NonFiniteError, Tensor, no_grad
from .augment import make_rng


def _add_run_flags(p):
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--preset", choices=["paper", "desk"], default="paper")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "int":
            p.add_argument(flag, type=int, default=None)
        elif f.type == "float":
            p.add_argument(flag, type=float, default=None)
        else:
            p.add_argument(flag, type=str, default=None)


def _resolve_config(args) -> RunConfig:
    base = desk_preset() if args.preset == "desk" else paper_preset()
    items = {f.name: getattr(base, f.name) for f in fields(RunConfig)}
    if args.config:
        items.update(read_config_file(args.config))
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            items[f.name] = value
    return RunConfig.from_items(items)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rppg",
        description="Contactless heart-rate estimation: self-supervised pre-training, waveform fine-tuning, spectral HR readout.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic pulsatile videos with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--train-videos", type=int, default=20)
    p.add_argument("--test-videos", type=int, default=8)
    p.add_argument("--frames", type=int, default=96)
    p.add_argument("--fps", type=float, default=20.0)
    p.add_argument("--hr-min", type=float, default=50.0)
    p.add_argument("--hr-max", type=float, default=110.0)
    p.add_argument("--amplitude", type=float, default=0.06)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--motion-amplitude", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ingest", help="crop RoIs and window raw videos into training clips")
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip-len", type=int, default=128)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--roi-size", type=int, default=64)
    p.add_argument("--roi-mode", choices=["full", "cheeks", "forehead"], default="full")

    p = sub.add_parser("pretrain", help="stage 1: contrastive self-supervised pre-training")
    p.add_argument("--data", required=True, help="manifest.tsv of an ingested dataset")
    p.add_argument("--out", required=True)
    _add_run_flags(p)

    p = sub.add_parser("finetune", help="stage 2: supervised waveform fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="stage-1 checkpoint; omit for the supervised baseline")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="where to write the JSON report (default: stdout)")
    _add_run_flags(p)

    p = sub.add_parser("estimate", help="heart rate of a single clip file")
    p.add_argument("--clip", required=True)
    p.add_argument("--checkpoint", required=True)
    _add_run_flags(p)

    return parser


def _cmd_synth(args):
    generate_raw_dataset(
        args.out,
        n_train=args.train_videos,
        n_test=args.test_videos,
        seed=args.seed,
        hr_range=(args.hr_min, args.hr_max),
        frames=args.frames,
        fps=args.fps,
        amplitude=args.amplitude,
        noise_sigma=args.noise_sigma,
        motion_amplitude=args.motion_amplitude,
    )
    print(f"wrote {args.train_videos + args.test_videos} videos to {args.out}")
    return 0


def _cmd_ingest(args):
    manifest = ingest_dataset(
        args.raw, args.out, clip_len=args.clip_len, stride=args.stride,
        roi_size=args.roi_size, roi_mode=args.roi_mode,
    )
    print(f"wrote {manifest}")
    return 0


def _require_dir(path, what):
    if not os.path.exists(path):
        print(f"error: {what} not found: {path}", file=sys.stderr)
        return False
    return True


def _cmd_pretrain(args):
    if not _require_dir(args.data, "dataset manifest"):
        return 2
    cfg = _resolve_config(args)
    ds = Dataset(args.data)
    _, log, final = pretrain(cfg, ds, args.out)
    print(f"final loss {log.epochs[-1]['loss']:.4f}; checkpoint {final}")
    return 0


def _cmd_finetune(args):
    if not _require_dir(args.data, "dataset manifest"):
        return 2
    if args.init and not _require_dir(args.init, "init checkpoint"):
        return 2
    cfg = _resolve_config(args)
    ds = Dataset(args.data)
    _, log, final = finetune(cfg, ds, args.out, init=args.init)
    print(f"final loss {log.epochs[-1]['loss']:.4f}; checkpoint {final}")
    return 0


def _cmd_eval(args):
    if not _require_dir(args.data, "dataset manifest") or not _require_dir(args.checkpoint, "checkpoint"):
        return 2
    cfg = _resolve_config(args)
    meta_path = args.checkpoint + ".meta"
    if os.path.exists(meta_path):
        meta = read_sidecar(meta_path)
        if meta.get("encoder", cfg.encoder) != cfg.encoder:
            print(f"error: checkpoint encoder {meta.get('encoder')} != {cfg.encoder}", file=sys.stderr)
            return 2
    ds = Dataset(args.data)
    params = load_checkpoint(args.checkpoint)
    report = evaluate(cfg, ds, params)
    text = report.to_json()
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        write_run_info(os.path.dirname(os.path.abspath(args.out)), cfg)
        print(f"MAE {report.mae:.2f} bpm, RMSE {report.rmse:.2f} bpm, R {report.r:.3f} -> {args.out}")
    else:
        print(text)
    return 0


def _cmd_estimate(args):
    if not _require_dir(args.clip, "clip file") or not _require_dir(args.checkpoint, "checkpoint"):
        return 2
    cfg = _resolve_config(args)
    clip = read_clip(args.clip)
    params = load_checkpoint(args.checkpoint)
    if "tap5.weight" not in params:
        params.merge(build_tap_readouts(make_rng((cfg.seed, 99))))
    with no_grad():
        outputs = estimate_rppg(Tensor(clip.frames[None]), params, cfg.encoder, training=False)
    hr = estimate_hr(RppgSignal(outputs.p_out.data[0], clip.fps))
    print(f"{hr.bpm:.1f} bpm")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "estimate": _cmd_estimate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataError, ContainerError, SignalError, SplitError, NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
