"""Command-line front door: synth / train / deblur / eval / bench.

Every subcommand accepts ``--config file.json`` (flat key-value JSON whose
keys match flag names); explicit flags override file values. Every artifact
written to disk is accompanied by a manifest carrying the full config echo,
the seed, and input hashes.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from streamdeblur.evaluate import benchmark, evaluate_pairs, framewise_curve, run_stream
from streamdeblur.frameio import (
    chw_to_hwc,
    collect_pair_manifests,
    find_frames,
    hwc_to_chw,
    load_frame_stack,
    load_pair_manifest,
    read_json,
    save_frame,
    sha256_file,
    write_json,
    write_pair_manifest,
)
from streamdeblur.model import ModelConfig, load_checkpoint, save_checkpoint
from streamdeblur.synth import (
    GENERATOR_KINDS,
    FrameSequence,
    SynthConfig,
    area_downsample,
    generate_synthetic_highspeed,
    sample_config,
    synthesize_video,
)
from streamdeblur.training import LossConfig, NumericError, run_training, write_training_log

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    """Bad flag combinations or values; maps to exit code 2."""


def _provenance(command: str, args: argparse.Namespace, inputs: list[Path]) -> dict:
    config_echo = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k not in ("func", "command")
    }
    return {
        "command": command,
        "config": config_echo,
        "seed": getattr(args, "seed", None),
        "input_hashes": {str(p): sha256_file(p) for p in inputs},
    }


def _load_frames_chw(source: str) -> tuple[np.ndarray, list[Path]]:
    files = find_frames(source)
    if not files:
        raise ValueError(f"no frames found at {source!r}")
    stack = load_frame_stack(files)
    return np.stack([hwc_to_chw(f) for f in stack]), files


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise UsageError(f"--resolution must look like 640x480, got {text!r}") from exc


def _parse_velocity(text: str) -> tuple[float, float]:
    try:
        vx, vy = text.split(",")
        return float(vx), float(vy)
    except ValueError as exc:
        raise UsageError(f"--velocity must look like 1.0,0.0 got {text!r}") from exc


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    inputs: list[Path] = []
    if (args.input is None) == (args.generate is None):
        raise UsageError("provide exactly one of --input or --generate")

    if args.random_config:
        cfg = sample_config(rng)
    else:
        if args.tau is None or args.interval is None:
            raise UsageError("provide --tau and --interval, or --random-config")
        if not args.tau <= args.interval < 2 * args.tau:
            raise UsageError(
                f"interval must satisfy tau <= interval < 2*tau, got tau={args.tau} "
                f"interval={args.interval}"
            )
        cfg = SynthConfig(tau=args.tau, interval=args.interval)

    if args.input is not None:
        inputs = find_frames(args.input)
        if not inputs:
            raise ValueError(f"no frames found at {args.input!r}")
        seq = FrameSequence(load_frame_stack(inputs), fps=args.fps)
    else:
        params = {"frame_count": args.frames, "height": args.height, "width": args.width, "fps": args.fps}
        if args.velocity is not None:
            params["velocity"] = _parse_velocity(args.velocity)
        seq = generate_synthetic_highspeed(args.generate, params, rng)

    if args.downsample:
        seq = FrameSequence(area_downsample(seq.frames, 0.75), seq.fps, seq.metadata)

    video = synthesize_video(seq, cfg)
    if not video.pairs:
        raise ValueError(
            f"sequence of {len(seq)} frames is too short for tau={cfg.tau}, interval={cfg.interval}"
        )

    out = Path(args.out)
    pair_files = []
    for pair in video.pairs:
        blurry_rel = f"blurry/{pair.index:05d}.png"
        sharp_rel = f"sharp/{pair.index:05d}.png"
        save_frame(out / blurry_rel, pair.blurry)
        save_frame(out / sharp_rel, pair.sharp)
        pair_files.append({"index": pair.index, "blurry": blurry_rel, "sharp": sharp_rel})
    write_pair_manifest(
        out / "manifest.json",
        pair_files,
        fps=video.fps,
        tau=cfg.tau,
        interval=cfg.interval,
        provenance=_provenance("synth", args, inputs),
    )
    print(f"wrote {len(pair_files)} pairs to {out} (tau={cfg.tau}, interval={cfg.interval})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    manifests = collect_pair_manifests(args.data)
    if not manifests:
        raise ValueError(f"no blur-pairs manifests found at {args.data!r}")
    dataset = [load_pair_manifest(p) for p in manifests]
    config = ModelConfig(
        variant=args.variant,
        window_m=args.m,
        encoder_blocks=args.enc_blocks,
        decoder_blocks=args.dec_blocks,
        channels=args.channels,
        feature_channels=args.feature_channels,
        scale=args.scale,
    )

    def progress(row):
        print(
            f"iter {row['iteration']:6d}  lr {row['lr']:.3e}  loss {row['loss']:.6f}  "
            f"mse {row['e_mse']:.6f}"
        )

    result = run_training(
        dataset,
        config,
        iterations=args.iters,
        batch_size=args.batch,
        seed=args.seed,
        loss_cfg=LossConfig(weight_decay=args.weight_decay),
        base_lr=args.lr,
        decay_rate=args.decay_rate,
        decay_every=args.decay_every,
        seq_len=args.seq_len,
        crop=args.crop,
        progress=progress if args.verbose else None,
    )

    ckpt = Path(args.ckpt_out)
    save_checkpoint(ckpt, result.params, result.config)
    log_path = Path(args.log_out) if args.log_out else ckpt.with_suffix(".log.csv")
    write_training_log(log_path, result.log)
    run_manifest = {
        "provenance": _provenance("train", args, manifests),
        "checkpoint": ckpt.name,
        "log": log_path.name,
        "final_loss": result.log[-1]["loss"] if result.log else None,
    }
    write_json(ckpt.with_suffix(".run.json"), run_manifest)
    print(f"trained {args.iters} iterations; checkpoint at {ckpt}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# deblur / eval / bench
# ---------------------------------------------------------------------------


def cmd_deblur(args: argparse.Namespace) -> int:
    params, config = load_checkpoint(args.ckpt)
    frames, inputs = _load_frames_chw(args.input)
    outputs, report = run_stream(frames, params, config)
    out = Path(args.out)
    for i, frame in enumerate(outputs):
        save_frame(out / f"{i:05d}.png", chw_to_hwc(frame))
    payload = {
        "report": report.to_dict(),
        "provenance": _provenance("deblur", args, [Path(args.ckpt), *inputs]),
    }
    write_json(out / "manifest.json", payload)
    if args.report:
        write_json(args.report, payload)
    print(f"deblurred {report.frame_count} frames at {report.fps:.2f} fps (compute only)")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    params, config = load_checkpoint(args.ckpt)
    manifests = collect_pair_manifests(args.pairs)
    if not manifests:
        raise ValueError(f"no blur-pairs manifests found at {args.pairs!r}")
    sequences = [load_pair_manifest(p) for p in manifests]
    rows = []
    reports = []
    for path, pairs in zip(manifests, sequences):
        _, report = evaluate_pairs(pairs, params, config)
        reports.append(report)
        rows.append((path.parent.name or str(path), report.mean_psnr, report.fps))
    overall = float(np.mean([r.mean_psnr for r in reports]))
    curve = framewise_curve(sequences, params, config) if args.curve else None

    name_w = max(len(r[0]) for r in rows)
    print(f"{'sequence'.ljust(name_w)}  mean_psnr_db  fps")
    for name, score, fps in rows:
        print(f"{name.ljust(name_w)}  {score:12.3f}  {fps:.2f}")
    print(f"{'overall'.ljust(name_w)}  {overall:12.3f}")

    if args.report:
        payload = {
            "sequences": [
                {"manifest": str(p), "report": r.to_dict()} for p, r in zip(manifests, reports)
            ],
            "mean_psnr": overall,
            "framewise_curve": curve,
            "provenance": _provenance("eval", args, [Path(args.ckpt), *manifests]),
        }
        write_json(args.report, payload)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    params, config = load_checkpoint(args.ckpt)
    resolution = _parse_resolution(args.resolution)
    report = benchmark(params, config, resolution, args.frames, seed=args.seed)
    ms = 1000.0 * np.mean(report.per_frame_seconds)
    print(
        f"{resolution[0]}x{resolution[1]}  frames {report.frame_count}  "
        f"{ms:.1f} ms/frame  {report.fps:.2f} fps  lookahead {report.lookahead_frames} frames"
    )
    if args.report:
        payload = {
            "resolution": list(resolution),
            "report": report.to_dict(),
            "provenance": _provenance("bench", args, [Path(args.ckpt)]),
        }
        write_json(args.report, payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamdeblur",
        description="Online video deblurring: synthesize blur pairs, train, deblur, evaluate, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="synthesize blurry/sharp pairs from high-speed frames")
    synth.add_argument("--config", help="flat JSON config file; flags override its values")
    synth.add_argument("--input", help="directory or glob of high-speed frames (PNG/PPM)")
    synth.add_argument("--generate", choices=GENERATOR_KINDS, help="synthesize the high-speed input instead")
    synth.add_argument("--fps", type=float, default=240.0, help="input frame rate")
    synth.add_argument("--tau", type=int, help="effective shutter: frames averaged per blurry frame")
    synth.add_argument("--interval", type=int, help="stride between synthesized frames")
    synth.add_argument("--random-config", action="store_true", help="sample tau/interval from the standard ranges")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--frames", type=int, default=64, help="generator frame count")
    synth.add_argument("--height", type=int, default=64)
    synth.add_argument("--width", type=int, default=64)
    synth.add_argument("--velocity", help="generator velocity as vx,vy pixels/frame")
    synth.add_argument("--downsample", action="store_true", help="area-average 0.75x preprocessing")
    synth.add_argument("--out", required=True, help="output directory")
    synth.set_defaults(func=cmd_synth)

    train = sub.add_parser("train", help="train a deblurring model on synthesized pairs")
    train.add_argument("--config", help="flat JSON config file; flags override its values")
    train.add_argument("--data", required=True, help="pairs manifest, directory, or glob")
    train.add_argument("--variant", default="strcnn-dtb", choices=("cnn", "strcnn", "strcnn-dtb"))
    train.add_argument("--m", type=int, default=2, help="temporal window half-width")
    train.add_argument("--iters", type=int, default=500)
    train.add_argument("--batch", type=int, default=8)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--ckpt-out", required=True, help="checkpoint manifest path (json)")
    train.add_argument("--scale", type=float, default=1.0, help="channel-width multiplier for toy runs")
    train.add_argument("--channels", type=int, default=64)
    train.add_argument("--feature-channels", type=int, default=32)
    train.add_argument("--enc-blocks", type=int, default=5)
    train.add_argument("--dec-blocks", type=int, default=4)
    train.add_argument("--lr", type=float, default=1e-4)
    train.add_argument("--decay-rate", type=float, default=0.96)
    train.add_argument("--decay-every", type=int, default=1000)
    train.add_argument("--weight-decay", type=float, default=1e-5)
    train.add_argument("--seq-len", type=int, default=13)
    train.add_argument("--crop", type=int, default=128)
    train.add_argument("--log-out", help="CSV training log path")
    train.add_argument("--verbose", action="store_true")
    train.set_defaults(func=cmd_train)

    deblur = sub.add_parser("deblur", help="deblur a frame directory with a trained checkpoint")
    deblur.add_argument("--config", help="flat JSON config file; flags override its values")
    deblur.add_argument("--ckpt", required=True)
    deblur.add_argument("--input", required=True, help="directory or glob of blurry frames")
    deblur.add_argument("--out", required=True)
    deblur.add_argument("--report", help="also write the timing report to this JSON path")
    deblur.set_defaults(func=cmd_deblur)

    ev = sub.add_parser("eval", help="PSNR evaluation against sharp references")
    ev.add_argument("--config", help="flat JSON config file; flags override its values")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--pairs", required=True, help="pairs manifest, directory, or glob")
    ev.add_argument("--curve", action="store_true", help="include the frame-wise PSNR curve")
    ev.add_argument("--report", help="write the JSON report to this path")
    ev.set_defaults(func=cmd_eval)

    bench = sub.add_parser("bench", help="throughput benchmark on random frames")
    bench.add_argument("--config", help="flat JSON config file; flags override its values")
    bench.add_argument("--ckpt", required=True)
    bench.add_argument("--resolution", default="640x480", help="WxH, e.g. 640x480")
    bench.add_argument("--frames", type=int, default=10)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--report", help="write the JSON report to this path")
    bench.set_defaults(func=cmd_bench)

    return parser


def _apply_config_defaults(parser: argparse.ArgumentParser, command: str | None, config_path: str):
    """Install config-file values as subparser defaults before the real parse."""
    try:
        overrides = read_json(config_path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config file {config_path}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise UsageError(f"config file {config_path} must hold a flat JSON object")
    normalized = {k.replace("-", "_"): v for k, v in overrides.items()}
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            subparser = action.choices[command]
            valid = {a.dest for a in subparser._actions}
            unknown = [k for k in normalized if k not in valid]
            if unknown:
                raise UsageError(f"config file {config_path} has unknown keys: {unknown}")
            subparser.set_defaults(**normalized)
            for sub_action in subparser._actions:
                if sub_action.dest in normalized:
                    sub_action.required = False


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            command = next((a for a in argv if not a.startswith("-")), None)
            _apply_config_defaults(parser, command, known.config)
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
