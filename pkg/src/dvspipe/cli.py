"""Command-line entry point tying the pipeline stages into workflows.

Subcommands: gen, filter, dict, decode, train, detect, bench. Every run
writes a JSON manifest next to its outputs recording the subcommand, the
effective configuration, seeds, and paths, so a run can be reproduced from
the manifest alone (wall-clock time is recorded but is not part of any
determinism guarantee).

Exit codes: 0 success, 2 usage or argument validation, 3 configuration or
dimension mismatch, 4 I/O or malformed input files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from . import __version__, bench, bnn, codec, synth
from .events import EventFileError, read_event_file
from .filter import (
    FilterConfig,
    filter_pipeline,
    load_frames,
    pooled_shape,
    save_frames,
)


class MismatchError(Exception):
    """Configuration or dimension mismatch (exit code 3)."""


_FILTER_FLAGS = {
    "tau_us": "tau",
    "agg_threshold": "agg_event_threshold",
    "agg_limit": "agg_window_limit",
    "pool": "pool",
    "refractory_us": "refractory",
}


def _add_filter_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value config file")
    parser.add_argument("--tau-us", type=int, help="window length in microseconds")
    parser.add_argument("--agg-threshold", type=int, help="aggregation trigger count")
    parser.add_argument("--agg-limit", type=int, help="window budget before clearing")
    parser.add_argument("--pool", type=int, help="pooling block edge length")
    parser.add_argument("--refractory-us", type=int, help="minimum emission spacing")
    parser.add_argument(
        "--no-coincidence", action="store_true", help="disable the coincidence stage"
    )
    parser.add_argument(
        "--no-aggregation", action="store_true", help="disable the aggregation stage"
    )


def _filter_config(args: argparse.Namespace) -> FilterConfig:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    values: dict = {}
    if args.config is not None:
        try:
            file_config = FilterConfig.from_file(args.config)
        except FileNotFoundError:
            raise
        except ValueError as exc:
            raise MismatchError(str(exc)) from exc
        values = dataclasses.asdict(file_config)
    for flag, field in _FILTER_FLAGS.items():
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            values[field] = flag_value
    if getattr(args, "no_coincidence", False):
        values["coincidence"] = False
    if getattr(args, "no_aggregation", False):
        values["aggregation"] = False
    try:
        return FilterConfig(**values)
    except ValueError as exc:
        raise MismatchError(str(exc)) from exc


def _write_manifest(
    target: Path, subcommand: str, args: argparse.Namespace, started: float, **extra
) -> None:
    """Manifest lands next to the outputs: <dir>/manifest.json for directory
    outputs, <file>.manifest.json otherwise."""
    if target.is_dir():
        path = target / "manifest.json"
    else:
        path = target.with_name(target.name + ".manifest.json")
    arg_dict = {k: v for k, v in vars(args).items() if k != "func"}
    payload = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "args": arg_dict,
        "wall_clock_s": round(time.time() - started, 3),
        **extra,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=str)
        fh.write("\n")


def cmd_gen(args: argparse.Namespace) -> int:
    started = time.time()
    if args.pos < 1 or args.neg < 1:
        raise ValueError("--pos and --neg must be at least 1")
    base = synth.SceneSpec(
        duration=args.duration_us,
        edge_rate=args.edge_rate,
        noise_rate=args.noise_rate,
    )
    train, test = synth.build_dataset(args.pos, args.neg, base=base, seed=args.seed)
    out = Path(args.out)
    manifest = synth.save_dataset(out, train + test)
    _write_manifest(
        out,
        "gen",
        args,
        started,
        config=dataclasses.asdict(base),
        seeds=[args.seed],
        outputs=[str(manifest)],
        n_train=len(train),
        n_test=len(test),
    )
    print(f"wrote {len(train) + len(test)} clips to {out}", file=sys.stderr)
    return 0


def cmd_filter(args: argparse.Namespace) -> int:
    started = time.time()
    if args.packets and args.dict is None:
        raise ValueError("--packets requires --dict")
    config = _filter_config(args)
    geometry, events = read_event_file(args.input)
    try:
        config.validate_geometry(geometry)
    except ValueError as exc:
        raise MismatchError(str(exc)) from exc
    frames = filter_pipeline(events, config, geometry)
    shape = pooled_shape(geometry, config.pool)
    out = Path(args.out)
    if args.packets:
        dictionary = codec.load_dictionary(args.dict)
        with open(out, "wb") as fh:
            for frame in frames:
                fh.write(codec.frame_packet(frame, dictionary))
        payload_bits = sum(
            bench.packet_bits_for(f, dictionary, huffman=True) for f in frames
        )
    else:
        save_frames(out, frames, shape)
        payload_bits = sum(f.payload_bits for f in frames)
    duration_s = (int(events["t"].max()) + 1) / 1e6 if events.size else 0.0
    bitrate = payload_bits / duration_s if duration_s else 0.0
    print(
        f"{len(frames)} frames emitted, {payload_bits} bits "
        f"({bitrate:.1f} bits/s over the clip)",
        file=sys.stderr,
    )
    _write_manifest(
        out,
        "filter",
        args,
        started,
        config=dataclasses.asdict(config),
        inputs=[str(args.input)],
        outputs=[str(out)],
        frames=len(frames),
    )
    return 0


def cmd_dict(args: argparse.Namespace) -> int:
    started = time.time()
    frames = []
    for path in args.frames:
        frames.extend(load_frames(path)[0])
    if not frames:
        raise ValueError("no frames in the given corpus")
    dictionary = codec.build_dictionary(frames)
    out = Path(args.out)
    codec.save_dictionary(out, dictionary)
    _write_manifest(
        out,
        "dict",
        args,
        started,
        inputs=[str(p) for p in args.frames],
        outputs=[str(out)],
        frames=len(frames),
    )
    print(f"dictionary over {len(frames)} frames -> {out}", file=sys.stderr)
    return 0


def cmd_decode(args: argparse.Namespace) -> int:
    started = time.time()
    dictionary = codec.load_dictionary(args.dict)
    with open(args.input, "rb") as fh:
        data = fh.read()
    shape = (args.rows, args.cols)
    frames, stats = codec.deframe_stream(data, dictionary, shape)
    out = Path(args.out)
    save_frames(out, frames, shape)
    print(
        f"{stats.packets_ok} packets ok, {stats.checksum_failures} checksum "
        f"failures, {stats.resyncs} resyncs, {stats.bytes_discarded} bytes discarded",
        file=sys.stderr,
    )
    _write_manifest(
        out,
        "decode",
        args,
        started,
        inputs=[str(args.input)],
        outputs=[str(out)],
        stats=dataclasses.asdict(stats),
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    frames = []
    labels = []
    shape = None
    for path, label in args.frames:
        file_frames, file_shape = load_frames(path)
        if shape is None:
            shape = file_shape
        elif file_shape != shape:
            raise MismatchError(f"{path}: frame shape {file_shape} != {shape}")
        frames.extend(file_frames)
        labels.extend([bool(int(label))] * len(file_frames))
    if shape is None or not frames:
        raise ValueError("no training frames given")
    if min(shape) < args.kernel:
        raise MismatchError(f"frames {shape} smaller than kernel {args.kernel}")
    config = bnn.TrainConfig(
        n_filters=args.filters,
        kernel=args.kernel,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
    )
    try:
        model, losses = bnn.train(frames, labels, config)
    except bnn.ModelError as exc:
        raise ValueError(str(exc)) from exc
    out = Path(args.out)
    bnn.save_model(out, model)
    print(
        f"trained on {len(frames)} frames, final loss {losses[-1]:.4f} -> {out}",
        file=sys.stderr,
    )
    _write_manifest(
        out,
        "train",
        args,
        started,
        config=dataclasses.asdict(config),
        inputs=[str(p) for p, _ in args.frames],
        outputs=[str(out)],
        loss_curve=[round(x, 6) for x in losses],
    )
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    model = bnn.load_model(args.model)
    if args.dict is not None:
        dictionary = codec.load_dictionary(args.dict)
        with open(args.input, "rb") as fh:
            data = fh.read()
        frames, stats = codec.deframe_stream(data, dictionary, (args.rows, args.cols))
        if stats.checksum_failures:
            print(f"{stats.checksum_failures} checksum failures", file=sys.stderr)
    else:
        frames, _ = load_frames(args.input)
    if frames and min(frames[0].h_pooled.shape) < model.kernel:
        raise MismatchError(
            f"model kernel {model.kernel} exceeds frame planes "
            f"{frames[0].h_pooled.shape}"
        )
    for frame in frames:
        detection = bnn.detect(frame, model)
        print(f"{frame.emit_time} {detection.score:.6f} {int(detection.decision)}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    started = time.time()
    if args.pos < 1 or args.neg < 1:
        raise ValueError("--pos and --neg must be at least 1")
    base_filter = _filter_config(args)
    base_scene = synth.SceneSpec(
        duration=args.duration_us,
        edge_rate=args.edge_rate,
        noise_rate=args.noise_rate,
    )
    train_clips, test_clips = synth.build_dataset(
        args.pos, args.neg, base=base_scene, seed=args.seed
    )
    by_name = {v.name: v for v in bench.DEFAULT_VARIANTS}
    try:
        variants = [by_name[name] for name in args.variants.split(",")]
    except KeyError as exc:
        raise ValueError(f"unknown variant {exc.args[0]!r}; choose from {sorted(by_name)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_config = bnn.TrainConfig(epochs=args.epochs, seed=args.seed)
    report = bench.run_ablation(
        train_clips,
        test_clips,
        variants=variants,
        train_config=train_config,
        base_filter=base_filter,
        out_dir=out,
    )
    for row in report.rows:
        status = f"FAILED: {row.error}" if row.failed else f"f1={row.f1:.3f}"
        bw = row.bandwidth
        print(
            f"{row.name}: {bw.bitrate_bps / 1e3:.2f} kbps, "
            f"mean packet {bw.mean_packet_bits:.0f} bits, {status}",
            file=sys.stderr,
        )
    if args.throughput:
        rate, total = bench.measure_throughput(test_clips, base_filter)
        print(f"throughput: {rate / 1e6:.2f} M events/s over {total} events", file=sys.stderr)
    _write_manifest(
        out,
        "bench",
        args,
        started,
        config=dataclasses.asdict(base_filter),
        seeds=[args.seed],
        outputs=[str(out / "ablation.csv"), str(out / "ablation.svg")],
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvspipe",
        description="Event-camera filtering, coding, and detection pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen", help="generate a labeled synthetic dataset")
    p.add_argument("--pos", type=int, required=True, help="pedestrian clip count")
    p.add_argument("--neg", type=int, required=True, help="non-pedestrian clip count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration-us", type=int, default=1_000_000)
    p.add_argument("--edge-rate", type=float, default=synth.SceneSpec().edge_rate)
    p.add_argument("--noise-rate", type=float, default=synth.SceneSpec().noise_rate)
    p.add_argument("--out", "-o", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("filter", help="run the filter over an event file")
    p.add_argument("input", type=Path, help="event file")
    _add_filter_args(p)
    p.add_argument("--dict", type=Path, help="Huffman dictionary file")
    p.add_argument("--packets", action="store_true", help="emit framed packets")
    p.add_argument("--out", "-o", type=Path, required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("dict", help="train a Huffman dictionary from frames")
    p.add_argument("frames", type=Path, nargs="+", help="frame container files")
    p.add_argument("--out", "-o", type=Path, required=True)
    p.set_defaults(func=cmd_dict)

    p = sub.add_parser("decode", help="deframe and decode a packet stream")
    p.add_argument("input", type=Path, help="packet stream file")
    p.add_argument("--dict", type=Path, required=True)
    p.add_argument("--rows", type=int, default=40, help="pooled plane rows")
    p.add_argument("--cols", type=int, default=60, help="pooled plane columns")
    p.add_argument("--out", "-o", type=Path, required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train the binary-weight detector")
    p.add_argument(
        "--frames",
        nargs=2,
        metavar=("FILE", "LABEL"),
        action="append",
        required=True,
        help="frame container and its class label (0 or 1); repeatable",
    )
    p.add_argument("--filters", type=int, default=200)
    p.add_argument("--kernel", type=int, default=10)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", "-o", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score frames or packets with a model")
    p.add_argument("input", type=Path, help="frames file, or packets with --dict")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dict", type=Path, help="treat input as a packet stream")
    p.add_argument("--rows", type=int, default=40)
    p.add_argument("--cols", type=int, default=60)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", help="run the ablation benchmark")
    p.add_argument("--pos", type=int, default=30)
    p.add_argument("--neg", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration-us", type=int, default=1_000_000)
    p.add_argument("--edge-rate", type=float, default=synth.SceneSpec().edge_rate)
    p.add_argument("--noise-rate", type=float, default=synth.SceneSpec().noise_rate)
    p.add_argument(
        "--variants",
        default=",".join(v.name for v in bench.DEFAULT_VARIANTS),
        help="comma-separated variant names",
    )
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--throughput", action="store_true", help="also measure events/s")
    _add_filter_args(p)
    p.add_argument("--out", "-o", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (bnn.ModelError, codec.CodecError, EventFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
