"""Command-line interface: ``sdpcc encode|decode|train|eval|info``.

Every long flag can also come from an environment variable named
``SDPC_<FLAG>`` (upper case, dashes as underscores, e.g. ``SDPC_WEIGHTS``).
A flag given on the command line always wins over the environment.

Frames given as a directory are taken in lexicographic filename order; the
first frame is intra coded and each later frame predicts from the previous
reconstruction.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import codec, io_metrics
from .codec import CONDITIONAL, LOSSLESS, LOSSY, MODEL_PRESETS, RESIDUAL, EncodeConfig
from .entropy import DecodeError
from .nn.weights import MissingLayerError, WeightFormatError, load_weights, save_weights
from .sparse_tensor import canonicalize, unique_coords
from .training import ConfigKeyError, TrainingDivergenceError, load_config, train_toy

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_DIVERGED = 0, 2, 3, 4, 5
ENV_PREFIX = "SDPC_"
DEPTH_COMMENT = "bit_depth"


class UsageError(Exception):
    pass


# -- helpers --------------------------------------------------------------------------


def frame_paths(inputs: list[str]) -> list[Path]:
    paths: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted((q for q in p.iterdir() if q.suffix.lower() == ".ply"), key=lambda q: q.name))
        else:
            paths.append(p)
    if not paths:
        raise UsageError("no input frames")
    return paths


def declared_depth(cloud: io_metrics.RawCloud) -> int | None:
    for c in cloud.comments:
        tok = c.split()
        if len(tok) == 2 and tok[0] == DEPTH_COMMENT:
            return int(tok[1])
    return None


def load_frames(paths, bit_depth: int | None, voxelize: bool):
    """Frames as voxel tensors plus their original point counts."""
    clouds = [io_metrics.read_ply(p) for p in paths]
    declared = {d for d in (declared_depth(c) for c in clouds) if d is not None}
    if len(declared) > 1:
        raise UsageError(f"input frames declare mixed bit depths {sorted(declared)}")
    if bit_depth is None:
        if not declared:
            raise UsageError("bit depth unknown: pass --bit-depth")
        bit_depth = declared.pop()
    elif declared and declared != {bit_depth}:
        raise UsageError(f"--bit-depth {bit_depth} conflicts with the frames' declared depth {declared.pop()}")
    counts = [len(c) for c in clouds]
    if voxelize:
        tf = io_metrics.fit_transform(np.concatenate([c.points for c in clouds]), bit_depth)
        return [io_metrics.voxelize(c, bit_depth, transform=tf) for c in clouds], counts, bit_depth
    frames = []
    hi = (1 << bit_depth) - 1
    for p, c in zip(paths, clouds):
        q = np.rint(c.points)
        if not np.allclose(q, c.points) or (len(q) and (q.min() < 0 or q.max() > hi)):
            raise UsageError(f"{p}: coordinates are not integers in [0, {hi}] (use --voxelize)")
        frames.append(canonicalize(unique_coords(q.astype(np.int64)), None, bit_depth))
    return frames, counts, bit_depth


def _weights(path):
    if path is None:
        raise UsageError("--weights is required")
    return load_weights(path)


# -- subcommands -----------------------------------------------------------------------


def cmd_encode(args) -> int:
    weights = _weights(args.weights)
    paths = frame_paths(args.inputs)
    frames, counts, depth = load_frames(paths, args.bit_depth, args.voxelize)
    m = args.m
    if args.mode == LOSSY and m is None:
        m = MODEL_PRESETS.get(args.model_id, {}).get("m")
        if m is None:
            raise UsageError("lossy mode needs --m or a lossy --model-id")
    cfg = EncodeConfig(mode=args.mode, m=m or 0, model_id=args.model_id, inter_enabled=not args.intra_only,
                       bit_depth=depth, variant=args.variant)
    try:
        cfg.validate()
    except codec.ConfigError as e:
        raise UsageError(str(e)) from None
    stream = codec.encode_sequence(frames, weights, cfg)
    data = stream.to_bytes()
    Path(args.output).write_bytes(data)
    for (header, payloads), n in zip(stream.frames, counts):
        size = sum(len(p) for p in payloads)
        print(f"frame {header.frame_index} {header.frame_type} bytes={size} bpp={io_metrics.bpp(size, n):.4f}")
    print(f"total bytes={len(data)} bpp={io_metrics.bpp(len(data), sum(counts)):.4f}")
    return EXIT_OK


def cmd_decode(args) -> int:
    weights = _weights(args.weights)
    data = Path(args.stream).read_bytes()
    frames = codec.decode_sequence(data, weights)
    depth = codec.Bitstream.from_bytes(data).config.bit_depth
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        io_metrics.write_ply(f, out / f"frame_{t:04d}.ply", dtype="int", comments=[f"{DEPTH_COMMENT} {depth}"])
    print(f"decoded {len(frames)} frames to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    w = train_toy(cfg)
    save_weights(w, args.output)
    print(f"wrote {args.output} ({w.digest().hex()})")
    return EXIT_OK


def cmd_eval(args) -> int:
    weights = _weights(args.weights)
    paths = frame_paths([args.ref])
    rows = []
    for stream_path in args.stream:
        data = Path(stream_path).read_bytes()
        stream = codec.Bitstream.from_bytes(data)
        depth = stream.config.bit_depth
        refs, counts, _ = load_frames(paths, depth, args.voxelize)
        decoded = codec.decode_sequence(stream, weights)
        if len(decoded) != len(refs):
            raise UsageError(f"{stream_path} has {len(decoded)} frames but --ref has {len(refs)}")
        frame_rows = []
        for (header, payloads), ref, dec, n in zip(stream.frames, refs, decoded, counts):
            size = sum(len(p) for p in payloads)
            frame_rows.append({
                "frame": header.frame_index, "type": header.frame_type, "bytes": size,
                "bpp": io_metrics.bpp(size, n), "d1_psnr": io_metrics.d1_psnr(ref, dec, depth), "points": n,
            })
        rows.extend(frame_rows)
        rows.append(io_metrics.summary_row(frame_rows))
    io_metrics.write_report(rows, args.output)
    for r in rows:
        if r["frame"] == "summary":
            print(f"summary bpp={r['bpp']:.4f} d1_psnr={r['d1_psnr']:.3f}")
    if args.bd:
        mine = io_metrics.report_curve(io_metrics.read_report(args.output))
        other = io_metrics.report_curve(io_metrics.read_report(args.bd))
        print(f"bd_rate={io_metrics.bd_rate(other, mine):.4f}%")
    return EXIT_OK


def cmd_info(args) -> int:
    data = Path(args.path).read_bytes()
    if data[:4] == codec.STREAM_MAGIC:
        s = codec.Bitstream.from_bytes(data)
        c = s.config
        print(f"stream mode={c.mode} m={c.m} model_id={c.model_id} inter={int(c.inter_enabled)} "
              f"variant={c.variant} bit_depth={c.bit_depth} weights={s.weight_digest.hex()}")
        for header, payloads in s.frames:
            print(f"frame {header.frame_index} {header.frame_type} points={header.point_count} "
                  f"payload={[len(p) for p in payloads]} counts={header.counts}")
    else:
        w = load_weights(args.path)
        n = sum(k.weights.size + (k.bias.size if k.bias is not None else 0) for k in w.kernels.values())
        n += sum(t.size for t in w.tensors.values())
        cfg = " ".join(f"{k}={v:g}" for k, v in sorted(w.config.items()))
        print(f"weights {w.digest().hex()} layers={len(w.kernels)} params={n} {cfg}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def _env_bool(v: str) -> bool:
    return v.strip().lower() in ("1", "true", "yes", "on")


def _apply_env(parser: argparse.ArgumentParser, env) -> None:
    """Turn SDPC_* variables into defaults so explicit flags still take precedence."""
    for action in parser._actions:
        if not action.option_strings or action.dest == "help":
            continue
        key = ENV_PREFIX + action.dest.upper()
        if key not in env:
            continue
        raw = env[key]
        if isinstance(action, argparse._StoreTrueAction):
            action.default = _env_bool(raw)
        elif action.nargs in ("*", "+") or isinstance(action, argparse._AppendAction):
            action.default = raw.split(os.pathsep)
        else:
            action.default = action.type(raw) if action.type else raw
            if action.choices and action.default not in action.choices:
                parser.error(f"{key}={raw!r} is not one of {sorted(action.choices)}")
        action.required = False


def build_parser(env=None) -> argparse.ArgumentParser:
    env = os.environ if env is None else env
    p = argparse.ArgumentParser(prog="sdpcc", description="Learned sparse point-cloud geometry codec.")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("encode", help="encode PLY frames into a stream")
    e.add_argument("inputs", nargs="+", help="PLY files or directories of PLY files")
    e.add_argument("--weights", help="model weights file")
    e.add_argument("--mode", choices=[LOSSLESS, LOSSY], default=LOSSLESS)
    e.add_argument("--model-id", type=int, default=0)
    e.add_argument("--m", type=int, default=None, help="lossy: scale coded losslessly")
    e.add_argument("--bit-depth", type=int, default=None)
    e.add_argument("--variant", choices=[CONDITIONAL, RESIDUAL], default=CONDITIONAL)
    e.add_argument("--intra-only", action="store_true", help="code every frame without temporal priors")
    e.add_argument("--voxelize", action="store_true", help="fit one voxel grid to all frames")
    e.add_argument("-o", "--output", required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode a stream into PLY frames")
    d.add_argument("stream")
    d.add_argument("--weights")
    d.add_argument("-o", "--output", required=True, help="output directory")
    d.set_defaults(func=cmd_decode)

    t = sub.add_parser("train", help="train weights from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("-o", "--output", required=True)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="decode streams and report bpp and D1-PSNR")
    v.add_argument("--ref", required=True, help="directory of reference frames")
    v.add_argument("--stream", action="append", required=True, help="stream file; repeat for several rate points")
    v.add_argument("--weights")
    v.add_argument("--voxelize", action="store_true")
    v.add_argument("--bd", help="second report to compute BD-rate against")
    v.add_argument("-o", "--output", required=True, help="CSV report")
    v.set_defaults(func=cmd_eval)

    i = sub.add_parser("info", help="describe a stream or weights file")
    i.add_argument("path")
    i.set_defaults(func=cmd_info)

    for sp in (e, d, t, v, i):
        _apply_env(sp, env)
    return p


def main(argv=None, env=None) -> int:
    try:
        args = build_parser(env).parse_args(argv)
    except SystemExit as ex:
        return EXIT_USAGE if ex.code else EXIT_OK
    except ValueError as ex:  # an SDPC_* value of the wrong type
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigKeyError as ex:
        print(f"error: config: {ex}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergenceError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_DIVERGED
    except (io_metrics.PlyError, WeightFormatError, MissingLayerError, DecodeError, io_metrics.OverlapError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_FORMAT
    except ValueError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_IO


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
