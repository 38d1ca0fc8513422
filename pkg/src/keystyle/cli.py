"""Command-line entry points: ``train``, ``stylize`` and ``experiments``.

Exit codes: 0 success, 2 invalid dataset/configuration, 3 backend unavailable,
4 checkpoint does not fit the operator, 5 malformed raw stream, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch

from . import experiments
from .backends import register_real_backends
from .core import (BackendUnavailable, ConfigError, DatasetError, FrameReadError, ImagePlane, TrainConfig,
                   list_images, load_dataset, read_image, validate_dataset, write_image)
from .operator import CheckpointError, StylizationOperator, load_checkpoint
from .trainer import make_backends, select_checkpoint, train, write_json

log = logging.getLogger("keystyle")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_BACKEND = 3
EXIT_CHECKPOINT = 4
EXIT_STREAM = 5
EXIT_USAGE = 64

RAW_MAGIC = b"SRRAW1"
RAW_HEADER = struct.Struct("<6sII")


class StreamError(ValueError):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# raw pipe protocol

def read_header(stream: BinaryIO) -> tuple[int, int]:
    data = stream.read(RAW_HEADER.size)
    if len(data) != RAW_HEADER.size:
        raise StreamError("stream ended inside the header")
    magic, width, height = RAW_HEADER.unpack(data)
    if magic != RAW_MAGIC:
        raise StreamError(f"bad stream magic {magic!r}")
    if width < 1 or height < 1:
        raise StreamError(f"bad frame size {width}x{height}")
    return width, height


def write_header(stream: BinaryIO, width: int, height: int) -> None:
    stream.write(RAW_HEADER.pack(RAW_MAGIC, width, height))


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        b = stream.read(n - got)
        if not b:
            break
        chunks.append(b)
        got += len(b)
    return b"".join(chunks)


@torch.no_grad()
def stylize_u8(phi: StylizationOperator, rgb: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)[None]
    y = phi(x).clamp(0.0, 1.0)[0].permute(1, 2, 0).numpy()
    return np.rint(y * 255.0).astype(np.uint8)


def run_pipe(phi: StylizationOperator, src: BinaryIO, dst: BinaryIO, latencies: list | None = None) -> int:
    """Stylize a raw stream frame by frame; returns the number of frames written.

    Holds a single frame in memory at a time.
    """
    width, height = read_header(src)
    write_header(dst, width, height)
    frame_bytes = width * height * 3
    n = 0
    while True:
        buf = _read_exact(src, frame_bytes)
        if not buf:
            break
        if len(buf) != frame_bytes:
            raise StreamError(f"truncated frame {n}: {len(buf)} of {frame_bytes} bytes")
        t0 = time.perf_counter()
        out = stylize_u8(phi, np.frombuffer(buf, np.uint8).reshape(height, width, 3))
        dst.write(out.tobytes())
        if latencies is not None:
            latencies.append(time.perf_counter() - t0)
        n += 1
    dst.flush()
    return n


def stylize_directory(phi: StylizationOperator, frames_dir, out_dir, latencies: list | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for p in list_images(frames_dir):
        rgb = read_image(p).to_uint8()
        t0 = time.perf_counter()
        out = stylize_u8(phi, rgb)
        if latencies is not None:
            latencies.append(time.perf_counter() - t0)
        dest = out_dir / f"{p.stem}.png"
        write_image(ImagePlane.from_uint8(out), dest)
        written.append(dest)
    return written


# manifest

class RunManifest:
    def __init__(self, out_dir: Path, command: str, cfg: TrainConfig | None, fingerprint: str | None,
                 backends: dict | None):
        self.path = Path(out_dir) / "manifest.json"
        self.record = {
            "command": command,
            "config": cfg.dumps() if cfg is not None else None,
            "dataset_fingerprint": fingerprint,
            "backends": backends or {},
            "seed": cfg.seed if cfg is not None else None,
            "started": datetime.now(timezone.utc).isoformat(),
            "ended": None,
            "status": "running",
            "artifacts": [],
        }
        write_json(self.path, self.record)

    def finalize(self, status: str, artifacts=()) -> None:
        self.record.update(ended=datetime.now(timezone.utc).isoformat(), status=status,
                           artifacts=[str(a) for a in artifacts])
        write_json(self.path, self.record)


def _registry(args):
    cfg = json.loads(Path(args.backends).read_text()) if getattr(args, "backends", None) else None
    return register_real_backends(cfg)


def _load_run_inputs(args):
    cfg = TrainConfig.from_file(args.config).validate()
    data = load_dataset(args.frames, args.keyframes, cfg.resolution)
    problems = [v for v in validate_dataset(data) if v.severity == "error"]
    for v in validate_dataset(data):
        print(v, file=sys.stderr)
    if problems:
        raise DatasetError(f"{len(problems)} dataset violation(s)")
    return cfg, data


def cmd_train(args) -> int:
    cfg, data = _load_run_inputs(args)
    registry = _registry(args)
    backends = make_backends(cfg, registry)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "train", cfg, data.fingerprint(), backends.names)
    try:
        state = train(data, cfg, backends, run_dir=out)
    except BaseException:
        manifest.finalize("failed")
        raise
    best = select_checkpoint(state)
    manifest.finalize("ok", [out / "trace.csv", best.ref])
    print(best.ref)
    return EXIT_OK


def cmd_stylize(args) -> int:
    if not args.pipe and not (args.frames and args.out):
        raise UsageError("stylize needs --pipe or both --frames and --out")
    if not Path(args.model).is_file():
        raise ConfigError(f"model checkpoint not found: {args.model}")
    phi = load_checkpoint(args.model)
    if args.pipe:
        run_pipe(phi, sys.stdin.buffer, sys.stdout.buffer)
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "stylize", None, None, {"model": str(args.model)})
    written = stylize_directory(phi, args.frames, out)
    manifest.finalize("ok", written)
    return EXIT_OK


def _floats(s):
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s):
    return [int(v) for v in s.split(",") if v.strip()]


def cmd_experiments(args) -> int:
    cfg, data = _load_run_inputs(args)
    registry = _registry(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, f"experiments {args.harness}", cfg, data.fingerprint(), None)
    try:
        if args.harness == "ablate":
            experiments.run_ablation(data, cfg, registry, out)
        elif args.harness == "grid":
            lcs = _floats(args.lambda_c) if args.lambda_c else list(experiments.STRUCTURE_PRESETS.values())
            ts = _ints(args.t) if args.t else [cfg.t_index]
            experiments.run_grid(data, cfg, lcs, ts, registry, out)
        elif args.harness == "conditioning":
            kinds = [k.strip() for k in args.kinds.split(",")] if args.kinds else ["lineart", "depth", "canny", "softedge"]
            experiments.run_conditioning_comparison(data, cfg, kinds, registry, out)
        else:
            experiments.run_lineart_baseline(data, cfg, registry, out)
    except BaseException:
        manifest.finalize("failed")
        raise
    manifest.finalize("ok", [out / "report.json"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="keystyle", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_flags(sp):
        sp.add_argument("--frames", required=True, help="directory of target frames")
        sp.add_argument("--keyframes", required=True, help="directory of stylized keyframes (same file stems)")
        sp.add_argument("--config", required=True, help="key = value config file")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--backends", help="JSON list of real backend entries")

    t = sub.add_parser("train", help="train an operator")
    data_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("stylize", help="stylize frames with a trained checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--frames")
    s.add_argument("--out")
    s.add_argument("--pipe", action="store_true", help="read SRRAW1 frames on stdin, write to stdout")
    s.set_defaults(func=cmd_stylize)

    e = sub.add_parser("experiments", help="run an experiment harness")
    e.add_argument("harness", choices=["ablate", "grid", "conditioning", "lineart-baseline"])
    data_flags(e)
    e.add_argument("--lambda-c", help="comma-separated lambda_c values (grid)")
    e.add_argument("--t", help="comma-separated step indices (grid)")
    e.add_argument("--kinds", help="comma-separated guidance kinds (conditioning)")
    e.set_defaults(func=cmd_experiments)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"keystyle: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"keystyle: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DatasetError, FrameReadError) as exc:
        print(f"keystyle: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except BackendUnavailable as exc:
        print(f"keystyle: backend unavailable: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except CheckpointError as exc:
        print(f"keystyle: checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except StreamError as exc:
        print(f"keystyle: malformed stream: {exc}", file=sys.stderr)
        return EXIT_STREAM


if __name__ == "__main__":
    sys.exit(main())
