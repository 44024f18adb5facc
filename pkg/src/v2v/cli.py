"""Command-line entry point (``v2v``)."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .codec import FidelityConfig, ToyLossyCodec, roundtrip_error_curve
from .flow import FlowError, write_flo
from .pipeline import (FlowGraph, PipelineConfig, PipelineError, VideoJob, frame_number, key_indices,
                       load_flow_dir, load_frame, load_frames, pixel_mse, propagate_keyframes, run,
                       save_error_map, save_frames, translate_keyframes)
from .propagate import PropagationError
from .sampler import SamplerError
from .synthetic import image_corpus

log = logging.getLogger("v2v")


def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _add_job_options(p):
    p.add_argument("--config", type=Path, help="key=value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--key-interval", type=int)
    p.add_argument("--strength", type=float, help="SDEdit strength as a fraction of t_max")
    p.add_argument("--adain", type=_on_off, metavar="{on,off}")
    p.add_argument("--color-correct", type=_on_off, metavar="{on,off}")
    p.add_argument("--prompt")
    p.add_argument("--flow-dir", type=Path, help="precomputed flow_AAAA_BBBB.flo fields")
    p.add_argument("--workers", type=int)


def _config(args):
    overrides = {"seed": args.seed, "key_interval": args.key_interval, "strength": args.strength,
                 "adain_enabled": args.adain, "color_correct": args.color_correct,
                 "prompt": args.prompt, "workers": args.workers}
    if args.config is not None:
        return PipelineConfig.from_file(args.config, **overrides)
    return PipelineConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})


def _graph(frames, config, flow_dir):
    return FlowGraph(frames, config, load_flow_dir(flow_dir) if flow_dir else None)


def cmd_translate(args):
    config = _config(args)
    frames = load_frames(args.input)
    job = VideoJob(frames, config.key_interval, config.prompt, config, args.output)
    run(job, load_flow_dir(args.flow_dir) if args.flow_dir else None)
    print(f"wrote {len(frames)} frames to {args.output}")


def cmd_keyframes(args):
    config = _config(args)
    frames = load_frames(args.input)
    keys = key_indices(len(frames), config.key_interval)
    keyframes, _ = translate_keyframes(frames, config, _graph(frames, config, args.flow_dir), keys)
    save_frames(args.output, [keyframes[k] for k in keys], indices=keys)
    print(f"wrote {len(keys)} key frames to {args.output}")


def cmd_propagate(args):
    config = _config(args)
    frames = load_frames(args.frames)
    keyframes = {frame_number(p): load_frame(p) for p in sorted(Path(args.keys).glob("*.png"))}
    if not keyframes:
        raise PipelineError(f"{args.keys}: no PNG key frames found")
    outputs, _, errors = propagate_keyframes(frames, keyframes, config, _graph(frames, config, args.flow_dir))
    save_frames(args.output, outputs)
    if args.error_maps:
        out = Path(args.output) / "errors"
        out.mkdir(exist_ok=True)
        for i, err in errors.items():
            save_error_map(out / f"error_{i:04d}.png", err)
    print(f"wrote {len(outputs)} frames to {args.output}")


def cmd_flow(args):
    config = PipelineConfig(flow_levels=args.levels, flow_iterations=args.iterations)
    frames = load_frames(args.input)
    graph = FlowGraph(frames, config)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(frames) - 1):
        for a, b in ((i, i + 1), (i + 1, i)):
            flow, _ = graph.adjacent(a, b)
            write_flo(out / f"flow_{a:04d}_{b:04d}.flo", flow)
    print(f"wrote {2 * (len(frames) - 1)} flow fields to {out}")


def cmd_codec_bench(args):
    codec = ToyLossyCodec()
    cfg = FidelityConfig(args.lambda_e, args.artifact_threshold)
    images = image_corpus(args.images, args.size, args.seed)
    plain = np.mean([roundtrip_error_curve(codec, im, args.iterations, False) for im in images], axis=0)
    fid = np.mean([roundtrip_error_curve(codec, im, args.iterations, True, cfg) for im in images], axis=0)
    with _open_out(args.output) as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "mse_plain", "mse_fidelity"])
        for k, (a, b) in enumerate(zip(plain, fid), 1):
            writer.writerow([k, f"{a:.8g}", f"{b:.8g}"])


def cmd_metrics(args):
    outputs = load_frames(args.outputs)
    config = PipelineConfig()
    if args.input is None and args.flow_dir is None:
        raise PipelineError("metrics needs --input frames or --flow-dir")
    reference = load_frames(args.input) if args.input is not None else outputs
    if len(reference) != len(outputs):
        raise PipelineError(f"{len(outputs)} output frames but {len(reference)} input frames")
    graph = _graph(reference, config, args.flow_dir)
    report = pixel_mse(outputs, graph.consecutive_pairs())
    with _open_out(args.output) as fh:
        report.write_csv(fh)
    print(f"pixel_mse={report.pixel_mse:.8g}", file=sys.stderr)


class _open_out:
    def __init__(self, path):
        self.path = path

    def __enter__(self):
        self.fh = sys.stdout if self.path is None else open(self.path, "w", newline="")
        return self.fh

    def __exit__(self, *exc):
        if self.fh is not sys.stdout:
            self.fh.close()


def build_parser():
    parser = argparse.ArgumentParser(prog="v2v", description="Zero-shot video translation with a toy diffusion core.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("translate", help="translate a whole video")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    _add_job_options(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("keyframes", help="translate key frames only")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    _add_job_options(p)
    p.set_defaults(func=cmd_keyframes)

    p = sub.add_parser("propagate", help="fill non-key frames from stylized keys")
    p.add_argument("keys", type=Path, help="directory of stylized key frames (frame_NNNN.png)")
    p.add_argument("frames", type=Path, help="directory of input frames")
    p.add_argument("output", type=Path)
    p.add_argument("--error-maps", action="store_true", help="also write grayscale errors/error_NNNN.png maps")
    _add_job_options(p)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("flow", help="estimate consecutive flows into .flo files")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--iterations", type=int, default=60)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("codec-bench", help="round-trip error curves, plain vs fidelity encoding")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-e", type=float, default=1.0)
    p.add_argument("--artifact-threshold", type=float, default=0.1)
    p.add_argument("-o", "--output", type=Path)
    p.set_defaults(func=cmd_codec_bench)

    p = sub.add_parser("metrics", help="Pixel-MSE of an output sequence")
    p.add_argument("outputs", type=Path)
    p.add_argument("--input", type=Path, help="input frames used for flow estimation")
    p.add_argument("--flow-dir", type=Path)
    p.add_argument("-o", "--output", type=Path)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (PipelineError, FlowError, PropagationError, SamplerError, ValueError, OSError) as exc:
        print(f"v2v: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
