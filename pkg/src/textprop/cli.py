"""Command-line interface: ``textprop <subcommand> ...``.

Exit codes: 0 on success, 1 for invalid input (bad arguments, unreadable or
malformed files), 2 when processing fails (the message names the frame).
"""

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .blur import FitConfig, fit_blur_params
from .exceptions import FrameProcessingError, InvalidArgumentError
from .imgcore import read_png, write_png
from .metrics import jitter, mse, psnr, ssim
from .pipeline import (PipelineConfig, TextPropagator, ingest, load_recipes, propagate_many,
                       score_clip)
from .synth import ScenarioSpec, generate_clip

EXIT_OK, EXIT_INVALID, EXIT_PROCESSING = 0, 1, 2

log = logging.getLogger("textprop")


def _load_config(path):
    return PipelineConfig.from_file(path) if path else PipelineConfig()


def cmd_synth(args):
    with open(args.spec) as fh:
        spec = ScenarioSpec.from_dict(json.load(fh))
    bundle = generate_clip(spec)
    bundle.save(args.out_dir)
    print(f"wrote {spec.frame_count} frames to {args.out_dir}")


def cmd_select_ref(args):
    config = _load_config(args.config)
    clip = ingest(args.annotations, args.frames)
    ref, scores = score_clip(clip, config)
    sep = args.delimiter
    print(f"reference{sep}{ref}")
    print(sep.join(["index", "confidence", "sharpness", "s1", "s2", "composite"]))
    for q in scores:
        print(sep.join([str(q.frame_index)] + [f"{v:.6f}" for v in
                                                (q.ocr_confidence, q.sharpness, q.s1, q.s2, q.composite)]))


def cmd_fit_blur(args):
    ref = read_png(args.ref)
    window = [read_png(p) for p in args.window]
    cfg = FitConfig(lambda_R=args.lambda_R, lambda_T=args.lambda_T, window=len(window),
                    max_shift=args.max_shift, n_starts=args.n_starts)
    result = fit_blur_params(ref, window, cfg)
    print("# sigma_x sigma_y rho w")
    for p in result.params:
        print(f"{p.sigma_x:.6f} {p.sigma_y:.6f} {p.rho:.6f} {p.w:.6f}")
    print(f"objective {result.objective:.8g}")


def _frame_files(directory, pattern):
    files = sorted(glob.glob(os.path.join(directory, pattern)))
    if not files:
        raise InvalidArgumentError(f"no files matching {pattern} in {directory}")
    return files


def _load_trajectory(path):
    """A JSON list of 4x2 quads (null when absent) or an annotation manifest."""
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [f.get("quad") for f in sorted(data.get("frames", []), key=lambda f: f["index"])]
    return [None if q is None else np.asarray(q, dtype=np.float64) for q in data]


def cmd_metrics(args):
    pred = _frame_files(args.pred, args.pattern)
    truth = _frame_files(args.truth, args.truth_pattern or args.pattern)
    if len(pred) != len(truth):
        raise InvalidArgumentError(f"{len(pred)} predicted frames but {len(truth)} ground-truth frames")
    rows = {"ssim": [], "psnr": [], "mse": []}
    for i, (p, t) in enumerate(zip(pred, truth)):
        a, b = read_png(p), read_png(t)
        try:
            rows["ssim"].append(ssim(a, b))
            rows["psnr"].append(psnr(a, b))
            rows["mse"].append(mse(a, b))
        except InvalidArgumentError as exc:
            raise FrameProcessingError(i, exc) from exc
    print("metric\tframe\tvalue")
    for name, vals in rows.items():
        for i, v in enumerate(vals):
            print(f"{name}\t{i}\t{v:.6f}")
        finite = [v for v in vals if np.isfinite(v)]
        agg = float(np.mean(finite)) if finite else float("inf")
        print(f"{name}\tmean\t{agg:.6f}")
    for path in args.trajectory or []:
        print(f"jitter\t{os.path.basename(path)}\t{jitter(_load_trajectory(path), args.lowpass):.6f}")


def _output_name(ann):
    return os.path.basename(ann.file)


def cmd_propagate(args):
    config = _load_config(args.config)
    clip = ingest(args.annotations, args.frames)
    rois = [read_png(p) for p in args.replacement_roi]
    model = TextPropagator.from_config(config, reference_index=args.ref_frame)
    if args.recipes:
        recipes, size, ref = load_recipes(args.recipes)
        if tuple(size) != config.canonical_size:
            raise InvalidArgumentError(f"recipes use canonical size {size}, config has {config.canonical_size}")
        model.recipes_, model.reference_index_, model.scores_ = recipes, ref, []
        model.clip_, model.recipe_build_seconds_ = clip, 0.0
    else:
        model.fit(clip)
        log.info("reference frame %d, recipes built in %.2fs",
                 model.reference_index_, model.recipe_build_seconds_)
    if args.recipes_out:
        model.save_recipes(args.recipes_out)

    def sink(k, frames):
        out_dir = args.out if len(rois) == 1 else os.path.join(args.out, f"copy_{k:03d}")
        os.makedirs(out_dir, exist_ok=True)
        for (_, ann), frame in zip(clip, frames):
            write_png(os.path.join(out_dir, _output_name(ann)), frame)

    _, report = propagate_many(clip, model.recipes_, rois, config.feather, sink,
                               model.recipe_build_seconds_)
    print(f"reference_index\t{model.reference_index_}")
    for key in ("copies", "frames_per_copy", "recipe_build_seconds", "propagate_seconds",
                "frames_per_second", "seconds_per_frame"):
        print(f"{key}\t{report[key]}")


class _Parser(argparse.ArgumentParser):
    """Usage errors are invalid input, so they exit with 1 rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="textprop", description="Scene-text propagation through video.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic clip with ground truth")
    p.add_argument("--spec", required=True, help="scenario JSON file")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("select-ref", help="score frames and print the chosen reference")
    p.add_argument("--frames", required=True, help="directory holding the frame images")
    p.add_argument("--annotations", required=True, help="annotation manifest JSON")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--delimiter", default="\t")
    p.set_defaults(func=cmd_select_ref)

    p = sub.add_parser("fit-blur", help="fit blur parameters of window frames against a reference")
    p.add_argument("--ref", required=True, help="reference ROI PNG")
    p.add_argument("--window", required=True, nargs="+", help="window ROI PNGs")
    p.add_argument("--lambda-R", dest="lambda_R", type=float, default=1.0)
    p.add_argument("--lambda-T", dest="lambda_T", type=float, default=0.1)
    p.add_argument("--max-shift", type=int, default=5)
    p.add_argument("--n-starts", type=int, default=1, help="grid seeds refined by Levenberg-Marquardt")
    p.set_defaults(func=cmd_fit_blur)

    p = sub.add_parser("metrics", help="compare predicted and ground-truth frames")
    p.add_argument("--pred", required=True, help="directory of predicted frames")
    p.add_argument("--truth", required=True, help="directory of ground-truth frames")
    p.add_argument("--pattern", default="*.png", help="glob for frame files (default *.png)")
    p.add_argument("--truth-pattern", help="glob for ground-truth files (default: --pattern)")
    p.add_argument("--trajectory", action="append",
                   help="quad trajectory JSON (list of quads or annotation manifest); repeatable")
    p.add_argument("--lowpass", type=int, default=5, help="jitter low-pass window in frames")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("propagate", help="propagate replacement ROIs through a clip")
    p.add_argument("--frames", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--replacement-roi", required=True, nargs="+",
                   help="replaced reference ROI PNG(s) at canonical size; several give several copies")
    p.add_argument("--ref-frame", type=int, help="force the reference frame index")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--recipes-out", help="write the recipe sidecar here")
    p.add_argument("--recipes", help="reuse a recipe sidecar instead of building recipes")
    p.set_defaults(func=cmd_propagate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except FrameProcessingError as exc:
        print(f"error: processing failed at {exc}", file=sys.stderr)
        return EXIT_PROCESSING
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
