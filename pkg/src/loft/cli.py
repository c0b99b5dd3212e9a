"""``loft`` command-line interface.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error,
4 numerical divergence, 5 invalid weight file.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import data
from .analysis import (LossConfig, flops_table, psnr, reports_to_csv, reports_to_json, sa_flops,
                       ssim, TABLE_VARIANTS)
from .errors import (ConfigError, DivergenceError, ImageIOError, LoftError, ParameterError,
                     WeightFormatError, WeightIntegrityError)
from .imageio import read_image, write_image
from .model import ModelConfig, build_model, forward, load_weights, save_weights
from .tiling import TileSpec, tiled_inference
from .train import center_crop, train_toy
from .verify import SUITES, run_suite

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_WEIGHTS = 0, 1, 2, 3, 4, 5


class UsageError(LoftError):
    pass


def _emit(payload, fmt: str, out=None) -> None:
    if fmt == "json":
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    else:
        rows = payload if isinstance(payload, list) else [payload]
        keys = sorted({k for row in rows for k in row if not isinstance(row[k], (dict, list))})
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=keys, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_model(args):
    if args.weights:
        return load_weights(args.weights)
    if args.preset == "tiny" and args.init is None and data.TOY_WEIGHTS_PATH.exists():
        return load_weights(data.TOY_WEIGHTS_PATH)
    model = build_model(ModelConfig.preset(args.preset), seed=args.seed)
    if args.init == "identity":
        model.zero_head()
    return model


def cmd_infer(args) -> int:
    image = read_image(args.input)
    model = _load_model(args)

    def restore(img):
        return forward(model, img.astype(np.float32)).data

    if args.whole:
        restored = restore(image)
    else:
        restored = tiled_inference(restore, image, TileSpec(args.tile, args.step), blend=args.blend)
    restored = np.clip(restored, 0.0, 1.0)
    report = {"input": str(args.input), "height": image.shape[0], "width": image.shape[1],
              "mode": "whole" if args.whole else "tiled"}
    if args.out:
        write_image(args.out, restored)
        report["output"] = str(args.out)
    if args.reference:
        ref = read_image(args.reference)
        report["psnr"] = psnr(restored, ref)
        report["ssim"] = ssim(restored, ref)
    _emit(report, args.report, args.report_out)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    blurred, sharp = data.load_pair(args.sharp, args.blurred)
    if args.crop:
        blurred, sharp = center_crop(blurred, args.crop), center_crop(sharp, args.crop)
    result = train_toy(blurred, sharp, ModelConfig.preset(args.preset), steps=args.steps,
                       lr=args.lr, seed=args.seed,
                       loss_config=LossConfig(args.l1_weight, args.fr_weight))
    if args.out:
        save_weights(result.model, args.out)
    if args.trace:
        Path(args.trace).write_text(result.trace_csv())
    report = {"steps": args.steps, "lr": args.lr, "seed": args.seed,
              "initial_loss": result.losses[0], "final_loss": result.losses[-1],
              "ratio": result.ratio}
    _emit(report, args.report, args.report_out)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suite(args.suite, seeds=args.seeds)
    _emit(results if args.report == "csv" else {"passed": all(r["passed"] for r in results),
                                                "suites": results}, args.report, args.report_out)
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_VERIFY


def _read_sweep(path) -> list[dict]:
    text = Path(path).read_text()
    try:
        if Path(path).suffix.lower() == ".json":
            points = json.loads(text)
            if isinstance(points, dict):
                points = points["points"]
        else:
            points = list(csv.DictReader(text.splitlines()))
        return [{k: int(p[k]) for k in ("H", "W", "C", "b", "r")} for p in points]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed sweep file {path}: {exc}") from exc


def cmd_flops(args) -> int:
    variants = args.variants or list(TABLE_VARIANTS)
    if args.sweep:
        reports = [sa_flops(v, **p) for p in _read_sweep(args.sweep) for v in variants]
    else:
        reports = flops_table(args.H, args.W, args.C, args.b, args.r, variants)
    if args.report == "json":
        text = reports_to_json(reports) + "\n"
    elif args.report == "csv":
        text = reports_to_csv(reports)
    else:
        width = max(len(r.label) for r in reports)
        lines = [f"{'SA':<{width}}  {'complexity':<18} {'FLOPs':>16}  {'M':>10}"]
        for r in reports:
            lines.append(f"{r.label:<{width}}  {r.formula:<18} {r.flops:>16}  {round(r.mflops):>10}")
        text = "\n".join(lines) + "\n"
    if args.report_out:
        Path(args.report_out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--report-out", help="write the report here instead of stdout")

    parser = argparse.ArgumentParser(prog="loft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", parents=[common], help="restore an image")
    p.add_argument("input")
    p.add_argument("--weights")
    p.add_argument("--preset", default="tiny")
    p.add_argument("--init", choices=("random", "identity"), default=None,
                   help="ignore bundled weights and initialise from --preset/--seed")
    p.add_argument("--whole", action="store_true", help="skip tiling")
    p.add_argument("--tile", type=int, default=384)
    p.add_argument("--step", type=int, default=352)
    p.add_argument("--blend", choices=("feather", "hard"), default="feather")
    p.add_argument("--reference", help="sharp image for PSNR/SSIM")
    p.add_argument("--out")
    p.add_argument("--report", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train-toy", parents=[common], help="fit the tiny model to one pair")
    p.add_argument("--sharp", default=str(data.SHARP_PATH))
    p.add_argument("--blurred", default=str(data.BLURRED_PATH))
    p.add_argument("--crop", type=int, default=32, help="centre crop size (0 = full image)")
    p.add_argument("--preset", default="tiny")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--l1-weight", type=float, default=1.0)
    p.add_argument("--fr-weight", type=float, default=0.01)
    p.add_argument("--out", help="weight file to write")
    p.add_argument("--trace", help="loss trace CSV to write")
    p.add_argument("--report", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("verify", parents=[common], help="run oracle suites")
    p.add_argument("suite", choices=SUITES + ("all",))
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--report", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("flops", parents=[common], help="analytical attention FLOPs")
    p.add_argument("--report", choices=("table", "json", "csv"), default="table")
    p.add_argument("--H", type=int, default=256)
    p.add_argument("--W", type=int, default=256)
    p.add_argument("--C", type=int, default=32)
    p.add_argument("--b", type=int, default=8)
    p.add_argument("--r", type=int, default=1)
    p.add_argument("--variants", nargs="+")
    p.add_argument("--sweep", help="CSV or JSON file of H,W,C,b,r points")
    p.set_defaults(func=cmd_flops)
    return parser


def _parse(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise UsageError("config file must hold a JSON object")
        # flags given on the command line win over the file
        defaults = {k.replace("-", "_"): v for k, v in overrides.items()}
        unknown = set(defaults) - set(vars(args))
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        sub_parser = parser._subparsers._group_actions[0].choices[args.command]
        sub_parser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"loft: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"loft: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (WeightFormatError, WeightIntegrityError) as exc:
        print(f"loft: bad weights: {exc}", file=sys.stderr)
        return EXIT_WEIGHTS
    except (ImageIOError, OSError) as exc:
        print(f"loft: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, ParameterError) as exc:
        print(f"loft: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
