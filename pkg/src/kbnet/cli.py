"""Command-line entry point: ``kbnet <subcommand> [options]``.

Exit status is 0 on success, 1 for usage errors and 2 for runtime faults.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from kbnet import __version__

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p, out=True):
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    if out:
        p.add_argument("--out", type=Path, help="output directory (overrides the configured one)")


def build_parser():
    parser = _Parser(prog="kbnet", description="Calibrated-backprojection depth completion.")
    parser.add_argument("--version", action="version", version=f"kbnet {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("synth", help="render a synthetic dataset (train and val splits)")
    _common(p)

    p = sub.add_parser("train", help="train on a manifest or on freshly synthesized scenes")
    _common(p)
    p.add_argument("--train", type=Path, help="training manifest (default: synthesize)")
    p.add_argument("--val", type=Path, help="validation manifest (default: synthesize)")

    p = sub.add_parser("infer", help="predict dense depth for one image or a manifest")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--image", type=Path)
    p.add_argument("--depth", type=Path, help="sparse depth PNG")
    p.add_argument("--calib", type=Path, help="calibration file (fx fy cx cy per line)")
    p.add_argument("--calib-index", type=int, default=0)
    p.add_argument("--manifest", type=Path, help="predict every frame of a manifest instead")

    p = sub.add_parser("eval", help="score predicted depth PNGs against ground truth PNGs")
    _common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--cap", type=float, nargs=2, metavar=("MIN", "MAX"))

    for name, what in (("sweep-calib", "perturb intrinsics"), ("sweep-density", "resample sparse inputs")):
        p = sub.add_parser(name, help=f"evaluate a model while varying inputs ({what})")
        _common(p)
        p.add_argument("--model", type=Path, required=True)
        p.add_argument("--manifest", type=Path, help="evaluation manifest (default: synthesize val split)")
        if name == "sweep-calib":
            p.add_argument("--params", nargs="+", default=["f", "cx", "cy"], choices=["f", "fx", "fy", "cx", "cy"])
            p.add_argument("--deltas", type=float, nargs="+", default=[-0.25, -0.1, -0.05, 0.0, 0.05, 0.1, 0.25])
        else:
            p.add_argument("--densities", type=float, nargs="+", default=[0.005, 0.0015, 0.0005])

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-network", action="store_true", help="only ops and loss terms")
    return parser


# -- helpers ----------------------------------------------------------------------

def _config(args):
    from kbnet.config import load_config

    return load_config(args.config, seed=args.seed, out=getattr(args, "out", None))


def _synth_split(sc):
    from kbnet.data import synth_dataset

    return synth_dataset(sc.n_sequences, sc.spec, seed=sc.seed)


def _frames(manifest, cfg):
    from kbnet.data import read_dataset

    if manifest is not None:
        return [f for seq in read_dataset(manifest) for f in seq]
    return [f for seq in _synth_split(cfg.val_synth) for f in seq]


def _load(path):
    from kbnet.trainer import load_model

    params, net, s2d, _, meta = load_model(path)
    return params, net, s2d, meta


# -- subcommands ----------------------------------------------------------------------

def cmd_synth(args):
    from kbnet.data import write_dataset

    cfg = _config(args)
    for split, sc in (("train", cfg.synth), ("val", cfg.val_synth)):
        manifest = write_dataset(cfg.out / split, _synth_split(sc))
        print(manifest)
    return 0


def cmd_train(args):
    from kbnet.data import read_dataset
    from kbnet.metrics import CSV_HEADER
    from kbnet.network import init_params
    from kbnet.trainer import evaluate_frames, evaluate_nearest_fill, save_model, train

    cfg = _config(args)
    train_manifest = args.train or cfg.train_manifest
    train_seqs = read_dataset(train_manifest) if train_manifest else _synth_split(cfg.synth)
    val = _frames(args.val or cfg.val_manifest, cfg)
    params = init_params(cfg.network, cfg.s2d, seed=cfg.seed, with_pose=cfg.train.pose_source == "pose-net")
    cfg.out.mkdir(parents=True, exist_ok=True)
    base = evaluate_nearest_fill(val, cfg.cap)
    params, _ = train(train_seqs, params, cfg.train, cfg.network, cfg.s2d, out_dir=cfg.out,
                      val_frames=val, cap=cfg.cap, verbose=True)
    save_model(cfg.out / "model.kbn", params, cfg.network, cfg.s2d, seed=cfg.seed, epochs=cfg.train.epochs)
    res = evaluate_frames(params, val, cfg.network, cfg.s2d, cfg.cap)
    (cfg.out / "val_metrics.csv").write_text(
        f"model,{CSV_HEADER}\nnearest_fill,{base.to_csv_line()}\nkbnet,{res.to_csv_line()}\n")
    print(f"validation MAE: nearest fill {base.mae:.1f} mm, kbnet {res.mae:.1f} mm")
    return 0


def cmd_infer(args):
    from kbnet.camera import read_calibration
    from kbnet.data import Frame, read_depth_png, read_image_png, write_depth_png
    from kbnet.trainer import predict

    cfg = _config(args)
    params, net, s2d, _ = _load(args.model)
    if args.manifest is not None:
        frames = _frames(args.manifest, cfg)
        names = [f"{i:05d}" for i in range(len(frames))]
    else:
        missing = [n for n in ("image", "depth", "calib") if getattr(args, n) is None]
        if missing:
            raise UsageError("infer needs --manifest or all of --image, --depth, --calib (missing: "
                             + ", ".join("--" + m for m in missing) + ")")
        cams = read_calibration(args.calib)
        if not 0 <= args.calib_index < len(cams):
            raise UsageError(f"--calib-index {args.calib_index} out of range ({len(cams)} cameras)")
        image = read_image_png(args.image)
        frames = [Frame(image=image, sparse_depth=read_depth_png(args.depth), K=cams[args.calib_index])]
        names = [args.image.stem]
    preds = predict(params, frames, net, s2d)
    cfg.out.mkdir(parents=True, exist_ok=True)
    for name, d in zip(names, preds):
        path = cfg.out / f"{name}_depth.png"
        write_depth_png(np.clip(d, net.d_min, net.d_max), path)
        print(path)
    return 0


def cmd_eval(args):
    from kbnet.data import read_depth_png
    from kbnet.metrics import CSV_HEADER, evaluate, mean_result

    cfg = _config(args)
    cap = tuple(args.cap) if args.cap else cfg.cap
    if not 0 < cap[0] < cap[1]:
        raise UsageError(f"--cap needs 0 < MIN < MAX, got {cap}")
    for d in (args.pred, args.gt):
        if not d.is_dir():
            raise UsageError(f"{d} is not a directory")
    gt_files = sorted(args.gt.glob("*.png"))
    if not gt_files:
        raise UsageError(f"no PNG files in {args.gt}")
    results = []
    for g in gt_files:
        p = args.pred / g.name
        if not p.exists():
            raise FileNotFoundError(f"prediction {p} missing for ground truth {g}")
        results.append(evaluate(read_depth_png(p), read_depth_png(g), cap))
    line = mean_result(results).to_csv_line()
    print(CSV_HEADER)
    print(line)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "metrics.csv").write_text(f"{CSV_HEADER}\n{line}\n")
    return 0


def cmd_sweep(args):
    from kbnet.trainer import density_sweep, sensitivity_sweep

    cfg = _config(args)
    params, net, s2d, _ = _load(args.model)
    frames = _frames(args.manifest, cfg)
    if args.command == "sweep-calib":
        perts = [(p, d) for p in args.params for d in args.deltas]
        rows = sensitivity_sweep(params, frames, net, s2d, perts, cfg.cap, out_dir=cfg.out)
    else:
        if any(not 0 < d <= 1 for d in args.densities):
            raise UsageError("--densities must lie in (0, 1]")
        rows = density_sweep(params, frames, net, s2d, args.densities, cfg.cap, seed=cfg.seed, out_dir=cfg.out)
    for name, value, res in rows:
        print(f"{name},{value!r},{res.to_csv_line()}")
    return 0


def cmd_gradcheck(args):
    from kbnet.gradsuite import TOLERANCE, run_suite

    results = run_suite(seed=args.seed, include_network=not args.skip_network)
    failed = 0
    for name, err in results:
        ok = err < TOLERANCE
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {err:.3e} {name}")
    print(f"{len(results) - failed}/{len(results)} checks below {TOLERANCE:g}")
    return 0 if failed == 0 else RUNTIME_ERROR


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep-calib": cmd_sweep,
    "sweep-density": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    from kbnet.errors import ConfigError, KBNetError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "kbnet: error: a subcommand is required")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USAGE_ERROR
    except ConfigError as exc:
        print(f"kbnet: configuration error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (KBNetError, OSError, ValueError) as exc:
        print(f"kbnet: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
