"""``polardeblur`` command line: synth-data, train, deblur, eval, inspect.

Exit codes: 0 success, 2 usage/config error, 3 data integrity error,
4 training divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import ConfigError, DomainError, IntegrityError, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("polardeblur")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


# --- subcommands -----------------------------------------------------------

def cmd_synth_data(args) -> int:
    from .dataset import SPLITS, build_dataset, declared_record_count, load_dataset_config

    over = _overrides(args.set)
    if args.seed is not None:
        over["root_seed"] = str(args.seed)
    cfg = load_dataset_config(args.config, over)
    splits = tuple(args.splits.split(",")) if args.splits else SPLITS
    bad = [s for s in splits if s not in SPLITS]
    if bad:
        raise ConfigError(f"unknown split(s) {bad}; choose from {SPLITS}")
    manifests = build_dataset(cfg, args.out, splits)
    for split, m in manifests.items():
        print(f"{split}: {len(m)} records (declared {declared_record_count(cfg, split)}), "
              f"crop {m.crop}, augmentation {m.augmentation}")
    print(f"wrote {Path(args.out) / 'manifest.txt'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import build_model, parameter_count
    from .train import LazyRecords, load_train_config, train

    over = _overrides(args.set)
    if args.seed is not None:
        over["seed"] = str(args.seed)
    cfg = load_train_config(args.config, over)
    records = LazyRecords(args.data, args.split)
    model = build_model(cfg.model)
    print(f"model: {parameter_count(model):,} parameters; {len(records)} training records")
    result = train(model, records, cfg, args.out, resume=args.resume)
    if result.history:
        first, last = result.history[0]["total"], result.history[-1]["total"]
        print(f"loss {first:.6g} -> {last:.6g} over steps up to {result.step}")
    print(f"wrote {result.checkpoint}")
    return EXIT_OK


def cmd_deblur(args) -> int:
    from .dataset import read_blurry_inputs, write_png16
    from .evaluation import visualize_polarization
    from .inference import restore
    from .checkpoint import model_from_checkpoint
    from .polar_core import ANGLE_KEYS, polarization_from_set, unpolarized_from_set

    import cv2

    model = model_from_checkpoint(args.ckpt)
    blurry, _ = read_blurry_inputs(args.inp)
    _, restored = restore(model, blurry)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for key, img in zip(ANGLE_KEYS, restored.images()):
        write_png16(out / f"restored_{key}.png", img)
    write_png16(out / "restored_unpol.png", unpolarized_from_set(restored))
    state = polarization_from_set(restored.map(lambda a: np.clip(a, 0, None)))
    p_rgb, theta_rgb = visualize_polarization(state.dolp, state.aolp)
    for name, rgb in (("dolp_vis.png", p_rgb), ("aolp_vis.png", theta_rgb)):
        tmp = out / f".{name}.tmp.png"
        if not cv2.imwrite(str(tmp), np.ascontiguousarray(rgb[..., ::-1])):
            raise OSError(f"failed to write {out / name}")
        tmp.replace(out / name)
    print(f"wrote 7 images to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import model_from_checkpoint
    from .evaluation import evaluate_records
    from .inference import restore
    from .train import LazyRecords

    if not args.baseline and not args.ckpt:
        raise ConfigError("eval needs --ckpt unless --baseline is given")
    records = LazyRecords(args.data, args.split)
    recs = [records[i] for i in range(len(records))]
    predict = None
    source = "blurry-baseline"
    if not args.baseline:
        model = model_from_checkpoint(args.ckpt)
        predict = lambda r: restore(model, r.blurry_set)[1]  # noqa: E731
        source = str(args.ckpt)
    report = evaluate_records(recs, predict, circular=not args.naive_aolp, margin=args.margin,
                              config={"source": source, "split": args.split})
    table = report.table()
    print(table, end="")
    report_path = Path(args.report)
    cfgmod.write_text_atomic(report_path, report.to_kv())
    cfgmod.write_text_atomic(report_path.with_name(report_path.name + ".table.txt"), table)
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .blur_synth import Intrinsics, psf_at_pixel, trajectory_to_transforms
    from .dataset import read_scene
    from .polar_core import validate_physical

    rec = read_scene(args.scene)
    report = validate_physical(rec.sharp_set, args.tol)
    print(f"scene {rec.scene_id}")
    print("sharp set physical check:")
    for line in report.lines():
        print(f"  {line}")
    blurry = validate_physical(rec.blurry_set, args.tol)
    print(f"blurry set identity residual {blurry.identity_violation:.3e} (noise is independent per image)")

    meta = rec.meta
    if "trajectory" in meta:
        poses = np.asarray(meta["trajectory"], dtype=np.float64)
        steps = np.hypot(*np.diff(poses[:, :2], axis=0).T) if len(poses) > 1 else np.zeros(0)
        print("trajectory:")
        print(f"  samples {len(poses)}, path length {steps.sum():.3f} px, max step {steps.max(initial=0):.3f} px")
        print(f"  extent x {np.ptp(poses[:, 0]):.3f} px, y {np.ptp(poses[:, 1]):.3f} px, "
              f"roll {np.ptp(poses[:, 2]):.5f} rad")
        print(f"  max displacement {meta.get('max_displacement', float('nan')):.3f} px, "
              f"border margin {rec.border_margin} px")
        crop = int(meta["crop"])
        full = crop + 2 * int(meta["config"]["scene_margin"])
        oy, ox = meta.get("crop_offset", [0, 0])
        transforms = trajectory_to_transforms(poses, Intrinsics.for_image(full, full))
        print("psf samples (generation frame, before augmentation):")
        points = {"top-left": (0, 0), "top-right": (crop - 1, 0), "bottom-left": (0, crop - 1),
                  "bottom-right": (crop - 1, crop - 1), "center": ((crop - 1) / 2, (crop - 1) / 2)}
        for name, (x, y) in points.items():
            psf = psf_at_pixel(transforms, x + ox, y + oy)
            w = np.array(list(psf.values()))
            offs = np.array(list(psf.keys()), dtype=np.float64)
            cx, cy = (offs * w[:, None]).sum(axis=0) / w.sum()
            print(f"  {name:<12} taps {len(psf):3d}, weight sum {w.sum():.12f}, centroid ({cx:+.3f}, {cy:+.3f})")
    else:
        print("no trajectory recorded in meta")
    if not report.passed:
        print("FAIL: sharp set violates the polarization constraints", file=sys.stderr)
        return EXIT_INTEGRITY
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polardeblur", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_set(p):
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override, wins over --config (repeatable)")
        return p

    p = with_set(sub.add_parser("synth-data", help="generate a paired blurry/sharp dataset"))
    p.add_argument("--config", required=True, help="dataset config file (key=value)")
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--seed", type=int, help="root seed (overrides root_seed)")
    p.add_argument("--splits", help="comma-separated subset of train,test")
    p.set_defaults(func=cmd_synth_data)

    p = with_set(sub.add_parser("train", help="run the three-phase training schedule"))
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--config", help="training config file (key=value)")
    p.add_argument("--out", required=True, help="directory for checkpoints and train_log.txt")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seed", type=int, help="training seed (overrides seed)")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("deblur", help="restore one scene directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True, help="scene directory with blurry_*.png")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("eval", help="score a checkpoint (or the blurry baseline) on a split")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="key-value report path; a .table.txt sibling is written too")
    p.add_argument("--baseline", action="store_true", help="score the blurry inputs instead of a model")
    p.add_argument("--split", default="test")
    p.add_argument("--margin", type=int, help="border exclusion (default: max record blur margin)")
    p.add_argument("--naive-aolp", action="store_true", help="plain (non-circular) AoLP differences")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="physical checks, trajectory stats and PSF samples for a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"polardeblur {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"polardeblur {args.command}: {exc}; diagnostic checkpoint {exc.checkpoint_path}", file=sys.stderr)
        return EXIT_DIVERGED
    except IntegrityError as exc:
        print(f"polardeblur {args.command}: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
