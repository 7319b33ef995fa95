"""Command-line surface: synth, train, infer, eval, baseline, gradcheck.

Every failure exits nonzero with a single machine-parsable stderr line of
the form `error <kind>: <reason>`. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .cloud import LabeledPointCloud, load_cloud, save_cloud
from .config import (
    net_config_from, parse_config, scene_spec_from, spec_with_ops,
    train_config_from, write_resolved,
)
from .errors import ConfigError, DataError, NumericError
from .metrics import (
    c2c_baseline, c2c_distances, confusion, format_keyvalue, format_table,
    metrics, save_colored,
)
from .model import load_model
from .synth import sample_scene_spec, save_scene, SceneSpec
from .train import ScenePair, fit, infer_scene

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pcchange",
        description="Bi-temporal point-cloud change detection at desk scale.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate labeled bi-temporal scenes")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--out", required=True, help="output directory (train/ and test/ inside)")

    p = sub.add_parser("train", help="train a detector on generated scenes")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--data", required=True, help="directory with train/ (and optional test/)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")

    p = sub.add_parser("infer", help="predict change labels for a scene pair")
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.ckpt)")
    p.add_argument("--t1", required=True, help="earlier epoch .xyz")
    p.add_argument("--t2", required=True, help="later epoch .xyz or .xyzl")
    p.add_argument("--out", required=True, help="output .xyzl with predicted labels")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="predicted labels .xyzl")
    p.add_argument("--truth", required=True, help="ground-truth labels .xyzl")
    p.add_argument("--colors", default=None,
                   help="optional per-point outcome export (xyz label code)")
    p.add_argument("--report", default=None, help="optional key=value report file")

    p = sub.add_parser("baseline", help="cloud-to-cloud distance thresholding")
    p.add_argument("--t1", required=True, help="earlier epoch .xyz")
    p.add_argument("--t2", required=True, help="later epoch .xyz or .xyzl")
    p.add_argument("--threshold", required=True, type=float, help="distance threshold, metres")
    p.add_argument("--out", required=True, help="output .xyzl with baseline labels")

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="max relative error allowed for layer and network checks")
    return ap


def _load_pair_dir(root: Path) -> list:
    pairs = []
    for t1_path in sorted(root.glob("*_t1.xyz")):
        t2_path = t1_path.with_name(t1_path.name.replace("_t1.xyz", "_t2.xyzl"))
        if not t2_path.exists():
            raise DataError(f"missing mate for {t1_path}: expected {t2_path.name}")
        pairs.append(ScenePair(
            t1=load_cloud(t1_path),
            t2=load_cloud(t2_path),
            name=t1_path.name[: -len("_t1.xyz")],
        ))
    if not pairs:
        raise DataError(f"no scene pairs (*_t1.xyz / *_t2.xyzl) found in {root}")
    return pairs


def cmd_synth(args) -> int:
    cfg = parse_config(args.config)
    out = Path(args.out)
    base = scene_spec_from(cfg)
    wrote = []
    for split, count in (("train", cfg["synth.train_scenes"]),
                         ("test", cfg["synth.test_scenes"])):
        for i in range(count):
            offset = i if split == "train" else 10_000 + i
            seed = cfg["scene.seed"] + offset
            if cfg["synth.randomize"]:
                spec = sample_scene_spec(seed, base)
            else:
                spec = SceneSpec(
                    kind=base.kind, extent_x=base.extent_x, extent_y=base.extent_y,
                    density=base.density, noise=base.noise, seed=seed,
                    base_z=base.base_z, radius=base.radius, ops=base.ops,
                )
            name = f"{cfg['synth.name']}_{split}{i:03d}"
            manifest = save_scene(out / split, name, spec)
            wrote.append((split, name, manifest["points_t2"], manifest["changed"]))
    write_resolved(cfg, out)
    for split, name, n, ch in wrote:
        print(f"{split}/{name}: {n} T2 points, {ch} changed")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    netcfg = net_config_from(cfg)
    traincfg = train_config_from(cfg)
    data = Path(args.data)
    train_scenes = _load_pair_dir(data / "train")
    test_dir = data / "test"
    test_scenes = _load_pair_dir(test_dir) if test_dir.is_dir() else None
    out = Path(args.out)
    write_resolved(cfg, out)
    _, rows = fit(netcfg, traincfg, train_scenes, test_scenes, out_dir=out,
                  log_print=print)
    print(f"wrote {out / 'best.ckpt'} and {out / 'log.csv'} ({len(rows)} rows)")
    return 0


def cmd_infer(args) -> int:
    w, netcfg, manifest = load_model(args.checkpoint)
    t1 = load_cloud(args.t1)
    t2 = load_cloud(args.t2)
    chunk = int(manifest.get("chunk_size", 1024))
    pred = infer_scene(w, netcfg, t1, t2, chunk_size=chunk)
    save_cloud(LabeledPointCloud(points=t2.points, labels=pred, epoch="T2"), args.out)
    print(f"wrote {args.out}: {int(pred.sum())} of {len(pred)} points changed")
    return 0


def cmd_eval(args) -> int:
    pred_cloud = load_cloud(args.pred)
    truth_cloud = load_cloud(args.truth)
    if pred_cloud.labels is None or truth_cloud.labels is None:
        raise DataError("eval: both files must carry a label column")
    if len(pred_cloud) != len(truth_cloud):
        raise DataError(
            f"eval: {len(pred_cloud)} predicted vs {len(truth_cloud)} truth points"
        )
    if not np.allclose(pred_cloud.points, truth_cloud.points, atol=1e-5):
        raise DataError("eval: pred and truth coordinates disagree; files not aligned")
    report = metrics(confusion(pred_cloud.labels, truth_cloud.labels))
    print(format_table(report))
    if args.report:
        Path(args.report).write_text(format_keyvalue(report), encoding="utf-8")
    if args.colors:
        save_colored(args.colors, truth_cloud.points, pred_cloud.labels,
                     truth_cloud.labels)
    return 0


def cmd_baseline(args) -> int:
    t1 = load_cloud(args.t1)
    t2 = load_cloud(args.t2)
    dist = c2c_distances(t1, t2)
    labels = c2c_baseline(t1, t2, args.threshold, distances=dist)
    save_cloud(LabeledPointCloud(points=t2.points, labels=labels, epoch="T2"), args.out)
    print(f"wrote {args.out}: {int(labels.sum())} of {len(labels)} points over "
          f"{args.threshold:g} m")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    worst_ratio = run_suite(print_line=print, layer_tol=args.tolerance)
    if worst_ratio >= 1.0:
        raise NumericError(
            f"gradient suite failed: worst error at {worst_ratio:.2f}x its tolerance"
        )
    print("gradient suite passed")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
