#!/usr/bin/env python3
"""Train on 8 sampled scenes, test on 2 unseen ones, and race the C2C baseline.

The C2C threshold is tuned on the train split only, then both methods score
the same unseen pairs with full-scene pooled metrics. Expected outcome:
network mIoU >= 75 and strictly above the baseline.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from pcchange.metrics import (
    ConfusionMatrix, best_c2c_threshold, c2c_distances, confusion,
    format_table, metrics,
)
from pcchange.model import NetConfig
from pcchange.synth import generate_scene, sample_scene_spec
from pcchange.train import ScenePair, TrainConfig, evaluate_scene, fit


def build_split(base_seed: int, count: int, stem: str) -> list:
    pairs = []
    for i in range(count):
        t1, t2 = generate_scene(sample_scene_spec(base_seed + i))
        pairs.append(ScenePair(t1=t1, t2=t2, name=f"{stem}{i}"))
    return pairs


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=25, help="training epochs")
    ap.add_argument("--lr", type=float, default=5e-4, help="learning rate")
    ap.add_argument("--out", default="runs/generalization",
                    help="checkpoint/log output directory")
    args = ap.parse_args()

    t0 = time.monotonic()
    train_pairs = build_split(200, 8, "train")
    test_pairs = build_split(900, 2, "test")
    print(f"scenes ready ({time.monotonic() - t0:.0f}s); changed fractions:",
          [round(float(p.t2.labels.mean()), 3) for p in train_pairs + test_pairs])

    netcfg = NetConfig(seed=0)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, seed=0, eval_crops=2)
    w, _ = fit(netcfg, cfg, train_pairs, test_pairs, out_dir=Path(args.out),
               log_print=print)

    pooled = ConfusionMatrix()
    for p in test_pairs:
        pooled = pooled + evaluate_scene(w, netcfg, p, chunk_size=1024)
    net = metrics(pooled)
    print(format_table(net, title="network, full unseen scenes"))

    best_th, train_miou = best_c2c_threshold(
        [(p.t1, p.t2) for p in train_pairs], np.geomspace(0.02, 1.5, 40)
    )
    pooled = ConfusionMatrix()
    for p in test_pairs:
        pred = (c2c_distances(p.t1, p.t2) > best_th).astype(np.int64)
        pooled = pooled + confusion(pred, p.t2.labels)
    c2c = metrics(pooled)
    print(format_table(
        c2c, title=f"C2C baseline, threshold {best_th:.3f} m "
                   f"(train mIoU {train_miou:.2f})"
    ))

    ok = net.miou >= 75.0 and net.miou > c2c.miou
    print(f"verdict: network mIoU {net.miou:.2f} vs C2C {c2c.miou:.2f} -> "
          f"{'OK' if ok else 'BELOW TARGET'} "
          f"(total {time.monotonic() - t0:.0f}s)")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
