#!/usr/bin/env python3
"""Overfit the detector on the built-in single-scene fixture.

Generates the fixed 20x20 m fixture (one subsidence patch, one floating
box), trains with the known-good recipe, and prints the epoch log. The run
should reach OA >= 99 and mIoU >= 90 on held-out crops well inside 200
steps on a commodity CPU.
"""

import argparse
import time
from pathlib import Path

from pcchange.model import NetConfig
from pcchange.synth import generate_scene, overfit_fixture
from pcchange.train import ScenePair, TrainConfig, fit


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=120, help="training steps")
    ap.add_argument("--lr", type=float, default=5e-4, help="learning rate")
    ap.add_argument("--seed", type=int, default=7, help="fixture seed")
    ap.add_argument("--out", default="runs/overfit",
                    help="checkpoint/log output directory")
    args = ap.parse_args()

    t0 = time.monotonic()
    t1, t2 = generate_scene(overfit_fixture(seed=args.seed))
    pair = ScenePair(t1=t1, t2=t2, name=f"overfit{args.seed}")
    print(f"fixture: {len(t1)} T1 / {len(t2)} T2 points, "
          f"{int(pair.t2.labels.sum())} changed")

    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, chunk_size=1024,
                      seed=0, eval_crops=2)
    fit(NetConfig(seed=0), cfg, [pair], out_dir=Path(args.out), log_print=print)
    print(f"done in {time.monotonic() - t0:.0f}s; artifacts in {args.out}/")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
