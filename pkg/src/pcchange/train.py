"""Loss, optimizer, crop sampling, the training loop, and inference.

Training operates on spherical crops: a random T2 point is drawn, the
chunk-size nearest T2 points around it form the later-epoch crop, and the
earlier epoch contributes its points inside the same sphere, so the pair
stays co-registered. Both crops are translated so the crop center sits at
the origin, which keeps absolute world position out of the features. One
crop pair is one optimization step.

Every epoch is evaluated on a fixed, seeded set of held-out crops (drawn
from the test split when present, else from the train scenes with a seed
stream disjoint from training), and the best-by-mIoU checkpoint is kept.

Whole scenes are inferred through covering crops: repeatedly crop around
the lowest-indexed point not yet covered, accumulate logits, average, and
take the argmax per point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import LabeledPointCloud, SpatialIndex, save_cloud
from .errors import ConfigError, DataError, NumericError
from .metrics import ConfusionMatrix, confusion, metrics
from .model import ChangeNetWeights, NetConfig, forward, save_model

LOG_HEADER = "epoch,loss,OA,mrecall,mprecision,mf1score,mIoU"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    steps_per_scene: int = 1
    chunk_size: int = 1024
    seed: int = 0
    w_changed: float = 0.0     # 0 = inverse class frequency from the train split
    w_unchanged: float = 0.0
    eval_crops: int = 2
    checkpoint_every: int = 0  # additionally save every N epochs; 0 = off

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.chunk_size < 64:
            raise ConfigError("train.chunk_size must be >= 64")
        if self.epochs < 0 or self.steps_per_scene < 1 or self.eval_crops < 1:
            raise ConfigError("train epochs/steps_per_scene/eval_crops out of range")


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, class_weights) -> Tensor:
    """Weighted mean of per-point negative log softmax probability of the
    true class: sum_i w_{y_i} * nll_i / sum_i w_{y_i}."""
    labels = np.asarray(labels)
    n = logits.data.shape[0]
    if labels.shape != (n,):
        raise DataError(f"loss: {labels.shape} labels for {n} logits")
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError("loss: labels must be 0 or 1")
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (2,) or np.any(w <= 0):
        raise ConfigError(f"loss: class weights must be two positives, got {w}")
    lsm = ad.log_softmax(logits, axis=-1)
    onehot = np.zeros((n, 2))
    onehot[np.arange(n), labels] = 1.0
    point_w = w[labels]
    true_logp = ad.reduce_sum(ad.mul(lsm, Tensor(onehot)), axis=1)
    total = ad.reduce_sum(ad.mul(true_logp, Tensor(point_w)), axis=0)
    return ad.scale(total, -1.0 / point_w.sum())


class Adam:
    """Adaptive-moment optimizer over named parameter tensors."""

    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = list(named_params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for name, p in self.named:
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None


# ---------------------------------------------------------------------------
# crops
# ---------------------------------------------------------------------------

@dataclass
class ScenePair:
    t1: LabeledPointCloud
    t2: LabeledPointCloud
    name: str = ""

    def __post_init__(self):
        if self.t2.labels is None:
            raise DataError(f"scene {self.name or '?'}: T2 cloud has no labels")


class _SceneIndexCache:
    def __init__(self):
        self._cache: dict = {}

    def get(self, pair: ScenePair) -> tuple[SpatialIndex, SpatialIndex]:
        key = id(pair)
        if key not in self._cache:
            self._cache[key] = (SpatialIndex(pair.t1), SpatialIndex(pair.t2))
        return self._cache[key]


def crop_pair(
    pair: ScenePair,
    center_idx: int,
    chunk_size: int,
    indices: tuple[SpatialIndex, SpatialIndex] | None = None,
    min_t1: int = 64,
) -> tuple[LabeledPointCloud, LabeledPointCloud]:
    """Spherical crop: chunk-size nearest T2 points around a T2 point, the
    same sphere cut from T1, both centered on the chosen point. The T1 cut
    keeps at least min_t1 points even when the sphere is underpopulated
    (removals can empty it), capped at 1.5x chunk size."""
    if indices is None:
        indices = (SpatialIndex(pair.t1), SpatialIndex(pair.t2))
    idx_t1, idx_t2 = indices
    center = pair.t2.points[center_idx]
    k2 = min(chunk_size, len(pair.t2))
    nl2 = idx_t2.query(center, k2)
    radius2 = nl2.sq_dists[-1]
    k1 = min(int(1.5 * chunk_size), len(pair.t1))
    nl1 = idx_t1.query(center, k1)
    in_sphere = nl1.sq_dists <= radius2
    keep = max(int(in_sphere.sum()), min(min_t1, len(pair.t1)))
    sel1 = nl1.indices[:keep]
    crop1 = LabeledPointCloud(points=pair.t1.points[sel1] - center, epoch="T1")
    crop2 = LabeledPointCloud(
        points=pair.t2.points[nl2.indices] - center,
        labels=pair.t2.labels[nl2.indices],
        epoch="T2",
    )
    return crop1, crop2


def class_weights_from_scenes(scenes: list) -> np.ndarray:
    """Inverse class frequency over the train split: w_c = total / (2 n_c)."""
    counts = np.zeros(2)
    for pair in scenes:
        counts[1] += int(pair.t2.labels.sum())
        counts[0] += len(pair.t2) - int(pair.t2.labels.sum())
    if counts.min() == 0:
        return np.ones(2)
    total = counts.sum()
    return total / (2.0 * counts)


# ---------------------------------------------------------------------------
# steps and loop
# ---------------------------------------------------------------------------

def train_step(
    w: ChangeNetWeights,
    netcfg: NetConfig,
    opt: Adam,
    crop1: LabeledPointCloud,
    crop2: LabeledPointCloud,
    class_w,
    dump_dir=None,
    step: int = -1,
) -> float:
    opt.zero_grad()
    with ad.record() as tape:
        logits = forward(crop1, crop2, w, netcfg)
        loss = cross_entropy_loss(logits, crop2.labels, class_w)
    value = loss.item()
    if not math.isfinite(value):
        where = ""
        if dump_dir is not None:
            dump_dir = Path(dump_dir)
            dump_dir.mkdir(parents=True, exist_ok=True)
            save_cloud(crop1, dump_dir / f"dump_step{step}_t1.xyz")
            save_cloud(crop2, dump_dir / f"dump_step{step}_t2.xyzl")
            where = f"; offending crops dumped to {dump_dir}"
        raise NumericError(f"non-finite loss {value} at step {step}{where}")
    ad.backward(tape, loss, params=[p for _, p in opt.named])
    opt.step()
    return value


def predict_crop(
    w: ChangeNetWeights, netcfg: NetConfig,
    crop1: LabeledPointCloud, crop2: LabeledPointCloud,
) -> np.ndarray:
    logits = forward(crop1, crop2, w, netcfg)
    return logits.data


def _eval_crop_set(w, netcfg, crops) -> ConfusionMatrix:
    pooled = ConfusionMatrix()
    for crop1, crop2 in crops:
        pred = np.argmax(predict_crop(w, netcfg, crop1, crop2), axis=1)
        pooled = pooled + confusion(pred, crop2.labels)
    return pooled


def fit(
    netcfg: NetConfig,
    cfg: TrainConfig,
    train_scenes: list,
    test_scenes: list | None = None,
    out_dir=None,
    log_print=None,
) -> tuple[ChangeNetWeights, list]:
    """Train, log one metric row per epoch (plus the pre-training row),
    keep the best-by-mIoU checkpoint. Returns (weights, log rows)."""
    if not train_scenes:
        raise DataError("fit: empty train split")
    from .model import init_weights   # local import keeps module load light

    w = init_weights(netcfg)
    params = list(ad.named_parameters(w))
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    if cfg.w_changed > 0 and cfg.w_unchanged > 0:
        class_w = np.array([cfg.w_unchanged, cfg.w_changed])
    else:
        class_w = class_weights_from_scenes(train_scenes)

    cache = _SceneIndexCache()
    eval_source = test_scenes if test_scenes else train_scenes
    eval_crops = []
    for si, pair in enumerate(eval_source):
        rng = np.random.default_rng((cfg.seed, 990_000 + si))
        # centers stratified over both classes so the epoch log measures
        # changed-class performance even when changes are rare
        changed = np.flatnonzero(pair.t2.labels == 1)
        unchanged = np.flatnonzero(pair.t2.labels == 0)
        for ci in range(cfg.eval_crops):
            pool = changed if (ci % 2 == 0 and len(changed)) else unchanged
            if len(pool) == 0:
                pool = np.arange(len(pair.t2))
            center = int(pool[rng.integers(len(pool))])
            eval_crops.append(crop_pair(
                pair, center, cfg.chunk_size,
                indices=cache.get(pair), min_t1=netcfg.min_points,
            ))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def evaluate() -> dict:
        rep = metrics(_eval_crop_set(w, netcfg, eval_crops))
        return rep.as_dict()

    rows = []
    best_miou = -1.0

    def log_row(epoch: int, loss_val: float):
        nonlocal best_miou
        vals = evaluate()
        row = (
            f"{epoch},{loss_val:.6f},{vals['OA']:.4f},{vals['mrecall']:.4f},"
            f"{vals['mprecision']:.4f},{vals['mf1score']:.4f},{vals['mIoU']:.4f}"
        )
        rows.append(row)
        if log_print:
            log_print(row)
        if vals["mIoU"] > best_miou:
            best_miou = vals["mIoU"]
            if out_dir is not None:
                save_model(out_dir / "best.ckpt", w, netcfg,
                           extra={"epoch": epoch, "chunk_size": cfg.chunk_size,
                                  "metrics": vals})

    log_row(0, float("nan"))
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for pair in train_scenes:
            changed = np.flatnonzero(pair.t2.labels == 1)
            unchanged = np.flatnonzero(pair.t2.labels == 0)
            for _ in range(cfg.steps_per_scene):
                rng = np.random.default_rng((cfg.seed, step))
                # alternate crop centers between the classes; rare changes
                # would otherwise go unseen for most of a short run
                pool = changed if (step % 2 == 0 and len(changed)) else unchanged
                if len(pool) == 0:
                    pool = np.arange(len(pair.t2))
                center = int(pool[rng.integers(len(pool))])
                crop1, crop2 = crop_pair(
                    pair, center, cfg.chunk_size,
                    indices=cache.get(pair), min_t1=netcfg.min_points,
                )
                losses.append(train_step(
                    w, netcfg, opt, crop1, crop2, class_w,
                    dump_dir=out_dir, step=step,
                ))
                step += 1
        log_row(epoch, float(np.mean(losses)))
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_model(out_dir / f"epoch{epoch}.ckpt", w, netcfg,
                       extra={"epoch": epoch, "chunk_size": cfg.chunk_size})

    if out_dir is not None:
        save_model(out_dir / "final.ckpt", w, netcfg,
                   extra={"epoch": cfg.epochs, "chunk_size": cfg.chunk_size})
        with open(out_dir / "log.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(LOG_HEADER + "\n")
            for row in rows:
                fh.write(row + "\n")
    return w, rows


# ---------------------------------------------------------------------------
# whole-scene inference
# ---------------------------------------------------------------------------

def infer_scene(
    w: ChangeNetWeights,
    netcfg: NetConfig,
    t1: LabeledPointCloud,
    t2: LabeledPointCloud,
    chunk_size: int = 1024,
) -> np.ndarray:
    """Predict labels for every T2 point via covering crops.

    Crops center on the lowest-indexed point not yet covered; per-point
    logits from overlapping crops are summed before the argmax, which
    equals averaging for the decision."""
    if len(t1) == 0 or len(t2) == 0:
        raise DataError("infer: empty cloud")
    pair = ScenePair(
        t1=t1,
        t2=LabeledPointCloud(points=t2.points,
                             labels=np.zeros(len(t2), dtype=np.int64), epoch="T2"),
    )
    indices = (SpatialIndex(pair.t1), SpatialIndex(pair.t2))
    logit_sum = np.zeros((len(t2), 2))
    covered = np.zeros(len(t2), dtype=bool)
    while not covered.all():
        center_idx = int(np.argmin(covered))   # first uncovered point
        crop1, crop2 = crop_pair(pair, center_idx, chunk_size,
                                 indices=indices, min_t1=netcfg.min_points)
        k2 = min(chunk_size, len(pair.t2))
        nl2 = indices[1].query(pair.t2.points[center_idx], k2)
        logit_sum[nl2.indices] += predict_crop(w, netcfg, crop1, crop2)
        covered[nl2.indices] = True
    return np.argmax(logit_sum, axis=1).astype(np.int64)


def evaluate_scene(
    w: ChangeNetWeights,
    netcfg: NetConfig,
    pair: ScenePair,
    chunk_size: int = 1024,
) -> ConfusionMatrix:
    pred = infer_scene(w, netcfg, pair.t1, pair.t2, chunk_size)
    return confusion(pred, pair.t2.labels)
