"""Siamese encoder-decoder for bi-temporal change detection.

Both epochs run through one encoder (a single weight copy, referenced by
both branches): four levels, each FPS downsample -> dynamic-graph edge
conv -> self-transformer. At every level the branches exchange information
through cross-transformer fusion (both directions, same weights), then the
later epoch retrieves the feature of its nearest earlier-epoch point and
takes the difference. The decoder propagates coarse features back up the
later epoch's pyramid with inverse-distance interpolation, concatenating
the per-level difference and fused skip features, and a small head emits
changed/unchanged logits on the original later-epoch points.

Predictions live on the T2 cloud: newly built geometry exists only there.

All discrete selections (FPS picks, neighbor lists, interpolation
supports) are frozen when a `cache` dict is supplied, so repeated forward
passes differentiate a fixed graph while parameters move.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_arrays, load_manifest, manifest_path, save_arrays, save_manifest
from .cloud import LabeledPointCloud, farthest_point_sample, knn_brute, lexmin_index
from .errors import DataError
from .layers import (
    AttentionParams,
    DynamicGraph,
    MLPParams,
    build_dynamic_graph,
    cross_transformer_layer,
    edge_conv,
    init_attention,
    init_mlp,
    mlp_forward,
    self_transformer_layer,
)

IDW_EPS = 1e-8
IDW_NEIGHBORS = 3


@dataclass
class NetConfig:
    ratios: tuple = (4, 4, 2, 2)
    channels: tuple = (32, 64, 128, 256)
    k: int = 16
    min_points: int = 64
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != len(self.channels):
            raise ValueError("NetConfig: ratios and channels must have equal length")
        if any(r < 1 for r in self.ratios) or self.k < 1:
            raise ValueError("NetConfig: ratios and k must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.ratios)

    def manifest(self) -> dict:
        return {
            "ratios": list(self.ratios),
            "channels": list(self.channels),
            "k": self.k,
            "min_points": self.min_points,
            "seed": self.seed,
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "NetConfig":
        return cls(
            ratios=tuple(m["ratios"]),
            channels=tuple(m["channels"]),
            k=int(m["k"]),
            min_points=int(m["min_points"]),
            seed=int(m["seed"]),
        )


@dataclass
class EncoderLevel:
    edge: MLPParams
    attn: AttentionParams


@dataclass
class ChangeNetWeights:
    """One encoder copy shared by both branches, plus fusion and decoder."""

    levels: list            # EncoderLevel per scale
    cross: list             # AttentionParams per scale, used in both directions
    decode_stages: list     # MLPParams per scale (consumed top-down)
    head: MLPParams


def init_weights(cfg: NetConfig, rng: np.random.Generator | None = None) -> ChangeNetWeights:
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    ch = cfg.channels
    c_in = (3,) + tuple(ch[:-1])
    levels = [
        EncoderLevel(
            edge=init_mlp(rng, (2 * c_in[l], ch[l]), final_relu=True),
            attn=init_attention(rng, ch[l]),
        )
        for l in range(cfg.levels)
    ]
    cross = [init_attention(rng, ch[l]) for l in range(cfg.levels)]
    top = cfg.levels - 1
    stages = []
    for l in range(cfg.levels):
        up = ch[l + 1] if l < top else 0
        width_in = up + 2 * ch[l]
        stages.append(init_mlp(rng, (width_in, ch[l], ch[l]), final_relu=True))
    head = init_mlp(rng, (ch[0], ch[0], 2), final_relu=False)
    return ChangeNetWeights(levels=levels, cross=cross, decode_stages=stages, head=head)


@dataclass
class PyramidLevel:
    coords: np.ndarray        # (m, 3)
    features: Tensor          # (m, C_l)
    sample_idx: np.ndarray    # (m,) indices into the previous level's points


@dataclass
class PyramidFeatures:
    levels: list = field(default_factory=list)   # PyramidLevel, fine to coarse


def _cached(cache: dict | None, key, compute):
    if cache is None:
        return compute()
    if key not in cache:
        cache[key] = compute()
    return cache[key]


def encode(
    cloud: LabeledPointCloud,
    w: ChangeNetWeights,
    cfg: NetConfig,
    cache: dict | None = None,
    tag: str = "",
) -> PyramidFeatures:
    """Run one branch of the shared encoder over a cloud."""
    n = cloud.points.shape[0]
    if n < cfg.min_points:
        raise DataError(
            f"encode: cloud has {n} points, minimum is {cfg.min_points} "
            f"(set min_points to lower it)"
        )
    coords = cloud.points
    feats = Tensor(coords)   # raw xyz as the initial features
    pyr = PyramidFeatures()
    for l, level in enumerate(w.levels):
        m = math.ceil(coords.shape[0] / cfg.ratios[l])
        fps_idx = _cached(
            cache,
            (tag, l, "fps"),
            lambda c=coords, m=m: farthest_point_sample(c, m, start=lexmin_index(c)),
        )
        coords = coords[fps_idx]
        feats = ad.gather(feats, fps_idx)
        edge_graph = _cached(
            cache,
            (tag, l, "edge_graph"),
            lambda f=feats: build_dynamic_graph(f.data, cfg.k),
        )
        feats = edge_conv(feats, edge_graph, level.edge)
        attn_graph = _cached(
            cache,
            (tag, l, "attn_graph"),
            lambda f=feats: build_dynamic_graph(f.data, cfg.k),
        )
        feats = self_transformer_layer(feats, coords, cfg.k, level.attn, graph=attn_graph)
        pyr.levels.append(PyramidLevel(coords=coords, features=feats, sample_idx=fps_idx))
    return pyr


def fuse_cross(
    level_a: PyramidLevel,
    level_b: PyramidLevel,
    p: AttentionParams,
    k: int,
    cache: dict | None = None,
    key=None,
) -> tuple[Tensor, Tensor]:
    """Cross-attention in both directions with one parameter set."""
    idx_ab = _cached(
        cache,
        (key, "ab"),
        lambda: knn_brute(level_b.coords, level_a.coords, k)[0],
    )
    idx_ba = _cached(
        cache,
        (key, "ba"),
        lambda: knn_brute(level_a.coords, level_b.coords, k)[0],
    )
    fa = cross_transformer_layer(
        level_a.features, level_a.coords, level_b.features, level_b.coords,
        k, p, neighbor_idx=idx_ab,
    )
    fb = cross_transformer_layer(
        level_b.features, level_b.coords, level_a.features, level_a.coords,
        k, p, neighbor_idx=idx_ba,
    )
    return fa, fb


def feature_difference(
    feat_a: Tensor,
    coords_a: np.ndarray,
    feat_b: Tensor,
    coords_b: np.ndarray,
    nn_idx: np.ndarray | None = None,
) -> Tensor:
    """Per A point: its feature minus that of its nearest B point in 3D."""
    if coords_a.shape[0] == 0 or coords_b.shape[0] == 0:
        raise DataError("feature_difference: empty level")
    if nn_idx is None:
        nn_idx, _ = knn_brute(coords_b, coords_a, 1)
    matched = ad.gather(feat_b, nn_idx[:, 0])
    return ad.sub(feat_a, matched)


def idw_weights(fine: np.ndarray, coarse: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Support indices and normalized weights for 3-NN inverse-distance
    interpolation; a fine point sitting exactly on a coarse point snaps to
    it (one-hot weight) instead of averaging through the epsilon."""
    idx, d2 = knn_brute(coarse, fine, IDW_NEIGHBORS)
    w = 1.0 / (d2 + IDW_EPS)
    w = w / w.sum(axis=1, keepdims=True)
    exact = d2[:, 0] == 0.0
    if exact.any():
        w[exact] = 0.0
        w[exact, 0] = 1.0
    return idx, w


def idw_interpolate(
    fine_coords: np.ndarray,
    coarse_coords: np.ndarray,
    coarse_feats: Tensor,
    support: tuple | None = None,
) -> Tensor:
    if support is None:
        support = idw_weights(fine_coords, coarse_coords)
    idx, w = support
    c = coarse_feats.data.shape[-1]
    gathered = ad.gather(coarse_feats, idx)                      # (n, 3, C)
    w3 = np.broadcast_to(w[:, :, None], (*idx.shape, c)).copy()
    return ad.reduce_sum(ad.mul(gathered, Tensor(w3)), axis=1)


def decode(
    pyr: PyramidFeatures,
    fused: list,
    diffs: list,
    original_coords: np.ndarray,
    w: ChangeNetWeights,
    cache: dict | None = None,
) -> Tensor:
    """Top-down feature propagation ending in 2 logits per original point."""
    top = len(pyr.levels) - 1
    dec = None
    for l in range(top, -1, -1):
        parts = []
        if dec is not None:
            support = _cached(
                cache,
                ("idw", l),
                lambda fl=l: idw_weights(pyr.levels[fl].coords, pyr.levels[fl + 1].coords),
            )
            parts.append(
                idw_interpolate(
                    pyr.levels[l].coords, pyr.levels[l + 1].coords, dec, support
                )
            )
        parts.append(diffs[l])
        parts.append(fused[l])
        dec = mlp_forward(w.decode_stages[l], ad.concat(parts, axis=-1))
    support0 = _cached(
        cache,
        ("idw", -1),
        lambda: idw_weights(original_coords, pyr.levels[0].coords),
    )
    up = idw_interpolate(original_coords, pyr.levels[0].coords, dec, support0)
    return mlp_forward(w.head, up)


def forward(
    cloud_t1: LabeledPointCloud,
    cloud_t2: LabeledPointCloud,
    w: ChangeNetWeights,
    cfg: NetConfig,
    cache: dict | None = None,
) -> Tensor:
    """Per-point change logits (N_T2 x 2) on the later epoch's points."""
    pyr1 = encode(cloud_t1, w, cfg, cache=cache, tag="t1")
    pyr2 = encode(cloud_t2, w, cfg, cache=cache, tag="t2")
    fused2, diffs = [], []
    for l in range(cfg.levels):
        f2, f1 = fuse_cross(
            pyr2.levels[l], pyr1.levels[l], w.cross[l], cfg.k,
            cache=cache, key=("cross", l),
        )
        nn_idx = _cached(
            cache,
            ("diff_nn", l),
            lambda fl=l: knn_brute(pyr1.levels[fl].coords, pyr2.levels[fl].coords, 1)[0],
        )
        d = feature_difference(
            f2, pyr2.levels[l].coords, f1, pyr1.levels[l].coords, nn_idx=nn_idx
        )
        fused2.append(f2)
        diffs.append(d)
    return decode(pyr2, fused2, diffs, cloud_t2.points, w, cache=cache)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_model(path, w: ChangeNetWeights, cfg: NetConfig, extra: dict | None = None) -> None:
    arrays = {name: t.data for name, t in ad.named_parameters(w)}
    save_arrays(path, arrays)
    manifest = {"arch": cfg.manifest()}
    if extra:
        manifest.update(extra)
    save_manifest(manifest_path(path), manifest)


def load_model(path) -> tuple[ChangeNetWeights, NetConfig, dict]:
    manifest = load_manifest(manifest_path(path))
    cfg = NetConfig.from_manifest(manifest["arch"])
    w = init_weights(cfg)
    arrays = load_arrays(path)
    expected = dict(ad.named_parameters(w))
    missing = sorted(set(expected) - set(arrays))
    surplus = sorted(set(arrays) - set(expected))
    if missing or surplus:
        raise DataError(
            f"checkpoint mismatch: missing {missing[:3]}..., surplus {surplus[:3]}..."
            if len(missing) + len(surplus) > 6
            else f"checkpoint mismatch: missing {missing}, surplus {surplus}"
        )
    for name, t in expected.items():
        arr = arrays[name]
        if arr.shape != t.data.shape:
            raise DataError(
                f"checkpoint entry {name}: shape {arr.shape}, expected {t.data.shape}"
            )
        t.data = arr
    return w, cfg, manifest
