"""Attention layers over point neighborhoods.

Four building blocks:

* build_dynamic_graph — exact KNN in the current feature space, rebuilt
  every time features change; a point is always its own first neighbor.
* edge_conv — DGCNN-style edge features h = MLP(concat(x_i, x_j - x_i))
  max-pooled per point over its k edges.
* self_transformer_layer — vector attention with subtraction relation,
  per-channel weights, positional encoding added to both the logit and
  the value term, residual output F_out = F_in + y.
* cross_transformer_layer — the same attention form with queries from one
  cloud and keys/values from its k nearest neighbors (3D coordinate
  space) in the other cloud; residual onto the query branch.

Neighbor selection is discrete: gradients flow through gathered features,
never through which neighbors were picked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import LinearParams, Tensor, init_linear
from .cloud import knn_brute


@dataclass
class MLPParams:
    """Stacked linear layers, ReLU between; trailing ReLU is optional."""

    layers: list = field(default_factory=list)
    final_relu: bool = True


def init_mlp(rng: np.random.Generator, widths, final_relu: bool = True) -> MLPParams:
    """widths = (n_in, hidden..., n_out)."""
    layers = [init_linear(rng, widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
    return MLPParams(layers=layers, final_relu=final_relu)


def mlp_forward(p: MLPParams, x) -> Tensor:
    for i, lin in enumerate(p.layers):
        x = ad.linear(lin, x)
        if i < len(p.layers) - 1 or p.final_relu:
            x = ad.relu(x)
    return x


@dataclass
class AttentionParams:
    """Learnable maps of the vector-attention layer at channel width C.

    phi, omega, alpha are point-wise C to C transforms (query, key,
    value). beta is the attention MLP (two linears, ReLU between) mapping
    the C-dim relation vector to C per-channel logits. sigma is the
    position-encoding MLP (two linears, ReLU between) from a 3D offset
    to C channels; one sigma feeds both the logit and the value term.
    """

    phi: LinearParams
    omega: LinearParams
    alpha: LinearParams
    beta: MLPParams
    sigma: MLPParams
    channels: int = 0


def init_attention(rng: np.random.Generator, channels: int) -> AttentionParams:
    c = channels
    return AttentionParams(
        phi=init_linear(rng, c, c),
        omega=init_linear(rng, c, c),
        alpha=init_linear(rng, c, c),
        beta=init_mlp(rng, (c, c, c), final_relu=False),
        sigma=init_mlp(rng, (3, c, c), final_relu=False),
        channels=c,
    )


@dataclass
class DynamicGraph:
    """Per-point neighbor lists; indices[i, 0] == i always."""

    indices: np.ndarray   # (N, k) int64
    k: int


def build_dynamic_graph(features: np.ndarray, k: int) -> DynamicGraph:
    """Exact KNN over rows of `features` with the point itself first.

    Remaining slots hold the nearest other points ordered by squared
    distance, ties broken by ascending index. When N < k the last
    neighbor repeats to keep the shape rectangular.
    """
    if k < 1:
        raise ValueError(f"build_dynamic_graph: k must be >= 1, got {k}")
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    if n == 0:
        raise ValueError("build_dynamic_graph: empty feature set")
    d2 = np.einsum("ic,ic->i", feats, feats)[:, None] \
        + np.einsum("jc,jc->j", feats, feats)[None, :] \
        - 2.0 * (feats @ feats.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, -1.0)   # forces self to sort first
    col = np.broadcast_to(np.arange(n), (n, n))
    order = np.lexsort((col, d2), axis=-1)
    kk = min(k, n)
    idx = order[:, :kk]
    if kk < k:
        idx = np.concatenate([idx, np.repeat(idx[:, -1:], k - kk, axis=1)], axis=1)
    return DynamicGraph(indices=np.ascontiguousarray(idx, dtype=np.int64), k=k)


def _row_tile(n: int, k: int) -> np.ndarray:
    return np.repeat(np.arange(n, dtype=np.int64), k).reshape(n, k)


def edge_conv(features: Tensor, graph: DynamicGraph, p: MLPParams) -> Tensor:
    """Per edge h = MLP(concat(x_i, x_j - x_i)); per point max over edges."""
    n = features.data.shape[0]
    if graph.indices.shape[0] != n:
        raise ValueError(
            f"edge_conv: graph over {graph.indices.shape[0]} points, features have {n}"
        )
    xj = ad.gather(features, graph.indices)
    xi = ad.gather(features, _row_tile(n, graph.indices.shape[1]))
    h = mlp_forward(p, ad.concat([xi, ad.sub(xj, xi)], axis=-1))
    return ad.reduce_max(h, axis=1)


def position_encoding(offsets: np.ndarray, p: MLPParams) -> Tensor:
    """sigma = MLP(coords_i - coords_j) for an array of 3D offsets."""
    off = np.asarray(offsets, dtype=np.float64)
    if off.shape[-1] != 3:
        raise ValueError(f"position_encoding: offsets must end in 3, got {off.shape}")
    return mlp_forward(p, Tensor(off))


def attention_normalize(logits: Tensor, axis: int = -2) -> Tensor:
    """rho: per-channel softmax over the neighbor axis, then L1 renorm."""
    return ad.l1_normalize(ad.softmax(logits, axis=axis), axis=axis)


def _vector_attention(
    feat_q: Tensor,
    feat_kv: Tensor,
    neighbor_idx: np.ndarray,
    offsets: np.ndarray,
    p: AttentionParams,
) -> Tensor:
    """Shared core: y_i = sum_j rho(beta(phi(q_i) - omega(kv_j) + sigma_ij))
    elementwise-times (alpha(kv_j) + sigma_ij), residual added by callers.

    neighbor_idx (N, k) indexes rows of feat_kv; offsets (N, k, 3) are
    coords_q[i] - coords_kv[j].
    """
    n, k = neighbor_idx.shape
    q = ad.gather(ad.linear(p.phi, feat_q), _row_tile(n, k))     # (N, k, C)
    kv = ad.gather(feat_kv, neighbor_idx)                        # (N, k, C)
    key = ad.linear(p.omega, kv)
    val = ad.linear(p.alpha, kv)
    sigma = position_encoding(offsets, p.sigma)                  # (N, k, C)
    logits = mlp_forward(p.beta, ad.add(ad.sub(q, key), sigma))
    weights = attention_normalize(logits, axis=-2)
    return ad.reduce_sum(ad.mul(weights, ad.add(val, sigma)), axis=1)


def self_transformer_layer(
    features: Tensor,
    coords: np.ndarray,
    k: int,
    p: AttentionParams,
    graph: DynamicGraph | None = None,
) -> Tensor:
    """Vector attention over the dynamic feature-space graph; residual out.

    Passing `graph` reuses a frozen neighbor selection (for gradient
    checks); by default the graph is rebuilt from the current features.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = features.data.shape[0]
    if coords.shape != (n, 3):
        raise ValueError(f"self_transformer_layer: coords {coords.shape} for {n} points")
    if graph is None:
        graph = build_dynamic_graph(features.data, k)
    idx = graph.indices
    offsets = coords[:, None, :] - coords[idx]
    y = _vector_attention(features, features, idx, offsets, p)
    return ad.add(features, y)


def cross_transformer_layer(
    feat_a: Tensor,
    coords_a: np.ndarray,
    feat_b: Tensor,
    coords_b: np.ndarray,
    k: int,
    p: AttentionParams,
    neighbor_idx: np.ndarray | None = None,
) -> Tensor:
    """Attend from every A point to its k nearest B points in 3D space.

    Queries come from A, keys and values from B; the positional term uses
    cross-cloud coordinate offsets; the residual lands on A's features.
    `neighbor_idx` reuses a frozen selection, as in the self layer.
    """
    coords_a = np.asarray(coords_a, dtype=np.float64)
    coords_b = np.asarray(coords_b, dtype=np.float64)
    n_a = feat_a.data.shape[0]
    n_b = feat_b.data.shape[0]
    if n_a == 0 or n_b == 0:
        raise ValueError("cross_transformer_layer: empty cloud")
    if coords_a.shape != (n_a, 3) or coords_b.shape != (n_b, 3):
        raise ValueError(
            f"cross_transformer_layer: coords {coords_a.shape}/{coords_b.shape} "
            f"for {n_a}/{n_b} points"
        )
    if neighbor_idx is None:
        neighbor_idx, _ = knn_brute(coords_b, coords_a, k)
    offsets = coords_a[:, None, :] - coords_b[neighbor_idx]
    y = _vector_attention(feat_a, feat_b, neighbor_idx, offsets, p)
    return ad.add(feat_a, y)
