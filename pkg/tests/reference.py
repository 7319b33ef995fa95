"""Literal brute-force oracles for the numeric tests.

Everything here is written as plain Python loops over indices, as close
to the defining formulas as possible, trading all speed for obviousness.
Tests compare the vectorized implementations against these.
"""

from __future__ import annotations

import math

import numpy as np


def knn_oracle(ref, queries, k):
    """Sort every (squared distance, index) pair per query, take k."""
    ref = np.asarray(ref, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    out_idx, out_d2 = [], []
    for q in queries:
        pairs = []
        for j, r in enumerate(ref):
            d2 = 0.0
            for a, b in zip(q, r):
                d2 += (a - b) * (a - b)
            pairs.append((d2, j))
        pairs.sort()
        take = pairs[: min(k, len(pairs))]
        while len(take) < k:
            take.append(take[-1])
        out_idx.append([j for _, j in take])
        out_d2.append([d for d, _ in take])
    return np.array(out_idx, dtype=np.int64), np.array(out_d2)


def fps_oracle(points, m, start):
    """Greedy maximin selection, first index on argmax ties."""
    pts = np.asarray(points, dtype=np.float64)
    chosen = [start]
    best = [math.inf] * len(pts)
    best[start] = -1.0
    for _ in range(m - 1):
        for i in range(len(pts)):
            if best[i] < 0:
                continue
            d2 = sum((pts[i][c] - pts[chosen[-1]][c]) ** 2 for c in range(3))
            if d2 < best[i]:
                best[i] = d2
        nxt = max(range(len(pts)), key=lambda i: (best[i], -i))
        chosen.append(nxt)
        best[nxt] = -1.0
    return np.array(chosen, dtype=np.int64)


def matmul_oracle(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def linear_oracle(weight, bias, x):
    """x W^T + b for a single row or a stack of rows."""
    x = np.asarray(x)
    single = x.ndim == 1
    rows = x.reshape(-1, x.shape[-1])
    out = np.zeros((len(rows), len(weight)))
    for i, row in enumerate(rows):
        for o in range(len(weight)):
            s = bias[o]
            for t in range(len(row)):
                s += weight[o][t] * row[t]
            out[i, o] = s
    if single:
        return out[0]
    return out.reshape(*x.shape[:-1], len(weight))


def mlp_oracle(layers, x, final_relu):
    """layers = [(weight, bias), ...]; ReLU between, optional at the end."""
    h = np.asarray(x, dtype=np.float64)
    for li, (wgt, b) in enumerate(layers):
        h = linear_oracle(wgt, b, h)
        if li < len(layers) - 1 or final_relu:
            h = np.maximum(h, 0.0)
    return h


def softmax_oracle(v):
    v = np.asarray(v, dtype=np.float64)
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def rho_oracle(logits):
    """Softmax over neighbors per channel, then L1 renormalization."""
    logits = np.asarray(logits, dtype=np.float64)
    k, c = logits.shape
    out = np.zeros((k, c))
    for ch in range(c):
        col = softmax_oracle(logits[:, ch])
        l1 = sum(abs(x) for x in col)
        out[:, ch] = [x / l1 for x in col]
    return out


def edge_conv_oracle(features, indices, layers, final_relu=True):
    """Per-edge MLP of concat(x_i, x_j - x_i), channelwise max per point."""
    feats = np.asarray(features, dtype=np.float64)
    n, k = indices.shape
    c_out = len(layers[-1][0])
    out = np.zeros((n, c_out))
    for i in range(n):
        edges = []
        for j in indices[i]:
            edge_in = np.concatenate([feats[i], feats[j] - feats[i]])
            edges.append(mlp_oracle(layers, edge_in, final_relu))
        for ch in range(c_out):
            out[i, ch] = max(e[ch] for e in edges)
    return out


def _attention_params_as_arrays(p):
    """Unpack AttentionParams into plain numpy arrays for the oracles."""
    return {
        "phi": (p.phi.weight.data, p.phi.bias.data),
        "omega": (p.omega.weight.data, p.omega.bias.data),
        "alpha": (p.alpha.weight.data, p.alpha.bias.data),
        "beta": [(l.weight.data, l.bias.data) for l in p.beta.layers],
        "sigma": [(l.weight.data, l.bias.data) for l in p.sigma.layers],
    }


def vector_attention_oracle(feat_q, coords_q, feat_kv, coords_kv, indices, p):
    """Literal per-point evaluation of the attention equations:
    y_i = sum_j rho(beta(phi(q_i) - omega(kv_j) + sigma_ij)) * (alpha(kv_j) + sigma_ij)
    followed by the residual on the query features."""
    ps = _attention_params_as_arrays(p)
    fq = np.asarray(feat_q, dtype=np.float64)
    fkv = np.asarray(feat_kv, dtype=np.float64)
    n, c = fq.shape
    out = np.zeros((n, c))
    for i in range(n):
        q = linear_oracle(*ps["phi"], fq[i])
        logits = []
        values = []
        for j in indices[i]:
            key = linear_oracle(*ps["omega"], fkv[j])
            val = linear_oracle(*ps["alpha"], fkv[j])
            sigma = mlp_oracle(ps["sigma"], coords_q[i] - coords_kv[j], final_relu=False)
            logits.append(mlp_oracle(ps["beta"], q - key + sigma, final_relu=False))
            values.append(val + sigma)
        weights = rho_oracle(np.array(logits))
        y = np.zeros(c)
        for jj in range(len(indices[i])):
            for ch in range(c):
                y[ch] += weights[jj, ch] * values[jj][ch]
        out[i] = fq[i] + y
    return out


def feature_difference_oracle(feat_a, coords_a, feat_b, coords_b):
    """Nearest B point per A point (squared distance, index ties), subtract."""
    fa = np.asarray(feat_a, dtype=np.float64)
    fb = np.asarray(feat_b, dtype=np.float64)
    out = np.zeros_like(fa)
    for i in range(len(fa)):
        best = (math.inf, -1)
        for j in range(len(fb)):
            d2 = sum((coords_a[i][c] - coords_b[j][c]) ** 2 for c in range(3))
            if (d2, j) < best:
                best = (d2, j)
        out[i] = fa[i] - fb[best[1]]
    return out


def idw_oracle(fine, coarse, coarse_feats, eps=1e-8, neighbors=3):
    """3-NN inverse squared distance interpolation with zero-distance snap."""
    fine = np.asarray(fine, dtype=np.float64)
    coarse = np.asarray(coarse, dtype=np.float64)
    cf = np.asarray(coarse_feats, dtype=np.float64)
    out = np.zeros((len(fine), cf.shape[1]))
    for i in range(len(fine)):
        pairs = []
        for j in range(len(coarse)):
            d2 = sum((fine[i][c] - coarse[j][c]) ** 2 for c in range(3))
            pairs.append((d2, j))
        pairs.sort()
        take = pairs[: min(neighbors, len(pairs))]
        while len(take) < neighbors:
            take.append(take[-1])
        if take[0][0] == 0.0:
            out[i] = cf[take[0][1]]
            continue
        wsum = 0.0
        acc = np.zeros(cf.shape[1])
        for d2, j in take:
            wgt = 1.0 / (d2 + eps)
            wsum += wgt
            acc += wgt * cf[j]
        out[i] = acc / wsum
    return out


def confusion_oracle(pred, truth):
    tp = tn = fp = fn = 0
    for p, t in zip(pred, truth):
        if p == 1 and t == 1:
            tp += 1
        elif p == 0 and t == 0:
            tn += 1
        elif p == 1 and t == 0:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn


def metrics_oracle(tp, tn, fp, fn):
    """Re-derivation of the macro metrics from their definitions; returns
    percentages rounded nowhere (callers round for display checks)."""

    def ratio(num, den):
        return num / den if den else 0.0

    total = tp + tn + fp + fn
    oa = (tp + tn) / total
    rec = (ratio(tp, tp + fn) + ratio(tn, tn + fp)) / 2
    pre = (ratio(tp, tp + fp) + ratio(tn, tn + fn)) / 2
    f1 = (ratio(2 * tp, 2 * tp + fp + fn) + ratio(2 * tn, 2 * tn + fp + fn)) / 2
    iou = (ratio(tp, tp + fp + fn) + ratio(tn, tn + fp + fn)) / 2
    return {
        "OA": 100 * oa,
        "mrecall": 100 * rec,
        "mprecision": 100 * pre,
        "mf1score": 100 * f1,
        "mIoU": 100 * iou,
    }


def weighted_ce_oracle(logits, labels, w):
    """Weighted mean of -log softmax(true class)."""
    total = 0.0
    wsum = 0.0
    for row, lab in zip(logits, labels):
        p = softmax_oracle(row)
        total += w[lab] * (-math.log(p[lab]))
        wsum += w[lab]
    return total / wsum
