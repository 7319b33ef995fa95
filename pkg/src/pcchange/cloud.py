"""Point-cloud substrate: labeled clouds, ASCII I/O, KNN search, FPS.

File format is whitespace-separated ASCII, one point per line,
``x y z [label]``; lines starting with '#' are comments, blank lines are
ignored. Written files use LF and "%.6f" coordinate formatting, so
save -> load -> save is byte-stable.

All KNN entry points share one distance convention (componentwise
difference, squared, summed) and one tie rule (equal distances ordered by
ascending point index), so the grid-accelerated path and the brute-force
path are interchangeable element for element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass
class LabeledPointCloud:
    """N points with optional per-point change labels (0/1) and an epoch tag."""

    points: np.ndarray                      # (N, 3) float64
    labels: np.ndarray | None = None        # (N,) int64 in {0, 1}
    epoch: str = "T1"
    id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError("cloud contains non-finite coordinates")
        self.points = pts
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (len(pts),):
                raise DataError(
                    f"labels must have one entry per point: {lab.shape} vs {len(pts)} points"
                )
            if not np.all((lab == 0) | (lab == 1)):
                raise DataError("labels must be 0 or 1")
            self.labels = lab
        if self.epoch not in ("T1", "T2"):
            raise DataError(f"epoch must be 'T1' or 'T2', got {self.epoch!r}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class NeighborList:
    """KNN result for one query: indices plus squared distances, ascending."""

    indices: np.ndarray      # (k,) int64
    sq_dists: np.ndarray     # (k,) float64, non-decreasing
    query: int = -1          # index of the query point, -1 for free coordinates


def load_cloud(path, fmt: str | None = None) -> LabeledPointCloud:
    """Parse an .xyz / .xyzl ASCII file.

    fmt is "xyz-ascii" or "xyzl-ascii"; inferred from the extension when
    None. Malformed lines raise DataError naming the line number.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if fmt is None:
        fmt = "xyzl-ascii" if path.suffix == ".xyzl" else "xyz-ascii"
    if fmt not in ("xyz-ascii", "xyzl-ascii"):
        raise DataError(f"unknown format {fmt!r}")
    want = 4 if fmt == "xyzl-ascii" else 3

    pts, labs = [], []
    with open(path, "r", encoding="utf-8", newline=None) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != want:
                raise DataError(
                    f"{path}:{lineno}: expected {want} fields, got {len(fields)}"
                )
            try:
                x, y, z = float(fields[0]), float(fields[1]), float(fields[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric coordinate") from None
            if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
                raise DataError(f"{path}:{lineno}: non-finite coordinate")
            pts.append((x, y, z))
            if want == 4:
                try:
                    lv = float(fields[3])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric label") from None
                if lv not in (0.0, 1.0):
                    raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {fields[3]}")
                labs.append(int(lv))

    points = np.array(pts, dtype=np.float64).reshape(len(pts), 3)
    labels = np.array(labs, dtype=np.int64) if want == 4 else None
    return LabeledPointCloud(points=points, labels=labels, id=path.stem)


def save_cloud(cloud: LabeledPointCloud, path) -> None:
    """Write in canonical form: "%.6f" coordinates, LF endings."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if cloud.labels is None:
            for x, y, z in cloud.points:
                fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
        else:
            for (x, y, z), l in zip(cloud.points, cloud.labels):
                fh.write(f"{x:.6f} {y:.6f} {z:.6f} {int(l)}\n")


# ---------------------------------------------------------------------------
# KNN
# ---------------------------------------------------------------------------

def _pad_to_k(idx: np.ndarray, d2: np.ndarray, k: int):
    # fewer points than k: repeat the last valid neighbor
    have = idx.shape[-1]
    if have >= k:
        return idx[..., :k], d2[..., :k]
    reps = k - have
    idx = np.concatenate([idx, np.repeat(idx[..., -1:], reps, axis=-1)], axis=-1)
    d2 = np.concatenate([d2, np.repeat(d2[..., -1:], reps, axis=-1)], axis=-1)
    return idx, d2


def knn_brute(ref: np.ndarray, queries: np.ndarray, k: int, chunk_elems: float = 3e7):
    """Exact KNN of each query among ref rows (any dimensionality).

    Returns (indices, sq_dists), each (Q, k). Ties broken by ascending ref
    index; when len(ref) < k the last valid neighbor is repeated. Query
    chunking keeps the distance matrix bounded to ~chunk_elems entries.
    """
    ref = np.asarray(ref, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    n, dim = ref.shape
    if n == 0:
        raise DataError("reference point set is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = len(queries)
    kk = min(k, n)

    out_idx = np.empty((q, kk), dtype=np.int64)
    out_d2 = np.empty((q, kk), dtype=np.float64)
    step = max(1, int(chunk_elems / max(1, n * dim)))
    for s in range(0, q, step):
        e = min(q, s + step)
        diff = queries[s:e, None, :] - ref[None, :, :]
        d2 = np.einsum("qnd,qnd->qn", diff, diff)
        if kk == n:
            # stable argsort orders equal distances by ascending index
            sel = np.argsort(d2, axis=1, kind="stable")
            out_idx[s:e] = sel
            out_d2[s:e] = np.take_along_axis(d2, sel, axis=1)
        else:
            part = np.argpartition(d2, kk - 1, axis=1)[:, :kk]
            pd = np.take_along_axis(d2, part, axis=1)
            kth = pd.max(axis=1)
            n_le = (d2 <= kth[:, None]).sum(axis=1)
            inner = np.argsort(pd, axis=1, kind="stable")
            srt_idx = np.take_along_axis(part, inner, axis=1)
            srt_d2 = np.take_along_axis(pd, inner, axis=1)
            # partition picks arbitrarily among exact distance ties; rows
            # with ties (inside the set or at its boundary) get re-resolved
            # by the (distance, index) rule
            tied = (srt_d2[:, :-1] == srt_d2[:, 1:]).any(axis=1) if kk > 1 else np.zeros(e - s, bool)
            for r in np.nonzero(tied | (n_le > kk))[0]:
                cand = np.nonzero(d2[r] <= kth[r])[0]
                o = np.lexsort((cand, d2[r][cand]))[:kk]
                srt_idx[r], srt_d2[r] = cand[o], d2[r][cand[o]]
            out_idx[s:e] = srt_idx
            out_d2[s:e] = srt_d2
    return _pad_to_k(out_idx, out_d2, k)


class SpatialIndex:
    """Uniform-grid index over one cloud, exact KNN with index tie-breaking.

    Points are bucketed into cubic cells of edge h. A query walks outward
    over Chebyshev rings of cells; any point in ring r lies at distance
    >= (r-1)*h, so the walk stops with one full ring of slack beyond the
    current k-th distance, which makes the result immune to boundary
    rounding. Candidate distances use the same formula as knn_brute, so
    results agree element for element. Immutable after construction.
    """

    def __init__(self, cloud: LabeledPointCloud, target_per_cell: float = 8.0):
        pts = cloud.points if isinstance(cloud, LabeledPointCloud) else np.asarray(cloud, float)
        if len(pts) == 0:
            raise DataError("cannot index an empty cloud")
        self.points = np.ascontiguousarray(pts, dtype=np.float64)
        self.source_id = getattr(cloud, "id", "")
        n = len(pts)
        mins = pts.min(axis=0)
        maxs = pts.max(axis=0)
        ext = maxs - mins
        pos = ext[ext > 0]
        if pos.size == 0:
            h = 1.0
        else:
            h_vol = (np.prod(pos) / max(1.0, n / target_per_cell)) ** (1.0 / pos.size)
            h = max(h_vol, ext.max() / 512.0)
        self.h = float(h)
        self.origin = mins
        self.dims = np.maximum(1, np.floor(ext / h).astype(np.int64) + 1)
        cell = self._cell_of(pts)
        cid = (cell[:, 0] * self.dims[1] + cell[:, 1]) * self.dims[2] + cell[:, 2]
        order = np.argsort(cid, kind="stable")
        self._order = order
        self._cid_sorted = cid[order]

    def _cell_of(self, pts: np.ndarray) -> np.ndarray:
        c = np.floor((np.atleast_2d(pts) - self.origin) / self.h).astype(np.int64)
        return np.clip(c, 0, self.dims - 1)

    def _cell_points(self, cx: int, cy: int, cz: int) -> np.ndarray:
        cid = (cx * self.dims[1] + cy) * self.dims[2] + cz
        lo = np.searchsorted(self._cid_sorted, cid, side="left")
        hi = np.searchsorted(self._cid_sorted, cid, side="right")
        return self._order[lo:hi]

    def _ring_cells(self, c: np.ndarray, r: int):
        nx, ny, nz = self.dims
        x0, x1 = max(0, c[0] - r), min(nx - 1, c[0] + r)
        y0, y1 = max(0, c[1] - r), min(ny - 1, c[1] + r)
        z0, z1 = max(0, c[2] - r), min(nz - 1, c[2] + r)
        if r == 0:
            if 0 <= c[0] < nx and 0 <= c[1] < ny and 0 <= c[2] < nz:
                yield (c[0], c[1], c[2])
            return
        for cx in range(x0, x1 + 1):
            for cy in range(y0, y1 + 1):
                for cz in range(z0, z1 + 1):
                    if max(abs(cx - c[0]), abs(cy - c[1]), abs(cz - c[2])) == r:
                        yield (cx, cy, cz)

    def query(self, coord: np.ndarray, k: int) -> NeighborList:
        if k < 1:
            raise ValueError("k must be >= 1")
        pt = np.asarray(coord, dtype=np.float64).reshape(3)
        # virtual (unclamped) cell so the ring distance bound holds for
        # queries outside the bounding box
        c = np.floor((pt - self.origin) / self.h).astype(np.int64)
        max_ring = int(
            max(
                np.maximum(c - 0, 0).max(initial=0),
                np.maximum(self.dims - 1 - c, 0).max(initial=0),
            )
        )
        n = len(self.points)
        kk = min(k, n)
        cand: list[np.ndarray] = []
        n_cand = 0
        kth = np.inf
        for r in range(0, max_ring + 1):
            hit = [self._cell_points(cx, cy, cz) for (cx, cy, cz) in self._ring_cells(c, r)]
            hit = [h for h in hit if h.size]
            if hit:
                cand.extend(hit)
                n_cand += sum(h.size for h in hit)
            if n_cand >= kk:
                idx = np.concatenate(cand)
                diff = self.points[idx] - pt[None, :]
                d2 = np.einsum("nd,nd->n", diff, diff)
                o = np.lexsort((idx, d2))[:kk]
                kth = d2[o[-1]]
                cand = [idx]
                # one extra whole ring of slack beyond the geometric bound
                if (r - 1) * self.h > math.sqrt(kth) + self.h:
                    idx, d2 = idx[o], d2[o]
                    idx, d2 = _pad_to_k(idx, d2, k)
                    return NeighborList(indices=idx, sq_dists=d2)
        idx = np.concatenate(cand) if cand else np.empty(0, np.int64)
        diff = self.points[idx] - pt[None, :]
        d2 = np.einsum("nd,nd->n", diff, diff)
        o = np.lexsort((idx, d2))[:kk]
        idx, d2 = _pad_to_k(idx[o], d2[o], k)
        return NeighborList(indices=idx, sq_dists=d2)

    def query_batch(self, coords: np.ndarray, k: int):
        """KNN for each row of coords; returns (Q, k) indices and distances."""
        coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
        idx = np.empty((len(coords), k), dtype=np.int64)
        d2 = np.empty((len(coords), k), dtype=np.float64)
        for i, ct in enumerate(coords):
            nl = self.query(ct, k)
            idx[i], d2[i] = nl.indices, nl.sq_dists
        return idx, d2


def build_index(cloud: LabeledPointCloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def knn_query(index: SpatialIndex, coord, k: int) -> NeighborList:
    return index.query(np.asarray(coord, dtype=np.float64), k)


# ---------------------------------------------------------------------------
# Farthest point sampling
# ---------------------------------------------------------------------------

def lexmin_index(points: np.ndarray) -> int:
    """Index of the lexicographically smallest coordinate triple."""
    pts = np.asarray(points)
    return int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])


def farthest_point_sample(cloud, m: int, seed: int = 0, start: int | None = None) -> np.ndarray:
    """Greedy maximin subset of m point indices.

    The first index comes from numpy's PCG64 generator seeded with `seed`
    (or is given explicitly via `start`); each following pick maximizes the
    minimum distance to the chosen set, ties broken by ascending index.
    """
    pts = cloud.points if isinstance(cloud, LabeledPointCloud) else np.asarray(cloud, np.float64)
    n = len(pts)
    if not (1 <= m <= n):
        raise ValueError(f"m must be in [1, {n}], got {m}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    diff = pts - pts[start]
    best_d2 = np.einsum("nd,nd->n", diff, diff)
    best_d2[start] = -1.0   # sentinel: chosen points can never be re-picked
    for i in range(1, m):
        nxt = int(np.argmax(best_d2))   # argmax returns the first max: ascending-index ties
        chosen[i] = nxt
        diff = pts - pts[nxt]
        d2 = np.einsum("nd,nd->n", diff, diff)
        np.minimum(best_d2, d2, out=best_d2)
        best_d2[nxt] = -1.0
    return chosen
