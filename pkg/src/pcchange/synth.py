"""Deterministic generator of bi-temporal labeled change scenes.

A scene is a base surface (ground plane or half-cylinder tunnel shell)
sampled twice, independently, so the two epochs never share a point even
where nothing changed. Change operations are then applied to the later
epoch:

* add — new points sampled on the faces of a box (equipment, construction);
* remove — points inside a region deleted; the surviving points in a thin
  band around the removal footprint carry the changed label, since the
  deleted geometry itself leaves nothing to label;
* subside — points inside a region shift down by a depth, with an optional
  linear taper band just inside the border (plan-view distance).

Labels live on T2: 1 for added points, points actually moved by
subsidence, and removal-band points; 0 elsewhere. Everything is a pure
function of (spec, seed); rerunning a spec writes byte-identical files.

Ops are applied in the order remove, subside, add regardless of listing
order, so added geometry is never subsided away.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import LabeledPointCloud, save_cloud
from .errors import ConfigError, DataError

REMOVAL_BAND = 0.2   # metres of surviving points around a removal labeled changed


@dataclass
class Box:
    """Axis-aligned box region [lo, hi] per axis."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != (3,) or self.hi.shape != (3,):
            raise ConfigError("box region needs lo/hi triples")
        if np.any(self.hi <= self.lo):
            raise ConfigError(f"box region with empty extent: lo={self.lo}, hi={self.hi}")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    def expanded(self, pad: float) -> "Box":
        return Box(self.lo - pad, self.hi + pad)

    def plan_border_distance(self, pts: np.ndarray) -> np.ndarray:
        """Distance to the xy border, measured inside (0 outside)."""
        dx = np.minimum(pts[:, 0] - self.lo[0], self.hi[0] - pts[:, 0])
        dy = np.minimum(pts[:, 1] - self.lo[1], self.hi[1] - pts[:, 1])
        return np.maximum(np.minimum(dx, dy), 0.0)

    def grammar(self) -> str:
        vals = [*self.lo, *self.hi]
        return "box " + " ".join(f"{v:g}" for v in vals)

    def face_areas(self):
        """(area, origin, edge_u, edge_v) per face of the box surface."""
        lo, hi = self.lo, self.hi
        d = hi - lo
        faces = []
        for axis in range(3):
            u, v = (axis + 1) % 3, (axis + 2) % 3
            for side_val in (lo[axis], hi[axis]):
                origin = lo.copy()
                origin[axis] = side_val
                eu = np.zeros(3)
                eu[u] = d[u]
                ev = np.zeros(3)
                ev[v] = d[v]
                faces.append((d[u] * d[v], origin, eu, ev))
        return faces


@dataclass
class CylinderSector:
    """Sector of a cylinder shell around the tunnel axis (x)."""

    x0: float
    x1: float
    r0: float
    r1: float
    th0: float   # radians, 0 = +y horizontal, pi/2 = zenith
    th1: float
    cy: float = 0.0

    def __post_init__(self):
        if self.x1 <= self.x0 or self.r1 <= self.r0 or self.th1 <= self.th0:
            raise ConfigError("cylinder sector with empty extent")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        r = np.hypot(pts[:, 1] - self.cy, pts[:, 2])
        th = np.arctan2(pts[:, 2], pts[:, 1] - self.cy)
        return (
            (pts[:, 0] >= self.x0) & (pts[:, 0] <= self.x1)
            & (r >= self.r0) & (r <= self.r1)
            & (th >= self.th0) & (th <= self.th1)
        )

    def expanded(self, pad: float) -> "CylinderSector":
        rm = max(0.5 * (self.r0 + self.r1), 1e-9)
        return CylinderSector(
            self.x0 - pad, self.x1 + pad,
            max(self.r0 - pad, 0.0), self.r1 + pad,
            self.th0 - pad / rm, self.th1 + pad / rm, self.cy,
        )

    def plan_border_distance(self, pts: np.ndarray) -> np.ndarray:
        raise ConfigError("subside requires a box region")

    def grammar(self) -> str:
        vals = [self.x0, self.x1, self.r0, self.r1, self.th0, self.th1]
        return "sector " + " ".join(f"{v:g}" for v in vals)


@dataclass
class ChangeOp:
    kind: str                     # add | remove | subside
    region: object                # Box or CylinderSector
    depth: float = 0.0            # subside only
    margin: float = 0.0           # subside taper band width
    count: int = 0                # add only; 0 = density * face area

    def __post_init__(self):
        if self.kind not in ("add", "remove", "subside"):
            raise ConfigError(f"unknown change op kind {self.kind!r}")
        if self.kind == "subside" and self.depth <= 0:
            raise ConfigError("subside needs depth > 0")
        if self.margin < 0 or self.count < 0:
            raise ConfigError("op margin and count must be non-negative")

    def grammar(self) -> str:
        s = f"{self.kind} {self.region.grammar()}"
        if self.kind == "subside":
            s += f" depth={self.depth:g}"
            if self.margin:
                s += f" margin={self.margin:g}"
        if self.kind == "add" and self.count:
            s += f" count={self.count}"
        return s


@dataclass
class SceneSpec:
    kind: str = "ground-plane"        # or "tunnel-cylinder"
    extent_x: float = 20.0
    extent_y: float = 20.0
    density: float = 50.0             # points per square metre of surface
    noise: float = 0.03               # sigma along the surface normal, metres
    seed: int = 0
    base_z: float = 0.0
    radius: float = 0.0               # tunnel only; 0 = extent_y / 2
    ops: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("ground-plane", "tunnel-cylinder"):
            raise ConfigError(f"unknown surface kind {self.kind!r}")
        if self.density <= 0:
            raise ConfigError("density must be > 0")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.extent_x <= 0 or self.extent_y <= 0:
            raise ConfigError("extent must be positive")
        for op in self.ops:
            if op.kind == "subside" and op.depth <= self.noise:
                raise ConfigError(
                    f"subsidence depth {op.depth:g} must exceed noise sigma {self.noise:g}"
                )

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "extent_x": self.extent_x,
            "extent_y": self.extent_y,
            "density": self.density,
            "noise": self.noise,
            "seed": self.seed,
            "base_z": self.base_z,
            "radius": self.radius,
            "ops": [op.grammar() for op in self.ops],
        }


# ---------------------------------------------------------------------------
# op grammar: "subside box 6 6 -1 11 11 1 depth=2 margin=0; add box ... count=500"
# ---------------------------------------------------------------------------

def parse_ops(text: str) -> list:
    ops = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        tokens = chunk.split()
        kind = tokens[0]
        if len(tokens) < 2:
            raise ConfigError(f"op {chunk!r}: missing region")
        shape = tokens[1]
        kv = {}
        nums = []
        for t in tokens[2:]:
            if "=" in t:
                key, val = t.split("=", 1)
                kv[key] = val
            else:
                nums.append(t)
        try:
            vals = [float(v) for v in nums]
        except ValueError as exc:
            raise ConfigError(f"op {chunk!r}: bad number: {exc}") from exc
        if shape == "box":
            if len(vals) != 6:
                raise ConfigError(f"op {chunk!r}: box needs 6 numbers, got {len(vals)}")
            region = Box(vals[:3], vals[3:])
        elif shape == "sector":
            if len(vals) != 6:
                raise ConfigError(f"op {chunk!r}: sector needs 6 numbers, got {len(vals)}")
            region = CylinderSector(*vals)
        else:
            raise ConfigError(f"op {chunk!r}: unknown region shape {shape!r}")
        known = {"depth", "margin", "count"}
        for key in kv:
            if key not in known:
                raise ConfigError(f"op {chunk!r}: unknown parameter {key!r}")
        try:
            ops.append(ChangeOp(
                kind=kind,
                region=region,
                depth=float(kv.get("depth", 0.0)),
                margin=float(kv.get("margin", 0.0)),
                count=int(kv.get("count", 0)),
            ))
        except ValueError as exc:
            raise ConfigError(f"op {chunk!r}: bad parameter value: {exc}") from exc
    return ops


def format_ops(ops: list) -> str:
    return "; ".join(op.grammar() for op in ops)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _poisson_cells(rng: np.random.Generator, lx: float, ly: float, density: float):
    """Poisson-count, uniform-placement sampling of [0,lx] x [0,ly].

    The plane is cut into ~1 square metre cells; each cell draws a Poisson
    count at its exact area, then places points uniformly inside itself.
    Returns (u, v) arrays in surface parameter space.
    """
    nx = max(1, int(math.ceil(lx)))
    ny = max(1, int(math.ceil(ly)))
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    wx = np.diff(xs)
    wy = np.diff(ys)
    areas = np.outer(wx, wy).ravel()
    counts = rng.poisson(density * areas)
    total = int(counts.sum())
    u01 = rng.random(total)
    v01 = rng.random(total)
    cell = np.repeat(np.arange(nx * ny), counts)
    ci, cj = cell // ny, cell % ny
    u = xs[ci] + u01 * wx[ci]
    v = ys[cj] + v01 * wy[cj]
    return u, v


def resample(spec: SceneSpec, seed) -> np.ndarray:
    """One fresh sampling of the base surface, noise along the normal."""
    rng = np.random.default_rng(seed)
    if spec.kind == "ground-plane":
        u, v = _poisson_cells(rng, spec.extent_x, spec.extent_y, spec.density)
        z = spec.base_z + rng.normal(0.0, spec.noise, len(u))
        return np.column_stack([u, v, z])
    radius = spec.radius if spec.radius > 0 else spec.extent_y / 2.0
    cy = spec.extent_y / 2.0
    # shell parameterized by (x, arc length); area = extent_x * pi * radius
    u, s = _poisson_cells(rng, spec.extent_x, math.pi * radius, spec.density)
    th = s / radius
    r = radius + rng.normal(0.0, spec.noise, len(u))
    y = cy + r * np.cos(th)
    z = spec.base_z + r * np.sin(th)
    return np.column_stack([u, y, z])


def _sample_box_faces(rng: np.random.Generator, box: Box, count: int) -> np.ndarray:
    faces = box.face_areas()
    areas = np.array([f[0] for f in faces])
    if areas.sum() <= 0:
        raise DataError("add op: box has zero surface area")
    probs = areas / areas.sum()
    which = rng.choice(len(faces), size=count, p=probs)
    uv = rng.random((count, 2))
    pts = np.empty((count, 3))
    for fi, (_, origin, eu, ev) in enumerate(faces):
        m = which == fi
        pts[m] = origin + uv[m, :1] * eu + uv[m, 1:2] * ev
    return pts


def apply_subsidence(points: np.ndarray, region, depth: float, margin: float = 0.0):
    """Shift z down by depth inside the region, linear taper over `margin`
    just inside the border (plan view). Returns (new points, moved mask)."""
    if depth <= 0:
        raise ConfigError("apply_subsidence: depth must be > 0")
    inside = region.contains(points)
    if margin > 0:
        f = np.minimum(region.plan_border_distance(points) / margin, 1.0)
    else:
        f = np.ones(len(points))
    shift = np.where(inside, depth * f, 0.0)
    out = points.copy()
    out[:, 2] -= shift
    return out, shift > 0


def generate_scene(spec: SceneSpec) -> tuple[LabeledPointCloud, LabeledPointCloud]:
    """Sample both epochs and apply the change ops to T2."""
    t1_pts = resample(spec, (spec.seed, 1))
    t2_pts = resample(spec, (spec.seed, 2))
    if len(t1_pts) == 0 or len(t2_pts) == 0:
        raise DataError("scene sampling produced an empty cloud")
    labels = np.zeros(len(t2_pts), dtype=np.int64)
    op_rng = np.random.default_rng((spec.seed, 3))

    ordered = [op for op in spec.ops if op.kind == "remove"] \
        + [op for op in spec.ops if op.kind == "subside"] \
        + [op for op in spec.ops if op.kind == "add"]
    for op in ordered:
        if op.kind == "remove":
            gone = op.region.contains(t2_pts)
            if not gone.any():
                raise DataError(f"remove op matched no points: {op.grammar()}")
            band = op.region.expanded(REMOVAL_BAND).contains(t2_pts) & ~gone
            labels[band] = 1
            keep = ~gone
            t2_pts, labels = t2_pts[keep], labels[keep]
            if len(t2_pts) == 0:
                raise DataError("remove ops deleted the entire scene")
        elif op.kind == "subside":
            t2_pts, moved = apply_subsidence(t2_pts, op.region, op.depth, op.margin)
            if not moved.any():
                raise DataError(f"subside op matched no points: {op.grammar()}")
            labels[moved] = 1
        else:   # add
            count = op.count
            if count == 0:
                area = sum(f[0] for f in op.region.face_areas())
                count = int(op_rng.poisson(spec.density * area))
            if count < 1:
                raise DataError(f"add op produced no points: {op.grammar()}")
            new_pts = _sample_box_faces(op_rng, op.region, count)
            t2_pts = np.vstack([t2_pts, new_pts])
            labels = np.concatenate([labels, np.ones(count, dtype=np.int64)])

    t1 = LabeledPointCloud(points=t1_pts, epoch="T1")
    t2 = LabeledPointCloud(points=t2_pts, labels=labels, epoch="T2")
    return t1, t2


def save_scene(out_dir, name: str, spec: SceneSpec) -> dict:
    """Generate and write T1 (.xyz), T2 (.xyzl), and the spec manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t1, t2 = generate_scene(spec)
    p1 = out_dir / f"{name}_t1.xyz"
    p2 = out_dir / f"{name}_t2.xyzl"
    save_cloud(t1, p1)
    save_cloud(t2, p2)
    manifest = {"name": name, "spec": spec.manifest(),
                "t1": p1.name, "t2": p2.name,
                "points_t1": len(t1), "points_t2": len(t2),
                "changed": int(t2.labels.sum())}
    with open(out_dir / f"{name}_scene.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

def overfit_fixture(seed: int = 7) -> SceneSpec:
    """20 x 20 m plane, 50 pts per square metre, one 2 m subsidence patch
    and one added box floating above the ground."""
    return SceneSpec(
        kind="ground-plane",
        extent_x=20.0,
        extent_y=20.0,
        density=50.0,
        noise=0.03,
        seed=seed,
        ops=[
            ChangeOp(kind="subside", region=Box([6.0, 6.0, -1.0], [11.0, 11.0, 1.0]),
                     depth=2.0),
            ChangeOp(kind="add", region=Box([14.0, 14.0, 1.5], [15.0, 15.0, 2.5]),
                     count=500),
        ],
    )


def sample_scene_spec(seed: int, base: SceneSpec | None = None) -> SceneSpec:
    """Draw one scene from the generalization distribution: shallow
    subsidence patches (the C2C-hostile regime near the point spacing),
    sometimes an added box or a removal, on a randomly elevated plane."""
    rng = np.random.default_rng((seed, 17))
    if base is None:
        base = SceneSpec()
    bz = float(rng.uniform(-2.0, 2.0))
    ops = []
    for _ in range(int(rng.integers(1, 3))):
        side = float(rng.uniform(3.0, 6.0))
        x0 = float(rng.uniform(1.0, base.extent_x - side - 1.0))
        y0 = float(rng.uniform(1.0, base.extent_y - side - 1.0))
        depth = float(rng.uniform(0.15, 0.35))
        ops.append(ChangeOp(
            kind="subside",
            region=Box([x0, y0, bz - 1.0], [x0 + side, y0 + side, bz + 1.0]),
            depth=depth,
        ))
    if rng.random() < 0.5:
        w = float(rng.uniform(0.8, 1.5))
        x0 = float(rng.uniform(1.0, base.extent_x - w - 1.0))
        y0 = float(rng.uniform(1.0, base.extent_y - w - 1.0))
        z0 = bz + float(rng.uniform(1.0, 2.0))
        ops.append(ChangeOp(
            kind="add",
            region=Box([x0, y0, z0], [x0 + w, y0 + w, z0 + w]),
            count=int(rng.integers(300, 800)),
        ))
    if rng.random() < 0.5:
        w = float(rng.uniform(2.0, 4.0))
        x0 = float(rng.uniform(1.0, base.extent_x - w - 1.0))
        y0 = float(rng.uniform(1.0, base.extent_y - w - 1.0))
        ops.append(ChangeOp(
            kind="remove",
            region=Box([x0, y0, bz - 1.0], [x0 + w, y0 + w, bz + 1.0]),
        ))
    return SceneSpec(
        kind=base.kind,
        extent_x=base.extent_x,
        extent_y=base.extent_y,
        density=base.density,
        noise=base.noise,
        seed=seed,
        base_z=bz,
        ops=ops,
    )
