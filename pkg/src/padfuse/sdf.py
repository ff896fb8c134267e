"""Signed distance fields: analytic primitives and trilinear grids.

Sign convention: positive outside the object, negative inside.  All eval and
gradient routines accept a single 3-vector or an (N, 3) batch.  Grid fields
extend beyond their volume by adding the Euclidean distance to the clamped
boundary point to the boundary value, which keeps the field continuous and
monotone away from the box.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np


class ResolutionTooSmall(ValueError):
    """Grid bake requested with fewer than 2 nodes on some axis."""


class EmptyModel(ValueError):
    """Object model has no surface points."""


@dataclass(frozen=True)
class Sphere:
    radius: float


@dataclass(frozen=True)
class Box:
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "half_extents",
                           np.asarray(self.half_extents, dtype=float).reshape(3))


@dataclass(frozen=True)
class RoundedBox:
    """Box with edges rounded outward; half_extents are the outer extents."""

    half_extents: np.ndarray
    edge_radius: float

    def __post_init__(self):
        he = np.asarray(self.half_extents, dtype=float).reshape(3)
        if self.edge_radius <= 0 or np.any(he <= self.edge_radius):
            raise ValueError("edge radius must be in (0, min half extent)")
        object.__setattr__(self, "half_extents", he)


@dataclass(frozen=True)
class Cylinder:
    """Capped cylinder along the z axis."""

    radius: float
    half_height: float


@dataclass(frozen=True)
class GridSdf:
    """Regular grid of SDF samples, flat x-fastest storage."""

    origin: np.ndarray
    cell: float
    resolution: tuple
    values: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        res = tuple(int(n) for n in self.resolution)
        if min(res) < 2:
            raise ResolutionTooSmall(f"resolution {res} must be >= 2 per axis")
        values = np.asarray(self.values, dtype=float).reshape(res[0] * res[1] * res[2])
        if not np.all(np.isfinite(values)):
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "values", values)

    @cached_property
    def _vol(self) -> np.ndarray:
        # shape (nz, ny, nx) so that C-order flattening is x-fastest
        nx, ny, nz = self.resolution
        return self.values.reshape(nz, ny, nx)

    @cached_property
    def _corner_offsets(self) -> np.ndarray:
        nx, ny, _ = self.resolution
        sx, sy, sz = 1, nx, nx * ny
        return np.array([dx * sx + dy * sy + dz * sz
                         for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.cell * (np.array(self.resolution) - 1)


AnalyticShape = Union[Sphere, Box, RoundedBox, Cylinder]
SdfField = Union[Sphere, Box, RoundedBox, Cylinder, GridSdf]


def shape_to_json(shape: AnalyticShape) -> dict:
    if isinstance(shape, Sphere):
        return {"shape": "sphere", "radius": shape.radius}
    if isinstance(shape, Box):
        return {"shape": "box", "half_extents": list(map(float, shape.half_extents))}
    if isinstance(shape, RoundedBox):
        return {"shape": "rounded_box",
                "half_extents": list(map(float, shape.half_extents)),
                "edge_radius": shape.edge_radius}
    if isinstance(shape, Cylinder):
        return {"shape": "cylinder", "radius": shape.radius,
                "half_height": shape.half_height}
    raise TypeError(f"not an analytic shape: {shape!r}")


def shape_from_json(obj: dict) -> AnalyticShape:
    kind = obj["shape"]
    if kind == "sphere":
        return Sphere(float(obj["radius"]))
    if kind == "box":
        return Box(np.array(obj["half_extents"], dtype=float))
    if kind == "rounded_box":
        return RoundedBox(np.array(obj["half_extents"], dtype=float),
                          float(obj["edge_radius"]))
    if kind == "cylinder":
        return Cylinder(float(obj["radius"]), float(obj["half_height"]))
    raise ValueError(f"unknown shape kind {kind!r}")


def bounds(shape: AnalyticShape) -> np.ndarray:
    """Half-extents of the axis-aligned bounding box, shape centered at 0."""
    if isinstance(shape, Sphere):
        return np.full(3, shape.radius)
    if isinstance(shape, (Box, RoundedBox)):
        return shape.half_extents.copy()
    if isinstance(shape, Cylinder):
        return np.array([shape.radius, shape.radius, shape.half_height])
    raise TypeError(f"not an analytic shape: {shape!r}")


def support(shape: AnalyticShape, direction: np.ndarray) -> float:
    """max over the shape of <x, direction>, for a unit direction."""
    d = np.asarray(direction, dtype=float)
    if isinstance(shape, Sphere):
        return shape.radius * float(np.linalg.norm(d))
    if isinstance(shape, Box):
        return float(np.abs(d) @ shape.half_extents)
    if isinstance(shape, RoundedBox):
        core = shape.half_extents - shape.edge_radius
        return float(np.abs(d) @ core) + shape.edge_radius * float(np.linalg.norm(d))
    if isinstance(shape, Cylinder):
        return shape.radius * float(np.hypot(d[0], d[1])) + shape.half_height * abs(d[2])
    raise TypeError(f"not an analytic shape: {shape!r}")


def _as_batch(p: np.ndarray):
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return p.reshape(1, 3), True
    return p.reshape(-1, 3), False


def _box_eval(p: np.ndarray, he: np.ndarray) -> np.ndarray:
    q = np.abs(p) - he
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _box_grad(p: np.ndarray, he: np.ndarray) -> np.ndarray:
    q = np.abs(p) - he
    qp = np.maximum(q, 0.0)
    d = np.linalg.norm(qp, axis=1)
    sign = np.where(p >= 0.0, 1.0, -1.0)
    g = np.zeros_like(p)
    out = d > 0.0
    g[out] = sign[out] * qp[out] / d[out, None]
    ins = ~out
    if np.any(ins):
        axis = np.argmax(q[ins], axis=1)
        rows = np.nonzero(ins)[0]
        g[rows, axis] = sign[rows, axis]
    return g


def _cyl_eval(p: np.ndarray, r: float, hh: float) -> np.ndarray:
    a = np.hypot(p[:, 0], p[:, 1]) - r
    b = np.abs(p[:, 2]) - hh
    outside = np.hypot(np.maximum(a, 0.0), np.maximum(b, 0.0))
    inside = np.minimum(np.maximum(a, b), 0.0)
    return outside + inside


def _cyl_grad(p: np.ndarray, r: float, hh: float) -> np.ndarray:
    rad = np.hypot(p[:, 0], p[:, 1])
    a = rad - r
    b = np.abs(p[:, 2]) - hh
    ap = np.maximum(a, 0.0)
    bp = np.maximum(b, 0.0)
    d = np.hypot(ap, bp)
    g = np.zeros_like(p)
    zsign = np.where(p[:, 2] >= 0.0, 1.0, -1.0)
    safe = np.where(rad > 0.0, rad, 1.0)
    out = d > 0.0
    g[out, 0] = (ap[out] / d[out]) * p[out, 0] / safe[out]
    g[out, 1] = (ap[out] / d[out]) * p[out, 1] / safe[out]
    g[out, 2] = (bp[out] / d[out]) * zsign[out]
    ins = ~out
    radial = ins & (a > b)
    g[radial, 0] = p[radial, 0] / safe[radial]
    g[radial, 1] = p[radial, 1] / safe[radial]
    axial = ins & ~radial
    g[axial, 2] = zsign[axial]
    return g


def _grid_locate(g: GridSdf, p: np.ndarray):
    """Clamped point, cell indices (tie toward the lower cell), fractions."""
    nx, ny, nz = g.resolution
    lo = g.origin
    hi = g.upper
    pc = np.clip(p, lo, hi)
    u = (pc - lo) / g.cell
    idx = np.floor(u).astype(np.int64)
    # exact face hits resolve to the lower-index cell for determinism
    on_face = (u == idx) & (idx > 0)
    idx[on_face] -= 1
    idx = np.minimum(idx, np.array([nx, ny, nz]) - 2)
    frac = u - idx
    return pc, idx, frac


def _grid_corners(g: GridSdf, idx: np.ndarray):
    """(N, 2, 2, 2) cell corner values indexed as [:, dx, dy, dz]."""
    nx, ny, _ = g.resolution
    base = idx[:, 0] + nx * (idx[:, 1] + ny * idx[:, 2])
    flat = g.values.take(base[:, None] + g._corner_offsets)
    # offsets enumerate dz-major, so reshape to (dz, dy, dx) then transpose
    return flat.reshape(-1, 2, 2, 2).transpose(0, 3, 2, 1)


def _grid_eval(g: GridSdf, p: np.ndarray) -> np.ndarray:
    pc, idx, f = _grid_locate(g, p)
    c = _grid_corners(g, idx)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c00 = c[:, 0, 0, 0] * (1 - fx) + c[:, 1, 0, 0] * fx
    c10 = c[:, 0, 1, 0] * (1 - fx) + c[:, 1, 1, 0] * fx
    c01 = c[:, 0, 0, 1] * (1 - fx) + c[:, 1, 0, 1] * fx
    c11 = c[:, 0, 1, 1] * (1 - fx) + c[:, 1, 1, 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    base = c0 * (1 - fz) + c1 * fz
    return base + np.linalg.norm(p - pc, axis=1)


def _grid_grad(g: GridSdf, p: np.ndarray) -> np.ndarray:
    pc, idx, f = _grid_locate(g, p)
    c = _grid_corners(g, idx)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    dx = ((c[:, 1, 0, 0] - c[:, 0, 0, 0]) * (1 - fy) * (1 - fz)
          + (c[:, 1, 1, 0] - c[:, 0, 1, 0]) * fy * (1 - fz)
          + (c[:, 1, 0, 1] - c[:, 0, 0, 1]) * (1 - fy) * fz
          + (c[:, 1, 1, 1] - c[:, 0, 1, 1]) * fy * fz)
    dy = ((c[:, 0, 1, 0] - c[:, 0, 0, 0]) * (1 - fx) * (1 - fz)
          + (c[:, 1, 1, 0] - c[:, 1, 0, 0]) * fx * (1 - fz)
          + (c[:, 0, 1, 1] - c[:, 0, 0, 1]) * (1 - fx) * fz
          + (c[:, 1, 1, 1] - c[:, 1, 0, 1]) * fx * fz)
    dz = ((c[:, 0, 0, 1] - c[:, 0, 0, 0]) * (1 - fx) * (1 - fy)
          + (c[:, 1, 0, 1] - c[:, 1, 0, 0]) * fx * (1 - fy)
          + (c[:, 0, 1, 1] - c[:, 0, 1, 0]) * (1 - fx) * fy
          + (c[:, 1, 1, 1] - c[:, 1, 1, 0]) * fx * fy)
    grad = np.stack([dx, dy, dz], axis=1) / g.cell
    # outside the volume only the clamped coordinates vary with p
    resid = p - pc
    clamped = resid != 0.0
    grad[clamped] = 0.0
    dist = np.linalg.norm(resid, axis=1)
    out = dist > 0.0
    grad[out] += resid[out] / dist[out, None]
    return grad


def eval_sdf(f: SdfField, p: np.ndarray):
    """Signed distance at p; scalar for a 3-vector, (N,) for a batch."""
    batch, single = _as_batch(p)
    if isinstance(f, Sphere):
        v = np.linalg.norm(batch, axis=1) - f.radius
    elif isinstance(f, Box):
        v = _box_eval(batch, f.half_extents)
    elif isinstance(f, RoundedBox):
        v = _box_eval(batch, f.half_extents - f.edge_radius) - f.edge_radius
    elif isinstance(f, Cylinder):
        v = _cyl_eval(batch, f.radius, f.half_height)
    elif isinstance(f, GridSdf):
        v = _grid_eval(f, batch)
    else:
        raise TypeError(f"not an SDF field: {f!r}")
    return float(v[0]) if single else v


def grad_sdf(f: SdfField, p: np.ndarray):
    """Spatial gradient of the field; (3,) for a 3-vector, (N, 3) for a batch."""
    batch, single = _as_batch(p)
    if isinstance(f, Sphere):
        n = np.linalg.norm(batch, axis=1)
        g = np.zeros_like(batch)
        ok = n > 0.0
        g[ok] = batch[ok] / n[ok, None]
    elif isinstance(f, Box):
        g = _box_grad(batch, f.half_extents)
    elif isinstance(f, RoundedBox):
        g = _box_grad(batch, f.half_extents - f.edge_radius)
    elif isinstance(f, Cylinder):
        g = _cyl_grad(batch, f.radius, f.half_height)
    elif isinstance(f, GridSdf):
        g = _grid_grad(f, batch)
    else:
        raise TypeError(f"not an SDF field: {f!r}")
    return g[0] if single else g


def bake(shape: AnalyticShape, resolution, padding: float) -> GridSdf:
    """Sample an analytic shape onto a grid covering its padded bounding box."""
    if padding <= 0:
        raise ValueError("padding must be positive")
    if np.isscalar(resolution):
        res = (int(resolution),) * 3
    else:
        res = tuple(int(n) for n in resolution)
    if min(res) < 2:
        raise ResolutionTooSmall(f"resolution {res} must be >= 2 per axis")
    he = bounds(shape) + padding
    cell = float(np.max(2.0 * he / (np.array(res) - 1)))
    origin = -0.5 * cell * (np.array(res) - 1)
    xs = origin[0] + cell * np.arange(res[0])
    ys = origin[1] + cell * np.arange(res[1])
    zs = origin[2] + cell * np.arange(res[2])
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    values = eval_sdf(shape, pts)  # x-fastest by construction
    return GridSdf(origin=origin, cell=cell, resolution=res, values=values)


def sample_surface(shape: AnalyticShape, n: int, seed: int = 0) -> np.ndarray:
    """n points on the surface (|sdf| < 1e-6), area-weighted per face."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    if isinstance(shape, Sphere):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * shape.radius
    if isinstance(shape, Box):
        return _box_surface(rng, shape.half_extents, n)
    if isinstance(shape, RoundedBox):
        core = shape.half_extents - shape.edge_radius
        pts = _box_surface(rng, core, n)
        normals = _box_grad(pts, core)
        return pts + shape.edge_radius * normals
    if isinstance(shape, Cylinder):
        r, hh = shape.radius, shape.half_height
        side = 2.0 * np.pi * r * 2.0 * hh
        cap = np.pi * r * r
        u = rng.random(n)
        pts = np.empty((n, 3))
        on_side = u < side / (side + 2 * cap)
        k = int(on_side.sum())
        ang = rng.random(k) * 2 * np.pi
        pts[on_side, 0] = r * np.cos(ang)
        pts[on_side, 1] = r * np.sin(ang)
        pts[on_side, 2] = (rng.random(k) * 2 - 1) * hh
        m = n - k
        ang = rng.random(m) * 2 * np.pi
        rad = r * np.sqrt(rng.random(m))
        caps = ~on_side
        pts[caps, 0] = rad * np.cos(ang)
        pts[caps, 1] = rad * np.sin(ang)
        pts[caps, 2] = np.where(rng.random(m) < 0.5, hh, -hh)
        return pts
    raise TypeError(f"not an analytic shape: {shape!r}")


def _box_surface(rng: np.random.Generator, he: np.ndarray, n: int) -> np.ndarray:
    areas = 4.0 * np.array([he[1] * he[2], he[0] * he[2], he[0] * he[1]])
    areas = np.repeat(areas, 2) / 2.0  # six faces: +x, -x, +y, -y, +z, -z
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = (rng.random((n, 3)) * 2 - 1) * he
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * he[axis]
    return pts


@dataclass(frozen=True)
class ObjectModel:
    """SDF field plus sampled surface points (object frame) for ADD-S."""

    sdf: SdfField
    surface_points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.surface_points, dtype=float).reshape(-1, 3)
        if pts.shape[0] < 1:
            raise EmptyModel("object model needs at least one surface point")
        if isinstance(self.sdf, GridSdf):
            err = np.abs(eval_sdf(self.sdf, pts))
            if err.max() >= 2.0 * self.sdf.cell:
                raise ValueError("surface points inconsistent with the grid field")
        object.__setattr__(self, "surface_points", pts)


GRID_MAGIC = b"SDF1"


def save_grid(path, g: GridSdf) -> None:
    """Little-endian: magic, u32 nx ny nz, f64 origin x3, f64 cell, f32 values."""
    nx, ny, nz = g.resolution
    header = struct.pack("<4s3I4d", GRID_MAGIC, nx, ny, nz,
                         g.origin[0], g.origin[1], g.origin[2], g.cell)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(g.values.astype("<f4").tobytes())


def load_grid(path) -> GridSdf:
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4s3I4d"))
        magic, nx, ny, nz, ox, oy, oz, cell = struct.unpack("<4s3I4d", header)
        if magic != GRID_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {GRID_MAGIC!r}")
        values = np.frombuffer(fh.read(nx * ny * nz * 4), dtype="<f4").astype(float)
    return GridSdf(origin=np.array([ox, oy, oz]), cell=cell,
                   resolution=(nx, ny, nz), values=values)
