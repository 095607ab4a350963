"""Differentiable z-buffer depth rasterization.

Screen space: a camera-space vertex ``(px, py, pz)`` lands at
``(px + W/2, py + H/2)``; pixel ``(row j, col i)`` samples its center
``(i + 0.5, j + 0.5)``. The covering triangle with the smallest depth wins,
exact depth ties go to the lowest triangle index, and pixels lying exactly on
an edge follow a top-left ownership rule so shared edges are drawn once.

Backward passes come in two flavors. :func:`rasterize_vjp` treats barycentric
coordinates as constants and routes ``dE/dz_tilde * lambda_i`` to each vertex
depth. :func:`rasterize_vjp_screen` additionally differentiates the sampled
point's position on the triangle plane with respect to the vertex screen
coordinates, ``dz_tilde/dx_i = -lambda_i * dz/dx`` (same for y), which is the
exact derivative away from coverage changes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .model import MorphableModel
from .pose import CameraMesh, Representation, camera_transform, camera_transform_vjp


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Depth grid with validity mask; invalid pixels hold ``background``."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if depth.shape != valid.shape or depth.ndim != 2:
            raise DimensionError("depth and valid must be matching 2-D grids")
        depth = np.where(valid, depth, default_background(depth, valid))
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def shape(self):
        return self.depth.shape

    @property
    def background(self) -> float:
        return default_background(self.depth, self.valid)

    def filled(self, value: float | None = None) -> np.ndarray:
        fill = self.background if value is None else value
        return np.where(self.valid, self.depth, fill)

    def with_depth(self, depth, valid=None) -> "DepthMap":
        return DepthMap(depth, self.valid if valid is None else valid)


def default_background(depth: np.ndarray, valid: np.ndarray) -> float:
    """Max valid depth plus 10% of the valid range (0 for an empty map)."""
    if not valid.any():
        return 0.0
    vals = depth[valid]
    hi, lo = float(vals.max()), float(vals.min())
    span = hi - lo
    return hi + 0.1 * (span if span > 0 else 1.0)


@dataclass(frozen=True, eq=False)
class RasterCache:
    """Per-pixel triangle id (-1 where uncovered) and barycentric weights."""

    triangle_id: np.ndarray
    barycentric: np.ndarray
    plane_gradient: np.ndarray  # per triangle (dz/dx, dz/dy) in screen space

    @property
    def covered(self) -> np.ndarray:
        return self.triangle_id >= 0

    @property
    def shape(self):
        return self.triangle_id.shape


@dataclass(frozen=True, eq=False)
class ChannelMap:
    data: np.ndarray  # H x W x 3, zero where invalid
    valid: np.ndarray


def _screen_coords(mesh: CameraMesh, width: int, height: int) -> np.ndarray:
    v = np.array(mesh.xyz, dtype=np.float64)
    v[:, 0] += 0.5 * width
    v[:, 1] += 0.5 * height
    return v


def _oriented_edges(sx, sy, tri):
    """Edge coefficients for ``E(p) = ex * (py - oy) - ey * (px - ox)``.

    Edge k is opposite corner k. Each edge is evaluated from its lower-index
    endpoint and sign-flipped, so two triangles sharing an edge compute values
    that are exact negatives of each other.
    """
    u = tri[:, [1, 2, 0]]
    v = tri[:, [2, 0, 1]]
    lo = np.minimum(u, v)
    hi = np.maximum(u, v)
    flip = np.where(u < v, 1.0, -1.0)
    ox, oy = sx[lo], sy[lo]
    ex, ey = sx[hi] - ox, sy[hi] - oy
    return ox, oy, ex, ey, flip


def _triangle_setup(screen: np.ndarray, tri: np.ndarray):
    sx, sy, sz = screen[:, 0], screen[:, 1], screen[:, 2]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2 = (sx[b] - sx[a]) * (sy[c] - sy[a]) - (sy[b] - sy[a]) * (sx[c] - sx[a])
    orient = np.sign(area2)
    ox, oy, ex, ey, flip = _oriented_edges(sx, sy, tri)
    sign = flip * orient[:, None]
    # traversal direction of each edge with the interior on the positive side
    dx, dy = ex * sign, ey * sign
    owned = (dy < 0) | ((dy == 0) & (dx > 0))

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(area2 != 0, 1.0 / area2, 0.0)
    # d(lambda_k)/d(px) and d(lambda_k)/d(py) for edge k opposite corner k
    nxt = tri[:, [1, 2, 0]]
    prv = tri[:, [2, 0, 1]]
    dlx = -(sy[prv] - sy[nxt]) * inv[:, None]
    dly = (sx[prv] - sx[nxt]) * inv[:, None]
    z = sz[tri]
    plane = np.stack([(z * dlx).sum(axis=1), (z * dly).sum(axis=1)], axis=1)
    return {
        "area2": area2,
        "ox": ox,
        "oy": oy,
        "ex": ex,
        "ey": ey,
        "sign": sign,
        "owned": owned,
        "plane": plane,
        "z": z,
    }


def _raster_band(screen, tri, setup, width, row0, row1):
    """Resolve visibility for pixel rows ``[row0, row1)``."""
    sx, sy = screen[:, 0], screen[:, 1]
    pts_x = sx[tri]
    pts_y = sy[tri]
    live = setup["area2"] != 0
    col_lo = np.maximum(np.ceil(pts_x.min(axis=1) - 0.5), 0)
    col_hi = np.minimum(np.floor(pts_x.max(axis=1) - 0.5), width - 1)
    row_lo = np.maximum(np.ceil(pts_y.min(axis=1) - 0.5), row0)
    row_hi = np.minimum(np.floor(pts_y.max(axis=1) - 0.5), row1 - 1)
    ncol = np.where(live, np.maximum(col_hi - col_lo + 1, 0), 0).astype(np.int64)
    nrow = np.where(live, np.maximum(row_hi - row_lo + 1, 0), 0).astype(np.int64)
    counts = ncol * nrow
    total = int(counts.sum())
    if total == 0:
        return (np.empty(0, np.int64),) * 2 + (np.empty((0, 3)), np.empty(0))

    t_idx = np.repeat(np.arange(tri.shape[0]), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - start
    nc = ncol[t_idx]
    rows = row_lo[t_idx].astype(np.int64) + local // nc
    cols = col_lo[t_idx].astype(np.int64) + local % nc
    px = cols + 0.5
    py = rows + 0.5

    e = (
        setup["ex"][t_idx] * (py[:, None] - setup["oy"][t_idx])
        - setup["ey"][t_idx] * (px[:, None] - setup["ox"][t_idx])
    ) * setup["sign"][t_idx]
    inside = np.all((e > 0) | ((e == 0) & setup["owned"][t_idx]), axis=1)
    t_idx, rows, cols, e = t_idx[inside], rows[inside], cols[inside], e[inside]
    lam = e / e.sum(axis=1, keepdims=True)
    ztil = (lam * setup["z"][t_idx]).sum(axis=1)
    pix = rows * width + cols

    order = np.lexsort((t_idx, ztil, pix))
    pix_sorted = pix[order]
    first = np.ones(pix_sorted.size, dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    keep = order[first]
    return pix[keep], t_idx[keep], lam[keep], ztil[keep]


def rasterize(mesh: CameraMesh, width: int, height: int, threads: int = 1):
    """Z-buffer rasterize the mesh depth; returns ``(DepthMap, RasterCache)``.

    ``threads`` splits the image into horizontal bands rendered concurrently;
    the output does not depend on the band count.
    """
    width, height = int(width), int(height)
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    screen = _screen_coords(mesh, width, height)
    if not np.all(np.isfinite(screen)):
        raise ValueError("mesh vertices must be finite")
    tri = np.asarray(mesh.triangles, dtype=np.int64).reshape(-1, 3)
    setup = _triangle_setup(screen, tri)

    bands = max(1, min(int(threads), height))
    edges = np.linspace(0, height, bands + 1).astype(int)
    jobs = [(edges[k], edges[k + 1]) for k in range(bands) if edges[k + 1] > edges[k]]
    if len(jobs) == 1:
        parts = [_raster_band(screen, tri, setup, width, *jobs[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            parts = list(
                pool.map(lambda j: _raster_band(screen, tri, setup, width, *j), jobs)
            )

    tri_id = np.full(height * width, -1, dtype=np.int64)
    bary = np.zeros((height * width, 3))
    depth = np.zeros(height * width)
    for pix, t_idx, lam, ztil in parts:
        tri_id[pix] = t_idx
        bary[pix] = lam
        depth[pix] = ztil
    tri_id = tri_id.reshape(height, width)
    valid = tri_id >= 0
    cache = RasterCache(tri_id, bary.reshape(height, width, 3), setup["plane"])
    return DepthMap(depth.reshape(height, width), valid), cache


def _check_topology(cache: RasterCache, triangles: np.ndarray) -> None:
    if cache.plane_gradient.shape[0] != triangles.shape[0]:
        raise DimensionError(
            f"cache was built for {cache.plane_gradient.shape[0]} triangles, "
            f"mesh has {triangles.shape[0]}"
        )


def rasterize_attribute(cache: RasterCache, mesh, per_vertex):
    """Barycentric blend of per-vertex values over covered pixels.

    ``mesh`` is anything with a ``triangles`` array (a camera mesh or the
    model). Length-N input gives an H x W map; length-3N or (N, 3) input gives
    a :class:`ChannelMap`. Uncovered pixels are zero.
    """
    tri = np.asarray(mesh.triangles, dtype=np.int64)
    _check_topology(cache, tri)
    n = int(tri.max()) + 1 if tri.size else 0
    n = max(n, getattr(mesh, "vertex_count", n))
    values = np.asarray(per_vertex, dtype=np.float64)
    if values.ndim == 1 and values.size == n:
        channels = None
        values = values[:, None]
    elif values.size == 3 * n:
        channels = 3
        values = values.reshape(n, 3)
    else:
        raise DimensionError(
            f"attribute has {values.size} entries, expected {n} or {3 * n}"
        )
    covered = cache.covered
    out = np.zeros(cache.shape + (values.shape[1],))
    corners = tri[cache.triangle_id[covered]]
    lam = cache.barycentric[covered]
    out[covered] = (
        lam[:, 0:1] * values[corners[:, 0]]
        + lam[:, 1:2] * values[corners[:, 1]]
        + lam[:, 2:3] * values[corners[:, 2]]
    )
    if channels is None:
        return out[..., 0]
    return ChannelMap(out, covered.copy())


def _check_model_mesh(model: MorphableModel, mesh: CameraMesh) -> None:
    if mesh.vertex_count != model.vertex_count or not np.array_equal(
        mesh.triangles, model.triangles
    ):
        raise DimensionError("mesh topology does not match the model")


def render_pncc(model: MorphableModel, mesh: CameraMesh, cache: RasterCache) -> ChannelMap:
    """Paint each pixel with the normalized mean-face coordinates it sees."""
    _check_model_mesh(model, mesh)
    return rasterize_attribute(cache, mesh, model.normalized_mean)


def vertex_normals(mesh: CameraMesh) -> np.ndarray:
    """Unit per-vertex normals, shape (N, 3), with nonnegative z component.

    Sum of area-weighted face normals over each vertex's fan; a fan with
    zero total falls back to (0, 0, 1).
    """
    v = mesh.xyz
    tri = np.asarray(mesh.triangles, dtype=np.int64)
    face = np.cross(v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]])
    face[face[:, 2] < 0] *= -1.0
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, tri[:, k], face)
    norm = np.linalg.norm(acc, axis=1)
    out = np.tile([0.0, 0.0, 1.0], (v.shape[0], 1))
    ok = norm > 0
    out[ok] = acc[ok] / norm[ok, None]
    return out


def render_normal_map(mesh: CameraMesh, cache: RasterCache) -> ChannelMap:
    """Barycentric blend of vertex normals (not renormalized per pixel)."""
    return rasterize_attribute(cache, mesh, vertex_normals(mesh))


def mask_image(image, depth: DepthMap) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != depth.shape:
        raise DimensionError(f"image shape {image.shape} vs depth {depth.shape}")
    mask = depth.valid if image.ndim == 2 else depth.valid[..., None]
    return np.where(mask, image, 0.0)


def _covered_terms(cache: RasterCache, triangles, grad_depth):
    g = np.asarray(grad_depth, dtype=np.float64)
    if g.shape != cache.shape:
        raise DimensionError(f"grad_depth shape {g.shape} vs cache {cache.shape}")
    covered = cache.covered
    t_idx = cache.triangle_id[covered]
    corners = np.asarray(triangles, dtype=np.int64)[t_idx]
    return g[covered], t_idx, corners, cache.barycentric[covered]


def rasterize_vjp(cache: RasterCache, mesh: CameraMesh, grad_depth) -> np.ndarray:
    """Per-vertex depth gradient with barycentric weights held fixed (length N)."""
    _check_topology(cache, mesh.triangles)
    g, _, corners, lam = _covered_terms(cache, mesh.triangles, grad_depth)
    n = mesh.vertex_count
    out = np.zeros(n)
    for k in range(3):
        out += np.bincount(corners[:, k], weights=g * lam[:, k], minlength=n)
    return out


def rasterize_vjp_screen(cache: RasterCache, mesh: CameraMesh, grad_depth) -> np.ndarray:
    """Per-vertex gradient over (x, y, z), shape (N, 3), including the
    dependence of the sampled surface point on vertex screen positions."""
    _check_topology(cache, mesh.triangles)
    g, t_idx, corners, lam = _covered_terms(cache, mesh.triangles, grad_depth)
    n = mesh.vertex_count
    plane = cache.plane_gradient[t_idx]
    out = np.zeros((n, 3))
    for k in range(3):
        w = g * lam[:, k]
        out[:, 0] -= np.bincount(corners[:, k], weights=w * plane[:, 0], minlength=n)
        out[:, 1] -= np.bincount(corners[:, k], weights=w * plane[:, 1], minlength=n)
        out[:, 2] += np.bincount(corners[:, k], weights=w, minlength=n)
    return out


def depth_jacobian(
    cache: RasterCache,
    mesh: CameraMesh,
    tangents: np.ndarray,
    fixed_barycentrics: bool = False,
    chunk: int = 32,
) -> np.ndarray:
    """Forward-mode depth derivatives at covered pixels.

    ``tangents`` has shape (P, N, 3) (see ``camera_transform_jvp``); returns
    (n_covered, P) in row-major pixel order.
    """
    _check_topology(cache, mesh.triangles)
    covered = cache.covered
    t_idx = cache.triangle_id[covered]
    corners = np.asarray(mesh.triangles, dtype=np.int64)[t_idx]
    lam = cache.barycentric[covered]
    plane = cache.plane_gradient[t_idx]
    out = np.zeros((corners.shape[0], tangents.shape[0]))
    for s in range(0, tangents.shape[0], chunk):
        tg = tangents[s : s + chunk]
        acc = np.zeros((tg.shape[0], corners.shape[0]))
        for k in range(3):
            tv = tg[:, corners[:, k], :]
            d = tv[..., 2]
            if not fixed_barycentrics:
                d = d - plane[:, 0] * tv[..., 0] - plane[:, 1] * tv[..., 1]
            acc += lam[:, k] * d
        out[:, s : s + chunk] = acc.T
    return out


def render_depth(model: MorphableModel, rep: Representation, width: int, height: int, threads: int = 1):
    """Camera transform followed by rasterization: ``(DepthMap, RasterCache, CameraMesh)``."""
    mesh = camera_transform(model, rep)
    depth, cache = rasterize(mesh, width, height, threads=threads)
    return depth, cache, mesh


def render_layer_backward(
    model: MorphableModel,
    rep: Representation,
    grad_depth,
    fixed_barycentrics: bool = False,
    cache: RasterCache | None = None,
    mesh: CameraMesh | None = None,
) -> np.ndarray:
    """Gradient of a depth-map loss with respect to the flat representation.

    With ``fixed_barycentrics=True`` only vertex depths receive gradient, as
    in the plain z-buffer layer; tx, ty and scale then get exactly zero.
    """
    grad_depth = np.asarray(grad_depth, dtype=np.float64)
    if mesh is None:
        mesh = camera_transform(model, rep)
    if cache is None:
        _, cache = rasterize(mesh, grad_depth.shape[1], grad_depth.shape[0])
    if fixed_barycentrics:
        gv = np.zeros((mesh.vertex_count, 3))
        gv[:, 2] = rasterize_vjp(cache, mesh, grad_depth)
    else:
        gv = rasterize_vjp_screen(cache, mesh, grad_depth)
    return camera_transform_vjp(model, rep, gv.ravel())
