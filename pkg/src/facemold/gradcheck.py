"""Finite-difference checks for every analytic gradient in the package.

Each check returns a :class:`GradCheck` holding the worst relative error
between the analytic gradient and central differences. Probes that change
which triangle owns any pixel are skipped, since the rendered depth is not
differentiable there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MorphableModel
from .pose import CameraMesh, Representation, camera_transform, camera_transform_vjp
from .raster import DepthMap, rasterize, rasterize_vjp, render_depth, render_layer_backward
from .sfs import LossWeights, loss


@dataclass(frozen=True)
class GradCheck:
    name: str
    max_rel_err: float
    threshold: float
    probes: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.probes > 0 and self.max_rel_err < self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: max rel err {self.max_rel_err:.3e} "
            f"(< {self.threshold:.0e}), {self.probes} probes, {self.skipped} skipped"
        )


def relative_errors(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Entrywise ``|a - n| / max(|a|, |n|, floor * max|n|)``.

    The floor keeps entries whose true value is zero (rounding-level
    analytic values) from being reported as large relative errors.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * max(np.abs(n).max(initial=0.0), 1e-300))
    return np.abs(a - n) / scale


def _scalar_probe_rel_err(analytic, numeric) -> float:
    err = relative_errors(analytic, numeric)
    return float(err.max()) if err.size else float("nan")


def check_camera_transform(model: MorphableModel, rep: Representation, rng, step: float = 1e-5) -> GradCheck:
    """``camera_transform_vjp`` against differences of ``<g, camera_transform(rep)>``."""
    g = rng.normal(size=3 * model.vertex_count)
    analytic = camera_transform_vjp(model, rep, g)
    base = rep.to_vector()
    numeric = np.empty_like(base)
    for i in range(base.size):
        e = np.zeros_like(base)
        e[i] = step
        plus = camera_transform(model, rep.with_vector(base + e)).vertices.ravel()
        minus = camera_transform(model, rep.with_vector(base - e)).vertices.ravel()
        numeric[i] = g @ (plus - minus) / (2 * step)
    return GradCheck("camera_transform_vjp", _scalar_probe_rel_err(analytic, numeric), 1e-6, base.size, 0)


def check_rasterize(mesh: CameraMesh, width: int, height: int, rng, step: float = 1e-3, probes: int = 40) -> GradCheck:
    """``rasterize_vjp`` against differences of ``<grad, depth>`` under vertex-depth perturbations.

    Depth is linear in vertex depths while pixel ownership is fixed, so a
    large step costs nothing in truncation error.
    """
    depth, cache = rasterize(mesh, width, height)
    grad = np.where(depth.valid, rng.normal(size=depth.shape), 0.0)
    analytic = rasterize_vjp(cache, mesh, grad)
    used = np.unique(mesh.triangles[cache.triangle_id[cache.covered]])
    picks = rng.choice(used, size=min(probes, used.size), replace=False)
    a, n = [], []
    skipped = 0
    for v in picks:
        maps = []
        for sign in (1.0, -1.0):
            verts = mesh.vertices.copy()
            verts[3 * v + 2] += sign * step
            d, c = rasterize(CameraMesh(verts, mesh.triangles), width, height)
            if not np.array_equal(c.triangle_id, cache.triangle_id):
                break
            maps.append(d.depth)
        if len(maps) < 2:
            skipped += 1
            continue
        # difference the maps before reducing to avoid cancellation in the sums
        diff = np.where(depth.valid, maps[0] - maps[1], 0.0)
        a.append(analytic[v])
        n.append(float(np.sum(grad * diff)) / (2 * step))
    return GradCheck("rasterize_vjp", _scalar_probe_rel_err(a, n), 1e-6, len(a), skipped)


def depth_probe_loss(model, rep, target: DepthMap, mask, width, height):
    depth, cache, _ = render_depth(model, rep, width, height)
    resid = np.where(mask, depth.depth - target.depth, 0.0)
    return 0.5 * float(np.sum(resid * resid)), cache


def check_render_layer(
    model: MorphableModel,
    rep: Representation,
    target: DepthMap,
    step: float = 1e-6,
    threshold: float = 1e-5,
) -> GradCheck:
    """End-to-end ``render_layer_backward`` against differences of ``0.5 |D(r) - T|^2``.

    Covers every geometry coefficient plus tx, ty and the scale entry.
    """
    width, height = target.width, target.height
    depth, cache, mesh = render_depth(model, rep, width, height)
    mask = depth.valid & target.valid
    resid = np.where(mask, depth.depth - target.depth, 0.0)
    analytic = render_layer_backward(model, rep, resid, cache=cache, mesh=mesh)
    base = rep.to_vector()
    n_geom = model.d_id + model.d_exp
    indices = list(range(n_geom)) + [n_geom + 3, n_geom + 4, n_geom + 5]
    a, n = [], []
    skipped = 0
    for i in indices:
        vals = []
        for sign in (1.0, -1.0):
            vec = base.copy()
            vec[i] += sign * step
            value, c = depth_probe_loss(model, rep.with_vector(vec), target, mask, width, height)
            if not np.array_equal(c.triangle_id, cache.triangle_id):
                break
            vals.append(value)
        if len(vals) < 2:
            skipped += 1
            continue
        a.append(analytic[i])
        n.append((vals[0] - vals[1]) / (2 * step))
    err = _scalar_probe_rel_err(a, n) if a else float("nan")
    return GradCheck("render_layer_backward", err, threshold, len(a), skipped)


def check_shading_loss(
    z_hat: DepthMap,
    z0: DepthMap,
    image,
    albedo_map,
    lighting,
    weights: LossWeights,
    rng,
    pixels: int = 50,
    step: float = 1e-4,
    name: str = "loss",
) -> GradCheck:
    """Gradient of the shading criterion at ``pixels`` random valid pixels."""
    base = loss(z_hat, z0, image, albedo_map, lighting, weights)
    mask = z_hat.valid & z0.valid
    coords = np.argwhere(mask)
    picks = coords[rng.choice(len(coords), size=min(pixels, len(coords)), replace=False)]
    a, n = [], []
    for r, c in picks:
        vals = []
        for sign in (1.0, -1.0):
            z = z_hat.depth.copy()
            z[r, c] += sign * step
            vals.append(loss(z_hat.with_depth(z), z0, image, albedo_map, lighting, weights).total)
        a.append(base.grad[r, c])
        n.append((vals[0] - vals[1]) / (2 * step))
    return GradCheck(name, _scalar_probe_rel_err(a, n), 1e-4, len(a), 0)
