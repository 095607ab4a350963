"""Shape-from-shading criterion with first-order spherical-harmonics lighting.

Normals follow the depth-map convention ``n ~ (-dz/dx, -dz/dy, 1)`` with unit
pixel spacing (x along columns, y along rows), so a flat map has normal
(0, 0, 1). Mesh normal maps use the same orientation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, RecoveryError
from .model import MorphableModel, TextureCoeffs
from .raster import ChannelMap, DepthMap, RasterCache, rasterize_attribute

RIDGE = 1e-12
CHARBONNIER_EPS = 1e-6


@dataclass(frozen=True)
class Lighting:
    l: np.ndarray  # (ambient, x, y, z)

    def __post_init__(self):
        vec = np.asarray(self.l, dtype=np.float64).ravel()
        if vec.size != 4:
            raise DimensionError(f"lighting needs 4 coefficients, got {vec.size}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("lighting coefficients must be finite")
        object.__setattr__(self, "l", vec)


@dataclass(frozen=True, eq=False)
class ShBasisField:
    """Per-pixel ``(1, n_x, n_y, n_z)``; zero on invalid pixels."""

    basis: np.ndarray
    valid: np.ndarray

    @property
    def normals(self) -> np.ndarray:
        return self.basis[..., 1:]


@dataclass(frozen=True)
class LossWeights:
    lambda_sh: float = 1.0
    lambda_f: float = 5e-3
    lambda_sm: float = 1.0

    def __post_init__(self):
        for name in ("lambda_sh", "lambda_f", "lambda_sm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


# Defaults above are the reference weights. For [0, 1] intensities at toy
# scale the shading residual is tiny next to the Laplacian of the face itself,
# so detail recovery needs much weaker regularization.
DETAIL_WEIGHTS = LossWeights(lambda_sh=1.0, lambda_f=1e-6, lambda_sm=1e-7)


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    e_sh: float
    e_f: float
    e_sm: float
    total: float
    grad: np.ndarray
    weights: LossWeights


def gradient_operators(valid: np.ndarray):
    """Sparse finite-difference operators ``(Dx, Dy)`` on the flattened grid.

    Central differences where both neighbors are valid, one-sided where only
    one is, and an all-zero row otherwise. Rows for invalid pixels are empty.
    """
    valid = np.asarray(valid, dtype=bool)
    h, w = valid.shape
    idx = np.arange(h * w).reshape(h, w)
    ops = []
    for axis, step in ((1, 1), (0, w)):
        prev = np.zeros_like(valid)
        nxt = np.zeros_like(valid)
        if axis == 1:
            prev[:, 1:] = valid[:, :-1]
            nxt[:, :-1] = valid[:, 1:]
        else:
            prev[1:, :] = valid[:-1, :]
            nxt[:-1, :] = valid[1:, :]
        prev &= valid
        nxt &= valid
        both = prev & nxt
        only_next = nxt & ~prev
        only_prev = prev & ~nxt
        rows, cols, vals = [], [], []
        p = idx[both]
        rows += [p, p]
        cols += [p + step, p - step]
        vals += [np.full(p.size, 0.5), np.full(p.size, -0.5)]
        p = idx[only_next]
        rows += [p, p]
        cols += [p + step, p]
        vals += [np.ones(p.size), -np.ones(p.size)]
        p = idx[only_prev]
        rows += [p, p]
        cols += [p, p - step]
        vals += [np.ones(p.size), -np.ones(p.size)]
        ops.append(
            sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(h * w, h * w),
            )
        )
    return ops[0], ops[1]


def laplacian_operator(valid: np.ndarray):
    """5-point Laplacian on pixels whose four neighbors are all valid.

    Returns ``(L, interior)`` where ``L`` has one row per grid pixel.
    """
    valid = np.asarray(valid, dtype=bool)
    h, w = valid.shape
    interior = np.zeros_like(valid)
    interior[1:-1, 1:-1] = (
        valid[1:-1, 1:-1]
        & valid[:-2, 1:-1]
        & valid[2:, 1:-1]
        & valid[1:-1, :-2]
        & valid[1:-1, 2:]
    )
    p = np.flatnonzero(interior.ravel())
    rows = np.concatenate([p] * 5)
    cols = np.concatenate([p, p - 1, p + 1, p - w, p + w])
    vals = np.concatenate([np.full(p.size, -4.0)] + [np.ones(p.size)] * 4)
    return sp.csr_matrix((vals, (rows, cols)), shape=(h * w, h * w)), interior


def _basis_from_gradients(gx, gy, valid):
    norm = np.sqrt(gx * gx + gy * gy + 1.0)
    basis = np.zeros(valid.shape + (4,))
    basis[..., 0] = 1.0
    basis[..., 1] = -gx / norm
    basis[..., 2] = -gy / norm
    basis[..., 3] = 1.0 / norm
    basis[~valid] = 0.0
    return basis


def normals_from_depth(depth: DepthMap) -> ShBasisField:
    valid = depth.valid
    dx, dy = gradient_operators(valid)
    z = depth.depth.ravel()
    gx = (dx @ z).reshape(valid.shape)
    gy = (dy @ z).reshape(valid.shape)
    return ShBasisField(_basis_from_gradients(gx, gy, valid), valid.copy())


def sh_field_from_normals(normal_map: ChannelMap) -> ShBasisField:
    """SH basis from a rendered normal map, renormalizing the blended normals."""
    n = normal_map.data
    norm = np.linalg.norm(n, axis=-1)
    valid = normal_map.valid & (norm > 0)
    basis = np.zeros(n.shape[:2] + (4,))
    basis[..., 0] = 1.0
    basis[valid, 1:] = n[valid] / norm[valid, None]
    basis[~valid] = 0.0
    return ShBasisField(basis, valid)


def shade(albedo_map, lighting: Lighting, sh_field: ShBasisField) -> np.ndarray:
    """``rho * <l, Y>`` on valid pixels, zero elsewhere."""
    albedo = np.asarray(albedo_map, dtype=np.float64)
    if albedo.shape != sh_field.valid.shape:
        raise DimensionError(f"albedo shape {albedo.shape} vs field {sh_field.valid.shape}")
    out = albedo * (sh_field.basis @ lighting.l)
    return np.where(sh_field.valid, out, 0.0)


def _ridge_solve(design: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    normal = design.T @ design
    k = normal.shape[0]
    reg = normal + RIDGE * np.eye(k)
    if design.shape[0] < k or not np.any(normal):
        cond = float(np.linalg.cond(reg)) if np.any(normal) else np.inf
        raise RecoveryError(
            f"{what}: {design.shape[0]} equations for {k} unknowns with no usable rows",
            cond,
        )
    sol = np.linalg.solve(reg, design.T @ rhs)
    if not np.all(np.isfinite(sol)):
        raise RecoveryError(f"{what}: non-finite solution", float(np.linalg.cond(reg)))
    return sol


def recover_lighting(
    coarse_depth: DepthMap,
    image,
    mean_albedo_map,
    sh_field: ShBasisField | None = None,
) -> Lighting:
    """Least-squares lighting assuming the mean albedo on the coarse shape.

    ``sh_field`` overrides the depth-derived normals when the caller has a
    better normal source (e.g. the mesh normal map used to render the image).
    """
    image = np.asarray(image, dtype=np.float64)
    rho = np.asarray(mean_albedo_map, dtype=np.float64)
    if image.shape != coarse_depth.shape or rho.shape != coarse_depth.shape:
        raise DimensionError("image, albedo and depth shapes must agree")
    field = normals_from_depth(coarse_depth) if sh_field is None else sh_field
    mask = coarse_depth.valid & field.valid
    design = rho[mask][:, None] * field.basis[mask]
    return Lighting(_ridge_solve(design, image[mask], "lighting recovery"))


def texture_maps(model: MorphableModel, cache: RasterCache):
    """Rasterized mean texture (H x W) and texture basis columns (d_tex x H x W)."""
    mean = rasterize_attribute(cache, model, model.mean_texture)
    cols = np.stack(
        [rasterize_attribute(cache, model, model.tex_basis[:, k]) for k in range(model.d_tex)]
    ) if model.d_tex else np.zeros((0,) + cache.shape)
    return mean, cols


def recover_albedo(
    coarse_depth: DepthMap,
    image,
    lighting: Lighting,
    model: MorphableModel,
    cache: RasterCache,
    sh_field: ShBasisField | None = None,
) -> TextureCoeffs:
    """Least-squares texture coefficients under fixed lighting on the coarse shape."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != coarse_depth.shape or cache.shape != coarse_depth.shape:
        raise DimensionError("image, cache and depth shapes must agree")
    field = normals_from_depth(coarse_depth) if sh_field is None else sh_field
    mask = coarse_depth.valid & field.valid & cache.covered
    shading = (field.basis @ lighting.l)[mask]
    mean, cols = texture_maps(model, cache)
    design = cols[:, mask].T * shading[:, None]
    rhs = image[mask] - mean[mask] * shading
    return TextureCoeffs(_ridge_solve(design, rhs, "albedo recovery"))


class ShadingObjective:
    """The weighted SfS criterion over a fixed pixel mask.

    Built once per scene; :meth:`evaluate` maps a flattened depth grid to
    ``(total, gradient, (e_sh, e_f, e_sm))``. Pixels outside the mask never
    influence the value.
    """

    def __init__(self, mask, z0, image, albedo_map, lighting: Lighting, weights: LossWeights):
        self.mask = np.asarray(mask, dtype=bool)
        self.shape = self.mask.shape
        self.sel = np.flatnonzero(self.mask.ravel())
        self.z0 = np.asarray(z0, dtype=np.float64).ravel()
        self.image = np.asarray(image, dtype=np.float64).ravel()
        self.albedo = np.asarray(albedo_map, dtype=np.float64).ravel()
        self.lighting = lighting
        self.weights = weights
        dx, dy = gradient_operators(self.mask)
        lap, interior = laplacian_operator(self.mask)
        self.dx = dx[self.sel]
        self.dy = dy[self.sel]
        self.lap = lap[np.flatnonzero(interior.ravel())]

    def parts(self, z_flat):
        z = np.asarray(z_flat, dtype=np.float64).ravel()
        l = self.lighting.l
        w = self.weights
        sel = self.sel

        gx = self.dx @ z
        gy = self.dy @ z
        norm = np.sqrt(gx * gx + gy * gy + 1.0)
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=1) / norm[:, None]
        rho = self.albedo[sel]
        resid = rho * (l[0] + n @ l[1:]) - self.image[sel]
        e_sh = float(resid @ resid)

        dz = z[sel] - self.z0[sel]
        e_f = float(dz @ dz)

        lap = self.lap @ z
        charb = np.sqrt(lap * lap + CHARBONNIER_EPS**2)
        e_sm = float(charb.sum())

        grad = np.zeros_like(z)
        if w.lambda_sh:
            g_n = (2.0 * w.lambda_sh * resid * rho)[:, None] * l[1:]
            g_u = (g_n - n * np.sum(n * g_n, axis=1, keepdims=True)) / norm[:, None]
            grad -= self.dx.T @ g_u[:, 0] + self.dy.T @ g_u[:, 1]
        if w.lambda_f:
            grad[sel] += 2.0 * w.lambda_f * dz
        if w.lambda_sm:
            grad += w.lambda_sm * (self.lap.T @ (lap / charb))
        return e_sh, e_f, e_sm, grad

    def evaluate(self, z_flat):
        e_sh, e_f, e_sm, grad = self.parts(z_flat)
        w = self.weights
        total = w.lambda_sh * e_sh + w.lambda_f * e_f + w.lambda_sm * e_sm
        return total, grad, (e_sh, e_f, e_sm)


def loss(
    z_hat: DepthMap,
    z0: DepthMap,
    image,
    albedo_map,
    lighting: Lighting,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Evaluate the weighted shading, fidelity and smoothness terms and their depth gradient."""
    image = np.asarray(image, dtype=np.float64)
    albedo_map = np.asarray(albedo_map, dtype=np.float64)
    if not (z_hat.shape == z0.shape == image.shape == albedo_map.shape):
        raise DimensionError("z_hat, z0, image and albedo_map shapes must agree")
    mask = z_hat.valid & z0.valid
    obj = ShadingObjective(mask, z0.depth, image, albedo_map, lighting, weights)
    total, grad, (e_sh, e_f, e_sm) = obj.evaluate(z_hat.depth.ravel())
    grad = np.where(mask, grad.reshape(mask.shape), 0.0)
    return LossBreakdown(e_sh, e_f, e_sm, total, grad, weights)
