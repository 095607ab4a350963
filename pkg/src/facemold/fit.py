"""Optimization routines for the coarse and fine stages.

``fit_coarse`` descends a depth-matching loss through the rendering layer to
recover a representation; ``refine_depth`` minimizes the shading criterion per
pixel starting from the coarse depth. ``reconstruct`` chains them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .model import MorphableModel, synthesize_texture
from .pose import Representation, camera_transform, camera_transform_jvp
from .raster import (
    DepthMap,
    RasterCache,
    depth_jacobian,
    rasterize,
    rasterize_attribute,
    render_layer_backward,
    render_normal_map,
    mask_image,
    render_pncc,
)
from .sfs import LossWeights, ShadingObjective, recover_albedo, recover_lighting

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 40
    step_size: float = 1.0
    convergence_threshold: float = 1e-6
    coarse_fidelity_weight: float = 0.0
    rng_seed: int = 0
    feedback_iterations: int = 4
    refine_iterations: int = 300
    fit_geometry: bool = True
    fit_pose: bool = True
    direction: str = "gauss-newton"
    damping: float = 0.3
    threads: int = 1

    def __post_init__(self):
        if self.max_iterations < 0 or self.refine_iterations < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.direction not in ("gauss-newton", "gradient"):
            raise ValueError("direction must be 'gauss-newton' or 'gradient'")


@dataclass
class FitTrace:
    loss: list = field(default_factory=list)
    step_norm: list = field(default_factory=list)
    step_length: list = field(default_factory=list)
    initial_loss: float = float("nan")

    def __len__(self):
        return len(self.loss)


def interpolate_representation(r_gt: Representation, r_rnd: Representation, beta: float) -> Representation:
    """Elementwise ``beta * r_gt + (1 - beta) * r_rnd`` over the flat vectors."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if (r_gt.d_id, r_gt.d_exp) != (r_rnd.d_id, r_rnd.d_exp):
        raise ValueError("representations have different dimensions")
    return r_gt.with_vector(beta * r_gt.to_vector() + (1.0 - beta) * r_rnd.to_vector())


def free_parameters(model: MorphableModel, cfg: FitConfig) -> np.ndarray:
    n_geom = model.d_id + model.d_exp
    free = np.zeros(n_geom + 6, dtype=bool)
    free[:n_geom] = cfg.fit_geometry
    free[n_geom:] = cfg.fit_pose
    return free


class _DepthObjective:
    """``0.5 * sum_mask (D(r) - T)^2 + w * |r - r_init|^2``.

    With ``mask=None`` the sum runs over the intersection of the target mask
    and the current render's coverage. With a fixed mask, a candidate whose
    render leaves any mask pixel uncovered evaluates to +inf.
    """

    def __init__(self, model, target: DepthMap, mask, r_init: Representation, cfg: FitConfig):
        self.model = model
        self.target = target
        self.mask = mask
        self.r_init_vec = r_init.to_vector()
        self.template = r_init
        self.cfg = cfg

    def render(self, vec):
        rep = self.template.with_vector(vec)
        mesh = camera_transform(self.model, rep)
        depth, cache = rasterize(mesh, self.target.width, self.target.height, threads=self.cfg.threads)
        return rep, mesh, depth, cache

    def mask_for(self, depth: DepthMap):
        if self.mask is None:
            return depth.valid & self.target.valid
        if np.all(depth.valid[self.mask]):
            return self.mask
        return None

    def value(self, vec, rendered):
        mask = self.mask_for(rendered[2])
        if mask is None:
            return np.inf, None
        resid = np.where(mask, rendered[2].depth - self.target.depth, 0.0)
        tether = vec - self.r_init_vec
        value = 0.5 * float(np.sum(resid * resid)) + self.cfg.coarse_fidelity_weight * float(tether @ tether)
        return value, resid

    def gradient(self, vec, resid, rendered):
        rep, mesh, _, cache = rendered
        grad = render_layer_backward(self.model, rep, resid, cache=cache, mesh=mesh)
        grad += 2.0 * self.cfg.coarse_fidelity_weight * (vec - self.r_init_vec)
        return grad

    def gauss_newton(self, rendered, free):
        """Gauss-Newton matrix ``J^T J`` over the free parameters."""
        rep, mesh, depth, cache = rendered
        tangents = camera_transform_jvp(self.model, rep)[free]
        jac = depth_jacobian(cache, mesh, tangents)
        jac = jac[self.mask_for(depth)[cache.covered]]
        hess = jac.T @ jac
        hess += 2.0 * self.cfg.coarse_fidelity_weight * np.eye(hess.shape[0])
        return hess


def fit_coarse(
    target_depth: DepthMap,
    model: MorphableModel,
    r_init: Representation,
    cfg: FitConfig = FitConfig(),
    mask=None,
):
    """Fit a representation to a target depth map through the rendering layer.

    The loss runs over the intersection of the target mask with the current
    render's coverage, or over a fixed ``mask`` if one is given. Each
    iteration takes a Marquardt-damped Gauss-Newton (or plain gradient)
    direction built on the render-layer gradient and backtracks until the
    Armijo condition holds.

    Returns ``(Representation, FitTrace)``.
    """
    if not target_depth.valid.any():
        raise ValueError("target depth map has no valid pixels")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != target_depth.shape:
            raise ValueError(f"mask {mask.shape} vs target {target_depth.shape}")
    free = free_parameters(model, cfg)
    vec = r_init.to_vector().copy()
    obj = _DepthObjective(model, target_depth, mask, r_init, cfg)
    trace = FitTrace()

    rendered = obj.render(vec)
    start_mask = obj.mask_for(rendered[2])
    if start_mask is None or not start_mask.any():
        logger.warning("fit_coarse: initial render does not cover the loss mask")
        return r_init, trace
    value, resid = obj.value(vec, rendered)
    if not np.isfinite(value):
        raise NumericalError(f"fit_coarse: non-finite initial loss {value}")
    trace.initial_loss = value

    for it in range(cfg.max_iterations):
        grad = obj.gradient(vec, resid, rendered)
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"fit_coarse: non-finite gradient at iteration {it}")
        g = grad[free]
        if cfg.direction == "gauss-newton":
            hess = obj.gauss_newton(rendered, free)
            diag = np.diag(hess).copy()
            hess[np.diag_indices_from(hess)] += cfg.damping * diag + 1e-12 * (diag.max() + 1.0)
            d = -np.linalg.solve(hess, g)
        else:
            # unit direction, so step_size is a length in parameter space
            d = -g / max(float(np.linalg.norm(g)), 1e-300)
        slope = float(g @ d)
        if not slope < 0:
            break

        t = cfg.step_size
        accepted = None
        for _ in range(40):
            cand = vec.copy()
            cand[free] += t * d
            if 1.0 + cand[-1] <= 0.0:
                # non-positive scale is outside the representation's domain
                t *= 0.5
                continue
            cand_rendered = obj.render(cand)
            cand_value, cand_resid = obj.value(cand, cand_rendered)
            if np.isnan(cand_value):
                raise NumericalError(f"fit_coarse: non-finite loss at iteration {it}")
            if cand_value <= value + 1e-4 * t * slope:
                accepted = cand, cand_rendered, cand_value, cand_resid
                break
            t *= 0.5
        if accepted is None:
            break
        cand, rendered, value, resid = accepted
        step = float(np.linalg.norm(cand - vec))
        vec = cand
        trace.loss.append(value)
        trace.step_norm.append(step)
        trace.step_length.append(t)
        if step < cfg.convergence_threshold:
            break
    return r_init.with_vector(vec), trace


def mean_albedo_map(model: MorphableModel, cache: RasterCache) -> np.ndarray:
    return rasterize_attribute(cache, model, model.mean_texture)


@dataclass(frozen=True, eq=False)
class RefineResult:
    depth: DepthMap
    lighting: object
    texcoeffs: object
    albedo_map: np.ndarray
    initial_loss: float
    final_loss: float
    iterations: int


def refine_depth(
    z0: DepthMap,
    image,
    model: MorphableModel,
    cache: RasterCache,
    weights: LossWeights = LossWeights(),
    cfg: FitConfig = FitConfig(),
    lighting=None,
    albedo_map=None,
    details: bool = False,
):
    """Per-pixel minimization of the shading criterion starting at ``z0``.

    Lighting (mean-albedo least squares) and then texture coefficients are
    recovered once from ``z0`` and frozen; passing ``lighting`` or
    ``albedo_map`` skips the corresponding recovery. Descent is L-BFGS with a
    backtracking line search, and the best iterate seen is returned.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != z0.shape:
        raise ValueError(f"image shape {image.shape} vs depth {z0.shape}")
    mask = z0.valid & cache.covered
    if not mask.any():
        raise ValueError("refine_depth: empty mask")

    texcoeffs = None
    if albedo_map is None:
        rho_hat = mean_albedo_map(model, cache)
        if lighting is None:
            lighting = recover_lighting(z0, image, rho_hat)
        texcoeffs = recover_albedo(z0, image, lighting, model, cache)
        albedo_map = rasterize_attribute(cache, model, synthesize_texture(model, texcoeffs))
    elif lighting is None:
        lighting = recover_lighting(z0, image, albedo_map)

    obj = ShadingObjective(mask, z0.depth, image, albedo_map, lighting, weights)
    x0 = z0.depth.ravel().copy()
    best_x, best_f, n_iter = lbfgs_minimize(obj.evaluate, x0, mask.ravel(), cfg)
    initial = obj.evaluate(x0)[0]
    out = DepthMap(np.where(mask, best_x.reshape(mask.shape), z0.depth), z0.valid)
    if details:
        return RefineResult(out, lighting, texcoeffs, albedo_map, initial, best_f, n_iter)
    return out


def lbfgs_minimize(fun, x0, active, cfg: FitConfig, memory: int = 10):
    """Minimize ``fun(x) -> (value, grad, ...)`` over the ``active`` entries.

    Two-loop L-BFGS with Armijo backtracking. Returns ``(best_x, best_value,
    iterations)``; ``best_x`` is never worse than ``x0``.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    act = np.flatnonzero(active)
    f, g = fun(x)[:2]
    if not np.isfinite(f):
        raise NumericalError("refine_depth: non-finite initial loss")
    g = g[act]
    s_hist, y_hist = [], []
    best_x, best_f = x.copy(), f
    it = 0
    for it in range(1, cfg.refine_iterations + 1):
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_hist), reversed(y_hist)):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            q *= cfg.step_size / max(np.linalg.norm(g), 1e-300)
        for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            b = (y @ q) / (y @ s)
            q += (a - b) * s
        d = -q
        slope = g @ d
        if not slope < 0:
            s_hist.clear()
            y_hist.clear()
            d = -g * (cfg.step_size / max(np.linalg.norm(g), 1e-300))
            slope = g @ d
            if not slope < 0:
                break
        t = 1.0
        accepted = False
        for _ in range(30):
            xn = x.copy()
            xn[act] += t * d
            fn, gn = fun(xn)[:2]
            if np.isfinite(fn) and fn <= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        gn = gn[act]
        s = t * d
        y = gn - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, g = xn, fn, gn
        if f < best_f:
            best_x, best_f = x.copy(), f
        if np.linalg.norm(s) < cfg.convergence_threshold:
            break
    return best_x, best_f, it


@dataclass
class Reconstruction:
    representation: Representation
    coarse: DepthMap
    fine: DepthMap
    pncc: list
    normal_maps: list
    traces: list
    refine: RefineResult | None = None


def reconstruct(
    image,
    model: MorphableModel,
    cfg: FitConfig = FitConfig(),
    target_depth: DepthMap | None = None,
    weights: LossWeights = LossWeights(),
) -> Reconstruction:
    """Coarse fit from the zero representation, render, then refine.

    The coarse stage runs ``cfg.feedback_iterations`` rounds of
    ``fit_coarse``, each with a mask re-rendered from the current estimate,
    and records the PNCC and normal-map feedback images after each round.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"reconstruct expects a square grayscale image, got {image.shape}")
    if target_depth is None:
        raise ValueError("reconstruct needs a target depth map for the coarse stage")
    size = image.shape[0]
    rep = Representation.zeros(model)
    pncc, normals, traces = [], [], []

    def feedback(r):
        mesh = camera_transform(model, r)
        depth, cache = rasterize(mesh, size, size, threads=cfg.threads)
        pncc.append(render_pncc(model, mesh, cache))
        normals.append(render_normal_map(mesh, cache))
        return depth, cache

    depth, cache = feedback(rep)
    for _ in range(cfg.feedback_iterations):
        if cfg.max_iterations == 0:
            break
        rep, trace = fit_coarse(target_depth, model, rep, cfg)
        traces.append(trace)
        depth, cache = feedback(rep)

    masked = mask_image(image, depth)
    result = refine_depth(depth, masked, model, cache, weights, cfg, details=True)
    return Reconstruction(rep, depth, result.depth, pncc, normals, traces, result)
