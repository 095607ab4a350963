"""Procedural toy morphable model and synthetic scene rendering.

The toy model is a face-like height field on a regular grid: a broad
ellipsoidal dome with fixed nose and brow bumps, with z pointing away from the
camera (the nose has the smallest depth). Shape and texture bases are smooth
random Gaussian-mixture displacement fields, orthonormalized.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .fit import interpolate_representation
from .model import GeometryCoeffs, MorphableModel, TextureCoeffs, synthesize_texture
from .pose import Pose, Representation, camera_transform, save_representation
from .raster import DepthMap, rasterize, rasterize_attribute, render_normal_map
from .sfs import Lighting, ShBasisField, normals_from_depth, sh_field_from_normals, shade

MANIFEST_SCHEMA_VERSION = 1


def grid_triangles(n: int) -> np.ndarray:
    """Two triangles per grid quad, vertex index ``row * n + col``."""
    r, c = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="ij")
    v00 = (r * n + c).ravel()
    v01 = v00 + 1
    v10 = v00 + n
    v11 = v10 + 1
    upper = np.stack([v00, v01, v11], axis=1)
    lower = np.stack([v00, v11, v10], axis=1)
    return np.stack([upper, lower], axis=1).reshape(-1, 3)


def _gaussian(x, y, cx, cy, sx, sy):
    return np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))


def face_height(x, y, extent: float) -> np.ndarray:
    """Height toward the camera of the mean face (positive = closer)."""
    u, v = x / extent, y / extent
    dome = 0.55 * np.sqrt(np.clip(1.6 - (u / 1.05) ** 2 - (v / 1.25) ** 2, 0.0, None))
    nose = 0.22 * _gaussian(u, v, 0.0, 0.05, 0.12, 0.22)
    brows = 0.07 * (
        _gaussian(u, v, -0.32, -0.38, 0.2, 0.07) + _gaussian(u, v, 0.32, -0.38, 0.2, 0.07)
    )
    return extent * (dome + nose + brows)


def _smooth_fields(rng, u, v, count, components, blobs=4):
    """``count`` random smooth fields over the unit-grid coords, shape (count, N, components)."""
    out = np.zeros((count, u.size, components))
    for k in range(count):
        for _ in range(blobs):
            cx, cy = rng.uniform(-0.8, 0.8, size=2)
            sx, sy = rng.uniform(0.2, 0.55, size=2)
            amp = rng.normal(size=components)
            out[k] += _gaussian(u, v, cx, cy, sx, sy)[:, None] * amp
    return out


def _orthonormal_columns(mat: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(mat)
    # fix the sign ambiguity so output only depends on the inputs
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def generate_toy_model(
    seed: int,
    n: int = 30,
    d_id: int = 8,
    d_exp: int = 4,
    d_tex: int = 10,
    extent: float = 24.0,
) -> MorphableModel:
    """Build a deterministic toy morphable model on an ``n x n`` vertex grid.

    ``extent`` is the half-width of the grid in model units; with the nominal
    unit scale one model unit is one pixel.
    """
    if n < 8:
        raise ValueError("vertex grid must be at least 8 x 8")
    if min(d_id, d_exp, d_tex) < 1:
        raise ValueError("basis dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.linspace(-extent, extent, n)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    x, y = xx.ravel(), yy.ravel()
    height = face_height(x, y, extent)
    z = -(height - 0.5 * (height.max() + height.min()))
    mean_shape = np.stack([x, y, z], axis=1).ravel()

    u, v = x / extent, y / extent
    # depth varies most between faces; in-plane components are damped
    shape_fields = _smooth_fields(rng, u, v, d_id + d_exp, 3) * np.array([0.3, 0.3, 1.0])
    shape_basis = _orthonormal_columns(shape_fields.reshape(d_id + d_exp, -1).T)
    tex_fields = _smooth_fields(rng, u, v, d_tex, 1)[..., 0]
    tex_basis = _orthonormal_columns(tex_fields.T)

    return MorphableModel(
        triangles=grid_triangles(n),
        mean_shape=mean_shape,
        id_basis=shape_basis[:, :d_id],
        exp_basis=shape_basis[:, d_id:],
        mean_texture=np.full(n * n, 0.6),
        tex_basis=tex_basis,
    )


@dataclass(frozen=True)
class PoseRanges:
    """Uniform sampling half-ranges; scale is a factor range of the nominal scale."""

    angle: float = 0.35
    translation: float = 10.0
    scale: tuple = (0.8, 1.2)


def sample_representation(
    rng: np.random.Generator,
    model: MorphableModel,
    pose_ranges: PoseRanges = PoseRanges(),
    coeff_sigma: float = 10.0,
) -> Representation:
    """Gaussian geometry coefficients and a uniformly sampled pose."""
    alpha_id = rng.normal(0.0, 1.0, size=model.d_id) * coeff_sigma
    alpha_exp = rng.normal(0.0, 1.0, size=model.d_exp) * coeff_sigma
    a = pose_ranges.angle
    yaw, pitch, roll = rng.uniform(-1.0, 1.0, size=3) * a
    tx, ty = rng.uniform(-1.0, 1.0, size=2) * pose_ranges.translation
    lo, hi = pose_ranges.scale
    scale = lo + (hi - lo) * rng.uniform()
    return Representation(GeometryCoeffs(alpha_id, alpha_exp), Pose(yaw, pitch, roll, tx, ty, scale))


def sample_lighting(rng: np.random.Generator) -> Lighting:
    """Ambient-dominated frontal lighting that keeps toy shading inside (0, 1)."""
    ambient = rng.uniform(0.55, 0.8)
    lx, ly = rng.uniform(-0.25, 0.25, size=2)
    lz = rng.uniform(0.1, 0.4)
    return Lighting([ambient, lx, ly, lz])


def sample_texture(rng: np.random.Generator, model: MorphableModel, sigma: float = 0.5) -> TextureCoeffs:
    """Gaussian texture coefficients; the default keeps albedo near 0.6 and shading unclipped."""
    return TextureCoeffs(rng.normal(0.0, sigma, size=model.d_tex))


@dataclass(frozen=True, eq=False)
class SynthScene:
    image: np.ndarray
    depth_gt: DepthMap
    rep_gt: Representation
    lighting_gt: Lighting
    texcoeffs_gt: TextureCoeffs
    background_value: float
    albedo_map: np.ndarray
    sh_field: ShBasisField


def render_scene(
    model: MorphableModel,
    rep: Representation,
    lighting: Lighting,
    texcoeffs: TextureCoeffs,
    width: int = 64,
    height: int = 64,
    background: float = 0.25,
    normals: str = "mesh",
) -> SynthScene:
    """Render a Lambertian first-order SH image plus ground-truth depth.

    ``normals="mesh"`` shades with the rendered mesh normal map; ``"depth"``
    shades with normals derived from the rendered depth map, which is exactly
    the image formation model the lighting/albedo solvers assume.
    """
    mesh = camera_transform(model, rep)
    depth, cache = rasterize(mesh, width, height)
    albedo = np.clip(rasterize_attribute(cache, mesh, synthesize_texture(model, texcoeffs)), 0.0, 1.0)
    if normals == "mesh":
        field = sh_field_from_normals(render_normal_map(mesh, cache))
    elif normals == "depth":
        field = normals_from_depth(depth)
    else:
        raise ValueError(f"unknown normal source {normals!r}")
    shaded = np.clip(shade(albedo, lighting, field), 0.0, 1.0)
    image = np.where(depth.valid, shaded, background)
    return SynthScene(
        image=image,
        depth_gt=depth,
        rep_gt=rep,
        lighting_gt=lighting,
        texcoeffs_gt=texcoeffs,
        background_value=float(background),
        albedo_map=albedo,
        sh_field=field,
    )


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _write_scene(model, seed, index, out_dir: Path, width, height, background, pose_ranges, coeff_sigma):
    rng = scene_rng(seed, index)
    rep_gt = sample_representation(rng, model, pose_ranges, coeff_sigma)
    lighting = sample_lighting(rng)
    tex = sample_texture(rng, model)
    scene = render_scene(model, rep_gt, lighting, tex, width, height, background)
    r_rnd = sample_representation(rng, model, pose_ranges, coeff_sigma)
    beta = float(rng.uniform())
    r_t = interpolate_representation(rep_gt, r_rnd, beta)

    name = f"scene_{index:05d}"
    d = out_dir / name
    d.mkdir(parents=True, exist_ok=True)
    io.write_pgm(d / "image.pgm", scene.image)
    io.write_pfm(d / "depth.pfm", scene.depth_gt.filled())
    io.write_mask_png(d / "mask.png", scene.depth_gt.valid)
    save_representation(rep_gt, d / "rep_gt.json")
    save_representation(r_t, d / "rep_t.json")
    (d / "lighting.json").write_text(json.dumps([float(v) for v in lighting.l]) + "\n")
    (d / "texture.json").write_text(json.dumps([float(v) for v in tex.coeffs]) + "\n")
    files = {k: f"{name}/{f}" for k, f in (
        ("image", "image.pgm"),
        ("depth", "depth.pfm"),
        ("mask", "mask.png"),
        ("rep_gt", "rep_gt.json"),
        ("rep_t", "rep_t.json"),
        ("lighting", "lighting.json"),
        ("texture", "texture.json"),
    )}
    return {"index": index, "beta": beta, **files}


def make_dataset(
    model: MorphableModel,
    count: int,
    seed: int,
    out_dir,
    width: int = 64,
    height: int = 64,
    background: float = 0.25,
    pose_ranges: PoseRanges = PoseRanges(),
    coeff_sigma: float = 10.0,
    threads: int = 1,
) -> dict:
    """Write ``count`` scenes with perturbed current estimates and a manifest.

    Scene ``i`` draws from an RNG stream seeded by ``(seed, i)``, so output is
    independent of ``threads``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def job(i):
        return _write_scene(model, seed, i, out_dir, width, height, background, pose_ranges, coeff_sigma)

    if threads > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scenes = list(pool.map(job, range(count)))
    else:
        scenes = [job(i) for i in range(count)]
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "seed": int(seed),
        "width": width,
        "height": height,
        "scenes": scenes,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
