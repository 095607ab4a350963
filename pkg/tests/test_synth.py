import json

import numpy as np
import pytest

from facemold.fit import mean_albedo_map
from facemold.model import TextureCoeffs
from facemold.pose import Representation, camera_transform
from facemold.raster import rasterize
from facemold.sfs import Lighting, loss, recover_lighting
from facemold.synth import (
    PoseRanges,
    generate_toy_model,
    make_dataset,
    render_scene,
    sample_lighting,
    sample_representation,
    sample_texture,
)


def test_toy_model_deterministic():
    a, b = generate_toy_model(3, n=12, d_id=3, d_exp=2, d_tex=2), generate_toy_model(3, n=12, d_id=3, d_exp=2, d_tex=2)
    for name in ("triangles", "mean_shape", "id_basis", "exp_basis", "mean_texture", "tex_basis"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    c = generate_toy_model(4, n=12, d_id=3, d_exp=2, d_tex=2)
    assert not np.array_equal(a.id_basis, c.id_basis)


def test_toy_model_bases_orthonormal(toy):
    for basis in (toy.shape_basis, toy.tex_basis):
        gram = basis.T @ basis
        assert np.max(np.abs(gram - np.diag(np.diag(gram)))) < 1e-9
    assert toy.id_basis.shape == (2700, 8) and toy.exp_basis.shape == (2700, 4)
    assert toy.tex_basis.shape == (900, 10)
    assert np.all(toy.mean_texture == 0.6)


def test_toy_mean_shape_non_flat_and_triangles_valid(toy):
    z = toy.mean_shape[2::3]
    assert np.ptp(z) > 0
    tri = toy.triangles
    assert np.all((tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2]))
    v = toy.mean_shape.reshape(-1, 3)
    area = np.cross(v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]])
    assert np.all(np.linalg.norm(area, axis=1) > 0)


def test_toy_model_argument_checks():
    with pytest.raises(ValueError):
        generate_toy_model(0, n=4)
    with pytest.raises(ValueError):
        generate_toy_model(0, d_id=0)


def test_zero_sampling_gives_zero_representation(toy):
    rng = np.random.default_rng(0)
    rep = sample_representation(rng, toy, PoseRanges(angle=0.0, translation=0.0, scale=(1.0, 1.0)), coeff_sigma=0.0)
    assert np.array_equal(rep.to_vector(), Representation.zeros(toy).to_vector())


def test_samples_within_bounds(toy):
    rng = np.random.default_rng(1)
    ranges = PoseRanges()
    for _ in range(1000):
        p = sample_representation(rng, toy, ranges).pose
        assert max(abs(p.yaw), abs(p.pitch), abs(p.roll)) <= ranges.angle
        assert max(abs(p.tx), abs(p.ty)) <= ranges.translation
        assert ranges.scale[0] <= p.scale <= ranges.scale[1]


def test_sampling_is_seed_deterministic(toy):
    a = sample_representation(np.random.default_rng(9), toy)
    b = sample_representation(np.random.default_rng(9), toy)
    assert np.array_equal(a.to_vector(), b.to_vector())


def test_ambient_only_uniform_albedo(toy):
    rep = Representation.zeros(toy)
    tex = TextureCoeffs.zeros(toy)
    scene = render_scene(toy, rep, Lighting([0.8, 0, 0, 0]), tex, 48, 48, background=0.1)
    v = scene.depth_gt.valid
    np.testing.assert_allclose(scene.image[v], 0.8 * 0.6, atol=1e-12)
    assert np.all(scene.image[~v] == 0.1)


def test_coverage_equals_depth_validity(toy):
    rep = sample_representation(np.random.default_rng(2), toy)
    scene = render_scene(toy, rep, sample_lighting(np.random.default_rng(2)), TextureCoeffs.zeros(toy))
    _, cache = rasterize(camera_transform(toy, rep), 64, 64)
    assert np.array_equal(scene.depth_gt.valid, cache.covered)
    assert np.all(np.isfinite(scene.image))
    assert scene.image.min() >= 0 and scene.image.max() <= 1


@pytest.mark.parametrize("seed", range(5))
def test_closed_loop_lighting_recovery(toy, seed):
    rng = np.random.default_rng(seed)
    rep = sample_representation(rng, toy, PoseRanges(angle=0.2))
    light = sample_lighting(rng)
    scene = render_scene(toy, rep, light, TextureCoeffs.zeros(toy), normals="mesh")
    _, cache = rasterize(camera_transform(toy, rep), 64, 64)
    got = recover_lighting(scene.depth_gt, scene.image, mean_albedo_map(toy, cache), sh_field=scene.sh_field)
    assert np.max(np.abs(got.l - light.l)) < 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_shading_closure_with_depth_normals(toy, seed):
    rng = np.random.default_rng(seed)
    rep = sample_representation(rng, toy, PoseRanges(angle=0.2))
    scene = render_scene(toy, rep, sample_lighting(rng), sample_texture(rng, toy), normals="depth")
    z = scene.depth_gt
    out = loss(z, z, scene.image, scene.albedo_map, scene.lighting_gt)
    assert out.e_sh < 1e-12 * z.valid.sum()


def test_texture_default_avoids_clipping(toy):
    rng = np.random.default_rng(4)
    for _ in range(10):
        rep = sample_representation(rng, toy)
        tex = sample_texture(rng, toy)
        scene = render_scene(toy, rep, sample_lighting(rng), tex)
        v = scene.depth_gt.valid
        assert 0 < scene.image[v].min() and scene.image[v].max() < 1


def test_render_scene_rejects_unknown_normals(toy):
    with pytest.raises(ValueError):
        render_scene(toy, Representation.zeros(toy), Lighting([1, 0, 0, 0]), TextureCoeffs.zeros(toy), normals="x")


def test_empty_dataset(toy, tmp_path):
    man = make_dataset(toy, 0, 0, tmp_path)
    assert man["scenes"] == []
    assert json.loads((tmp_path / "manifest.json").read_text())["schema_version"] == 1


def test_dataset_files_exist_and_thread_independent(toy, tmp_path):
    a = make_dataset(toy, 3, 5, tmp_path / "a", width=32, height=32)
    b = make_dataset(toy, 3, 5, tmp_path / "b", width=32, height=32, threads=3)
    assert len(a["scenes"]) == 3
    for sa, sb in zip(a["scenes"], b["scenes"]):
        assert sa == sb
        for key in ("image", "depth", "mask", "rep_gt", "rep_t", "lighting", "texture"):
            pa, pb = tmp_path / "a" / sa[key], tmp_path / "b" / sb[key]
            assert pa.exists()
            assert pa.read_bytes() == pb.read_bytes()


def test_beta_is_uniform(toy):
    from facemold.synth import scene_rng

    betas = []
    for i in range(1000):
        rng = scene_rng(0, i)
        # consume draws in the same order as scene generation
        sample_representation(rng, toy)
        sample_lighting(rng)
        sample_texture(rng, toy)
        sample_representation(rng, toy)
        betas.append(rng.uniform())
    assert 0.45 <= np.mean(betas) <= 0.55
