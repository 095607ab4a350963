import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facemold.errors import DimensionError
from facemold.model import (
    GeometryCoeffs,
    MorphableModel,
    TextureCoeffs,
    gmse,
    load_model,
    read_header,
    save_model,
    synthesize_shape,
    synthesize_texture,
)
from oracles import dense_shape


def random_geometry(rng, model, sigma=1.0):
    return GeometryCoeffs(rng.normal(size=model.d_id) * sigma, rng.normal(size=model.d_exp) * sigma)


def test_zero_coefficients_give_mean_shape(toy):
    assert np.array_equal(synthesize_shape(toy, GeometryCoeffs.zeros(toy)), toy.mean_shape)


@pytest.mark.parametrize("k", [0, 3, 7])
def test_unit_id_coefficient_extracts_column(toy, k):
    a_id = np.zeros(toy.d_id)
    a_id[k] = 1.0
    out = synthesize_shape(toy, GeometryCoeffs(a_id, np.zeros(toy.d_exp)))
    np.testing.assert_allclose(out, toy.mean_shape + toy.id_basis[:, k], rtol=0, atol=1e-15)


def test_shape_matches_dense_oracle(small_model):
    rng = np.random.default_rng(1)
    alpha = random_geometry(rng, small_model)
    ref = dense_shape(
        small_model.mean_shape, small_model.id_basis, small_model.exp_basis, alpha.id, alpha.exp
    )
    assert np.max(np.abs(synthesize_shape(small_model, alpha) - ref)) < 1e-12


def test_texture_cases(small_model):
    m = small_model
    assert np.array_equal(synthesize_texture(m, TextureCoeffs.zeros(m)), m.mean_texture)
    e1 = np.zeros(m.d_tex)
    e1[0] = 1.0
    np.testing.assert_allclose(
        synthesize_texture(m, TextureCoeffs(e1)), m.mean_texture + m.tex_basis[:, 0], atol=1e-15
    )
    rng = np.random.default_rng(2)
    c = rng.normal(size=m.d_tex)
    ref = np.array([m.mean_texture[i] + sum(m.tex_basis[i][k] * c[k] for k in range(m.d_tex))
                    for i in range(m.vertex_count)])
    assert np.max(np.abs(synthesize_texture(m, TextureCoeffs(c)) - ref)) < 1e-12


def test_texture_is_not_clamped(small_model):
    big = np.full(small_model.d_tex, 100.0)
    out = synthesize_texture(small_model, TextureCoeffs(big))
    assert out.max() > 1.0 or out.min() < 0.0


@pytest.mark.parametrize(
    "alpha, basis",
    [
        (lambda m: GeometryCoeffs(np.zeros(m.d_id + 1), np.zeros(m.d_exp)), "id_basis"),
        (lambda m: GeometryCoeffs(np.zeros(m.d_id), np.zeros(m.d_exp - 1)), "exp_basis"),
    ],
)
def test_dimension_errors_name_basis(small_model, alpha, basis):
    with pytest.raises(DimensionError, match=basis):
        synthesize_shape(small_model, alpha(small_model))


def test_texture_dimension_error(small_model):
    with pytest.raises(DimensionError, match="tex_basis"):
        synthesize_texture(small_model, TextureCoeffs(np.zeros(small_model.d_tex + 2)))


def test_gmse_cases(toy):
    rng = np.random.default_rng(3)
    a = random_geometry(rng, toy)
    assert gmse(toy, a, a) == 0.0
    k = 2
    b_id = a.id.copy()
    b_id[k] += 1.0
    b = GeometryCoeffs(b_id, a.exp)
    col = toy.id_basis[:, k]
    assert gmse(toy, b, a) == pytest.approx(col @ col, rel=1e-10)


def test_gmse_matches_shape_difference(toy):
    rng = np.random.default_rng(4)
    a, b = random_geometry(rng, toy), random_geometry(rng, toy)
    sa = dense_shape(toy.mean_shape, toy.id_basis, toy.exp_basis, a.id, a.exp)
    sb = dense_shape(toy.mean_shape, toy.id_basis, toy.exp_basis, b.id, b.exp)
    ref = float(np.sum((sa - sb) ** 2))
    assert abs(gmse(toy, a, b) - ref) / ref < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gmse_symmetric_nonnegative(small_model, seed):
    rng = np.random.default_rng(seed)
    a, b = random_geometry(rng, small_model), random_geometry(rng, small_model)
    ab, ba = gmse(small_model, a, b), gmse(small_model, b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_shape_is_linear(toy, seed):
    rng = np.random.default_rng(seed)
    a, b = random_geometry(rng, toy, 5.0), random_geometry(rng, toy, 5.0)
    s0 = synthesize_shape(toy, GeometryCoeffs.zeros(toy))
    ab = GeometryCoeffs(a.id + b.id, a.exp + b.exp)
    lhs = synthesize_shape(toy, ab) - s0
    rhs = (synthesize_shape(toy, a) - s0) + (synthesize_shape(toy, b) - s0)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_normalized_mean_range(toy, small_model):
    for m in (toy, small_model):
        nm = m.normalized_mean.reshape(-1, 3)
        assert nm.min() >= 0.0 and nm.max() <= 1.0
        np.testing.assert_array_equal(nm.min(axis=0), 0.0)
        np.testing.assert_array_equal(nm.max(axis=0), 1.0)


def test_invalid_triangles_rejected(small_model):
    base = dict(
        mean_shape=small_model.mean_shape,
        id_basis=small_model.id_basis,
        exp_basis=small_model.exp_basis,
        mean_texture=small_model.mean_texture,
        tex_basis=small_model.tex_basis,
    )
    with pytest.raises(ValueError):
        MorphableModel(triangles=np.array([[0, 1, 20]]), **base)
    with pytest.raises(ValueError):
        MorphableModel(triangles=np.array([[0, 1, 1]]), **base)


def test_basis_row_count_checked(small_model):
    with pytest.raises(DimensionError):
        MorphableModel(
            triangles=small_model.triangles,
            mean_shape=small_model.mean_shape,
            id_basis=small_model.id_basis[:-1],
            exp_basis=small_model.exp_basis,
            mean_texture=small_model.mean_texture,
            tex_basis=small_model.tex_basis,
        )


def test_container_round_trip(tmp_path, toy):
    path = tmp_path / "m.fmm"
    save_model(toy, path)
    assert path.read_bytes()[:4] == b"FMM1"
    hdr = read_header(path)
    assert hdr == {"vertex_count": 900, "triangle_count": toy.triangle_count, "d_id": 8, "d_exp": 4, "d_tex": 10}
    back = load_model(path)
    for name in ("triangles", "mean_shape", "id_basis", "exp_basis", "mean_texture", "tex_basis", "normalized_mean"):
        assert np.array_equal(getattr(back, name), getattr(toy, name)), name


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.fmm"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError, match="magic"):
        read_header(path)
