"""Morphable-model storage, linear synthesis and the geometry-aware GMSE metric.

Vertices are stored interleaved (x0, y0, z0, x1, ...) so that every shape basis
acts on one flat vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError

MAGIC = b"FMM1"
_HEADER = struct.Struct("<4s5I")


@dataclass(frozen=True, eq=False)
class MorphableModel:
    """Mean shape/texture with identity, expression and texture bases on one mesh."""

    triangles: np.ndarray
    mean_shape: np.ndarray
    id_basis: np.ndarray
    exp_basis: np.ndarray
    mean_texture: np.ndarray
    tex_basis: np.ndarray
    normalized_mean: np.ndarray = field(init=False)

    def __post_init__(self):
        tri = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        mean_shape = np.ascontiguousarray(self.mean_shape, dtype=np.float64).ravel()
        if mean_shape.size % 3:
            raise DimensionError("mean_shape length must be a multiple of 3")
        n = mean_shape.size // 3
        id_basis = _as_matrix(self.id_basis, 3 * n, "id_basis")
        exp_basis = _as_matrix(self.exp_basis, 3 * n, "exp_basis")
        mean_texture = np.ascontiguousarray(self.mean_texture, dtype=np.float64).ravel()
        if mean_texture.size != n:
            raise DimensionError(
                f"mean_texture has {mean_texture.size} entries, expected {n}"
            )
        tex_basis = _as_matrix(self.tex_basis, n, "tex_basis")
        if tri.size:
            if tri.min() < 0 or tri.max() >= n:
                raise ValueError("triangle index out of range")
            if np.any(
                (tri[:, 0] == tri[:, 1])
                | (tri[:, 1] == tri[:, 2])
                | (tri[:, 0] == tri[:, 2])
            ):
                raise ValueError("degenerate triangle (repeated vertex index)")

        for name, value in (
            ("triangles", tri),
            ("mean_shape", mean_shape),
            ("id_basis", id_basis),
            ("exp_basis", exp_basis),
            ("mean_texture", mean_texture),
            ("tex_basis", tex_basis),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        normalized = normalize_coordinates(mean_shape)
        normalized.setflags(write=False)
        object.__setattr__(self, "normalized_mean", normalized)

    @property
    def vertex_count(self) -> int:
        return self.mean_shape.size // 3

    @property
    def triangle_count(self) -> int:
        return self.triangles.shape[0]

    @property
    def d_id(self) -> int:
        return self.id_basis.shape[1]

    @property
    def d_exp(self) -> int:
        return self.exp_basis.shape[1]

    @property
    def d_tex(self) -> int:
        return self.tex_basis.shape[1]

    @property
    def shape_basis(self) -> np.ndarray:
        """The stacked ``[A_id | A_exp]`` matrix."""
        return np.hstack([self.id_basis, self.exp_basis])

    def header(self) -> dict:
        return {
            "vertex_count": self.vertex_count,
            "triangle_count": self.triangle_count,
            "d_id": self.d_id,
            "d_exp": self.d_exp,
            "d_tex": self.d_tex,
        }


@dataclass(frozen=True)
class GeometryCoeffs:
    id: np.ndarray
    exp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "id", np.asarray(self.id, dtype=np.float64).ravel())
        object.__setattr__(self, "exp", np.asarray(self.exp, dtype=np.float64).ravel())

    @classmethod
    def zeros(cls, model: MorphableModel) -> "GeometryCoeffs":
        return cls(np.zeros(model.d_id), np.zeros(model.d_exp))

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.id, self.exp])


@dataclass(frozen=True)
class TextureCoeffs:
    coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "coeffs", np.asarray(self.coeffs, dtype=np.float64).ravel()
        )

    @classmethod
    def zeros(cls, model: MorphableModel) -> "TextureCoeffs":
        return cls(np.zeros(model.d_tex))


def _as_matrix(value, rows: int, name: str) -> np.ndarray:
    mat = np.ascontiguousarray(value, dtype=np.float64)
    if mat.ndim == 1 and mat.size == 0:
        mat = mat.reshape(rows, 0)
    if mat.ndim != 2 or mat.shape[0] != rows:
        raise DimensionError(f"{name} must have {rows} rows, got shape {mat.shape}")
    return mat


def normalize_coordinates(flat_vertices: np.ndarray) -> np.ndarray:
    """Affinely map each axis of an interleaved vertex vector onto [0, 1]."""
    v = np.asarray(flat_vertices, dtype=np.float64).reshape(-1, 3)
    lo = v.min(axis=0)
    span = v.max(axis=0) - lo
    span[span == 0] = 1.0
    out = (v - lo) / span
    return out.ravel()


def _check_geometry(model: MorphableModel, alpha: GeometryCoeffs) -> None:
    if alpha.id.size != model.d_id:
        raise DimensionError(
            f"id_basis expects {model.d_id} coefficients, got {alpha.id.size}"
        )
    if alpha.exp.size != model.d_exp:
        raise DimensionError(
            f"exp_basis expects {model.d_exp} coefficients, got {alpha.exp.size}"
        )


def synthesize_shape(model: MorphableModel, alpha: GeometryCoeffs) -> np.ndarray:
    """Return ``mean_shape + A_id @ alpha.id + A_exp @ alpha.exp`` (length 3N)."""
    _check_geometry(model, alpha)
    return model.mean_shape + model.id_basis @ alpha.id + model.exp_basis @ alpha.exp


def synthesize_texture(model: MorphableModel, alpha_t: TextureCoeffs) -> np.ndarray:
    """Per-vertex albedo ``mean_texture + A_T @ alpha_t``.

    Values are left unclamped; clamping happens at render time.
    """
    if alpha_t.coeffs.size != model.d_tex:
        raise DimensionError(
            f"tex_basis expects {model.d_tex} coefficients, got {alpha_t.coeffs.size}"
        )
    return model.mean_texture + model.tex_basis @ alpha_t.coeffs


def gmse(model: MorphableModel, alpha_hat: GeometryCoeffs, alpha: GeometryCoeffs) -> float:
    """Squared vertex-space distance between two geometries.

    Raw sum of squares over all 3N coordinates, no averaging.
    """
    diff = synthesize_shape(model, alpha_hat) - synthesize_shape(model, alpha)
    return float(diff @ diff)


def save_model(model: MorphableModel, path) -> None:
    """Write the FMM1 container (little-endian, uint32 header, float64 arrays)."""
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC,
                model.vertex_count,
                model.triangle_count,
                model.d_id,
                model.d_exp,
                model.d_tex,
            )
        )
        fh.write(model.triangles.astype("<u4").tobytes())
        for arr in (
            model.mean_shape,
            model.id_basis,
            model.exp_basis,
            model.mean_texture,
            model.tex_basis,
            model.normalized_mean,
        ):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return _parse_header(raw)


def _parse_header(raw: bytes) -> dict:
    if len(raw) < _HEADER.size:
        raise ValueError("file too short for an FMM1 header")
    magic, n, t, d_id, d_exp, d_tex = _HEADER.unpack(raw[: _HEADER.size])
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    return {
        "vertex_count": n,
        "triangle_count": t,
        "d_id": d_id,
        "d_exp": d_exp,
        "d_tex": d_tex,
    }


def load_model(path) -> MorphableModel:
    raw = Path(path).read_bytes()
    hdr = _parse_header(raw)
    n, t = hdr["vertex_count"], hdr["triangle_count"]
    d_id, d_exp, d_tex = hdr["d_id"], hdr["d_exp"], hdr["d_tex"]
    offset = _HEADER.size
    tri = np.frombuffer(raw, dtype="<u4", count=3 * t, offset=offset)
    offset += tri.nbytes

    def take(count):
        nonlocal offset
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += arr.nbytes
        return arr.astype(np.float64)

    mean_shape = take(3 * n)
    id_basis = take(3 * n * d_id).reshape(3 * n, d_id)
    exp_basis = take(3 * n * d_exp).reshape(3 * n, d_exp)
    mean_texture = take(n)
    tex_basis = take(n * d_tex).reshape(n, d_tex)
    stored_norm = take(3 * n)
    model = MorphableModel(
        triangles=tri.astype(np.int64).reshape(t, 3),
        mean_shape=mean_shape,
        id_basis=id_basis,
        exp_basis=exp_basis,
        mean_texture=mean_texture,
        tex_basis=tex_basis,
    )
    if not np.array_equal(stored_norm, model.normalized_mean):
        raise ValueError("stored normalized_mean does not match mean_shape")
    return model
