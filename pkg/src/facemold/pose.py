"""Pose parameterization and the weak-perspective camera transform.

Rotation convention: ``R = Rz(roll) @ Ry(yaw) @ Rx(pitch)``. Camera space has
x, y in pixels measured from the image center and z in model units (the z row
carries no focal scaling); larger z is farther from the image plane.

In the flat representation vector the last entry is a scale *offset* ``s`` with
focal factor ``f = 1 + s``, so the all-zero vector is the unit-scale, centered,
front-facing mean face.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError
from .model import GeometryCoeffs, MorphableModel, synthesize_shape

POSE_FIELDS = ("yaw", "pitch", "roll", "tx", "ty", "scale")


@dataclass(frozen=True)
class Pose:
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        for name in POSE_FIELDS:
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ValueError(f"pose {name} must be finite")
            object.__setattr__(self, name, value)
        if self.scale <= 0:
            raise ValueError(f"pose scale must be positive, got {self.scale}")

    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.yaw, self.pitch, self.roll, self.tx, self.ty, self.scale - 1.0]
        )

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        yaw, pitch, roll, tx, ty, s = (float(v) for v in vec)
        return cls(yaw, pitch, roll, tx, ty, 1.0 + s)


@dataclass(frozen=True)
class Representation:
    """Geometry coefficients plus pose; flattens to ``d_id + d_exp + 6`` entries."""

    geometry: GeometryCoeffs
    pose: Pose

    @classmethod
    def zeros(cls, model: MorphableModel) -> "Representation":
        return cls(GeometryCoeffs.zeros(model), Pose())

    @property
    def d_id(self) -> int:
        return self.geometry.id.size

    @property
    def d_exp(self) -> int:
        return self.geometry.exp.size

    @property
    def size(self) -> int:
        return self.d_id + self.d_exp + 6

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.geometry.id, self.geometry.exp, self.pose.to_vector()])

    @classmethod
    def from_vector(cls, vec, d_id: int, d_exp: int) -> "Representation":
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != d_id + d_exp + 6:
            raise DimensionError(
                f"representation vector has {vec.size} entries, expected {d_id + d_exp + 6}"
            )
        geom = GeometryCoeffs(vec[:d_id], vec[d_id : d_id + d_exp])
        return cls(geom, Pose.from_vector(vec[d_id + d_exp :]))

    def with_vector(self, vec) -> "Representation":
        return Representation.from_vector(vec, self.d_id, self.d_exp)

    def with_pose(self, **changes) -> "Representation":
        return replace(self, pose=replace(self.pose, **changes))


@dataclass(frozen=True, eq=False)
class CameraMesh:
    vertices: np.ndarray  # length 3N, interleaved (px, py, pz)
    triangles: np.ndarray

    @property
    def xyz(self) -> np.ndarray:
        return self.vertices.reshape(-1, 3)

    @property
    def vertex_count(self) -> int:
        return self.vertices.size // 3


def _axis_rotations(pose: Pose):
    cy, sy = np.cos(pose.yaw), np.sin(pose.yaw)
    cp, sp = np.cos(pose.pitch), np.sin(pose.pitch)
    cr, sr = np.cos(pose.roll), np.sin(pose.roll)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sp, -cp], [0.0, cp, -sp]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drz = np.array([[-sr, -cr, 0.0], [cr, -sr, 0.0], [0.0, 0.0, 0.0]])
    return (rx, ry, rz), (drx, dry, drz)


def rotation_matrix(pose: Pose) -> np.ndarray:
    (rx, ry, rz), _ = _axis_rotations(pose)
    return rz @ ry @ rx


def rotation_derivatives(pose: Pose):
    """Return ``(dR/dyaw, dR/dpitch, dR/droll)``."""
    (rx, ry, rz), (drx, dry, drz) = _axis_rotations(pose)
    return rz @ dry @ rx, rz @ ry @ drx, drz @ ry @ rx


def _check_rep(model: MorphableModel, rep: Representation) -> None:
    if rep.d_id != model.d_id or rep.d_exp != model.d_exp:
        raise DimensionError(
            f"representation has (d_id={rep.d_id}, d_exp={rep.d_exp}), "
            f"model has (d_id={model.d_id}, d_exp={model.d_exp})"
        )


def camera_transform(model: MorphableModel, rep: Representation) -> CameraMesh:
    """Position the synthesized mesh over the image plane.

    ``(px, py, pz) = diag(f, f, 1) @ R @ P + (tx, ty, 0)`` per vertex.
    """
    _check_rep(model, rep)
    world = synthesize_shape(model, rep.geometry).reshape(-1, 3)
    rotated = world @ rotation_matrix(rep.pose).T
    f = rep.pose.scale
    cam = rotated * np.array([f, f, 1.0]) + np.array([rep.pose.tx, rep.pose.ty, 0.0])
    return CameraMesh(cam.ravel(), model.triangles)


def camera_transform_vjp(
    model: MorphableModel, rep: Representation, grad_vertices
) -> np.ndarray:
    """Pull a camera-space vertex gradient back onto the representation.

    Returns a flat gradient in ``Representation.to_vector`` order.
    """
    _check_rep(model, rep)
    grad = np.asarray(grad_vertices, dtype=np.float64).ravel()
    if grad.size != 3 * model.vertex_count:
        raise DimensionError(
            f"grad_vertices has {grad.size} entries, expected {3 * model.vertex_count}"
        )
    g = grad.reshape(-1, 3)
    pose = rep.pose
    f = pose.scale
    rot = rotation_matrix(pose)
    world = synthesize_shape(model, rep.geometry).reshape(-1, 3)
    rotated = world @ rot.T

    g_rot = g * np.array([f, f, 1.0])
    g_world = (g_rot @ rot).ravel()
    out = np.empty(rep.size)
    out[: model.d_id] = model.id_basis.T @ g_world
    out[model.d_id : model.d_id + model.d_exp] = model.exp_basis.T @ g_world
    base = model.d_id + model.d_exp
    for k, d_rot in enumerate(rotation_derivatives(pose)):
        out[base + k] = np.sum(g_rot * (world @ d_rot.T))
    out[base + 3] = g[:, 0].sum()
    out[base + 4] = g[:, 1].sum()
    out[base + 5] = np.sum(g[:, 0] * rotated[:, 0]) + np.sum(g[:, 1] * rotated[:, 1])
    return out


def camera_transform_jvp(model: MorphableModel, rep: Representation) -> np.ndarray:
    """Vertex tangents for every representation entry, shape ``(size, N, 3)``."""
    _check_rep(model, rep)
    pose = rep.pose
    f = pose.scale
    fscale = np.array([f, f, 1.0])
    rot = rotation_matrix(pose)
    world = synthesize_shape(model, rep.geometry).reshape(-1, 3)
    rotated = world @ rot.T
    n = model.vertex_count

    basis = model.shape_basis.T.reshape(-1, n, 3)
    out = np.empty((rep.size, n, 3))
    out[: basis.shape[0]] = (basis @ rot.T) * fscale
    base = basis.shape[0]
    for k, d_rot in enumerate(rotation_derivatives(pose)):
        out[base + k] = (world @ d_rot.T) * fscale
    out[base + 3] = [1.0, 0.0, 0.0]
    out[base + 4] = [0.0, 1.0, 0.0]
    out[base + 5] = rotated * np.array([1.0, 1.0, 0.0])
    return out


def save_representation(rep: Representation, path) -> None:
    """Write the flat JSON array plus a ``.header.json`` sidecar naming dimensions."""
    path = Path(path)
    path.write_text(json.dumps([float(v) for v in rep.to_vector()]) + "\n")
    header = {
        "d_id": rep.d_id,
        "d_exp": rep.d_exp,
        "layout": ["alpha_id", "alpha_exp", *POSE_FIELDS],
        "scale_entry": "offset s with focal factor f = 1 + s",
        "euler_order": "R = Rz(roll) Ry(yaw) Rx(pitch)",
    }
    sidecar_path(path).write_text(json.dumps(header, indent=2) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".header.json")


def load_representation(path, model: MorphableModel | None = None) -> Representation:
    path = Path(path)
    vec = json.loads(path.read_text())
    side = sidecar_path(path)
    if side.exists():
        hdr = json.loads(side.read_text())
        d_id, d_exp = int(hdr["d_id"]), int(hdr["d_exp"])
    elif model is not None:
        d_id, d_exp = model.d_id, model.d_exp
    else:
        raise ValueError(f"no header sidecar for {path} and no model given")
    if model is not None and (d_id, d_exp) != (model.d_id, model.d_exp):
        raise DimensionError(
            f"{path} has dims ({d_id}, {d_exp}), model has ({model.d_id}, {model.d_exp})"
        )
    return Representation.from_vector(vec, d_id, d_exp)
