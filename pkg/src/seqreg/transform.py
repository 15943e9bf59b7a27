"""Rigid and control-grid deformation models, warping, and Jacobian checks.

A :class:`Deformation` maps fixed-image world points into moving-image world
space (pull-back): ``y(x) = R(x) + u_grid(x)`` where ``R`` is a rigid motion
about ``center`` and ``u_grid`` is trilinearly interpolated from a coarse
lattice of control vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import (
    BinaryMask,
    Geometry,
    Volume3D,
    VectorField3D,
    gradient_index,
    interpolate_index,
    trilinear_corners,
)

DEFAULT_GRID_SIZE = (31, 31, 31)


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _drot(rot, a):
    # derivative of a single-axis rotation matrix: R(a + pi/2) with the fixed axis zeroed
    d = rot(a + np.pi / 2)
    fixed = {_rot_x: 0, _rot_y: 1, _rot_z: 2}[rot]
    d[fixed, :] = 0.0
    d[:, fixed] = 0.0
    return d


@dataclass(frozen=True)
class RigidParams:
    """Six-parameter rigid motion.

    ``rotation`` holds angles (rad) about x, y, z; the matrix is applied as
    Rz @ Ry @ Rx (intrinsic Z-Y-X).  ``translation`` and ``center`` are in mm.
    """

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("rotation", "translation", "center"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3 or not all(np.isfinite(v)):
                raise ValueError(f"{name} must be 3 finite numbers")
            object.__setattr__(self, name, v)
        if max(abs(a) for a in self.rotation) > np.pi:
            raise ValueError("rotation angles must lie in [-pi, pi]")

    @classmethod
    def from_vector(cls, theta, center=(0.0, 0.0, 0.0)) -> "RigidParams":
        theta = np.asarray(theta, dtype=float)
        rot = (theta[:3] + np.pi) % (2 * np.pi) - np.pi
        return cls(tuple(rot), tuple(theta[3:]), tuple(center))

    def as_vector(self) -> np.ndarray:
        return np.array(self.rotation + self.translation)

    @property
    def matrix(self) -> np.ndarray:
        rx, ry, rz = self.rotation
        return _rot_z(rz) @ _rot_y(ry) @ _rot_x(rx)

    def matrix_derivatives(self) -> np.ndarray:
        """d(matrix)/d(angle) for the three angles, shape (3, 3, 3)."""
        rx, ry, rz = self.rotation
        X, Y, Z = _rot_x(rx), _rot_y(ry), _rot_z(rz)
        return np.stack([Z @ Y @ _drot(_rot_x, rx),
                         Z @ _drot(_rot_y, ry) @ X,
                         _drot(_rot_z, rz) @ Y @ X])

    def apply(self, points) -> np.ndarray:
        c = np.array(self.center)
        if self.rotation == (0.0, 0.0, 0.0):
            return np.asarray(points, dtype=float) + np.array(self.translation)
        return (np.asarray(points, dtype=float) - c) @ self.matrix.T + c + np.array(self.translation)

    def jacobian(self, points) -> np.ndarray:
        """d apply(points) / d (angles, translation), shape (N, 3, 6)."""
        rel = np.asarray(points, dtype=float).reshape(-1, 3) - np.array(self.center)
        jac = np.zeros((len(rel), 3, 6))
        for a, dm in enumerate(self.matrix_derivatives()):
            jac[:, :, a] = rel @ dm.T
        jac[:, :, 3:] = np.eye(3)
        return jac

    def to_dict(self) -> dict:
        return {"rotation": list(self.rotation), "translation": list(self.translation),
                "center": list(self.center)}

    @classmethod
    def from_dict(cls, d) -> "RigidParams":
        return cls(tuple(d["rotation"]), tuple(d["translation"]), tuple(d.get("center", (0, 0, 0))))


@dataclass(frozen=True)
class DisplacementGrid:
    """Control vectors (mm) on a coarse lattice described by ``grid_geometry``."""

    grid_geometry: Geometry
    control: np.ndarray

    def __post_init__(self):
        control = np.array(self.control, dtype=float)
        if control.shape != self.grid_geometry.dims + (3,):
            raise ValueError(f"control shape {control.shape} does not match grid "
                             f"{self.grid_geometry.dims}")
        if not np.all(np.isfinite(control)):
            raise ValueError("control vectors must be finite")
        control.setflags(write=False)
        object.__setattr__(self, "control", control)

    @classmethod
    def zeros(cls, grid_geometry: Geometry) -> "DisplacementGrid":
        return cls(grid_geometry, np.zeros(grid_geometry.dims + (3,)))

    def at(self, points) -> np.ndarray:
        idx = self.grid_geometry.world_to_index(points)
        return interpolate_index(self.control, idx, "zero")

    def as_field(self) -> VectorField3D:
        return VectorField3D(self.grid_geometry, self.control)


def grid_geometry_for_mask(mask: BinaryMask, grid_size=DEFAULT_GRID_SIZE) -> Geometry:
    """Control lattice over the mask bounding box plus one control cell per side.

    Axes stay aligned with the fixed image; the ``n`` nodes per axis span
    ``[lo - h, hi + h]`` in fixed-index units with ``h = (hi - lo) / (n - 3)``.
    """
    if mask.count == 0:
        raise ValueError("mask is empty")
    grid_size = tuple(int(n) for n in grid_size)
    if min(grid_size) < 4:
        raise ValueError("grid needs at least 4 nodes per axis")
    nz = np.nonzero(mask.data)
    lo = np.array([a.min() for a in nz], dtype=float)
    hi = np.array([a.max() for a in nz], dtype=float)
    n = np.array(grid_size, dtype=float)
    h = np.where(hi > lo, (hi - lo) / (n - 3), 1.0)
    geom = mask.geometry
    return Geometry(grid_size, tuple(h * np.array(geom.spacing)),
                    tuple(geom.index_to_world(lo - h)), geom.direction)


@dataclass(frozen=True)
class Deformation:
    rigid: RigidParams = field(default_factory=RigidParams)
    grid: DisplacementGrid | None = None


def evaluate_deformation(d: Deformation, points) -> np.ndarray:
    """World points ``x`` (mm, (..., 3)) mapped to ``y(x)``."""
    points = np.asarray(points, dtype=float)
    y = d.rigid.apply(points)
    if d.grid is not None:
        y = y + d.grid.at(points)
    return y


class GridInterpolator:
    """Trilinear control-grid interpolation at a fixed set of points.

    ``apply`` maps control vectors to displacements at the points and
    ``adjoint`` pulls per-point vectors back onto the control lattice.
    """

    def __init__(self, grid_geometry: Geometry, points):
        self.geometry = grid_geometry
        self.flat, self.weights = trilinear_corners(grid_geometry.world_to_index(points),
                                                    grid_geometry.dims, "zero")

    def apply(self, control) -> np.ndarray:
        c = np.asarray(control).reshape(-1, 3)
        return np.einsum("nk,nkc->nc", self.weights, c[self.flat])

    def adjoint(self, vectors) -> np.ndarray:
        size = self.geometry.size
        flat = self.flat.ravel()
        out = np.empty((size, 3))
        for c in range(3):
            out[:, c] = np.bincount(flat, (self.weights * vectors[:, c:c + 1]).ravel(),
                                    minlength=size)
        return out.reshape(self.geometry.dims + (3,))


def densify(d: Deformation, ref: Geometry) -> VectorField3D:
    """Dense displacement ``u(x) = y(x) - x`` at every voxel of ``ref``."""
    x = ref.voxel_centers()
    return VectorField3D(ref, evaluate_deformation(d, x) - x)


def warp(moving: Volume3D, d: Deformation, ref: Geometry, oob_policy: str = "zero") -> Volume3D:
    """Resample ``moving`` onto ``ref`` through ``y``: one interpolation per voxel."""
    y = evaluate_deformation(d, ref.voxel_centers())
    return Volume3D(ref, interpolate_index(moving.data, moving.geometry.world_to_index(y),
                                           oob_policy))


def warp_mask(mask: BinaryMask, d: Deformation, ref: Geometry) -> BinaryMask:
    vol = Volume3D(mask.geometry, mask.data.astype(float))
    return BinaryMask(ref, warp(vol, d, ref, "zero").data >= 0.5)


def jacobian_determinant(field: VectorField3D) -> Volume3D:
    """``det(I + grad u)`` per voxel, derivatives taken in physical space."""
    geom = field.geometry
    # (..., component, index-axis) -> (..., component, world-axis)
    grad = np.stack([gradient_index(field.data[..., c]) for c in range(3)], axis=-2)
    grad = grad @ geom.world_to_index_matrix
    return Volume3D(geom, np.linalg.det(np.eye(3) + grad))


def folding_fraction(field: VectorField3D, mask: BinaryMask) -> float:
    """Percentage of mask voxels with a non-positive Jacobian determinant."""
    if mask.geometry.dims != field.geometry.dims:
        raise ValueError("mask and field geometries differ")
    n = mask.count
    if n == 0:
        raise ValueError("mask is empty")
    det = jacobian_determinant(field).data
    return 100.0 * int(np.count_nonzero(det[mask.data] <= 0)) / n
