"""3D scalar volumes with physical geometry, and the sampling / differencing
primitives the registration builds on.

Arrays are indexed ``[i, j, k]`` = ``[x, y, z]`` with shape ``dims``; the flat
"x-fastest" layout used on disk is ``array.ravel(order="F")``.  A voxel index
``p`` maps to world space as ``origin + direction @ (spacing * p)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

OOB_POLICIES = ("zero", "clamp")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Geometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: tuple[float, ...] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        direction = tuple(float(v) for v in np.asarray(self.direction, dtype=float).ravel())
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3 or len(direction) != 9:
            raise ValueError("geometry must be three-dimensional")
        if min(dims) < 2:
            raise ValueError(f"dims must be >= 2 per axis, got {dims}")
        if not all(np.isfinite(spacing)) or min(spacing) <= 0:
            raise ValueError(f"spacing must be finite and > 0, got {spacing}")
        if not all(np.isfinite(origin)):
            raise ValueError("origin must be finite")
        d = np.array(direction).reshape(3, 3)
        if not np.allclose(d.T @ d, np.eye(3), atol=1e-6, rtol=0):
            raise ValueError("direction columns must be orthonormal")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.direction).reshape(3, 3)

    @property
    def index_to_world_matrix(self) -> np.ndarray:
        return self.matrix * np.array(self.spacing)[None, :]

    @property
    def world_to_index_matrix(self) -> np.ndarray:
        return self.matrix.T / np.array(self.spacing)[:, None]

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def index_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        return idx @ self.index_to_world_matrix.T + np.array(self.origin)

    def world_to_index(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return (pts - np.array(self.origin)) @ self.world_to_index_matrix.T

    def voxel_indices(self) -> np.ndarray:
        """All voxel indices, shape ``dims + (3,)``."""
        return np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in self.dims],
                                    indexing="ij"), axis=-1)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape ``dims + (3,)``."""
        return self.index_to_world(self.voxel_indices())

    def with_(self, **changes) -> "Geometry":
        fields = dict(dims=self.dims, spacing=self.spacing, origin=self.origin,
                      direction=self.direction)
        fields.update(changes)
        return Geometry(**fields)


@dataclass(frozen=True)
class Volume3D:
    geometry: Geometry
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.shape != self.geometry.dims:
            raise ValueError(f"data shape {data.shape} does not match dims {self.geometry.dims}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def voxels(self) -> np.ndarray:
        """Flat voxel values, x-fastest."""
        return self.data.ravel(order="F")


@dataclass(frozen=True)
class BinaryMask:
    geometry: Geometry
    data: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.shape != self.geometry.dims:
            raise ValueError(f"mask shape {raw.shape} does not match dims {self.geometry.dims}")
        if raw.dtype != bool and not np.isin(raw, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _frozen(raw.astype(bool)))

    @property
    def voxels(self) -> np.ndarray:
        return self.data.ravel(order="F").astype(np.uint8)

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class VectorField3D:
    geometry: Geometry
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.shape != self.geometry.dims + (3,):
            raise ValueError(f"field shape {data.shape} does not match dims {self.geometry.dims}+(3,)")
        if not np.all(np.isfinite(data)):
            raise ValueError("vector field contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def vectors(self) -> np.ndarray:
        """Per-voxel vectors, shape (N, 3), x-fastest voxel order."""
        return np.stack([self.data[..., c].ravel(order="F") for c in range(3)], axis=1)


def _check_policy(policy):
    if policy not in OOB_POLICIES:
        raise ValueError(f"unknown out-of-bounds policy {policy!r}; expected one of {OOB_POLICIES}")


def trilinear_corners(idx, dims, policy="zero", derivative=False):
    """Corner indices and weights of the trilinear blend at index coordinates.

    Returns ``(flat, w)`` or ``(flat, w, dw)`` where ``flat`` (N, 8) indexes a
    C-ordered ravel of a ``dims``-shaped array, ``w`` (N, 8) are blend weights
    and ``dw`` (N, 8, 3) their derivatives with respect to ``idx``.  Corners
    outside the lattice get weight 0 under ``"zero"`` (zero padding); under
    ``"clamp"`` the coordinate is clamped into the lattice first.
    """
    _check_policy(policy)
    idx = np.asarray(idx, dtype=float).reshape(-1, 3)
    n = np.array(dims)
    frozen = np.zeros(idx.shape, dtype=bool)
    if policy == "clamp":
        clipped = np.clip(idx, 0, n - 1)
        frozen = clipped != idx
        idx = clipped
        base = np.minimum(np.floor(idx), n - 2).astype(np.int64)
    else:
        base = np.floor(idx).astype(np.int64)
    frac = idx - base

    flat = np.zeros((len(idx), 8), dtype=np.int64)
    w = np.ones((len(idx), 8))
    dw = np.ones((len(idx), 8, 3)) if derivative else None
    strides = (dims[1] * dims[2], dims[2], 1)
    for corner in range(8):
        bits = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        valid = np.ones(len(idx), dtype=bool)
        for a, b in enumerate(bits):
            pos = base[:, a] + b
            valid &= (pos >= 0) & (pos < dims[a])
            flat[:, corner] += np.clip(pos, 0, dims[a] - 1) * strides[a]
            fa = frac[:, a] if b else 1.0 - frac[:, a]
            w[:, corner] *= fa
            if derivative:
                sign = 1.0 if b else -1.0
                for c in range(3):
                    dw[:, corner, c] *= sign if c == a else fa
        w[~valid, corner] = 0.0
        if derivative:
            dw[~valid, corner, :] = 0.0
    if derivative:
        dw[np.repeat(frozen[:, None, :], 8, axis=1)] = 0.0
        return flat, w, dw
    return flat, w


def interpolate_index(array, idx, policy="zero", derivative=False):
    """Trilinear interpolation of a (nx, ny, nz[, C]) array at index points.

    With ``derivative=True`` also returns the Jacobian with respect to the
    index coordinates, shape (N, C, 3) (or (N, 3) for scalar arrays).
    """
    array = np.asarray(array, dtype=float)
    dims = array.shape[:3]
    scalar = array.ndim == 3
    values = array.reshape(int(np.prod(dims)), -1)
    idx = np.asarray(idx, dtype=float)
    lead = idx.shape[:-1]
    out = trilinear_corners(idx, dims, policy, derivative)
    gathered = values[out[0]]  # (N, 8, C)
    val = np.einsum("nk,nkc->nc", out[1], gathered)
    if scalar:
        val = val[:, 0]
    val = val.reshape(lead + val.shape[1:])
    if not derivative:
        return val
    jac = np.einsum("nka,nkc->nca", out[2], gathered)
    if scalar:
        jac = jac[:, 0, :]
    return val, jac.reshape(lead + jac.shape[1:])


def sample_trilinear(vol: Volume3D, p, oob_policy: str = "zero"):
    """Trilinearly sample ``vol`` at world point(s) ``p`` (mm).

    A single point returns a float; an (..., 3) array returns an array.
    """
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 3:
        raise ValueError("points must have 3 coordinates")
    if not np.all(np.isfinite(p)):
        raise ValueError("sample point is not finite")
    out = interpolate_index(vol.data, vol.geometry.world_to_index(p), oob_policy)
    return float(out) if p.ndim == 1 else out


def gradient_index(array, axes=(0, 1, 2)):
    """Index-space derivatives: central inside, one-sided at the borders."""
    return np.stack(np.gradient(np.asarray(array, dtype=float), axis=axes, edge_order=1),
                    axis=-1)


def gradient_central(vol: Volume3D, mask: BinaryMask | None = None) -> VectorField3D:
    """Physical-space image gradient (1/mm units of intensity)."""
    g = gradient_index(vol.data) @ vol.geometry.world_to_index_matrix
    if mask is not None:
        if mask.geometry != vol.geometry:
            raise ValueError("mask geometry does not match volume")
        g = np.where(mask.data[..., None], g, 0.0)
    return VectorField3D(vol.geometry, g)


def gaussian_kernel(sigma_vox: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma_vox))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def gaussian_smooth(vol: Volume3D, sigma: float) -> Volume3D:
    """Separable Gaussian blur with ``sigma`` in mm and replicate padding."""
    if not np.isfinite(sigma) or sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return vol
    data = vol.data
    for axis, s in enumerate(vol.geometry.spacing):
        data = ndimage.correlate1d(data, gaussian_kernel(sigma / s), axis=axis, mode="nearest")
    return Volume3D(vol.geometry, data)


def downsample2_geometry(geom: Geometry) -> Geometry:
    if min(geom.dims) < 4:
        raise ValueError(f"volume too small to downsample: {geom.dims}")
    return geom.with_(dims=tuple(n // 2 for n in geom.dims),
                      spacing=tuple(2.0 * s for s in geom.spacing),
                      origin=tuple(geom.index_to_world([0.5, 0.5, 0.5])))


def _pool2(data: np.ndarray) -> np.ndarray:
    nx, ny, nz = (n // 2 for n in data.shape[:3])
    d = data[: 2 * nx, : 2 * ny, : 2 * nz]
    return d.reshape(nx, 2, ny, 2, nz, 2, *d.shape[3:]).mean(axis=(1, 3, 5))


def downsample2(vol: Volume3D) -> Volume3D:
    """2x mean pooling per axis (trailing odd slices are dropped)."""
    return Volume3D(downsample2_geometry(vol.geometry), _pool2(vol.data))


def downsample2_mask(mask: BinaryMask) -> BinaryMask:
    """Mean-pool the mask and keep coarse voxels at least half covered."""
    return BinaryMask(downsample2_geometry(mask.geometry), _pool2(mask.data.astype(float)) >= 0.5)


def resample_to(vol: Volume3D, ref: Geometry, oob_policy: str = "zero") -> Volume3D:
    out = interpolate_index(vol.data, vol.geometry.world_to_index(ref.voxel_centers()),
                            oob_policy)
    return Volume3D(ref, out)
