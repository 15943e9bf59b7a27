"""Synthetic two-contrast prostate-like phantoms with known ground truth.

The gland is an ellipsoid with an inner "transition zone" ellipsoid and a few
spherical lesions, all rendered with sigmoid edges.  The T2-like and ADC-like
volumes share this anatomy but use different contrast levels and independent
noise, so edge-based similarity has signal while raw intensities disagree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .transform import jacobian_determinant
from .volume import BinaryMask, Geometry, Volume3D, VectorField3D

# background, gland, transition zone, lesion
T2_CONTRAST = (0.25, 0.75, 0.55, 0.30)
ADC_CONTRAST = (0.10, 0.55, 0.70, 0.25)
# peak of the local modes relative to the unit global offset
MODE_WEIGHT = 0.5


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 1.0
    # None: (21, 18, 17) mm on the default 64 mm field of view, scaled with it
    gland_semi_axes: tuple[float, float, float] | None = None
    zone_scale: float = 0.55
    zone_offset: tuple[float, float, float] = (0.0, 4.0, 0.0)
    lesion_count: int = 2
    lesion_radii: tuple[float, ...] = (3.0,)
    lesion_centers: tuple[tuple[float, float, float], ...] | None = None  # mm, relative to gland center
    edge_width: float = 0.7
    noise_sigma: float = 0.02
    t2_contrast: tuple[float, float, float, float] = T2_CONTRAST
    adc_contrast: tuple[float, float, float, float] = ADC_CONTRAST
    deformation_amplitude: float = 0.0
    deformation_seed: int | None = None
    seed: int = 0

    def radii(self) -> tuple[float, ...]:
        if len(self.lesion_radii) == 1:
            return tuple(self.lesion_radii) * self.lesion_count
        if len(self.lesion_radii) < self.lesion_count:
            raise PhantomSpecError("need one lesion radius per lesion")
        return tuple(self.lesion_radii[: self.lesion_count])

    @property
    def semi_axes(self) -> np.ndarray:
        if self.gland_semi_axes is not None:
            return np.asarray(self.gland_semi_axes, dtype=float)
        return np.array([21.0, 18.0, 17.0]) / 64.0 * np.asarray(self.dims) * self.spacing

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.dims, (self.spacing,) * 3)

    @property
    def gland_center(self) -> np.ndarray:
        return (np.array(self.dims, dtype=float) - 1) / 2 * self.spacing


@dataclass(frozen=True)
class PhantomCase:
    t2_like: Volume3D
    adc_like: Volume3D
    gland_mask: BinaryMask
    lesion_masks_t2: list[BinaryMask]
    lesion_masks_adc: list[BinaryMask]
    lesion_centers: np.ndarray  # world mm, (count, 3)
    ground_truth_deformation: VectorField3D | None = None
    spec: PhantomSpec = field(default_factory=PhantomSpec)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def _ellipsoid_radius(p, center, axes):
    return np.sqrt((((p - center) / np.asarray(axes)) ** 2).sum(axis=-1))


def _place_lesions(spec: PhantomSpec, rng) -> np.ndarray:
    axes = spec.semi_axes
    radii = spec.radii()
    for r in radii:
        if r < 2 * spec.spacing:
            raise PhantomSpecError(f"lesion radius {r} below 2 voxels")
    # rho is Lipschitz with constant 1/min(axes), so rho(c) + r/min(axes) <= 1
    # keeps the whole sphere inside the gland
    if spec.lesion_centers is not None:
        centers = np.asarray(spec.lesion_centers, dtype=float).reshape(-1, 3)
        if len(centers) != spec.lesion_count:
            raise PhantomSpecError("lesion_centers length must equal lesion_count")
        for c, r in zip(centers, radii):
            if _ellipsoid_radius(c, 0.0, axes) + r / axes.min() > 1.0:
                raise PhantomSpecError(f"lesion at {tuple(c)} (radius {r}) leaves the gland")
        return centers
    centers = []
    for r in radii:
        for _ in range(1000):
            c = rng.uniform(-1, 1, 3) * axes
            if _ellipsoid_radius(c, 0.0, axes) + r / axes.min() > 0.9:
                continue
            if all(np.linalg.norm(c - o) > r + ro + 1.0 for o, ro in zip(centers, radii)):
                centers.append(c)
                break
        else:
            raise PhantomSpecError("could not place lesions inside the gland")
    return np.array(centers).reshape(-1, 3)


def _render(points, spec: PhantomSpec, centers, contrast):
    """Noise-free intensities at world points (..., 3)."""
    bg, gland, zone, lesion = contrast
    g_center = spec.gland_center
    axes = spec.semi_axes
    scale = float(np.cbrt(np.prod(axes)))
    w = spec.edge_width
    G = _sigmoid((1.0 - _ellipsoid_radius(points, g_center, axes)) * scale / w)
    z_axes = axes * spec.zone_scale
    Z = _sigmoid((1.0 - _ellipsoid_radius(points, g_center + np.asarray(spec.zone_offset), z_axes))
                 * float(np.cbrt(np.prod(z_axes))) / w)
    v = bg * (1 - G) + gland * G
    v = v * (1 - Z) + zone * Z
    for c, r in zip(centers, spec.radii()):
        L = _sigmoid((r - np.linalg.norm(points - (g_center + c), axis=-1)) / w)
        v = v * (1 - L) + lesion * L
    return v


def generate_smooth_deformation(geom: Geometry, max_amp: float, seed: int,
                                max_tries: int = 100) -> VectorField3D:
    """Random smooth displacement field with ``max |u| == max_amp``.

    A global offset of unit length plus 3-6 separable sinusoid modes (at most
    half a period across the field of view per axis) of peak magnitude
    ``MODE_WEIGHT``, rescaled to the requested peak magnitude.  The offset
    mimics bulk patient motion between acquisitions, the modes local
    deformation.  Fields with any ``det(I + grad u) <= 0`` are redrawn.
    """
    if max_amp < 0:
        raise ValueError("max_amp must be >= 0")
    if max_amp == 0:
        return VectorField3D(geom, np.zeros(geom.dims + (3,)))
    rng = np.random.default_rng(seed)
    t = [np.linspace(0.0, 1.0, n) for n in geom.dims]
    for _ in range(max_tries):
        offset = rng.normal(size=3)
        u = np.broadcast_to(offset / np.linalg.norm(offset), geom.dims + (3,)).copy()
        modes = np.zeros(geom.dims + (3,))
        for _ in range(int(rng.integers(3, 7))):
            amp = rng.normal(size=3)
            freq = rng.choice([0.25, 0.5], size=3)
            phase = rng.uniform(0, 2 * np.pi, size=3)
            fx, fy, fz = (np.sin(np.pi * freq[a] * t[a] + phase[a]) for a in range(3))
            modes += np.einsum("i,j,k,c->ijkc", fx, fy, fz, amp)
        peak = np.linalg.norm(modes, axis=-1).max()
        if peak > 0:
            u += MODE_WEIGHT * modes / peak
        # direction matrix maps the index-aligned draw into world vectors
        u = (u * (max_amp / np.linalg.norm(u, axis=-1).max())) @ geom.matrix.T
        field = VectorField3D(geom, u)
        if jacobian_determinant(field).data.min() > 0:
            return field
    raise RuntimeError(f"no fold-free field after {max_tries} draws")


def generate_phantom(spec: PhantomSpec = PhantomSpec()) -> PhantomCase:
    """Render a phantom case; deterministic in ``spec.seed``.

    With ``deformation_amplitude > 0`` a smooth field ``u`` is drawn and the
    ADC-like volume and its lesion masks are warped by it, i.e. sampled at
    ``x + u(x)``.
    """
    if spec.semi_axes.min() <= 0:
        raise PhantomSpecError("gland semi-axes must be positive")
    geom = spec.geometry
    extent = (np.array(spec.dims) - 1) * spec.spacing
    if np.any(spec.gland_center - spec.semi_axes < 0) or \
            np.any(spec.gland_center + spec.semi_axes > extent):
        raise PhantomSpecError("gland does not fit in the field of view")
    rng = np.random.default_rng(spec.seed)
    centers = _place_lesions(spec, rng)
    noise_rng_t2, noise_rng_adc = (np.random.default_rng(s) for s in
                                   np.random.SeedSequence(spec.seed).spawn(2))

    x = geom.voxel_centers()
    gt = None
    x_adc = x
    if spec.deformation_amplitude > 0:
        if spec.deformation_amplitude >= spec.semi_axes.min() / 4:
            raise PhantomSpecError("deformation amplitude must be < min gland semi-axis / 4")
        dseed = spec.deformation_seed if spec.deformation_seed is not None else spec.seed + 7919
        gt = generate_smooth_deformation(geom, spec.deformation_amplitude, dseed)
        x_adc = x + gt.data

    t2 = _render(x, spec, centers, spec.t2_contrast)
    adc = _render(x_adc, spec, centers, spec.adc_contrast)
    t2 = t2 + noise_rng_t2.normal(0.0, spec.noise_sigma, t2.shape)
    adc = adc + noise_rng_adc.normal(0.0, spec.noise_sigma, adc.shape)

    axes = spec.semi_axes
    gland = _ellipsoid_radius(x, spec.gland_center, axes) <= 1.0

    def lesion_masks(pts):
        return [BinaryMask(geom, np.linalg.norm(pts - (spec.gland_center + c), axis=-1) <= r)
                for c, r in zip(centers, spec.radii())]

    return PhantomCase(
        t2_like=Volume3D(geom, t2),
        adc_like=Volume3D(geom, adc),
        gland_mask=BinaryMask(geom, gland),
        lesion_masks_t2=lesion_masks(x),
        lesion_masks_adc=lesion_masks(x_adc),
        lesion_centers=spec.gland_center + centers,
        ground_truth_deformation=gt,
        spec=spec,
    )


def union_mask(masks: list[BinaryMask]) -> BinaryMask:
    data = np.zeros(masks[0].geometry.dims, dtype=bool)
    for m in masks:
        data |= m.data
    return BinaryMask(masks[0].geometry, data)
