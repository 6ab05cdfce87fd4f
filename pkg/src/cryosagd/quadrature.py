"""Weighted point sets over view directions, in-plane angles and shifts.

Resolution follows the band limit: at radius ``rho`` (cycles/A) the outermost
retained frequency sits ``r = rho * N * voxel_size`` lattice cells from the
origin, and rotating it by ``1 / r`` radians moves it by one cell. Both
angular factors use that spacing; shifts use ``1 / (2 rho)`` so the phase at
the band limit changes by at most pi between neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import _align_z, nyquist, rot_z

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class DirectionSet:
    points: np.ndarray        # (M, 3) unit vectors
    weights: np.ndarray
    angular_spacing: float

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class InplaneSet:
    angles: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.weights)

    @property
    def spacing(self):
        return 2 * np.pi / len(self.angles)

    @property
    def points(self):
        """Angles embedded on the unit circle, ``(M, 2)``."""
        return np.stack([np.cos(self.angles), np.sin(self.angles)], axis=1)


@dataclass(frozen=True)
class ShiftSet:
    points: np.ndarray        # (M, 2) in Angstrom
    weights: np.ndarray       # cell areas
    prior_values: np.ndarray  # Gaussian density at the nodes, sum(w * p) == 1
    spacing: float
    sigma: float
    extent: float

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class QuadratureScheme:
    directions: DirectionSet
    inplanes: InplaneSet
    shifts: ShiftSet
    rho: float
    n: int
    voxel_size: float
    generation: int = 0

    @property
    def n_rotations(self):
        return len(self.directions) * len(self.inplanes)

    @property
    def n_shifts(self):
        return len(self.shifts)

    @property
    def size(self):
        return self.n_rotations * self.n_shifts

    def rotation(self, d, p):
        return _align_z(self.directions.points[d]) @ rot_z(self.inplanes.angles[p])

    def rotations(self, ids=None):
        """Rotation matrices for flat ids ``d * M_inplane + p`` (all when ``ids`` is None)."""
        m_p = len(self.inplanes)
        if ids is None:
            ids = np.arange(self.n_rotations)
        ids = np.asarray(ids)
        a = self._aligners[ids // m_p]
        z = self._inplane_mats[ids % m_p]
        return np.einsum("rij,rjk->rik", a, z)

    @property
    def _aligners(self):
        cached = self.__dict__.get("_aligners_cache")
        if cached is None:
            cached = np.stack([_align_z(d) for d in self.directions.points])
            object.__setattr__(self, "_aligners_cache", cached)
        return cached

    @property
    def _inplane_mats(self):
        cached = self.__dict__.get("_inplane_cache")
        if cached is None:
            cached = np.stack([rot_z(t) for t in self.inplanes.angles])
            object.__setattr__(self, "_inplane_cache", cached)
        return cached


def max_angular_spacing(rho, n, voxel_size):
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    return 1.0 / (rho * n * voxel_size)


def fibonacci_sphere(count):
    """Spherical Fibonacci lattice with ``count`` points."""
    i = np.arange(count)
    z = 1.0 - (2.0 * i + 1.0) / count
    r = np.sqrt(1.0 - z * z)
    phi = _GOLDEN_ANGLE * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def build_directions(rho, n, voxel_size):
    spacing = max_angular_spacing(rho, n, voxel_size)
    count = max(6, int(np.ceil(4 * np.pi / spacing ** 2)))
    pts = fibonacci_sphere(count)
    return DirectionSet(pts, np.full(count, 1.0 / count), float(np.sqrt(4 * np.pi / count)))


def build_inplane(rho, n, voxel_size):
    spacing = max_angular_spacing(rho, n, voxel_size)
    count = int(np.ceil(2 * np.pi / spacing - 1e-9))
    return InplaneSet(2 * np.pi * np.arange(count) / count, np.full(count, 1.0 / count))


def build_shifts(sigma_t, extent, rho, n, voxel_size):
    """Square lattice of shifts within ``[-extent, extent]^2`` with a Gaussian prior."""
    if extent > n * voxel_size / 2 * (1 + 1e-12):
        raise ValueError("shift extent exceeds half the box")
    spacing = 1.0 / (2.0 * rho)
    k = int(np.floor(extent / spacing + 1e-9))
    if k == 0 or sigma_t <= 0:
        return ShiftSet(np.zeros((1, 2)), np.ones(1), np.ones(1), spacing, float(sigma_t),
                        float(extent))
    ax = spacing * np.arange(-k, k + 1)
    tx, ty = np.meshgrid(ax, ax, indexing="ij")
    pts = np.stack([tx.ravel(), ty.ravel()], axis=1)
    w = np.full(len(pts), spacing ** 2)
    g = np.exp(-0.5 * (pts ** 2).sum(1) / sigma_t ** 2) / (2 * np.pi * sigma_t ** 2)
    # renormalise so the truncated prior carries unit mass under the weights
    g = g / np.sum(w * g)
    return ShiftSet(pts, w, g, spacing, float(sigma_t), float(extent))


def build_scheme(rho, n, voxel_size, sigma_t, extent=None, generation=0):
    if rho > nyquist(voxel_size) * (1 + 1e-12):
        raise ValueError(f"rho={rho} exceeds Nyquist {nyquist(voxel_size)}")
    if extent is None:
        extent = min(3.0 * sigma_t, n * voxel_size / 2)
    return QuadratureScheme(
        build_directions(rho, n, voxel_size),
        build_inplane(rho, n, voxel_size),
        build_shifts(sigma_t, extent, rho, n, voxel_size),
        float(rho), n, voxel_size, generation,
    )


def _nearest_direction(old, new):
    return np.argmax(old @ new.T, axis=1)


def _nearest_angle(old, new):
    diff = np.angle(np.exp(1j * (old[:, None] - new[None, :])))
    return np.argmin(np.abs(diff), axis=1)


def _nearest_shift(old, new):
    d = ((old[:, None, :] - new[None, :, :]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


def upgrade_scheme(old, new_rho, extent=None):
    """Scheme at ``new_rho`` plus nearest-neighbour maps from old to new points.

    Returns
    -------
    scheme : QuadratureScheme
    correspondence : dict
        ``{"direction", "inplane", "shift"}`` -> index arrays over the old
        points giving the closest new point.
    """
    if new_rho < old.rho:
        raise ValueError("new_rho must not decrease")
    if new_rho > nyquist(old.voxel_size) * (1 + 1e-12):
        raise ValueError("new_rho exceeds Nyquist")
    if new_rho == old.rho:
        ident = {
            "direction": np.arange(len(old.directions)),
            "inplane": np.arange(len(old.inplanes)),
            "shift": np.arange(len(old.shifts)),
        }
        return old, ident
    if extent is None:
        extent = old.shifts.extent
    new = build_scheme(new_rho, old.n, old.voxel_size, old.shifts.sigma, extent,
                       old.generation + 1)
    corr = {
        "direction": _nearest_direction(old.directions.points, new.directions.points),
        "inplane": _nearest_angle(old.inplanes.angles, new.inplanes.angles),
        "shift": _nearest_shift(old.shifts.points, new.shifts.points),
    }
    return new, corr
