"""Dense volume/image containers, unitary centered FFTs and pose geometry.

Conventions used throughout the package:

* Real-space arrays are indexed ``[x, y, z]`` (or ``[x, y]``) with the
  origin at index ``N // 2``.
* Fourier arrays are stored centered as well (``fftshift`` layout), so the
  lattice index ``k`` runs over ``[-N/2, N/2)`` and maps to the frequency
  ``k / (N * voxel_size)`` in cycles per Angstrom.
* Transforms are unitary (``norm="ortho"``), so Parseval holds with unit
  constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CtfParams:
    """Microscope parameters of a single image.

    Attributes
    ----------
    defocus : float
        Underfocus in Angstrom (positive).
    spherical_aberration : float
        Cs in millimetres.
    voltage : float
        Acceleration voltage in kV.
    amplitude_contrast : float
        Fraction of amplitude contrast in ``[0, 1]``.
    envelope_b_factor : float
        Gaussian envelope B-factor in A^2; ``0`` disables the envelope.
    identity : bool
        Test hook: when true the CTF is exactly 1 at every frequency.
    """

    defocus: float = 15000.0
    spherical_aberration: float = 2.7
    voltage: float = 300.0
    amplitude_contrast: float = 0.1
    envelope_b_factor: float = 0.0
    identity: bool = False

    def __post_init__(self):
        if not self.identity:
            if not self.defocus > 0:
                raise ValueError(f"defocus must be > 0, got {self.defocus}")
            if not self.voltage > 0:
                raise ValueError(f"voltage must be > 0, got {self.voltage}")
        if not 0.0 <= self.amplitude_contrast <= 1.0:
            raise ValueError("amplitude_contrast must lie in [0, 1]")
        if self.envelope_b_factor < 0:
            raise ValueError("envelope_b_factor must be >= 0")


def _check_side(n):
    if n % 2 or n < 8:
        raise ValueError(f"side length must be even and >= 8, got {n}")


@dataclass(frozen=True)
class DensityVolume:
    """Real density on an ``N x N x N`` grid."""

    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or len(set(data.shape)) != 1:
            raise ValueError(f"volume must be a cube, got shape {data.shape}")
        _check_side(data.shape[0])
        object.__setattr__(self, "data", data)

    @property
    def N(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class FourierVolume:
    """Centered unitary 3D transform of a real volume.

    ``size`` is the side of the real volume whose geometry defines the
    frequency lattice of projected images; ``data`` may be larger than
    ``size`` when the transform was taken on a zero-padded volume.
    ``kernel`` names the interpolation kernel the transform was prepared
    for: ``"sinc"`` for a plain transform, ``"kb"`` when the real volume was
    pre-divided by the Kaiser-Bessel profile.
    """

    data: np.ndarray
    voxel_size: float = 1.0
    size: int = 0
    kernel: str = "sinc"

    def __post_init__(self):
        if not self.size:
            object.__setattr__(self, "size", self.data.shape[0])

    @property
    def oversampling(self):
        return self.data.shape[0] / self.size


@dataclass(frozen=True)
class ParticleImage:
    data: np.ndarray
    pixel_size: float = 1.0
    ctf: CtfParams = field(default_factory=CtfParams)
    noise_sigma: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ValueError(f"image must be square, got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def N(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class FourierImage:
    """Centered unitary 2D transform of an ``N x N`` image, zero beyond ``rho``."""

    data: np.ndarray
    pixel_size: float
    rho: float

    @property
    def N(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class Pose:
    """Factored pose: beam direction in the molecule frame, in-plane angle, shift (A)."""

    direction: np.ndarray
    inplane_angle: float = 0.0
    shift: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if d.shape != (3,):
            raise ValueError("direction must be a 3-vector")
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError(f"direction must be unit norm, |d| = {np.linalg.norm(d)!r}")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "inplane_angle", float(self.inplane_angle) % (2 * np.pi))
        object.__setattr__(self, "shift", np.asarray(self.shift, dtype=np.float64))


def nyquist(pixel_size):
    return 0.5 / pixel_size


def frequency_grid(n, pixel_size, ndim=2):
    """Centered lattice frequencies (cycles/A), one array per axis, ``indexing="ij"``."""
    k = (np.arange(n) - n // 2) / (n * pixel_size)
    return np.meshgrid(*([k] * ndim), indexing="ij")


def fft3(v, pad=1):
    """Unitary centered 3D DFT of ``v``; ``pad > 1`` zero-pads first (oversampling)."""
    data = v.data
    n = data.shape[0]
    if pad != 1:
        m = int(round(pad * n))
        out = np.zeros((m, m, m))
        lo = m // 2 - n // 2
        out[lo:lo + n, lo:lo + n, lo:lo + n] = data
        data = out
    f = np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(data), norm="ortho"))
    return FourierVolume(f, v.voxel_size, n)


def ifft3(fv):
    """Inverse of :func:`fft3`, cropping away any padding."""
    data = np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(fv.data), norm="ortho")).real
    m, n = data.shape[0], fv.size
    if m != n:
        lo = m // 2 - n // 2
        data = data[lo:lo + n, lo:lo + n, lo:lo + n]
    return DensityVolume(data, fv.voxel_size)


def disk_mask(n, pixel_size, rho):
    """Lattice points kept at band limit ``rho``.

    The unpaired Nyquist row and column (index ``-N/2``) are always dropped so
    that every kept coefficient has its Hermitian partner in the set.
    """
    fx, fy = frequency_grid(n, pixel_size)
    mask = fx ** 2 + fy ** 2 <= rho ** 2 * (1 + 1e-12)
    mask[0, :] = False
    mask[:, 0] = False
    return mask


def fft2(img, rho=None):
    """Unitary centered 2D DFT of ``img`` truncated to the disk of radius ``rho``."""
    ny = nyquist(img.pixel_size)
    if rho is None:
        rho = ny
    if rho > ny * (1 + 1e-12):
        raise ValueError(f"rho={rho} exceeds Nyquist {ny}")
    f = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img.data), norm="ortho"))
    f[~disk_mask(img.N, img.pixel_size, rho)] = 0
    return FourierImage(f, img.pixel_size, rho)


def ifft2(fi):
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(fi.data), norm="ortho")).real


def _align_z(d):
    """Rotation taking the z axis onto unit vector ``d`` along the shortest arc."""
    x, y, z = d
    r = np.hypot(x, y)
    if z < 0 and r == 0:
        return np.diag([1.0, -1.0, -1.0])
    # Rodrigues for axis (-y, x, 0) / r, angle acos(z). For unit d,
    # 1 / (1 + z) = (1 - z) / r^2; the second form stays orthogonal near the
    # south pole, and normalising (x, y) by r first keeps r^2 from underflowing.
    if z >= 0:
        c = 1.0 / (1.0 + z)
        cxx, cxy, cyy = c * x * x, c * x * y, c * y * y
    else:
        ux, uy, k = x / r, y / r, 1.0 - z
        cxx, cxy, cyy = k * ux * ux, k * ux * uy, k * uy * uy
    return np.array([
        [1 - cxx, -cxy, x],
        [-cxy, 1 - cyy, y],
        [-x, -y, z],
    ])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pose_to_rotation(p):
    """Rotation ``R`` taking image-frame coordinates to the molecule frame.

    ``R @ e_z`` equals ``p.direction``; the image plane is spanned by the first
    two columns of ``R``, rotated in-plane by ``p.inplane_angle``.
    """
    d = np.asarray(p.direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-12:
        raise ValueError("direction must be unit norm")
    return _align_z(d) @ rot_z(p.inplane_angle)


def rotations_from_factors(directions, angles):
    """All ``len(directions) * len(angles)`` rotations, direction-major."""
    a = np.stack([_align_z(d) for d in np.asarray(directions)])
    z = np.stack([rot_z(t) for t in np.asarray(angles)])
    return np.einsum("dij,pjk->dpik", a, z).reshape(-1, 3, 3)


def rotation_to_pose(R, shift=(0.0, 0.0)):
    R = np.asarray(R, dtype=np.float64)
    d = R[:, 2] / np.linalg.norm(R[:, 2])
    inplane = _align_z(d).T @ R
    angle = np.arctan2(inplane[1, 0], inplane[0, 0])
    return Pose(d, angle, np.asarray(shift, dtype=np.float64))
