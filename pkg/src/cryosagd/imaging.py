"""Linear image formation in Fourier space: slice extraction, shift, CTF.

Central slices are read from the 3D transform with a separable kernel. The
reconstruction pipeline grids with a Kaiser-Bessel kernel on a 2x zero-padded
volume that was pre-divided by the kernel's real-space profile; raw reads of a
:class:`~cryosagd.volume.FourierVolume` default to a Kaiser-Bessel windowed
sinc, which is exact at lattice points.

Hot paths work on the *half disk*: one representative per Hermitian pair of
in-band coefficients, weighted 2 (the DC term is its own partner, weight 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np
from scipy.special import i0

from .volume import (
    DensityVolume,
    FourierImage,
    FourierVolume,
    disk_mask,
    fft3,
    frequency_grid,
    nyquist,
)

_TABLE_RES = 8192
KERNELS = ("kb", "sinc")


def default_beta(kind, footprint, pad=2):
    if kind == "kb":
        # Beatty et al. shape for a given oversampling ratio
        return np.pi * np.sqrt((footprint / pad) ** 2 * (pad - 0.5) ** 2 - 0.8)
    return float(footprint)


def kernel(u, kind="sinc", footprint=4, beta=None, pad=2):
    """Interpolation kernel at offsets ``u`` (lattice units).

    ``"sinc"`` is a Kaiser-Bessel-windowed sinc: it vanishes at nonzero
    integers, so reads at lattice points are exact. ``"kb"`` is the bare
    Kaiser-Bessel window used for gridding together with real-space
    deapodization.
    """
    if kind not in KERNELS:
        raise ValueError(f"unknown kernel {kind!r}")
    beta = default_beta(kind, footprint, pad) if beta is None else beta
    half = footprint / 2
    u = np.abs(np.asarray(u, dtype=np.float64))
    w = i0(beta * np.sqrt(np.clip(1 - (u / half) ** 2, 0, None))) / i0(beta)
    if kind == "sinc":
        w = w * np.sinc(u)
    return np.where(u <= half, w, 0.0)


@lru_cache(maxsize=None)
def kernel_table(kind, footprint, beta):
    """Samples of :func:`kernel` on ``[0, footprint/2]`` at ``_TABLE_RES`` per unit."""
    u = np.arange(int(footprint / 2 * _TABLE_RES) + 2) / _TABLE_RES
    h = kernel(u, kind, footprint, beta)
    if kind == "sinc":
        # exact zeros at the integers keep lattice-point reads exact
        h[::_TABLE_RES] = 0.0
        h[0] = 1.0
    h.setflags(write=False)
    return h


@lru_cache(maxsize=None)
def apodization_profile(m, kind, footprint, beta):
    """Real-space profile ``H(x / m)`` of the kernel on an ``m``-point grid."""
    half = footprint / 2
    nodes, wts = np.polynomial.legendre.leggauss(400)
    u = half * nodes
    w = half * wts * kernel(u, kind, footprint, beta)
    x = (np.arange(m) - m // 2) / m
    prof = np.cos(2 * np.pi * np.outer(x, u)) @ w
    prof.setflags(write=False)
    return prof


@numba.njit(cache=True, fastmath=True)
def _axis_taps(c, W, M, stride, table, res, idx, wt):
    """Flat offsets (``stride`` per lattice step) and kernel weights of the taps around ``c``."""
    f = np.floor(c)
    half = W // 2
    n = table.shape[0]
    for t in range(W):
        m = f - half + 1 + t
        u = abs(c - m) * res
        j = int(u)
        frac = u - j
        if j + 1 < n:
            wt[t] = table[j] + (table[j + 1] - table[j]) * frac
        else:
            wt[t] = 0.0
        k = int(m) + M // 2
        if k < 0:
            k += M
        elif k >= M:
            k -= M
        idx[t] = k * stride


@numba.njit(cache=True, fastmath=True)
def _gather(F, coords, W, table, res, out):
    M = F.shape[0]
    Ff = F.ravel()
    ix = np.empty(W, np.int64)
    iy = np.empty(W, np.int64)
    iz = np.empty(W, np.int64)
    wx = np.empty(W)
    wy = np.empty(W)
    wz = np.empty(W)
    for s in range(coords.shape[0]):
        _axis_taps(coords[s, 0], W, M, M * M, table, res, ix, wx)
        _axis_taps(coords[s, 1], W, M, M, table, res, iy, wy)
        _axis_taps(coords[s, 2], W, M, 1, table, res, iz, wz)
        re = 0.0
        im = 0.0
        for a in range(W):
            for b in range(W):
                wab = wx[a] * wy[b]
                base = ix[a] + iy[b]
                sr = 0.0
                si = 0.0
                for c in range(W):
                    v = Ff[base + iz[c]]
                    sr += wz[c] * v.real
                    si += wz[c] * v.imag
                re += wab * sr
                im += wab * si
        out[s] = complex(re, im)


@numba.njit(cache=True, fastmath=True)
def _scatter(values, coords, W, table, res, M, out):
    Of = out.ravel()
    ix = np.empty(W, np.int64)
    iy = np.empty(W, np.int64)
    iz = np.empty(W, np.int64)
    wx = np.empty(W)
    wy = np.empty(W)
    wz = np.empty(W)
    for s in range(coords.shape[0]):
        v = values[s]
        if v == 0:
            continue
        _axis_taps(coords[s, 0], W, M, M * M, table, res, ix, wx)
        _axis_taps(coords[s, 1], W, M, M, table, res, iy, wy)
        _axis_taps(coords[s, 2], W, M, 1, table, res, iz, wz)
        for a in range(W):
            for b in range(W):
                vab = wx[a] * wy[b] * v
                base = ix[a] + iy[b]
                for c in range(W):
                    Of[base + iz[c]] += wz[c] * vab


@dataclass(frozen=True)
class HalfDisk:
    """In-band coefficients of an ``N x N`` image, one per Hermitian pair."""

    n: int
    pixel_size: float
    rho: float
    ix: np.ndarray          # row indices into the centered N x N array
    iy: np.ndarray
    px: np.ndarray          # indices of the conjugate partners
    py: np.ndarray
    lattice: np.ndarray     # (C, 2) integer frequency indices k
    freqs: np.ndarray       # (C, 2) cycles / A
    weights: np.ndarray     # 2 for pairs, 1 for DC
    n_full: int             # number of in-band coefficients counting both partners

    @property
    def size(self):
        return len(self.weights)

    @property
    def radii(self):
        return np.hypot(self.freqs[:, 0], self.freqs[:, 1])

    def take(self, data):
        """Half-disk vector(s) from centered full array(s) of shape ``(..., N, N)``."""
        return data[..., self.ix, self.iy]

    def expand(self, values):
        """Full centered ``(..., N, N)`` array, Hermitian by construction."""
        values = np.asarray(values)
        out = np.zeros(values.shape[:-1] + (self.n, self.n), dtype=np.complex128)
        out[..., self.px, self.py] = np.conj(values)
        out[..., self.ix, self.iy] = values
        return out


@lru_cache(maxsize=64)
def half_disk(n, pixel_size, rho):
    mask = disk_mask(n, pixel_size, rho)
    kx, ky = np.meshgrid(np.arange(n) - n // 2, np.arange(n) - n // 2, indexing="ij")
    rep = mask & ((kx > 0) | ((kx == 0) & (ky >= 0)))
    ix, iy = np.nonzero(rep)
    lat = np.stack([kx[ix, iy], ky[ix, iy]], axis=1)
    px, py = -lat[:, 0] + n // 2, -lat[:, 1] + n // 2
    w = np.where((lat[:, 0] == 0) & (lat[:, 1] == 0), 1.0, 2.0)
    arrays = [ix, iy, px, py, lat, lat / (n * pixel_size), w]
    for a in arrays:
        a.setflags(write=False)
    return HalfDisk(n, pixel_size, rho, *arrays, int(mask.sum()))


def slice_coords(rotations, grid, oversampling=1.0):
    """3D lattice coordinates of the half-disk samples for each rotation, ``(R, C, 3)``."""
    rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    k = grid.lattice.astype(np.float64) * oversampling
    # (C, 2) @ (R, 2, 3) -> (R, C, 3)
    return np.matmul(k, rotations[:, :, :2].transpose(0, 2, 1))


class Projector:
    """Forward/adjoint slice operators on a padded, pre-compensated volume.

    Parameters
    ----------
    n : int
        Side of the real volume and of the images.
    voxel_size : float
        Angstrom per voxel (== pixel size of the images).
    footprint : int
        Interpolation taps per axis.
    pad : int
        Zero-padding factor applied before the 3D transform.
    kind : {"kb", "sinc"}
        ``"kb"`` grids with a Kaiser-Bessel kernel and pre-divides the volume
        by the kernel's real-space profile; ``"sinc"`` reads with the
        windowed sinc and no pre-division.
    beta : float, optional
        Kaiser-Bessel shape parameter.
    """

    def __init__(self, n, voxel_size, footprint=4, pad=2, kind="kb", beta=None):
        if footprint % 2:
            raise ValueError("footprint must be even")
        self.n = n
        self.voxel_size = voxel_size
        self.footprint = footprint
        self.pad = pad
        self.kind = kind
        self.m = int(round(pad * n))
        self.beta = default_beta(kind, footprint, pad) if beta is None else beta
        self.table = kernel_table(kind, footprint, self.beta)
        if kind == "kb":
            h = apodization_profile(self.m, kind, footprint, self.beta)
            lo = self.m // 2 - n // 2
            h = h[lo:lo + n]
            self.deapod = 1.0 / (h[:, None, None] * h[None, :, None] * h[None, None, :])
        else:
            self.deapod = np.ones((n, n, n))
        self.scale = self.m ** 1.5 / n

    def grid(self, rho):
        return half_disk(self.n, self.voxel_size, float(rho))

    def prepare(self, v):
        """Fourier volume ready for slicing: pre-divided, padded, transformed."""
        data = v.data if isinstance(v, DensityVolume) else np.asarray(v)
        fv = fft3(DensityVolume(data * self.deapod, self.voxel_size), pad=self.pad)
        return FourierVolume(fv.data, fv.voxel_size, fv.size, self.kind)

    def slices(self, fv, rotations, grid):
        """Half-disk slice values ``(R, C)`` including the projection scale."""
        coords = slice_coords(rotations, grid, self.pad).reshape(-1, 3)
        out = np.empty(len(coords), dtype=np.complex128)
        _gather(np.ascontiguousarray(fv.data), coords, self.footprint, self.table,
                float(_TABLE_RES), out)
        return self.scale * out.reshape(-1, grid.size)

    def adjoint(self, values, rotations, grid, accum=None):
        """Adjoint of :meth:`slices`, accumulated into a padded Fourier array."""
        if accum is None:
            accum = np.zeros((self.m,) * 3, dtype=np.complex128)
        coords = slice_coords(rotations, grid, self.pad).reshape(-1, 3)
        vals = np.asarray(values, dtype=np.complex128).reshape(-1) * self.scale
        _scatter(np.ascontiguousarray(vals), coords, self.footprint, self.table,
                 float(_TABLE_RES), self.m, accum)
        return accum

    def real_gradient(self, fourier_grad):
        """Map a gradient w.r.t. the prepared Fourier volume back to real voxels.

        For a real objective, ``df = Re<g, dF>`` and ``F = FFT(pad(D v))``, so
        the voxel gradient is ``D * crop(Re(FFT^H g))``.
        """
        g = np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(fourier_grad), norm="ortho")).real
        lo = self.m // 2 - self.n // 2
        n = self.n
        return self.deapod * g[lo:lo + n, lo:lo + n, lo:lo + n]


def extract_slice(vol, R, rho, footprint=4, kind=None, beta=None):
    """Central slice of ``vol`` perpendicular to ``R @ e_z`` as a :class:`FourierImage`.

    The slice is the transform of the integral projection along ``R @ e_z``.
    By default the kernel matches ``vol.kernel``: a plain :func:`fft3`
    transform is read with the windowed sinc (exact at lattice points), a
    volume from :meth:`Projector.prepare` with the Kaiser-Bessel kernel it
    was compensated for (accurate at arbitrary rotations).
    """
    kind = vol.kernel if kind is None else kind
    n = vol.size
    if rho > nyquist(vol.voxel_size) * (1 + 1e-12):
        raise ValueError("rho exceeds Nyquist")
    beta = default_beta(kind, footprint, vol.oversampling) if beta is None else beta
    grid = half_disk(n, vol.voxel_size, float(rho))
    coords = slice_coords(R, grid, vol.oversampling).reshape(-1, 3)
    out = np.empty(len(coords), dtype=np.complex128)
    _gather(np.ascontiguousarray(vol.data), coords, footprint, kernel_table(kind, footprint, beta),
            float(_TABLE_RES), out)
    m = vol.data.shape[0]
    return FourierImage(grid.expand(out * m ** 1.5 / n), vol.voxel_size, rho)


def adjoint_slice(img, R, accum, footprint=4, kind=None, beta=None):
    """Accumulate the adjoint of :func:`extract_slice` applied to ``img`` into ``accum``.

    The forward map reads half-disk representatives and fills partners with
    conjugates, so under the real inner product ``Re<P v, u>`` the adjoint
    deposits ``u_k + conj(u_-k)`` per representative.
    """
    kind = accum.kernel if kind is None else kind
    n = accum.size
    beta = default_beta(kind, footprint, accum.oversampling) if beta is None else beta
    grid = half_disk(n, img.pixel_size, float(img.rho))
    own = grid.take(img.data)
    vals = np.where(grid.weights == 1, own, own + np.conj(img.data[grid.px, grid.py]))
    m = accum.data.shape[0]
    coords = slice_coords(R, grid, accum.oversampling).reshape(-1, 3)
    data = accum.data.astype(np.complex128, copy=True)
    _scatter(np.ascontiguousarray(vals * m ** 1.5 / n), coords, footprint,
             kernel_table(kind, footprint, beta), float(_TABLE_RES), m, data)
    return FourierVolume(data, accum.voxel_size, accum.size, accum.kernel)


def shift_phases(freqs, shifts):
    """``exp(-2 pi i f . t)`` for every shift (rows) and frequency (columns)."""
    shifts = np.atleast_2d(np.asarray(shifts, dtype=np.float64))
    return np.exp(-2j * np.pi * (shifts @ np.asarray(freqs).T))


def apply_shift(img, t):
    fx, fy = frequency_grid(img.N, img.pixel_size)
    phase = np.exp(-2j * np.pi * (fx * t[0] + fy * t[1]))
    return FourierImage(img.data * phase, img.pixel_size, img.rho)


def electron_wavelength(voltage_kv):
    """Relativistic electron wavelength in Angstrom."""
    v = voltage_kv * 1e3
    return 12.2643247 / np.sqrt(v * (1 + 0.978466e-6 * v))


def ctf_eval(theta, f):
    """CTF value at spatial frequency magnitude ``f`` (cycles/A)."""
    f = np.asarray(f, dtype=np.float64)
    if theta.identity:
        return np.ones_like(f)
    lam = electron_wavelength(theta.voltage)
    cs = theta.spherical_aberration * 1e7
    f2 = f * f
    gamma = np.pi * lam * theta.defocus * f2 - 0.5 * np.pi * cs * lam ** 3 * f2 * f2
    w = theta.amplitude_contrast
    c = -np.sqrt(1 - w * w) * np.sin(gamma) - w * np.cos(gamma)
    if theta.envelope_b_factor > 0:
        c = c * np.exp(-theta.envelope_b_factor * f2 / 4)
    return c


def apply_ctf(img, theta):
    fx, fy = frequency_grid(img.N, img.pixel_size)
    return FourierImage(img.data * ctf_eval(theta, np.hypot(fx, fy)), img.pixel_size, img.rho)


def forward_model(vol, R, t, theta, rho, footprint=4, kind=None):
    """``CTF * shift * slice`` of ``vol``: the noise-free transform of one image."""
    return apply_ctf(apply_shift(extract_slice(vol, R, rho, footprint, kind), t), theta)


def project_real(projector, v, rotations, shifts, ctfs, rho=None):
    """Noise-free real-space images of ``v`` for paired poses and CTFs."""
    rho = nyquist(projector.voxel_size) if rho is None else rho
    grid = projector.grid(rho)
    fv = projector.prepare(v)
    s = projector.slices(fv, rotations, grid)
    out = np.empty((len(s), projector.n, projector.n))
    for i, (sl, t, ctf) in enumerate(zip(s, shifts, ctfs)):
        coef = sl * shift_phases(grid.freqs, t)[0] * ctf_eval(ctf, grid.radii)
        full = grid.expand(coef)
        out[i] = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(full), norm="ortho")).real
    return out
