"""Synthetic datasets: phantoms, Haar-uniform poses and noisy CTF-modulated projections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import Projector, project_real
from .volume import CtfParams, DensityVolume, rotation_to_pose

# Stream tags for the simulator's seeded generators.
_STREAM_POSES = 11
_STREAM_NOISE = 12
_STREAM_PHANTOM = 13


def _coords(n, voxel_size):
    x = (np.arange(n) - n // 2) * voxel_size
    return np.meshgrid(x, x, x, indexing="ij")


def phantom_spheres(n, voxel_size=1.0, sphere_count=10, seed=0, support_radius=None,
                    radius_range=(0.06, 0.14), density=1.0):
    """Sum of uniform balls with random centres inside a centred support sphere.

    ``support_radius`` and ``radius_range`` are in Angstrom and fractions of
    the box side respectively; the default support keeps every ball inside
    the box.
    """
    if sphere_count < 1:
        raise ValueError("sphere_count must be >= 1")
    rng = np.random.default_rng([seed, _STREAM_PHANTOM])
    box = n * voxel_size
    if support_radius is None:
        support_radius = 0.25 * box
    X, Y, Z = _coords(n, voxel_size)
    out = np.zeros((n, n, n))
    for _ in range(sphere_count):
        # uniform point in the support ball
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        c = d * support_radius * rng.random() ** (1 / 3)
        r = box * rng.uniform(*radius_range)
        out += density * (((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) <= r * r)
    return DensityVolume(out, voxel_size)


def centered_ball(n, voxel_size, radius, density=1.0):
    X, Y, Z = _coords(n, voxel_size)
    return DensityVolume(density * (X ** 2 + Y ** 2 + Z ** 2 <= radius ** 2), voxel_size)


def phantom_geometric(n, voxel_size=1.0, kind="lobes", seed=0):
    """Deterministic asymmetric phantom built from Gaussian blobs.

    ``"lobes"`` places blobs of different sizes and weights at irregular
    positions; ``"chain"`` strings equal blobs along a self-avoiding random
    walk. Both stay within ~0.3 of the box side from the centre.
    """
    rng = np.random.default_rng([seed, _STREAM_PHANTOM, 1])
    X, Y, Z = _coords(n, voxel_size)
    box = n * voxel_size
    out = np.zeros((n, n, n))
    if kind == "lobes":
        count = 7
        centers = []
        while len(centers) < count:
            c = rng.uniform(-0.2, 0.2, size=3) * box
            if all(np.linalg.norm(c - o) > 0.1 * box for o in centers):
                centers.append(c)
        widths = box * np.linspace(0.035, 0.075, count)[rng.permutation(count)]
        heights = np.linspace(0.6, 1.0, count)[rng.permutation(count)]
    elif kind == "chain":
        count = 9
        step = 0.09 * box
        centers = [np.zeros(3)]
        while len(centers) < count:
            d = rng.normal(size=3)
            c = centers[-1] + step * d / np.linalg.norm(d)
            if np.max(np.abs(c)) < 0.25 * box and all(np.linalg.norm(c - o) > 0.8 * step
                                                      for o in centers):
                centers.append(c)
        centers = list(np.asarray(centers) - np.mean(centers, axis=0))
        widths = np.full(count, 0.045 * box)
        heights = np.ones(count)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    for c, w, h in zip(centers, widths, heights):
        out += h * np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) / (2 * w * w))
    return DensityVolume(out, voxel_size)


def quaternion_to_rotation(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def uniform_quaternion(rng):
    """Haar-uniform unit quaternion ``(w, x, y, z)`` by Shoemake's construction."""
    u1, u2, u3 = rng.random(3)
    a, b = np.sqrt(1 - u1), np.sqrt(u1)
    return np.array([
        b * np.cos(2 * np.pi * u3),
        a * np.sin(2 * np.pi * u2),
        a * np.cos(2 * np.pi * u2),
        b * np.sin(2 * np.pi * u3),
    ])


def uniform_so3_sample(rng):
    return rotation_to_pose(quaternion_to_rotation(uniform_quaternion(rng)))


@dataclass(frozen=True)
class SimConfig:
    K: int = 1000
    snr: float = 0.05
    sigma_t: float = 0.0
    defocus_range: tuple = (10000.0, 30000.0)
    spherical_aberration: float = 2.7
    voltage: float = 300.0
    amplitude_contrast: float = 0.1
    particle_radius: float = None
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.snr > 0:
            raise ValueError("snr must be positive (use inf to disable noise)")
        lo, hi = self.defocus_range
        if not 0 < lo <= hi:
            raise ValueError("defocus range must satisfy 0 < min <= max")


@dataclass
class Dataset:
    images: np.ndarray                   # (K, N, N)
    ctfs: list
    pixel_size: float
    noise_sigma: float = None
    meta: dict = field(default_factory=dict)

    @property
    def K(self):
        return len(self.images)

    @property
    def N(self):
        return self.images.shape[-1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], [self.ctfs[i] for i in idx], self.pixel_size,
                       self.noise_sigma, dict(self.meta))


@dataclass
class Truth:
    """Latent variables of a simulated dataset, kept apart from the images."""

    quaternions: np.ndarray
    rotations: np.ndarray
    shifts: np.ndarray
    defocus: np.ndarray


def disk_pixels(n, pixel_size, radius):
    x = (np.arange(n) - n // 2) * pixel_size
    return np.hypot(x[:, None], x[None, :]) <= radius


def signal_variance(clean, pixel_size, radius):
    """Mean per-pixel variance of noise-free images inside the centred disk."""
    mask = disk_pixels(clean.shape[-1], pixel_size, radius)
    return float(np.mean(np.var(clean[:, mask], axis=1)))


def simulate_dataset(v_true, cfg, projector=None, return_clean=False):
    """Render ``cfg.K`` noisy images of ``v_true`` with random poses, shifts and CTFs.

    Returns
    -------
    dataset : Dataset
    truth : Truth
    clean : ndarray, only when ``return_clean``
    """
    n, vs = v_true.N, v_true.voxel_size
    projector = projector or Projector(n, vs)
    rng = np.random.default_rng([cfg.seed, _STREAM_POSES])
    quats = np.stack([uniform_quaternion(rng) for _ in range(cfg.K)])
    rots = np.stack([quaternion_to_rotation(q) for q in quats])
    shifts = rng.normal(scale=cfg.sigma_t, size=(cfg.K, 2)) if cfg.sigma_t > 0 else np.zeros((cfg.K, 2))
    defocus = rng.uniform(*cfg.defocus_range, size=cfg.K)
    ctfs = [CtfParams(float(d), cfg.spherical_aberration, cfg.voltage, cfg.amplitude_contrast)
            for d in defocus]
    clean = np.empty((cfg.K, n, n))
    chunk = 256
    for s in range(0, cfg.K, chunk):
        sl = slice(s, s + chunk)
        clean[sl] = project_real(projector, v_true, rots[sl], shifts[sl], ctfs[sl])
    radius = cfg.particle_radius or 0.35 * n * vs
    if np.isinf(cfg.snr):
        sigma = 0.0
        images = clean.copy()
    else:
        sigma = float(np.sqrt(signal_variance(clean, vs, radius) / cfg.snr))
        noise = np.random.default_rng([cfg.seed, _STREAM_NOISE]).normal(size=clean.shape)
        images = clean + sigma * noise
    meta = {
        "snr": cfg.snr,
        "snr_convention": "signal pixel variance inside particle disk / noise variance",
        "particle_radius": radius,
        "seed": cfg.seed,
    }
    ds = Dataset(images, ctfs, vs, sigma if sigma > 0 else None, meta)
    truth = Truth(quats, rots, shifts, defocus)
    if return_clean:
        return ds, truth, clean
    return ds, truth
