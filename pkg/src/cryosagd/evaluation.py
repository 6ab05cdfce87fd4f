"""Posterior-expected image error, its dataset summary, and pose diagnostics.

The expected squared error of an image is the posterior mean over poses of
``|I - C S_t P_R V|^2``. Normalised by the noise variance and the number of
in-band coefficients, its root mean over a test set is ~1 when the residual
is pure noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .importance import (
    ImportanceDistribution,
    SliceTable,
    build_all,
    build_importance,
    draw_all,
    estimate_batch,
    estimate_image,
    image_rng,
    kl_divergence,
    sampled_rotation_ids,
    scheme_factors,
)
from .likelihood import ImageData, _as_image_data
from .quadrature import build_scheme
from .volume import DensityVolume


class EmseUnderflow(FloatingPointError):
    """All pose terms of an image vanished; the expectation is undefined."""


def expected_mse(img, theta, fv, scheme, sigma, projector, dists=None, rng=None):
    """Posterior-expected squared residual of one image over the in-band coefficients.

    With ``dists=None`` every quadrature point is evaluated; otherwise the
    three proposals in ``dists`` drive an importance-sampled estimate that
    shares its pose evaluations with the likelihood estimate.
    """
    image = _as_image_data(img, theta, sigma, projector, scheme.rho)
    if dists is None:
        dists = exhaustive_dists(scheme)
    rng = rng or np.random.default_rng(0)
    est = estimate_image(image, fv, scheme, projector, dists, rng)
    return emse_from_evaluation(est.evaluation)


def exhaustive_dists(scheme):
    return tuple(ImportanceDistribution(np.full(len(f), 1.0 / len(f)), len(f), 1.0, np.inf)
                 for f in scheme_factors(scheme))


def emse_from_evaluation(ev):
    if not np.isfinite(ev.log_marginal):
        raise EmseUnderflow("all pose terms vanished")
    return ev.expected_sq_error


def rremse(emse, sigma, n_coef):
    """Root of the mean expected error per coefficient relative to ``sigma^2``.

    Parameters
    ----------
    emse : sequence of per-image expected squared errors
    sigma : noise standard deviation
    n_coef : number of in-band coefficients each error sums over
    """
    emse = np.asarray(emse, dtype=np.float64)
    if emse.size == 0:
        raise ValueError("need at least one test image")
    return float(np.sqrt(np.sum(emse) / (sigma ** 2 * n_coef * emse.size)))


def direction_distribution(state, factor, generation=None):
    """Direction proposal an image would use next, or uniform if never seen."""
    prev = state.factors.get("direction") if state.seen else None
    return build_importance(prev, factor, state.tau_prev, generation=generation).q


def direction_marginal_average(states, scheme):
    """Dataset mean of the per-image direction proposals; sums to one."""
    factor = scheme_factors(scheme)[0]
    qs = [direction_distribution(s, factor, scheme.generation) for s in states]
    q = np.mean(qs, axis=0)
    return q / q.sum()


def write_direction_csv(path, scheme, q):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "probability"])
        for d, p in zip(scheme.directions.points, q):
            w.writerow([repr(float(d[0])), repr(float(d[1])), repr(float(d[2])), repr(float(p))])


def epoch_kl(phi_prev, phi_curr):
    """``KL(curr || prev)`` between direction distributions of consecutive epochs."""
    return kl_divergence(phi_curr, phi_prev)


@dataclass
class EvalReport:
    rremse: float
    rho: float
    per_image_emse: list = field(default_factory=list)
    mean_fraction_evaluated: float = float("nan")
    direction_marginal: np.ndarray = None
    epoch_kl: list = field(default_factory=list)
    flagged: list = field(default_factory=list)


def evaluate_images(coefs, ctfs, indices, fv, scheme, sigma, projector, states=None, s0=100.0,
                    exhaustive_limit=1e5, seed=0, tau=0):
    """Expected errors of a set of images sharing one volume.

    Parameters
    ----------
    coefs, ctfs : (n, C) half-disk coefficients and CTF values at ``scheme.rho``
    indices : image ids used to seed per-image generators
    states : per-image :class:`ImportanceState` list, required when the
        scheme is too large for exhaustive evaluation

    Returns
    -------
    emse : (n,) array, ``nan`` where the image underflowed
    fractions : (n,) share of quadrature points evaluated
    estimates : list of :class:`ImageEstimate`
    """
    grid = projector.grid(scheme.rho)
    exhaustive = scheme.size <= exhaustive_limit or states is None
    images = [ImageData(coefs[j], ctfs[j], float(sigma), grid) for j in range(len(indices))]
    if exhaustive:
        full = exhaustive_dists(scheme)
        samples = [draw_all(full, scheme, None)] * len(images)
        table = SliceTable.full(fv, scheme, projector, grid)
    else:
        samples = [draw_all(build_all(states[j], scheme, s0), scheme, image_rng(seed, i, tau))
                   for j, i in enumerate(indices)]
        ids = np.concatenate([sampled_rotation_ids(scheme, s[0].indices, s[1].indices)
                              for s in samples])
        table = SliceTable.for_ids(ids, fv, scheme, projector, grid)
    ests, _ = estimate_batch(images, scheme, table, samples)
    out = []
    for est in ests:
        try:
            out.append(emse_from_evaluation(est.evaluation))
        except EmseUnderflow:
            out.append(np.nan)
    frac = [est.fraction_evaluated for est in ests]
    return np.asarray(out), np.asarray(frac), ests


# ---------------------------------------------------------------------------
# Volume alignment for comparing a reconstruction with a reference.

def _rotate(vol, R, order=1):
    """Resample ``vol`` so that ``out(x) = vol(R^T x)`` about the box centre."""
    n = vol.shape[0]
    c = n // 2
    offset = c - R.T @ np.full(3, c)
    return ndimage.affine_transform(vol, R.T, offset=offset, order=order, mode="constant")


def _best_translation(ref_hat, mov):
    """Circular shift maximizing cross-correlation and the correlation value."""
    m = np.fft.fftn(mov - mov.mean())
    cc = np.fft.ifftn(ref_hat * np.conj(m)).real
    idx = np.unravel_index(np.argmax(cc), cc.shape)
    return idx, cc[idx]


def correlation(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


def downsample(vol, m):
    """Fourier-crop a cubic array to side ``m`` (band-limited resampling)."""
    n = vol.shape[0]
    f = np.fft.fftshift(np.fft.fftn(vol))
    lo = n // 2 - m // 2
    f = f[lo:lo + m, lo:lo + m, lo:lo + m]
    return np.fft.ifftn(np.fft.ifftshift(f)).real * (m / n) ** 3


def _search(ref, candidates, rots):
    ref_hat = np.fft.fftn(ref - ref.mean())
    best = (-np.inf, 0, np.eye(3), (0, 0, 0))
    for m, v in enumerate(candidates):
        for R in rots:
            shift, c = _best_translation(ref_hat, _rotate(v, R))
            if c > best[0]:
                best = (c, m, R, shift)
    return best


def align_volumes(reference, volume, coarse_size=16, coarse_rho_cells=3.0, refine_steps=4,
                  mirror=True):
    """Rotate (and optionally mirror) ``volume`` onto ``reference``.

    The coarse search runs on Fourier-cropped copies of side ``coarse_size``
    over the direction x in-plane quadrature whose outer shell sits
    ``coarse_rho_cells`` lattice cells out, with FFT translation alignment
    at each node. The best node is then refined at full size by local
    rotations of shrinking angle.

    Returns
    -------
    aligned : DensityVolume
    corr : float
        Real-space correlation of the aligned volume with ``reference``.
    """
    ref = reference.data
    vol = volume.data
    n, vs = reference.N, reference.voxel_size
    candidates = [vol, vol[::-1].copy()] if mirror else [vol]
    m = min(coarse_size, n)
    scheme = build_scheme(coarse_rho_cells / (m * vs), m, vs, 0.0)
    _, mi, R, _ = _search(downsample(ref, m), [downsample(c, m) for c in candidates],
                          scheme.rotations())
    v = candidates[mi]
    ref_hat = np.fft.fftn(ref - ref.mean())

    def score(Rt):
        shift, c = _best_translation(ref_hat, _rotate(v, Rt))
        return c, shift

    best_c, shift = score(R)
    step = scheme.directions.angular_spacing / 2
    for _ in range(refine_steps):
        improved = True
        while improved:
            improved = False
            for axis in np.eye(3):
                for sgn in (-1, 1):
                    Rt = Rotation.from_rotvec(sgn * step * axis).as_matrix() @ R
                    c, s = score(Rt)
                    if c > best_c:
                        best_c, R, shift, improved = c, Rt, s, True
        step /= 2
    moved = np.roll(_rotate(v, R, order=3), shift, axis=(0, 1, 2))
    return DensityVolume(moved, vs), correlation(ref, moved)


__all__ = [
    "EmseUnderflow",
    "EvalReport",
    "align_volumes",
    "correlation",
    "downsample",
    "direction_distribution",
    "direction_marginal_average",
    "emse_from_evaluation",
    "epoch_kl",
    "evaluate_images",
    "exhaustive_dists",
    "expected_mse",
    "rremse",
    "write_direction_csv",
]
