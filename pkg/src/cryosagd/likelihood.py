"""Per-image marginal likelihood over quadrature poses, in the log domain.

For image coefficients ``I``, CTF ``c``, shift phase ``E_t`` and slice ``S_r``
the squared residual expands as

    |I|^2 - 2 Re <c E_t S_r, I> + |c S_r|^2,

so all pose pairs of an image come from one complex matrix product. Sums over
the three factors (direction, in-plane angle, shift) carry per-point log
weights; with exhaustive weights the result is the plain quadrature sum and
with importance weights it is the importance-sampling estimate of it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .imaging import ctf_eval, shift_phases
from .volume import ParticleImage


def gaussian_log_const(n_coef, sigma):
    """Log normalizer of an isotropic Gaussian over ``n_coef`` real degrees of freedom."""
    return -0.5 * n_coef * np.log(2 * np.pi * sigma ** 2)


@dataclass
class ImageData:
    """Half-disk view of one observed image at the current band limit."""

    coef: np.ndarray      # (C,) complex
    ctf: np.ndarray       # (C,) real
    sigma: float
    grid: object

    @classmethod
    def from_fourier(cls, img, theta, sigma, grid):
        return cls(grid.take(img.data), ctf_eval(theta, grid.radii), float(sigma), grid)

    @property
    def energy(self):
        return float(np.sum(self.grid.weights * np.abs(self.coef) ** 2))


@dataclass
class PoseEvaluation:
    """Everything one image contributes for a product set of sampled poses.

    ``log_terms[d, p, t]`` holds ``log a_d + log a_p + log a_t + log p_{dpt}``
    where ``a`` are the (quadrature or importance) weights.
    """

    log_terms: np.ndarray
    residuals: np.ndarray     # (n_d, n_p, n_t) full-disk squared residual norms
    log_marginal: float

    @property
    def responsibilities(self):
        return np.exp(self.log_terms - self.log_marginal)

    def log_phi(self, log_a):
        """Per-factor log phi: the sum over the other two factors, own weight removed."""
        out = []
        for axis, la in enumerate(log_a):
            other = tuple(a for a in range(3) if a != axis)
            out.append(logsumexp(self.log_terms, axis=other) - la)
        return out

    @property
    def expected_sq_error(self):
        return float(np.sum(self.responsibilities * self.residuals))


def residual_norms(slices, image, phases):
    """Full-disk squared residuals for every (rotation, shift) pair, ``(R, T)``."""
    w = image.grid.weights
    wc = w * image.ctf
    y = (wc * np.conj(image.coef))[:, None] * phases.T
    cross = (slices @ y).real
    model = (np.abs(slices) ** 2) @ (wc * image.ctf)
    res = image.energy - 2.0 * cross + model[:, None]
    return np.maximum(res, 0.0)


def evaluate_poses(slices, image, phases, log_shift_prior, log_a):
    """Evaluate ``p_{dpt}`` on a product set and combine with the factor weights.

    Parameters
    ----------
    slices : (n_d, n_p, C) complex
    image : ImageData
    phases : (n_t, C) complex shift phases
    log_shift_prior : (n_t,) log prior density at the shifts
    log_a : three arrays of log weights for directions, in-plane angles, shifts
    """
    n_d, n_p, c = slices.shape
    res = residual_norms(slices.reshape(-1, c), image, phases).reshape(n_d, n_p, -1)
    return evaluate_residuals(res, image, log_shift_prior, log_a)


def evaluate_residuals(res, image, log_shift_prior, log_a):
    """:func:`evaluate_poses` for precomputed residual norms ``res`` of shape ``(n_d, n_p, n_t)``."""
    logp = -res / (2 * image.sigma ** 2) + gaussian_log_const(image.grid.n_full, image.sigma)
    logp = logp + log_shift_prior[None, None, :]
    la_d, la_p, la_t = log_a
    terms = logp + la_d[:, None, None] + la_p[None, :, None] + la_t[None, None, :]
    return PoseEvaluation(terms, res, float(logsumexp(terms)))


def slice_gradient(evaluation, slices, image, phases):
    """Gradient of ``-log_marginal`` w.r.t. the half-disk slice values, ``(n_d, n_p, C)``.

    Uses the ``d/dRe + i d/dIm`` convention, so that ``df = Re<g, dS>``.
    """
    n_d, n_p, c = slices.shape
    r = evaluation.responsibilities.reshape(n_d * n_p, -1)
    s = slices.reshape(-1, c)
    w = image.grid.weights / image.sigma ** 2
    g = (w * image.ctf ** 2)[None, :] * s * r.sum(1)[:, None]
    g -= (w * image.ctf * image.coef)[None, :] * (r @ np.conj(phases))
    return g.reshape(n_d, n_p, c)


def full_log_weights(scheme):
    """Exhaustive log weights ``(log w_d, log w_p, log w_t)`` for a scheme."""
    return (
        np.log(scheme.directions.weights),
        np.log(scheme.inplanes.weights),
        np.log(scheme.shifts.weights),
    )


def _as_image_data(img, theta, sigma, projector, rho):
    grid = projector.grid(rho)
    if abs(img.rho - rho) > 1e-12 * rho:
        raise ValueError(f"image band limit {img.rho} does not match scheme rho {rho}")
    return ImageData.from_fourier(img, theta, sigma, grid)


def _all_slices(fv, scheme, projector, grid):
    s = projector.slices(fv, scheme.rotations(), grid)
    return s.reshape(len(scheme.directions), len(scheme.inplanes), grid.size)


def per_point_loglik(img, theta, R, t, fv, sigma, projector):
    """``log N(I | C S_t P_R V, sigma^2)`` over the in-band coefficients."""
    image = _as_image_data(img, theta, sigma, projector, img.rho)
    s = projector.slices(fv, np.asarray(R)[None], image.grid)
    ph = shift_phases(image.grid.freqs, np.asarray(t, dtype=np.float64)[None])
    res = residual_norms(s, image, ph)[0, 0]
    return float(-res / (2 * sigma ** 2) + gaussian_log_const(image.grid.n_full, sigma))


def exact_marginal(img, theta, fv, scheme, sigma, projector):
    """Log of the full quadrature sum plus normalized log phi per orientation and shift.

    Returns
    -------
    log_marginal : float
    log_phi_R : (M_d, M_p) normalized log phi over orientations
    log_phi_t : (M_t,) normalized log phi over shifts
    """
    image = _as_image_data(img, theta, sigma, projector, scheme.rho)
    ev = _evaluate_scheme(fv, scheme, projector, image)[0]
    la = full_log_weights(scheme)
    phi_r = logsumexp(ev.log_terms, axis=2) - la[0][:, None] - la[1][None, :]
    phi_t = logsumexp(ev.log_terms, axis=(0, 1)) - la[2]
    return ev.log_marginal, phi_r - logsumexp(phi_r), phi_t - logsumexp(phi_t)


def _evaluate_scheme(fv, scheme, projector, image):
    s = _all_slices(fv, scheme, projector, image.grid)
    ph = shift_phases(image.grid.freqs, scheme.shifts.points)
    return evaluate_poses(s, image, ph, np.log(scheme.shifts.prior_values),
                          full_log_weights(scheme)), s, ph


def marginal_gradient(img, theta, v, scheme, sigma, projector):
    """Gradient of ``-log p(I | theta, V)`` with respect to the real voxels of ``v``."""
    image = _as_image_data(img, theta, sigma, projector, scheme.rho)
    fv = projector.prepare(v)
    ev, s, ph = _evaluate_scheme(fv, scheme, projector, image)
    g = slice_gradient(ev, s, image, ph)
    acc = projector.adjoint(g.reshape(-1, image.grid.size), scheme.rotations(), image.grid)
    return projector.real_gradient(acc)


def responsibilities(img, theta, fv, scheme, sigma, projector):
    image = _as_image_data(img, theta, sigma, projector, scheme.rho)
    return _evaluate_scheme(fv, scheme, projector, image)[0].responsibilities


def estimate_noise_sigma(img, particle_radius):
    """Standard deviation of the pixels outside a centered disk of ``particle_radius`` A."""
    if isinstance(img, ParticleImage):
        data, pixel = img.data, img.pixel_size
    else:
        data, pixel = np.asarray(img, dtype=np.float64), 1.0
    n = data.shape[-1]
    if particle_radius >= n * pixel / 2:
        raise ValueError("particle radius leaves no boundary region")
    x = (np.arange(n) - n // 2) * pixel
    mask = np.hypot(x[:, None], x[None, :]) > particle_radius
    if not mask.any():
        raise ValueError("empty boundary region")
    return float(np.std(data[..., mask]))


__all__ = [
    "ImageData",
    "PoseEvaluation",
    "estimate_noise_sigma",
    "evaluate_poses",
    "evaluate_residuals",
    "exact_marginal",
    "full_log_weights",
    "gaussian_log_const",
    "marginal_gradient",
    "per_point_loglik",
    "residual_norms",
    "responsibilities",
    "slice_gradient",
]
