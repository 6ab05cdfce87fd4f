"""Per-image importance sampling of the three pose factors.

Each factor (view direction, in-plane angle, shift) gets its own multinomial
proposal over its quadrature points, built from the ``log phi`` values that
were computed the last time the image was visited. Those values are
annealed by ``1 / T``, smoothed with a kernel whose bandwidth follows the
quadrature spacing, and mixed with a floor ``alpha * psi`` so every point keeps
nonzero probability. Draws are taken with replacement; repeated draws are
evaluated once and weighted by their multiplicity, which keeps the estimate of
the quadrature sum unbiased.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .imaging import shift_phases
from .likelihood import _as_image_data, evaluate_poses, evaluate_residuals

FACTORS = ("direction", "inplane", "shift")

# Stream tags for stateless seeded generators.
_STREAM_IMAGE = 1


def kernel_vmf(d_i, d_j, kappa):
    """Von Mises-Fisher kernel on unit vectors, scaled so ``K(d, d) = 1``."""
    d_i = np.asarray(d_i, dtype=np.float64)
    d_j = np.asarray(d_j, dtype=np.float64)
    return np.exp(kappa * (np.sum(d_i * d_j, axis=-1) - 1.0))


def kernel_gauss(t_i, t_j, kappa):
    t_i = np.asarray(t_i, dtype=np.float64)
    t_j = np.asarray(t_j, dtype=np.float64)
    return np.exp(-kappa * np.sum((t_i - t_j) ** 2, axis=-1))


def vmf_kappa(spacing):
    """Concentration at which the kernel drops to 1/2 one angular spacing away."""
    return np.log(2.0) / (1.0 - np.cos(spacing))


def gauss_kappa(spacing):
    return np.log(2.0) / spacing ** 2


def alpha_schedule(tau_prev):
    return max(0.05, 2.0 ** (-0.25 * (tau_prev // 50)))


def temperature_schedule(tau_prev):
    """Annealing temperature; infinite (flat) until the first 50 iterations have passed."""
    k = tau_prev // 50
    if k == 0:
        return np.inf
    return max(1.25, 2.0 ** (10.0 / k))


def ess(q):
    q = np.asarray(q, dtype=np.float64)
    return float(1.0 / np.sum(q * q))


def sample_budget(q, s0=10.0):
    if not s0 > 0:
        raise ValueError("s0 must be positive")
    m = len(q)
    return int(min(m, max(1, np.ceil(s0 * ess(q) - 1e-9))))


def kl_divergence(p, q):
    """``KL(p || q)`` for discrete distributions on the same support."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


@dataclass(frozen=True)
class Factor:
    """Quadrature points of one pose factor with their smoothing kernel."""

    name: str
    points: np.ndarray
    weights: np.ndarray
    kappa: float

    def __len__(self):
        return len(self.weights)

    def log_kernel(self, src, kappa=None):
        """``log K`` between source points ``src`` (k, D) and all points, ``(k, M)``."""
        kappa = self.kappa if kappa is None else kappa
        if self.name == "shift":
            d2 = ((src[:, None, :] - self.points[None, :, :]) ** 2).sum(-1)
            return -kappa * d2
        return kappa * (src @ self.points.T - 1.0)


def scheme_factors(scheme):
    """The three :class:`Factor` objects of a quadrature scheme."""
    return (
        Factor("direction", scheme.directions.points, scheme.directions.weights,
               float(vmf_kappa(scheme.directions.angular_spacing))),
        Factor("inplane", scheme.inplanes.points, scheme.inplanes.weights,
               float(vmf_kappa(scheme.inplanes.spacing))),
        Factor("shift", scheme.shifts.points, scheme.shifts.weights,
               float(gauss_kappa(scheme.shifts.spacing))),
    )


@dataclass(frozen=True)
class FactorState:
    """Sampled indices of one factor and their ``log phi`` from the last visit."""

    indices: np.ndarray
    log_phi: np.ndarray
    kappa: float
    generation: int


@dataclass
class ImportanceState:
    """Memory of one image between visits."""

    factors: dict = field(default_factory=dict)
    tau_prev: int = -1
    generation: int = 0

    @property
    def seen(self):
        return self.tau_prev >= 0 and bool(self.factors)


@dataclass(frozen=True)
class ImportanceDistribution:
    q: np.ndarray
    n_samples: int
    alpha: float
    temperature: float

    @property
    def exhaustive(self):
        return self.n_samples >= len(self.q)


def uniform(m):
    return np.full(m, 1.0 / m)


def build_importance(prev, factor, tau_prev, psi=None, s0=10.0, generation=None,
                     alpha=None, temperature=None):
    """Proposal over the points of ``factor`` from the stored state ``prev``.

    Parameters
    ----------
    prev : FactorState or None
        ``None`` for an image that has not been visited; the proposal is then
        ``psi`` with a budget covering every point.
    factor : Factor
    tau_prev : int
        Iteration at which ``prev`` was recorded; drives ``alpha`` and ``T``.
    psi : array, optional
        Floor distribution (uniform by default).
    generation : int, optional
        Generation of the scheme ``factor`` belongs to; a mismatch with
        ``prev.generation`` raises.
    alpha, temperature : float, optional
        Override the schedules.
    """
    m = len(factor)
    psi = uniform(m) if psi is None else np.asarray(psi, dtype=np.float64)
    if prev is None:
        return ImportanceDistribution(psi, m, 1.0, np.inf)
    if generation is not None and prev.generation != generation:
        raise ValueError(
            f"stored state is from scheme generation {prev.generation}, current is {generation}"
        )
    if np.any(prev.indices >= m) or np.any(prev.indices < 0):
        raise ValueError("stored indices out of range for this factor")
    a = alpha_schedule(tau_prev) if alpha is None else float(alpha)
    t = temperature_schedule(tau_prev) if temperature is None else float(temperature)
    if np.isinf(t) or a >= 1.0:
        q = psi
    else:
        src = factor.points[prev.indices]
        log_k = factor.log_kernel(src, prev.kappa)
        log_hat = logsumexp(prev.log_phi[:, None] / t + log_k, axis=0)
        hat = np.exp(log_hat - logsumexp(log_hat))
        q = (1.0 - a) * hat + a * psi
        q = q / q.sum()
    return ImportanceDistribution(q, sample_budget(q, s0), a, t)


@dataclass(frozen=True)
class FactorSample:
    """Distinct sampled indices of a factor and their log estimator weights."""

    indices: np.ndarray
    log_weights: np.ndarray


def draw(dist, weights, rng):
    """Sample ``dist.n_samples`` points; exhaustive budgets enumerate every point."""
    m = len(dist.q)
    if dist.exhaustive:
        return FactorSample(np.arange(m), np.log(weights))
    n = dist.n_samples
    counts = rng.multinomial(n, dist.q)
    idx = np.flatnonzero(counts)
    lw = np.log(weights[idx]) + np.log(counts[idx]) - np.log(n) - np.log(dist.q[idx])
    return FactorSample(idx, lw)


def image_rng(seed, image, tau):
    """Independent generator for one image at one iteration."""
    return np.random.default_rng([int(seed), _STREAM_IMAGE, int(image), int(tau)])


@dataclass
class ImageEstimate:
    """Result of evaluating one image on an importance-sampled pose set."""

    samples: tuple
    evaluation: object
    slices: np.ndarray
    phases: np.ndarray
    fraction_evaluated: float
    rotation_ids: np.ndarray

    @property
    def log_marginal(self):
        return self.evaluation.log_marginal

    def log_phi(self):
        return self.evaluation.log_phi([s.log_weights for s in self.samples])

    def release(self):
        """Drop the slice and phase arrays once they are no longer needed."""
        self.slices = None
        self.phases = None


def sampled_rotation_ids(scheme, d_idx, p_idx):
    return (d_idx[:, None] * len(scheme.inplanes) + p_idx[None, :]).ravel()


@dataclass(frozen=True)
class SliceTable:
    """Precomputed slices for a sorted set of flat rotation ids."""

    ids: np.ndarray
    values: np.ndarray

    @classmethod
    def full(cls, fv, scheme, projector, grid):
        ids = np.arange(scheme.n_rotations)
        return cls(ids, projector.slices(fv, scheme.rotations(ids), grid))

    @classmethod
    def for_ids(cls, ids, fv, scheme, projector, grid):
        ids = np.unique(ids)
        return cls(ids, projector.slices(fv, scheme.rotations(ids), grid))

    def rows(self, ids):
        return np.searchsorted(self.ids, ids)

    def row_index(self, ids):
        """Like :meth:`rows` but a plain slice when ``ids`` covers the whole table."""
        if len(ids) == len(self.ids) and np.array_equal(ids, self.ids):
            return slice(None)
        return self.rows(ids)

    def get(self, ids):
        if len(ids) == len(self.ids) and np.array_equal(ids, self.ids):
            return self.values
        return self.values[self.rows(ids)]


def draw_all(dists, scheme, rng):
    w = (scheme.directions.weights, scheme.inplanes.weights, scheme.shifts.weights)
    return tuple(draw(q, wf, rng) for q, wf in zip(dists, w))


def estimate_image(image, fv, scheme, projector, dists, rng, slice_table=None, samples=None):
    """Importance-sampled evaluation of one image.

    ``image`` is a :class:`~cryosagd.likelihood.ImageData` at the scheme's
    band limit and ``dists`` the three factor proposals. Pre-drawn
    ``samples`` bypass ``rng``; ``slice_table`` supplies precomputed slices.
    """
    if samples is None:
        samples = draw_all(dists, scheme, rng)
    sd, sp, st = samples
    ids = sampled_rotation_ids(scheme, sd.indices, sp.indices)
    if slice_table is None:
        s = projector.slices(fv, scheme.rotations(ids), image.grid)
    else:
        s = slice_table.get(ids)
    s = s.reshape(len(sd.indices), len(sp.indices), image.grid.size)
    ph = shift_phases(image.grid.freqs, scheme.shifts.points[st.indices])
    ev = evaluate_poses(s, image, ph, np.log(scheme.shifts.prior_values[st.indices]),
                        [x.log_weights for x in samples])
    frac = len(sd.indices) * len(sp.indices) * len(st.indices) / scheme.size
    return ImageEstimate(samples, ev, s, ph, frac, ids)


def estimate_batch(images, scheme, table, samples, with_gradient=False, max_entries=2 ** 22):
    """Evaluate several images against one shared :class:`SliceTable`.

    Residual norms of all images come from two matrix products against the
    table, and the gradient with respect to the table's slices is assembled
    the same way, which is much faster than looping :func:`estimate_image`.

    Parameters
    ----------
    images : list of ImageData at the scheme's band limit
    samples : list of per-image factor samples (as from :func:`draw_all`)
    with_gradient : bool
        Also return the gradient of ``-sum log_marginal`` with respect to
        the table values (``d/dRe + i d/dIm`` convention).
    max_entries : int
        Upper bound on ``rows x columns`` of the per-chunk work matrices.

    Returns
    -------
    estimates : list of :class:`ImageEstimate` without slices or phases
    grad : (U, C) complex array or None
    """
    S = table.values
    n_rows = S.shape[0]
    S2 = np.abs(S) ** 2 if len(images) else None
    grad = np.zeros_like(S) if with_gradient else None
    ests = []
    start = 0
    while start < len(images):
        stop, cols = start, 0
        while stop < len(images):
            t = len(samples[stop][2].indices)
            if stop > start and (cols + t) * n_rows > max_entries:
                break
            cols += t
            stop += 1
        chunk = range(start, stop)
        ph = [shift_phases(images[i].grid.freqs, scheme.shifts.points[samples[i][2].indices])
              for i in chunk]
        wc = [images[i].grid.weights * images[i].ctf for i in chunk]
        Y = np.concatenate([(w * np.conj(images[i].coef))[:, None] * p.T
                            for i, w, p in zip(chunk, wc, ph)], axis=1)
        cross = (S @ Y).real
        ct2 = np.stack([w * images[i].ctf for i, w in zip(chunk, wc)])
        model = S2 @ ct2.T
        if with_gradient:
            P = np.zeros((n_rows, len(chunk)))
            Q = np.zeros((n_rows, cols))
        c0 = 0
        for b, i in enumerate(chunk):
            image = images[i]
            sd, sp, st = samples[i]
            t = len(st.indices)
            ids = sampled_rotation_ids(scheme, sd.indices, sp.indices)
            rows = table.row_index(ids)
            res = image.energy - 2.0 * cross[rows, c0:c0 + t] + model[rows, b][:, None]
            res = np.maximum(res, 0.0).reshape(len(sd.indices), len(sp.indices), t)
            ev = evaluate_residuals(res, image, np.log(scheme.shifts.prior_values[st.indices]),
                                    [x.log_weights for x in samples[i]])
            if with_gradient and np.isfinite(ev.log_marginal):
                r = ev.responsibilities.reshape(-1, t)
                P[rows, b] = r.sum(1)
                Q[rows, c0:c0 + t] = r
            frac = len(sd.indices) * len(sp.indices) * t / scheme.size
            ests.append(ImageEstimate(samples[i], ev, None, None, frac, ids))
            c0 += t
        if with_gradient:
            inv = np.array([1.0 / images[i].sigma ** 2 for i in chunk])
            B = np.concatenate([np.conj(p) * (w * images[i].coef * k)[None, :]
                                for i, w, p, k in zip(chunk, wc, ph, inv)], axis=0)
            grad += S * (P @ (ct2 * inv[:, None]))
            grad -= Q @ B.real + 1j * (Q @ B.imag)
        start = stop
    return ests, grad


def is_marginal(img, theta, fv, scheme, sigma, projector, dists, rng):
    """Unbiased importance-sampling estimate of the per-image quadrature sum.

    Returns
    -------
    log_marginal_estimate : float
    log_phi : dict
        Factor name -> ``(indices, log phi)`` for the points that were drawn.
    fraction_evaluated : float
        Share of all (direction, in-plane, shift) triples that were evaluated.
    """
    image = _as_image_data(img, theta, sigma, projector, scheme.rho)
    est = estimate_image(image, fv, scheme, projector, dists, rng)
    phis = est.log_phi()
    out = {name: (s.indices, lp) for name, s, lp in zip(FACTORS, est.samples, phis)}
    return est.log_marginal, out, est.fraction_evaluated


def update_state(state, log_phi, tau, scheme):
    """New state recording the drawn indices and their ``log phi`` at iteration ``tau``.

    ``log_phi`` maps factor name to ``(indices, log phi)`` as returned by
    :func:`is_marginal`.
    """
    factors = scheme_factors(scheme)
    new = {}
    for f in factors:
        idx, lp = log_phi[f.name]
        new[f.name] = FactorState(np.asarray(idx).copy(), np.asarray(lp, dtype=np.float64).copy(),
                                  f.kappa, scheme.generation)
    return ImportanceState(new, int(tau), scheme.generation)


def migrate_state(state, correspondence, generation):
    """Carry a state across a scheme upgrade through nearest-neighbour maps.

    Old points that land on the same new point are merged by summing their
    ``phi``. The kernel bandwidth of the coarser scheme is kept, so the
    stored mass spreads over the finer neighbourhood on the next build.
    """
    if not state.factors:
        return replace(state, generation=generation)
    new = {}
    for name, fs in state.factors.items():
        mapped = np.asarray(correspondence[name])[fs.indices]
        uniq, inv = np.unique(mapped, return_inverse=True)
        lp = np.full(len(uniq), -np.inf)
        np.logaddexp.at(lp, inv, fs.log_phi)
        new[name] = FactorState(uniq, lp, fs.kappa, generation)
    return ImportanceState(new, state.tau_prev, generation)


def build_all(state, scheme, s0=10.0, psi=None):
    """Proposals for all three factors of one image."""
    psi = psi or {}
    factors = scheme_factors(scheme)
    return tuple(
        build_importance(state.factors.get(f.name) if state.seen else None, f, state.tau_prev,
                         psi.get(f.name), s0, scheme.generation)
        for f in factors
    )


__all__ = [
    "FACTORS",
    "Factor",
    "FactorSample",
    "FactorState",
    "ImageEstimate",
    "ImportanceDistribution",
    "ImportanceState",
    "SliceTable",
    "alpha_schedule",
    "build_all",
    "build_importance",
    "draw",
    "draw_all",
    "ess",
    "estimate_batch",
    "estimate_image",
    "gauss_kappa",
    "image_rng",
    "is_marginal",
    "kernel_gauss",
    "kernel_vmf",
    "kl_divergence",
    "migrate_state",
    "sample_budget",
    "sampled_rotation_ids",
    "scheme_factors",
    "temperature_schedule",
    "update_state",
    "vmf_kappa",
]
