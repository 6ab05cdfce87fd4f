"""The full reconstruction loop.

Each iteration draws per-image pose samples from the importance proposals,
evaluates the batch's marginal likelihood and its gradient through one shared
set of slices and one adjoint, and takes a SAGD step. A held-out set tracks
the posterior-expected error; when it stops improving the band limit doubles
(up to ``rho_max``), the quadrature is refined and every image's importance
memory is carried over to the new points.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .evaluation import EmseUnderflow, direction_marginal_average, evaluate_images, rremse
from .imaging import Projector, ctf_eval
from .importance import (
    FACTORS,
    FactorState,
    ImportanceState,
    SliceTable,
    build_all,
    build_importance,
    draw_all,
    ess,
    estimate_batch,
    image_rng,
    kl_divergence,
    migrate_state,
    scheme_factors,
    update_state,
)
from .io import load_checkpoint, save_checkpoint
from .likelihood import ImageData, estimate_noise_sigma
from .priors import PriorSpec, calibrate_lambda, neg_log_prior, neg_log_prior_grad
from .quadrature import build_scheme, upgrade_scheme
from .sagd import (
    L_DECAY,
    NumericalAbort,
    SagdState,
    batch_order,
    epsilon_schedule,
    initial_lipschitz,
    lipschitz_line_search,
    partition_minibatches,
    sagd_step,
)
from .simulate import phantom_spheres
from .volume import DensityVolume, ParticleImage, nyquist

log = logging.getLogger(__name__)

_STREAM_HELDOUT = 31
_STREAM_INIT = 32

DIAGNOSTIC_COLUMNS = (
    "iteration", "rho", "generation", "batch", "epsilon", "L", "line_search",
    "objective", "fraction_evaluated", "ess_direction", "ess_inplane", "ess_shift",
    "heldout_rremse", "epoch_kl", "mean_density",
)


@dataclass
class ReconConfig:
    """Settings of a reconstruction run; ``None`` means derived from the data."""

    batch_size: int = 200
    s0: float = 10.0
    rho_min: float = None
    rho_max: float = None
    sigma_t: float = 0.0
    shift_extent: float = None
    max_iter: int = 5000
    line_search_every: int = 20
    plateau_window: int = 100
    plateau_tol: float = 0.005
    eval_every: int = 25
    n_heldout: int = 100
    eval_s0: float = 100.0
    exhaustive_limit: float = 1e5
    prior: str = "exponential"
    prior_lambda: float = None
    prior_fraction: float = 0.01
    prior_sigma_car: float = None
    noise_sigma: float = None
    particle_radius: float = None
    init: str = "spheres"
    init_spheres: int = 10
    psi: str = "uniform"
    seed: int = 0
    checkpoint_every: int = 0
    footprint: int = 4

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in fields(cls)}
        out = {}
        for k, v in d.items():
            key = k.replace("-", "_")
            if key not in known:
                raise KeyError(f"unknown config key {k!r}")
            out[key] = v
        return cls(**out)

    def to_dict(self):
        return asdict(self)


def _fourier_stack(images):
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(images, axes=(-2, -1)), norm="ortho"),
                           axes=(-2, -1))


def estimate_mass(images, ctfs, pixel_size):
    """Total density from the mean zero-frequency coefficient and the CTF there."""
    dc = np.mean(images.sum(axis=(-2, -1)))
    c0 = np.mean([float(ctf_eval(t, 0.0)) for t in ctfs])
    if c0 == 0:
        raise ValueError("CTF vanishes at zero frequency; cannot estimate mass")
    return dc / c0


def initial_volume(n, voxel_size, mass, count=10, seed=0):
    """Random sphere-sum volume scaled to total density ``mass``."""
    v = phantom_spheres(n, voxel_size, count, seed=seed)
    total = v.data.sum()
    scale = max(mass, 0.0) / total if total > 0 else 0.0
    return DensityVolume(v.data * scale, voxel_size)


class Reconstructor:
    """Stateful driver; :meth:`run` iterates until convergence or ``max_iter``."""

    def __init__(self, dataset, config, init_volume=None, callback=None):
        self.cfg = config
        self.ds = dataset
        self.callback = callback
        n, vs = dataset.N, dataset.pixel_size
        self.n, self.vs = n, vs
        ny = nyquist(vs)
        self.rho_min = config.rho_min or 0.14 * ny
        self.rho_max = min(config.rho_max or 0.56 * ny, ny)
        if not 0 < self.rho_min <= self.rho_max:
            raise ValueError("need 0 < rho_min <= rho_max <= Nyquist")
        self.projector = Projector(n, vs, footprint=config.footprint)

        K = dataset.K
        perm = np.random.default_rng([config.seed, _STREAM_HELDOUT]).permutation(K)
        n_held = min(config.n_heldout, max(K - 1, 0))
        self.heldout = np.sort(perm[:n_held])
        self.train = np.sort(perm[n_held:])
        if len(self.train) == 0:
            raise ValueError("no training images")
        self.batches = [self.train[b] for b in
                        partition_minibatches(len(self.train), config.batch_size, config.seed)]

        self.F = _fourier_stack(dataset.images)
        radius = config.particle_radius or 0.35 * n * vs
        self.sigma = config.noise_sigma or dataset.noise_sigma or self._estimate_sigma(radius)
        self.mass = estimate_mass(dataset.images[self.train], [dataset.ctfs[i] for i in self.train], vs)
        self.prior = self._make_prior()

        if init_volume is None:
            init_volume = initial_volume(n, vs, self.mass, config.init_spheres,
                                         seed=config.seed * 1000 + _STREAM_INIT)
        self.state = SagdState.create(init_volume.data, len(self.batches), 1.0)
        self.scheme = build_scheme(self.rho_min, n, vs, config.sigma_t, config.shift_extent)
        self._set_band(self.scheme.rho)
        self.is_states = [ImportanceState() for _ in range(K)]
        self.epoch_dirs = {}
        self.history = []          # (tau, rremse) within the current band
        self.rows = []
        self.need_line_search = True
        self.L_initialized = False
        self.done = False

    # ------------------------------------------------------------------ setup
    def _estimate_sigma(self, radius):
        sig = [estimate_noise_sigma(ParticleImage(x, self.vs), radius) for x in self.ds.images[:200]]
        return float(np.sqrt(np.mean(np.square(sig))))

    def _make_prior(self):
        c = self.cfg
        kind = {"exp": "exponential"}.get(c.prior, c.prior)
        if kind == "exponential":
            lam = c.prior_lambda
            if lam is None:
                # signal scale: mean density over the particle's bounding ball
                scale = self.mass / (4 / 3 * np.pi * (0.35 * self.n) ** 3)
                lam = calibrate_lambda(scale, c.prior_fraction)
            return PriorSpec("exponential", lam=float(lam))
        if kind == "car":
            s = c.prior_sigma_car
            if s is None:
                s = self.mass / (4 / 3 * np.pi * (0.35 * self.n) ** 3)
            return PriorSpec("car", sigma_car=float(s))
        return PriorSpec(kind)

    def _set_band(self, rho):
        grid = self.projector.grid(rho)
        self.grid = grid
        self.coefs = grid.take(self.F)
        self.ctf_vals = np.stack([ctf_eval(t, grid.radii) for t in self.ds.ctfs])

    def image_data(self, i):
        return ImageData(self.coefs[i], self.ctf_vals[i], float(self.sigma), self.grid)

    # --------------------------------------------------------------- batches
    def _draw(self, batch, tau):
        out = []
        for i in batch:
            dists = build_all(self.is_states[i], self.scheme, self.cfg.s0, self._psi())
            out.append((dists, draw_all(dists, self.scheme, image_rng(self.cfg.seed, i, tau))))
        return out

    def _psi(self):
        if self.cfg.psi != "average":
            return None
        return {"direction": direction_marginal_average(
            [self.is_states[i] for i in self.train], self.scheme)}

    def _evaluate_batch(self, v, batch, draws, with_gradient):
        fv = self.projector.prepare(v)
        ids = [self._rotation_ids(s) for _, s in draws]
        table = SliceTable.for_ids(np.concatenate(ids), fv, self.scheme, self.projector, self.grid)
        images = [self.image_data(i) for i in batch]
        ests, grad_rows = estimate_batch(images, self.scheme, table, [s for _, s in draws],
                                         with_gradient)
        nll = 0.0
        for i, est in zip(batch, ests):
            if not np.isfinite(est.log_marginal):
                raise NumericalAbort(f"image {i}: marginal likelihood underflowed")
            nll -= est.log_marginal
        grad = None
        if with_gradient:
            acc = self.projector.adjoint(grad_rows, self.scheme.rotations(table.ids), self.grid)
            grad = self.projector.real_gradient(acc)
        return nll, grad, ests

    def _rotation_ids(self, samples):
        d, p = samples[0].indices, samples[1].indices
        return (d[:, None] * len(self.scheme.inplanes) + p[None, :]).ravel()

    def _objective(self, batch, draws):
        K = len(self.batches)

        def f(v):
            nll, _, _ = self._evaluate_batch(v, batch, draws, with_gradient=False)
            return nll + neg_log_prior(np.maximum(v, 0), self.prior) / K

        return f

    # ------------------------------------------------------------- iteration
    def step(self):
        st, cfg = self.state, self.cfg
        tau = st.tau
        n_b = len(self.batches)
        k = int(batch_order(n_b, tau // n_b, cfg.seed)[tau % n_b])
        batch = self.batches[k]
        draws = self._draw(batch, tau)
        nll, grad, ests = self._evaluate_batch(st.v, batch, draws, with_gradient=True)
        prior_grad = neg_log_prior_grad(st.v, self.prior)
        objective = nll + neg_log_prior(st.v, self.prior) / n_b

        searched = False
        if self.need_line_search or tau % cfg.line_search_every == 0:
            f = self._objective(batch, draws)
            d = grad + prior_grad / n_b
            if not self.L_initialized:
                st.L = initial_lipschitz(f, st.v, d, L0=st.L)
                self.L_initialized = True
            else:
                st.L = lipschitz_line_search(f, st.v, d, st.L, f0=objective)
            self.need_line_search = False
            searched = True

        eps = epsilon_schedule(tau)
        for i, est in zip(batch, ests):
            phis = {name: (s.indices, lp) for name, s, lp in
                    zip(FACTORS, est.samples, est.log_phi())}
            self.is_states[i] = update_state(self.is_states[i], phis, tau, self.scheme)
        sagd_step(st, k, grad, prior_grad, eps)
        if not searched:
            st.L *= L_DECAY

        frac = float(np.mean([e.fraction_evaluated for e in ests]))
        ess_vals = np.mean([[ess(q.q) for q in dists] for dists, _ in draws], axis=0)
        row = {
            "iteration": tau, "rho": self.scheme.rho, "generation": self.scheme.generation,
            "batch": k, "epsilon": eps, "L": st.L, "line_search": int(searched),
            "objective": objective / len(batch), "fraction_evaluated": frac,
            "ess_direction": ess_vals[0], "ess_inplane": ess_vals[1], "ess_shift": ess_vals[2],
            "heldout_rremse": np.nan, "epoch_kl": np.nan, "mean_density": float(st.v.mean()),
        }
        if (tau + 1) % n_b == 0:
            row["epoch_kl"] = self._epoch_kl()
        if len(self.heldout) and (tau + 1) % cfg.eval_every == 0:
            row["heldout_rremse"] = self.evaluate_heldout(tau)
            self._check_plateau(tau)
        self.rows.append(row)
        if self.callback is not None:
            self.callback(self, row)
        return row

    def _epoch_kl(self):
        """Mean ``KL(curr || prev)`` of per-image direction posteriors between epochs."""
        factor = scheme_factors(self.scheme)[0]
        kls = []
        for i in self.train:
            s = self.is_states[i]
            if not s.seen:
                continue
            q = build_importance(s.factors["direction"], factor, s.tau_prev, alpha=0.05,
                                 temperature=1.0).q
            prev = self.epoch_dirs.get(i)
            if prev is not None and prev[0] == self.scheme.generation:
                kls.append(kl_divergence(q, prev[1]))
            self.epoch_dirs[i] = (self.scheme.generation, q)
        return float(np.mean(kls)) if kls else np.nan

    def evaluate_heldout(self, tau):
        fv = self.projector.prepare(self.state.v)
        idx = self.heldout
        states = [self.is_states[i] for i in idx]
        emse, _, ests = evaluate_images(self.coefs[idx], self.ctf_vals[idx], idx, fv, self.scheme,
                                        self.sigma, self.projector, states, self.cfg.eval_s0,
                                        self.cfg.exhaustive_limit, self.cfg.seed, tau)
        for i, est in zip(idx, ests):
            if np.isfinite(est.log_marginal):
                phis = {name: (s.indices, lp) for name, s, lp in
                        zip(FACTORS, est.samples, est.log_phi())}
                self.is_states[i] = update_state(self.is_states[i], phis, tau, self.scheme)
        ok = np.isfinite(emse)
        if not ok.any():
            raise EmseUnderflow("every held-out image underflowed")
        value = rremse(emse[ok], self.sigma, self.grid.n_full)
        self.history.append((tau, value))
        return value

    def _check_plateau(self, tau):
        cfg = self.cfg
        old = [v for t, v in self.history if t <= tau - cfg.plateau_window]
        if not old:
            return
        prev, cur = old[-1], self.history[-1][1]
        if (prev - cur) / prev >= cfg.plateau_tol:
            return
        if self.scheme.rho >= self.rho_max * (1 - 1e-12):
            self.done = True
            return
        self.upgrade(min(2 * self.scheme.rho, self.rho_max))

    def upgrade(self, rho):
        new, corr = upgrade_scheme(self.scheme, rho)
        log.info("band limit %.5f -> %.5f (generation %d)", self.scheme.rho, rho, new.generation)
        self.is_states = [migrate_state(s, corr, new.generation) for s in self.is_states]
        self.epoch_dirs = {}
        self.scheme = new
        self._set_band(rho)
        self.history = []
        self.need_line_search = True

    def run(self, max_iter=None, checkpoint=None):
        """Iterate until convergence or ``max_iter``; returns the volume."""
        max_iter = self.cfg.max_iter if max_iter is None else max_iter
        t0 = time.perf_counter()
        while not self.done and self.state.tau < max_iter:
            self.step()
            every = self.cfg.checkpoint_every
            if checkpoint is not None and every and self.state.tau % every == 0:
                checkpoint(self)
        log.info("stopped at iteration %d after %.1f s", self.state.tau, time.perf_counter() - t0)
        return DensityVolume(self.state.v.copy(), self.vs)

    # ------------------------------------------------------------ checkpoint
    def state_dict(self):
        """JSON-safe header and array payload capturing everything :meth:`step` reads."""
        st = self.state
        header = {
            "config": self.cfg.to_dict(),
            "tau": st.tau, "L": st.L, "rho": self.scheme.rho,
            "generation": self.scheme.generation, "sigma": self.sigma,
            "need_line_search": self.need_line_search, "L_initialized": self.L_initialized,
            "done": self.done, "history": self.history, "rows": self.rows,
            "n_images": len(self.is_states),
        }
        arrays = {
            "v": st.v, "grad_memory": np.stack(st.grad_memory), "running_sum": st.running_sum,
            "is_tau_prev": np.array([s.tau_prev for s in self.is_states], dtype=np.int64),
            "is_generation": np.array([s.generation for s in self.is_states], dtype=np.int64),
        }
        for name in FACTORS:
            counts, idx, lp, kap, gen = [], [], [], [], []
            for s in self.is_states:
                fs = s.factors.get(name)
                if fs is None:
                    counts.append(0)
                    kap.append(np.nan)
                    gen.append(-1)
                    continue
                counts.append(len(fs.indices))
                idx.append(fs.indices)
                lp.append(fs.log_phi)
                kap.append(fs.kappa)
                gen.append(fs.generation)
            arrays[f"{name}_counts"] = np.array(counts, dtype=np.int64)
            arrays[f"{name}_indices"] = (np.concatenate(idx).astype(np.int64) if idx
                                         else np.zeros(0, np.int64))
            arrays[f"{name}_log_phi"] = np.concatenate(lp) if lp else np.zeros(0)
            arrays[f"{name}_kappa"] = np.array(kap)
            arrays[f"{name}_generation"] = np.array(gen, dtype=np.int64)
        ids = sorted(self.epoch_dirs)
        arrays["epoch_ids"] = np.array(ids, dtype=np.int64)
        arrays["epoch_generation"] = np.array([self.epoch_dirs[i][0] for i in ids], dtype=np.int64)
        arrays["epoch_q"] = (np.stack([self.epoch_dirs[i][1] for i in ids]) if ids
                             else np.zeros((0, len(self.scheme.directions))))
        return header, arrays

    def load_state_dict(self, header, arrays):
        if header["n_images"] != len(self.is_states):
            raise ValueError("checkpoint was written for a different dataset size")
        self.scheme = build_scheme(header["rho"], self.n, self.vs, self.cfg.sigma_t,
                                   self.cfg.shift_extent, header["generation"])
        self._set_band(self.scheme.rho)
        self.sigma = header["sigma"]
        st = self.state
        st.v = arrays["v"].copy()
        st.grad_memory = [g.copy() for g in arrays["grad_memory"]]
        st.running_sum = arrays["running_sum"].copy()
        st.L, st.tau = header["L"], header["tau"]
        self.need_line_search = header["need_line_search"]
        self.L_initialized = header["L_initialized"]
        self.done = header["done"]
        self.history = [tuple(h) for h in header["history"]]
        self.rows = header["rows"]
        per_factor = {}
        for name in FACTORS:
            counts = arrays[f"{name}_counts"]
            offs = np.concatenate([[0], np.cumsum(counts)])
            per_factor[name] = (counts, offs)
        states = []
        for i in range(len(self.is_states)):
            factors = {}
            for name in FACTORS:
                counts, offs = per_factor[name]
                if counts[i] == 0:
                    continue
                sl = slice(offs[i], offs[i + 1])
                factors[name] = FactorState(arrays[f"{name}_indices"][sl].copy(),
                                            arrays[f"{name}_log_phi"][sl].copy(),
                                            float(arrays[f"{name}_kappa"][i]),
                                            int(arrays[f"{name}_generation"][i]))
            states.append(ImportanceState(factors, int(arrays["is_tau_prev"][i]),
                                          int(arrays["is_generation"][i])))
        self.is_states = states
        self.epoch_dirs = {int(i): (int(g), q.copy()) for i, g, q in
                           zip(arrays["epoch_ids"], arrays["epoch_generation"], arrays["epoch_q"])}

    def save(self, path):
        header, arrays = self.state_dict()
        save_checkpoint(path, header, arrays)

    def restore(self, path):
        header, arrays = load_checkpoint(path)
        self.load_state_dict(header, arrays)

    @property
    def volume(self):
        return DensityVolume(self.state.v.copy(), self.vs)


def run_reconstruction(dataset, config, init_volume=None, max_iter=None, callback=None):
    """Reconstruct a volume; returns ``(DensityVolume, diagnostics rows)``."""
    rec = Reconstructor(dataset, config, init_volume, callback)
    vol = rec.run(max_iter)
    return vol, rec.rows
