"""Stochastic average gradient descent with a projected Lipschitz line search.

The objective is split over ``K`` minibatches, ``f = sum_k f_k`` with
``f_k = nll_k + neglogprior / K``. Each iteration refreshes the stored
likelihood gradient of one batch, keeps a running sum over all stored
gradients, and steps along

    v <- max(0, v - eps / (K L) * (sum_k dV_k + grad neglogprior)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Stream tags for seeded generators.
_STREAM_PARTITION = 21
_STREAM_BATCH_ORDER = 22

L_DECAY = 2.0 ** (-1.0 / 150.0)
MAX_DOUBLINGS = 60


class NumericalAbort(RuntimeError):
    """Raised when the optimizer meets non-finite values or an unreachable line search."""


def partition_minibatches(K, batch_size, seed=0):
    """Seeded split of ``range(K)`` into ``ceil(K / batch_size)`` batches of near-equal size."""
    if K <= 0:
        raise ValueError("cannot partition an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n_batches = int(np.ceil(K / batch_size))
    perm = np.random.default_rng([seed, _STREAM_PARTITION]).permutation(K)
    return [np.sort(b) for b in np.array_split(perm, n_batches)]


def batch_order(n_batches, epoch, seed=0):
    """Permutation of batch indices for one epoch."""
    return np.random.default_rng([seed, _STREAM_BATCH_ORDER, epoch]).permutation(n_batches)


def epsilon_schedule(tau):
    if tau < 0:
        raise ValueError("tau must be >= 0")
    return max(1.0 / 16.0, 2.0 ** (1 - tau // 150))


@dataclass
class SagdState:
    v: np.ndarray
    grad_memory: list
    running_sum: np.ndarray
    L: float
    tau: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, v, n_batches, L):
        v = np.maximum(np.asarray(v, dtype=np.float64), 0.0)
        mem = [np.zeros_like(v) for _ in range(n_batches)]
        return cls(v, mem, np.zeros_like(v), float(L))

    @property
    def n_batches(self):
        return len(self.grad_memory)

    def drift(self):
        """Relative gap between the running sum and a fresh sum of the memories."""
        fresh = np.sum(self.grad_memory, axis=0)
        scale = max(np.linalg.norm(fresh), 1e-300)
        return float(np.linalg.norm(self.running_sum - fresh) / scale)

    def resync(self):
        self.running_sum = np.sum(self.grad_memory, axis=0)


def sagd_step(state, k, batch_grad, prior_grad, epsilon, project=True):
    """Replace batch ``k``'s stored gradient and take one averaged step (in place)."""
    if state.L <= 0:
        raise ValueError("L must be positive")
    if not np.all(np.isfinite(batch_grad)):
        raise NumericalAbort(f"non-finite batch gradient at iteration {state.tau}")
    state.running_sum += batch_grad - state.grad_memory[k]
    state.grad_memory[k] = np.array(batch_grad, dtype=np.float64, copy=True)
    step = epsilon / (state.n_batches * state.L)
    v = state.v - step * (state.running_sum + prior_grad)
    state.v = np.maximum(v, 0.0) if project else v
    state.tau += 1
    return state


def sufficient_decrease(f, v, d, L, f0=None, project=True):
    """Whether ``f`` drops enough along ``-d / L`` for ``L`` to pass as a Lipschitz bound.

    Without projection the test is ``f(v) - f(v - d/L) >= |d|^2 / (2L)``. With
    positivity, ``d`` is replaced by the gradient mapping ``L (v - v+)`` where
    ``v+`` is the projected point, which reduces to the former away from the
    boundary.
    """
    f0 = f(v) if f0 is None else f0
    trial = v - d / L
    if project:
        trial = np.maximum(trial, 0.0)
        g = L * (v - trial)
    else:
        g = d
    return f0 - f(trial) >= np.vdot(g, g).real / (2 * L)


def lipschitz_line_search(f, v, d, L, f0=None, project=True):
    """Double ``L`` until the sufficient-decrease condition holds."""
    if not np.any(d):
        return L
    f0 = f(v) if f0 is None else f0
    for _ in range(MAX_DOUBLINGS):
        if sufficient_decrease(f, v, d, L, f0, project):
            return L
        L *= 2.0
    raise NumericalAbort("line search did not converge; gradient may be inconsistent")


def initial_lipschitz(f, v, d, L0=1.0, steps=8, project=True):
    """Bisection (in log scale) between the largest failing and smallest passing ``L``."""
    if not np.any(d):
        return L0
    f0 = f(v)
    lo, hi = None, None
    L = L0
    for _ in range(MAX_DOUBLINGS):
        if sufficient_decrease(f, v, d, L, f0, project):
            hi = L
            if lo is not None:
                break
            L /= 2.0
        else:
            lo = L
            if hi is not None:
                break
            L *= 2.0
    if hi is None:
        raise NumericalAbort("could not find a passing Lipschitz constant")
    if lo is None:
        return hi
    for _ in range(steps):
        mid = np.sqrt(lo * hi)
        if sufficient_decrease(f, v, d, mid, f0, project):
            hi = mid
        else:
            lo = mid
    return hi
