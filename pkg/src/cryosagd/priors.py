"""Density priors as negative log densities with gradients.

``uniform`` is the improper flat prior. ``exponential`` is an IID exponential
law on voxel values. ``car`` is a conditionally autoregressive Gaussian field
whose full conditionals are ``N(v_i | mean of 26 neighbours, sigma^2)``; the
matching joint density is ``exp(-v^T (I - M) v / (2 sigma^2))`` with ``M`` the
26-neighbour averaging operator under periodic boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .volume import DensityVolume

KINDS = ("uniform", "exponential", "car")


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "uniform"
    lam: float = 1.0
    sigma_car: float = 1.0

    def __post_init__(self):
        kind = {"exp": "exponential"}.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown prior {self.kind!r}; expected one of {KINDS}")
        if kind == "exponential" and not self.lam > 0:
            raise ValueError("exponential prior needs lam > 0")
        if kind == "car" and not self.sigma_car > 0:
            raise ValueError("CAR prior needs sigma_car > 0")


def _data(v):
    if isinstance(v, DensityVolume):
        return v.data
    return np.asarray(v, dtype=np.float64)


def neighbour_mean(x):
    """Mean over the 26 neighbours of every voxel, periodic boundaries."""
    box = uniform_filter(x, size=3, mode="wrap")
    return (27.0 * box - x) / 26.0


def neg_log_prior(v, spec):
    x = _data(v)
    if spec.kind == "uniform":
        return 0.0
    if spec.kind == "exponential":
        if np.any(x < 0):
            raise ValueError("exponential prior is undefined for negative density")
        return float(spec.lam * x.sum() - x.size * np.log(spec.lam))
    r = x - neighbour_mean(x)
    return float(np.sum(x * r) / (2 * spec.sigma_car ** 2))


def neg_log_prior_grad(v, spec):
    x = _data(v)
    if spec.kind == "uniform":
        return np.zeros_like(x)
    if spec.kind == "exponential":
        if np.any(x < 0):
            raise ValueError("exponential prior is undefined for negative density")
        return np.full_like(x, spec.lam)
    # M is symmetric, so the gradient of x^T (I - M) x / 2 is (I - M) x.
    return (x - neighbour_mean(x)) / spec.sigma_car ** 2


def calibrate_lambda(signal_scale, fraction=0.01):
    """Rate whose prior mean ``1 / lam`` is ``fraction`` of ``signal_scale``."""
    if not signal_scale > 0 or not fraction > 0:
        raise ValueError("signal_scale and fraction must be positive")
    return 1.0 / (fraction * signal_scale)
