"""Kernel profiles, their derivatives, and distance metrics.

These are the pluggable pieces of the weighted-KDE routing objective: a
bounded non-increasing profile k(x) applied to a distance d(v - u).  All
functions here accept plain arrays or autograd Vars, so routing can be
traced through them unchanged.

Density values use z_k = 1: the normalization constant cancels wherever
routing renormalizes its weights, so densities are comparable only within
a fixed kernel choice.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError, DomainError, ShapeError

GAUSSIAN = "gaussian"
EPANECHNIKOV = "epanechnikov"
PROFILES = (GAUSSIAN, EPANECHNIKOV)

L1 = "l1"
L2_SQUARED = "l2sq"
COSINE_VARIANT = "cosine"
METRICS = (L1, L2_SQUARED, COSINE_VARIANT)


@dataclass(frozen=True)
class KernelSpec:
    """Profile + metric choice.  The cosine metric is only legal on the
    routing-by-agreement variant path; constructing the pair is allowed,
    pairing it with the other routing methods is rejected there."""

    profile: str = EPANECHNIKOV
    metric: str = L1

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; expected one of {METRICS}")


def _check_nonneg(x, what):
    if np.any(np.asarray(ag.val(x)) < 0):
        raise DomainError(f"{what} requires a nonnegative argument")


def profile(spec: KernelSpec, x):
    """k(x): gaussian -> exp(-x/2); epanechnikov -> 1-x on [0,1), else 0."""
    _check_nonneg(x, "profile")
    if spec.profile == GAUSSIAN:
        return ag.exp(ag.mul(x, -0.5))
    return ag.relu(ag.sub(1.0, x))


def profile_derivative(spec: KernelSpec, x):
    """k'(x): gaussian -> -exp(-x/2)/2; epanechnikov -> -1 on [0,1), 0 beyond.

    The epanechnikov breakpoint at x=1 takes the right-continuous value 0,
    which keeps routing weights finite.
    """
    _check_nonneg(x, "profile_derivative")
    if spec.profile == GAUSSIAN:
        return ag.mul(ag.exp(ag.mul(x, -0.5)), -0.5)
    xv = np.asarray(ag.val(x))
    return np.where(xv < 1.0, -1.0, 0.0).astype(xv.dtype if xv.dtype.kind == "f" else np.float64)


def distance_along_axis(metric: str, u, v, axis=-1):
    """Distance between u and v reduced along ``axis`` (broadcasting allowed).

    l1 -> sum |u-v|; l2sq -> sum (u-v)^2; cosine -> 1 - sum u*v (may be
    negative; callers control vector scale, nothing is normalized here).
    """
    if metric == L1:
        return ag.reduce_sum(ag.absolute(ag.sub(u, v)), axis=axis)
    if metric == L2_SQUARED:
        d = ag.sub(u, v)
        return ag.reduce_sum(ag.mul(d, d), axis=axis)
    if metric == COSINE_VARIANT:
        return ag.sub(1.0, ag.reduce_sum(ag.mul(u, v), axis=axis))
    raise ConfigError(f"unknown metric {metric!r}")


def distance(metric: str, u, v) -> float:
    """Scalar distance between two same-shape tensors (flattened)."""
    uv, vv = np.asarray(u), np.asarray(v)
    if uv.shape != vv.shape:
        raise ShapeError(f"distance shape mismatch: {uv.shape} vs {vv.shape}")
    return float(distance_along_axis(metric, uv.reshape(-1), vv.reshape(-1), axis=0))


def elementwise_distance(metric: str, diff):
    """Per-dimension distance of a difference: |x| for l1, x^2 for l2sq.

    The cosine metric has no per-dimension decomposition and is rejected.
    """
    if metric == L1:
        return ag.absolute(diff)
    if metric == L2_SQUARED:
        return ag.mul(diff, diff)
    raise ConfigError(f"metric {metric!r} has no per-dimension form")


def kde_density(samples, query, spec: KernelSpec) -> float:
    """Kernel density estimate at ``query``: mean of k(d(query - u_i))."""
    samples = [np.asarray(s, dtype=np.float64).reshape(-1) for s in samples]
    if not samples:
        raise ShapeError("kde_density needs at least one sample")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if any(s.shape != q.shape for s in samples):
        raise ShapeError("kde_density sample/query shapes disagree")
    stacked = np.stack(samples)
    dists = distance_along_axis(spec.metric, q[None, :], stacked, axis=-1)
    return float(np.mean(profile(spec, dists)))
