"""Match weights between transformed model points and scene points.

Two regimes: hard nearest-neighbor assignment, and a probabilistic
posterior in which each scene point j carries a prior row pi_ij over
model points (from a Gaussian region kernel) that multiplies a Gaussian
likelihood exp(-|s_j - m_i|^2 / sigma_m).  Rows are normalized to
probability vectors; the exponent is stabilized by max-subtraction so a
row can never underflow to zero.
"""

from dataclasses import dataclass

import numpy as np

from .bspline import HybridWeights
from .grid import PointSet


def _points(p):
    return np.asarray(getattr(p, "points", p), dtype=np.float64) \
        .reshape(-1, 3)


@dataclass(frozen=True)
class RegionPriors:
    """Per-region prior over model points.

    `pi` has one row per scene/seed region j and one column per model
    point i; each row is a probability vector.  `region_centers` are the
    points d_j the kernel was evaluated from, kept for provenance and
    serialization.
    """

    pi: np.ndarray
    region_centers: PointSet
    kernel_sigma: float

    def __post_init__(self):
        arr = np.asarray(self.pi, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("priors must be a 2-d matrix")
        if arr.size and arr.min() < 0.0:
            raise ValueError("prior entries must be nonnegative")
        if arr.size and np.max(np.abs(arr.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("every prior row must sum to 1")
        if self.kernel_sigma <= 0:
            raise ValueError("kernel_sigma must be positive")
        object.__setattr__(self, "pi", arr)

    @property
    def n_regions(self):
        return self.pi.shape[0]

    @property
    def n_model(self):
        return self.pi.shape[1]


def icp_weights(model_pts, scene_pts):
    """Hard assignment: each scene point matches its nearest model point.

    Ties are broken toward the lowest model index.  Raises on an empty
    model set.
    """
    m = _points(model_pts)
    s = _points(scene_pts)
    if len(m) == 0:
        raise ValueError("model point set must be nonempty")
    w = np.zeros((len(s), len(m)))
    if len(s):
        d2 = ((s[:, None, :] - m[None, :, :]) ** 2).sum(axis=2)
        w[np.arange(len(s)), np.argmin(d2, axis=1)] = 1.0
    return HybridWeights(w)


def region_priors(model_pts, centers, kernel_sigma):
    """Gaussian region kernel over model points, row-normalized.

    pi_ij = G(m_i - d_j) / sum_i G(m_i - d_j) with an isotropic Gaussian
    G of standard deviation `kernel_sigma` (mm).  The kernel is never
    truncated, and the exponent is shifted by the row minimum before
    exponentiation, so a row cannot come out all zero.
    """
    if kernel_sigma <= 0:
        raise ValueError("kernel_sigma must be positive")
    m = _points(model_pts)
    d = _points(centers)
    if len(m) == 0:
        raise ValueError("model point set must be nonempty")
    d2 = ((d[:, None, :] - m[None, :, :]) ** 2).sum(axis=2)
    expo = -d2 / (2.0 * kernel_sigma ** 2)
    expo -= expo.max(axis=1, keepdims=True)
    g = np.exp(expo)
    pi = g / g.sum(axis=1, keepdims=True)
    return RegionPriors(pi, PointSet(d), float(kernel_sigma))


def posterior_weights(model_pts_current, scene_pts, priors, sigma_m):
    """Posterior match probabilities given region priors.

    w_ij = pi_ij exp(-|s_j - m_i|^2 / sigma_m), row-normalized.
    `sigma_m` is a variance-like divisor in mm^2.  The exponent is
    shifted by its row maximum over entries with positive prior, so the
    normalization never divides by zero.
    """
    if sigma_m <= 0:
        raise ValueError("sigma_m must be positive")
    m = _points(model_pts_current)
    s = _points(scene_pts)
    if priors.pi.shape != (len(s), len(m)):
        raise ValueError(
            f"priors shape {priors.pi.shape} does not match "
            f"(scene, model) = ({len(s)}, {len(m)})")
    d2 = ((s[:, None, :] - m[None, :, :]) ** 2).sum(axis=2)
    expo = -d2 / float(sigma_m)
    masked = np.where(priors.pi > 0.0, expo, -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    # clamp at zero: entries with zero prior may sit above the masked
    # maximum and would otherwise overflow before being zeroed
    lik = np.exp(np.minimum(expo - shift, 0.0))
    w = priors.pi * lik
    return HybridWeights(w / w.sum(axis=1, keepdims=True))


def uniform_priors(n_regions, n_model):
    """Flat prior rows, for callers without region knowledge."""
    if n_model <= 0:
        raise ValueError("model point set must be nonempty")
    pi = np.full((n_regions, n_model), 1.0 / n_model)
    centers = PointSet(np.zeros((n_regions, 3)))
    return RegionPriors(pi, centers, 1.0)


@dataclass(frozen=True)
class SigmaSchedule:
    """Geometric annealing of the match variance sigma_m (mm^2)."""

    initial: float = 25.0
    decay: float = 0.95
    floor: float = 2.0

    def __post_init__(self):
        if self.initial <= 0 or not 0 < self.decay <= 1 or self.floor <= 0:
            raise ValueError("schedule parameters must be positive "
                             "(decay in (0, 1])")

    def value(self, alternation):
        return max(self.floor, self.initial * self.decay ** alternation)
