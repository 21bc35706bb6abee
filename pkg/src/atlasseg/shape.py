"""Point-distribution shape statistics and plausibility projection.

Shapes are corresponded vertex clouds.  Building the model runs
generalized Procrustes alignment (rotation + translation only; scale is
a real mode of variation here and stays in), then PCA of the stacked
coordinates.  Projection clamps each coefficient to three standard
deviations of its mode.

At GPA convergence every aligned shape has a symmetric cross-covariance
with the mean, so mode deviations carry no residual rotation; that is
what makes the clamped projection idempotent.
"""

from dataclasses import dataclass

import numpy as np

from .grid import PointSet


def _points(p):
    return np.asarray(getattr(p, "points", p), dtype=np.float64) \
        .reshape(-1, 3)


def _kabsch(source, target):
    """Rotation R, translation t with source @ R.T + t ~= target."""
    cs = source.mean(axis=0)
    ct = target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, ct - cs @ r.T


@dataclass(frozen=True)
class ShapeModel:
    mean_shape: PointSet
    modes: np.ndarray            # (3N, k), columnwise orthonormal
    eigenvalues: np.ndarray      # (k,), descending
    n_training: int

    def __post_init__(self):
        modes = np.asarray(self.modes, dtype=np.float64)
        lam = np.asarray(self.eigenvalues, dtype=np.float64)
        n3 = 3 * len(self.mean_shape.points)
        if modes.shape[0] != n3 or modes.shape[1] != len(lam):
            raise ValueError("modes shape must be (3N, n_modes)")
        if modes.shape[1]:
            gram = modes.T @ modes
            if np.max(np.abs(gram - np.eye(modes.shape[1]))) > 1e-9:
                raise ValueError("modes must be orthonormal")
        if np.any(lam < 0) or np.any(np.diff(lam) > 0):
            raise ValueError("eigenvalues must be nonnegative descending")
        if modes.shape[1] > self.n_training - 1:
            raise ValueError("more modes than training shapes allow")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "eigenvalues", lam)

    @property
    def n_modes(self):
        return self.modes.shape[1]


@dataclass(frozen=True)
class ShapeCoefficients:
    b: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "b", arr)


def procrustes_align(shapes, tol=1e-13, max_iter=200):
    """Rotation+translation GPA; returns (aligned stack, mean points).

    All clouds are centered at the origin; the caller re-attaches any
    global position.
    """
    arrs = [_points(s) - _points(s).mean(axis=0) for s in shapes]
    mean = arrs[0].copy()
    for _ in range(max_iter):
        aligned = []
        for a in arrs:
            r, _ = _kabsch(a, mean)
            aligned.append(a @ r.T)
        new_mean = np.mean(aligned, axis=0)
        new_mean -= new_mean.mean(axis=0)
        change = np.abs(new_mean - mean).max()
        mean = new_mean
        if change < tol * max(1.0, np.abs(mean).max()):
            break
    aligned = [a @ _kabsch(a, mean)[0].T for a in arrs]
    return np.stack(aligned), mean


def build_shape_model(corresponding_shapes, mode_tol=1e-8):
    """PCA over Procrustes-aligned corresponded shapes.

    Modes with eigenvalue <= mode_tol * largest are dropped, as are
    eigenvalues at rounding-noise level; with all shapes identical no
    modes remain.
    """
    shapes = [_points(s) for s in corresponding_shapes]
    if len(shapes) < 2:
        raise ValueError("need at least 2 shapes")
    n = len(shapes[0])
    if any(len(s) != n for s in shapes):
        raise ValueError("all shapes must have the same vertex count")
    centroid = np.mean([s.mean(axis=0) for s in shapes], axis=0)
    aligned, mean = procrustes_align(shapes)
    dev = (aligned - mean).reshape(len(shapes), 3 * n)
    u, svals, vt = np.linalg.svd(dev / np.sqrt(len(shapes) - 1.0),
                                 full_matrices=False)
    lam = svals ** 2
    # identical shapes leave only cancellation noise, for which the
    # relative cut is blind; floor it against the coordinate scale
    scale = max(1.0, float(np.abs(aligned).max()))
    floor = (1e-12 * scale) ** 2
    keep = lam > max(floor,
                     mode_tol * lam[0] if lam.size and lam[0] > 0 else 0.0)
    keep &= np.arange(len(lam)) < len(shapes) - 1
    modes = vt[keep].T
    return ShapeModel(mean_shape=PointSet(mean + centroid),
                      modes=modes, eigenvalues=lam[keep],
                      n_training=len(shapes))


def project_shape(model, shape, clamp=3.0):
    """Nearest plausible shape: align, clamp mode coefficients, map back.

    Coefficients are clipped to +-clamp*sqrt(lambda_i); clamp=None skips
    the clipping.  The alignment is snapped to the identity when already
    there to rounding, so projecting a projected shape reproduces it.
    """
    pts = _points(shape)
    mean = model.mean_shape.points
    if pts.shape != mean.shape:
        raise ValueError("vertex count does not match the model")
    r, t = _kabsch(pts, mean)
    scale = max(1.0, float(np.abs(pts).max()))
    if np.abs(r - np.eye(3)).max() < 1e-9 and \
            np.abs(t).max() < 1e-9 * scale:
        r = np.eye(3)
        t = np.zeros(3)
    aligned = pts @ r.T + t
    dev = (aligned - mean).reshape(-1)
    b = model.modes.T @ dev
    if clamp is not None:
        bound = clamp * np.sqrt(model.eigenvalues)
        b = np.clip(b, -bound, bound)
    recon = (mean.reshape(-1) + model.modes @ b).reshape(-1, 3)
    out = (recon - t) @ r
    return PointSet(out), ShapeCoefficients(b)
