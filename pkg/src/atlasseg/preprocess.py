"""Resampling, intensity inhomogeneity correction, rigid initialization.

The rigid stage brings the atlas roughly onto a study before deformable
registration; it optimizes the 6-parameter SSD cost with plain gradient
descent over a coarse-to-fine pyramid.
"""

from dataclasses import dataclass

import numpy as np

from .grid import (
    ScalarVolume,
    central_gradient,
    gaussian_smooth,
    sample_scalar,
    voxel_centers,
)


def _rot_matrix(angles):
    a, b, g = angles
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cg, sg = np.cos(g), np.sin(g)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _angles_from_matrix(m):
    b = np.arcsin(np.clip(-m[2, 0], -1.0, 1.0))
    a = np.arctan2(m[2, 1], m[2, 2])
    g = np.arctan2(m[1, 0], m[0, 0])
    return np.array([a, b, g])


@dataclass(frozen=True)
class RigidTransform:
    """r(x) = R(x - center) + center + translation.

    R is built from three fixed-axis angles (x, then y, then z).
    """

    rotation: np.ndarray
    translation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        for name in ("rotation", "translation", "center"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            object.__setattr__(self, name, v)

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)):
        return cls(np.zeros(3), np.zeros(3), center)

    def matrix(self):
        return _rot_matrix(self.rotation)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.center) @ self.matrix().T + self.center \
            + self.translation

    def inverse(self):
        rt = self.matrix().T
        return RigidTransform(rotation=_angles_from_matrix(rt),
                              translation=-(rt @ self.translation),
                              center=self.center)


def resample_isotropic(v, target_spacing):
    """Trilinear resampling onto an isotropic grid over the same extent."""
    s = float(target_spacing)
    if s <= 0:
        raise ValueError("target_spacing must be positive")
    extent = v.extent()
    dims = tuple(int(np.floor(e / s + 1e-9)) + 1 for e in extent)
    centers = voxel_centers(dims, (s, s, s), v.origin)
    data = sample_scalar(v, centers.reshape(-1, 3), mode="clamp")
    return ScalarVolume(data.reshape(dims), (s, s, s), v.origin,
                        background=v.background)


def _poly_basis(coords, order):
    # monomials of total degree <= order in normalized coordinates
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    cols = [np.ones_like(x)]
    if order >= 1:
        cols += [x, y, z]
    if order >= 2:
        cols += [x * x, y * y, z * z, x * y, x * z, y * z]
    return np.stack(cols, axis=1)


def bias_correct(v, order=1):
    """Divide out a smooth multiplicative gain.

    Fits a degree-`order` polynomial to log intensity over strictly
    positive voxels, divides by the exponentiated fit, and rescales so the
    mean over that region is unchanged.
    """
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    data = np.asarray(v.data, dtype=np.float64)
    mask = data > 0
    if not mask.any():
        raise ValueError("bias correction needs positive intensities")
    centers = v.voxel_centers()
    half = np.maximum(v.extent() / 2.0, 1e-9)
    norm = (centers - (v.origin + v.extent() / 2.0)) / half
    basis_all = _poly_basis(norm.reshape(-1, 3), order)
    coef, *_ = np.linalg.lstsq(basis_all[mask.ravel()],
                               np.log(data[mask]), rcond=None)
    gain = np.exp(basis_all @ coef).reshape(data.shape)
    corrected = data / gain
    corrected *= data[mask].mean() / corrected[mask].mean()
    return v.with_data(corrected)


@dataclass(frozen=True)
class RigidConfig:
    levels: int = 3
    max_iters: int = 80
    step_init: float = 1.0
    tol: float = 1e-7


@dataclass(frozen=True)
class RigidResult:
    transform: RigidTransform
    ssd: float
    converged: bool
    trace: list


def _decimate(v):
    sm = gaussian_smooth(v.data.astype(np.float64), v.spacing, v.spacing)
    return ScalarVolume(sm[::2, ::2, ::2], v.spacing * 2, v.origin,
                        background=v.background)


def _rigid_ssd_grad(t_vol, r_vol, grads, params, center):
    rot, trans = params[:3], params[3:]
    rt = RigidTransform(rot, trans, center)
    centers = r_vol.voxel_centers().reshape(-1, 3)
    mapped = rt.apply(centers)
    tv = sample_scalar(t_vol, mapped)
    diff = tv - r_vol.data.ravel()
    ssd = float(diff @ diff)
    # image gradient at mapped points, zero outside the template
    lo = t_vol.origin
    hi = t_vol.origin + t_vol.extent()
    inside = np.all((mapped >= lo) & (mapped <= hi), axis=1)
    gvals = np.zeros_like(mapped)
    for c in range(3):
        gvals[inside, c] = sample_scalar(grads[c], mapped[inside],
                                         mode="clamp")
    w = (2.0 * diff)[:, None] * gvals
    grad = np.empty(6)
    grad[3:] = w.sum(axis=0)
    # d r / d angle_k = dR/dangle_k (x - center)
    xc = centers - center
    a, b, g = rot
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cg, sg = np.cos(g), np.sin(g)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    drx = np.array([[0, 0, 0], [0, -sa, -ca], [0, ca, -sa]])
    dry = np.array([[-sb, 0, cb], [0, 0, 0], [-cb, 0, -sb]])
    drz = np.array([[-sg, -cg, 0], [cg, -sg, 0], [0, 0, 0]])
    for k, dm in enumerate((rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx)):
        grad[k] = float(np.einsum("ij,ij->", w, xc @ dm.T))
    return ssd, grad


def register_rigid(t_vol, r_vol, cfg=RigidConfig()):
    """Minimize SSD(T(r(x)), R(x)) over 6 rigid parameters.

    Coarse-to-fine gradient descent with backtracking; rotation gradients
    are rescaled by the squared half-extent so angles and millimetres take
    comparable steps.
    """
    pyramids = [(t_vol, r_vol)]
    for _ in range(cfg.levels - 1):
        t_prev, r_prev = pyramids[-1]
        if min(r_prev.shape) < 8:
            break
        pyramids.append((_decimate(t_prev), _decimate(r_prev)))
    center = r_vol.origin + r_vol.extent() / 2.0
    lever = float(np.mean(r_vol.extent()) / 2.0)
    precond = np.array([lever ** 2] * 3 + [1.0] * 3)
    params = np.zeros(6)
    trace = []
    converged = True
    ssd = np.inf
    for t_l, r_l in reversed(pyramids):
        grads = tuple(
            ScalarVolume(g, t_l.spacing, t_l.origin) for g in
            np.moveaxis(central_gradient(t_l.data, t_l.spacing), -1, 0))
        step = cfg.step_init
        ssd, grad = _rigid_ssd_grad(t_l, r_l, grads, params, center)
        init_ssd = ssd
        best = (ssd, params.copy())
        exhausted = True
        for _ in range(cfg.max_iters):
            gn = grad / precond
            scale = np.abs(gn).max()
            if scale == 0 or step < 1e-10:
                exhausted = False
                break
            cand = params - step * gn / scale
            new_ssd, new_grad = _rigid_ssd_grad(t_l, r_l, grads, cand, center)
            trace.append(new_ssd)
            if new_ssd < ssd:
                rel = (ssd - new_ssd) / max(ssd, 1e-30)
                params, ssd, grad = cand, new_ssd, new_grad
                if ssd < best[0]:
                    best = (ssd, params.copy())
                step *= 1.3
                if rel < cfg.tol:
                    exhausted = False
                    break
            else:
                step *= 0.5
        # stalled: iteration budget spent without a meaningful reduction
        if exhausted and best[0] > 0.9 * init_ssd + 1e-30:
            converged = False
        ssd, params = best[0], best[1]
    rt = RigidTransform(params[:3], params[3:], center)
    return RigidResult(transform=rt, ssd=ssd, converged=converged,
                       trace=trace)
