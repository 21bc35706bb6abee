"""Tensor-product B-spline transforms and the geometric energy descent.

The geometric energy couples weighted point matches to the intensity
field:

    E2(h) = sum_j sum_i w_ij |h^-1(m_i) - s_j|^2 + beta |h_I - h|^2

and is minimized over spline coefficients together with a first-order
smoothness penalty (finite differences on the control lattice).  The
inverse-mapped model points are re-solved once per outer step; inside a
step they are treated as moving with the local spline displacement
(p(m) ~ m - u(b) for the frozen base point b with h(b) = m), which keeps
the coefficient gradient exact for the frozen-base surrogate cost.
"""

from dataclasses import dataclass, replace

import numpy as np

from .grid import DisplacementField, invert_at_points


def bspline_basis(degree, s):
    """Centered cardinal B-spline of the given degree, vectorized."""
    if degree < 0:
        raise ValueError("degree must be >= 0")
    s = np.asarray(s, dtype=np.float64)
    if degree == 0:
        return ((s >= -0.5) & (s < 0.5)).astype(np.float64)
    d = degree
    left = bspline_basis(d - 1, s + 0.5)
    right = bspline_basis(d - 1, s - 0.5)
    return ((s + (d + 1) / 2.0) * left + ((d + 1) / 2.0 - s) * right) / d


def _axis_support(coords, origin, spacing, degree, n_ctrl):
    """Per-point control indices and basis weights along one axis.

    Returns (idx, w) with shapes (n, degree+1); out-of-lattice indices are
    clipped and their weights zeroed (equivalent to zero coefficients).
    """
    t = (np.asarray(coords, dtype=np.float64) - origin) / spacing
    k0 = np.floor(t - (degree - 1) / 2.0).astype(np.int64)
    offs = np.arange(degree + 1)
    idx = k0[:, None] + offs[None, :]
    w = bspline_basis(degree, t[:, None] - idx)
    valid = (idx >= 0) & (idx < n_ctrl)
    w = np.where(valid, w, 0.0)
    return np.clip(idx, 0, n_ctrl - 1), w


def _axis_matrix(grid_coords, origin, spacing, degree, n_ctrl):
    idx, w = _axis_support(grid_coords, origin, spacing, degree, n_ctrl)
    mat = np.zeros((len(grid_coords), n_ctrl))
    np.put_along_axis(mat, idx, w, axis=1)
    return mat


@dataclass(frozen=True)
class SplineTransform:
    """Displacement u(x) = sum_klm c_klm B(t_x-k) B(t_y-l) B(t_z-m) with
    t = (x - origin)/spacing in lattice coordinates; h(x) = x + u(x)."""

    coefficients: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    degree: int = 3

    def __post_init__(self):
        coeff = np.asarray(self.coefficients, dtype=np.float64)
        if coeff.ndim != 4 or coeff.shape[3] != 3:
            raise ValueError("coefficients must have shape (nk,nl,nm,3)")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        object.__setattr__(self, "coefficients", coeff)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def cover(cls, shape, spacing, origin, lattice_spacing, degree=3):
        """Zero spline whose lattice gives full basis support over a grid."""
        ls = np.broadcast_to(np.asarray(lattice_spacing, dtype=np.float64),
                             (3,)).astype(np.float64)
        extent = (np.asarray(shape) - 1) * np.asarray(spacing, dtype=float)
        pad = int(np.ceil((degree + 1) / 2.0))
        n = np.ceil(extent / ls).astype(int) + 1 + 2 * pad
        lat_origin = np.asarray(origin, dtype=float) - pad * ls
        return cls(np.zeros(tuple(n) + (3,)), ls, lat_origin, degree)

    def _supports(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        nk = self.coefficients.shape
        out = []
        for ax in range(3):
            out.append(_axis_support(pts[:, ax], self.origin[ax],
                                     self.spacing[ax], self.degree, nk[ax]))
        return out

    def displacement_at(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        (ix, wx), (iy, wy), (iz, wz) = self._supports(pts)
        gathered = self.coefficients[ix[:, :, None, None],
                                     iy[:, None, :, None],
                                     iz[:, None, None, :], :]
        return np.einsum("na,nb,nc,nabcd->nd", wx, wy, wz, gathered)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts + self.displacement_at(pts)

    def grid_matrices(self, shape, spacing, origin):
        """Dense per-axis basis matrices mapping coefficients to grid nodes."""
        mats = []
        for ax in range(3):
            coords = origin[ax] + spacing[ax] * np.arange(shape[ax])
            mats.append(_axis_matrix(coords, self.origin[ax],
                                     self.spacing[ax], self.degree,
                                     self.coefficients.shape[ax]))
        return mats

    def displacement_on_grid(self, shape, spacing, origin):
        bx, by, bz = self.grid_matrices(shape, spacing, origin)
        u = _tensor_apply(bx, by, bz, self.coefficients)
        return DisplacementField(u, spacing, origin)

    def with_coefficients(self, coefficients):
        return replace(self, coefficients=coefficients)


def _tensor_apply(bx, by, bz, coeff):
    t = np.tensordot(bx, coeff, axes=(1, 0))      # (nx, nl, nm, 3)
    t = np.tensordot(by, t, axes=(1, 1))          # (ny, nx, nm, 3)
    t = np.tensordot(bz, t, axes=(1, 2))          # (nz, ny, nx, 3)
    return t.transpose(2, 1, 0, 3)


def _tensor_adjoint(bx, by, bz, field):
    t = np.tensordot(bx.T, field, axes=(1, 0))    # (nk, ny, nz, 3)
    t = np.tensordot(by.T, t, axes=(1, 1))        # (nl, nk, nz, 3)
    t = np.tensordot(bz.T, t, axes=(1, 2))        # (nm, nl, nk, 3)
    return t.transpose(2, 1, 0, 3)


@dataclass(frozen=True)
class HybridWeights:
    """Dense match-weight matrix, rows = scene points, cols = model points.

    Every entry lies in [0, 1].  Soft rows sum to one; hard rows are
    one-hot vectors (which also sum to one, so a single check covers
    both modes).
    """

    w: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.w, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("weights must be a 2-d matrix")
        if arr.size and (arr.min() < -1e-12 or arr.max() > 1.0 + 1e-12):
            raise ValueError("weight entries must lie in [0, 1]")
        if arr.size:
            rows = arr.sum(axis=1)
            if np.max(np.abs(rows - 1.0)) > 1e-9:
                raise ValueError("every weight row must sum to 1")
        object.__setattr__(self, "w", arr)

    @property
    def n_scene(self):
        return self.w.shape[0]

    @property
    def n_model(self):
        return self.w.shape[1]


def _weights_array(w, n_scene, n_model):
    arr = np.asarray(getattr(w, "w", w), dtype=np.float64)
    if arr.shape != (n_scene, n_model):
        raise ValueError(f"weights shape {arr.shape} does not match "
                         f"(scene, model) = ({n_scene}, {n_model})")
    return arr


def e2_cost(spline, h_i, model_pts_current, scene_pts, w, beta):
    """Geometric matching energy plus coupling to the intensity field.

    The geometric term uses the supplied inverse-mapped model point
    positions; the coupling term sums |u_I - u_spline|^2 over the grid of
    `h_i`, scaled by voxel volume.
    """
    p = np.asarray(getattr(model_pts_current, "points", model_pts_current),
                   dtype=np.float64).reshape(-1, 3)
    s = np.asarray(getattr(scene_pts, "points", scene_pts),
                   dtype=np.float64).reshape(-1, 3)
    warr = _weights_array(w, len(s), len(p))
    geom = 0.0
    if len(s) and len(p):
        d2 = ((p[None, :, :] - s[:, None, :]) ** 2).sum(axis=2)
        geom = float((warr * d2).sum())
    coupling = 0.0
    if beta:
        u_s = spline.displacement_on_grid(h_i.shape, h_i.spacing,
                                          h_i.origin).data
        vvox = float(np.prod(h_i.spacing))
        coupling = beta * vvox * float(((h_i.data - u_s) ** 2).sum())
    return geom + coupling


@dataclass(frozen=True)
class E2Config:
    degree: int = 3
    lattice_spacing_vox: float = 8.0
    beta: float = 1.0
    smooth_weight: float = 1e-3
    outer_iters: int = 10
    inner_iters: int = 10
    step_init: float = 0.5
    tol: float = 1e-4
    invert_tol: float = 1e-3
    invert_max_iter: int = 60


class E2Problem:
    """Cost and exact gradient of the frozen-base-point surrogate.

    For fixed base points b_i (current solutions of h(b_i) = m_i) the
    inverse-mapped position is modeled as p_i(c) = m_i - u(b_i; c), making
    the total cost an explicit smooth function of the coefficients:

        G(c)  = sum_i W_i |p_i|^2 - 2 sum_i p_i . S_i + const
        F(c)  = beta * Vvox * sum_x |u_I(x) - u(x; c)|^2
        R(c)  = sw * cellvol * sum_ax sum |diff_ax(c)|^2 / dx_ax^2

    with W_i = sum_j w_ij and S_i = sum_j w_ij s_j.
    """

    def __init__(self, spline, h_i, model_pts, base_pts, scene_pts, w,
                 beta, smooth_weight):
        self.shape = spline.coefficients.shape
        self.degree = spline.degree
        m = np.asarray(getattr(model_pts, "points", model_pts),
                       dtype=np.float64).reshape(-1, 3)
        s = np.asarray(getattr(scene_pts, "points", scene_pts),
                       dtype=np.float64).reshape(-1, 3)
        warr = _weights_array(w, len(s), len(m))
        self.m = m
        self.wmass = warr.sum(axis=0)                       # W_i
        self.wscene = warr.T @ s if len(s) else np.zeros((len(m), 3))
        self.const = float((warr.sum(axis=1) * (s ** 2).sum(axis=1)).sum()) \
            if len(s) else 0.0
        (self.ix, self.wx), (self.iy, self.wy), (self.iz, self.wz) = \
            spline._supports(np.asarray(base_pts, dtype=np.float64))
        self.bx, self.by, self.bz = spline.grid_matrices(
            h_i.shape, h_i.spacing, h_i.origin)
        self.u_i = np.asarray(h_i.data, dtype=np.float64)
        self.beta_v = float(beta) * float(np.prod(h_i.spacing))
        cellvol = float(np.prod(spline.spacing))
        self.sweights = smooth_weight * cellvol / spline.spacing ** 2

    def _point_disp(self, coeff):
        gathered = coeff[self.ix[:, :, None, None],
                         self.iy[:, None, :, None],
                         self.iz[:, None, None, :], :]
        return np.einsum("na,nb,nc,nabcd->nd",
                         self.wx, self.wy, self.wz, gathered)

    def _ptilde(self, coeff):
        return self.m - self._point_disp(coeff)

    def cost(self, coeff):
        p = self._ptilde(coeff)
        geom = float((self.wmass * (p ** 2).sum(axis=1)).sum()
                     - 2.0 * (p * self.wscene).sum() + self.const)
        cost = geom
        if self.beta_v:
            u_s = _tensor_apply(self.bx, self.by, self.bz, coeff)
            cost += self.beta_v * float(((self.u_i - u_s) ** 2).sum())
        for ax in range(3):
            d = np.diff(coeff, axis=ax)
            cost += self.sweights[ax] * float((d ** 2).sum())
        return cost

    def grad(self, coeff):
        g = np.zeros_like(coeff)
        # geometric: dG/dp_i = 2 (W_i p_i - S_i); dp_i/dc = -B(b_i)
        p = self._ptilde(coeff)
        alpha = 2.0 * (self.wmass[:, None] * p - self.wscene)
        contrib = (self.wx[:, :, None, None] * self.wy[:, None, :, None]
                   * self.wz[:, None, None, :])
        vals = -contrib[..., None] * alpha[:, None, None, None, :]
        nk, nl, nm = self.shape[:3]
        lin = ((self.ix[:, :, None, None] * nl
                + self.iy[:, None, :, None]) * nm
               + self.iz[:, None, None, :])
        np.add.at(g.reshape(-1, 3),
                  np.broadcast_to(lin, contrib.shape).ravel(),
                  vals.reshape(-1, 3))
        if self.beta_v:
            u_s = _tensor_apply(self.bx, self.by, self.bz, coeff)
            g += 2.0 * self.beta_v * _tensor_adjoint(
                self.bx, self.by, self.bz, u_s - self.u_i)
        for ax in range(3):
            d = np.diff(coeff, axis=ax)
            f = 2.0 * self.sweights[ax]
            sl_lo = [slice(None)] * 4
            sl_hi = [slice(None)] * 4
            sl_lo[ax] = slice(0, -1)
            sl_hi[ax] = slice(1, None)
            g[tuple(sl_lo)] -= f * d
            g[tuple(sl_hi)] += f * d
        return g

    def diagonal(self):
        """Approximate Hessian diagonal for preconditioning."""
        d = np.zeros(self.shape[:3])
        contrib = (self.wx[:, :, None, None] * self.wy[:, None, :, None]
                   * self.wz[:, None, None, :])
        vals = 2.0 * self.wmass[:, None, None, None] * contrib ** 2
        nk, nl, nm = self.shape[:3]
        lin = ((self.ix[:, :, None, None] * nl
                + self.iy[:, None, :, None]) * nm
               + self.iz[:, None, None, :])
        np.add.at(d.reshape(-1), np.broadcast_to(lin, vals.shape).ravel(),
                  vals.ravel())
        if self.beta_v:
            sep = ((self.bx ** 2).sum(axis=0)[:, None, None]
                   * (self.by ** 2).sum(axis=0)[None, :, None]
                   * (self.bz ** 2).sum(axis=0)[None, None, :])
            d += 2.0 * self.beta_v * sep
        for ax in range(3):
            counts = np.full(self.shape[ax], 2.0)
            counts[0] = counts[-1] = 1.0
            shape = [1, 1, 1]
            shape[ax] = self.shape[ax]
            d += 2.0 * self.sweights[ax] * counts.reshape(shape)
        floor = max(d.max(), 1.0) * 1e-10
        return np.maximum(d, floor)[..., None]


@dataclass(frozen=True)
class E2Result:
    field: DisplacementField
    spline: SplineTransform
    model_points: np.ndarray
    trace: list
    converged: bool


def minimize_e2(h_i, model_pts, scene_pts, w, cfg=E2Config(), initial=None,
                base_initial=None):
    """Gradient descent on spline coefficients of the geometric energy.

    Returns the optimized transform together with its dense field on the
    grid of `h_i` and the final inverse-mapped model point positions.
    """
    m = np.asarray(getattr(model_pts, "points", model_pts),
                   dtype=np.float64).reshape(-1, 3)
    s = np.asarray(getattr(scene_pts, "points", scene_pts),
                   dtype=np.float64).reshape(-1, 3)
    if len(m) == 0 and len(s) == 0 and not cfg.beta:
        raise ValueError("need points or a positive coupling weight")
    if initial is not None:
        spline = initial
    else:
        spline = SplineTransform.cover(
            h_i.shape, h_i.spacing, h_i.origin,
            cfg.lattice_spacing_vox * np.asarray(h_i.spacing, dtype=float),
            cfg.degree)
    coeff = spline.coefficients.copy()
    base = np.asarray(base_initial, dtype=np.float64).reshape(-1, 3).copy() \
        if base_initial is not None else m.copy()
    trace = []
    converged = False
    prev_outer = np.inf
    for outer in range(cfg.outer_iters):
        field = spline.with_coefficients(coeff).displacement_on_grid(
            h_i.shape, h_i.spacing, h_i.origin)
        if len(m):
            inv = invert_at_points(field, m, initial=base,
                                   tol=cfg.invert_tol,
                                   max_iter=cfg.invert_max_iter)
            base = inv.points
        prob = E2Problem(spline, h_i, m, base, s, w, cfg.beta,
                         cfg.smooth_weight)
        diag = prob.diagonal()
        cost = prob.cost(coeff)
        accepted = [cost]
        step = cfg.step_init
        for _ in range(cfg.inner_iters):
            g = prob.grad(coeff)
            direction = g / diag
            while step > 1e-14:
                cand = coeff - step * direction
                c_new = prob.cost(cand)
                if c_new < cost:
                    break
                step *= 0.5
            if step <= 1e-14:
                break
            coeff, cost = cand, c_new
            accepted.append(cost)
            step *= 1.5
        trace.append(accepted)
        if prev_outer - cost <= cfg.tol * max(abs(prev_outer), 1.0) \
                and np.isfinite(prev_outer):
            converged = True
            break
        prev_outer = cost
    spline = spline.with_coefficients(coeff)
    field = spline.displacement_on_grid(h_i.shape, h_i.spacing, h_i.origin)
    if len(m):
        inv = invert_at_points(field, m, initial=base, tol=cfg.invert_tol,
                               max_iter=cfg.invert_max_iter)
        base = inv.points
    return E2Result(field=field, spline=spline, model_points=base,
                    trace=trace, converged=converged)
