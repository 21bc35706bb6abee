"""Regular-grid volumes, displacement fields, point sets and meshes.

Conventions used throughout the package:

* arrays are indexed ``[i, j, k]`` along (x, y, z); scalar volumes have
  shape ``(nx, ny, nz)`` and vector fields ``(nx, ny, nz, 3)``
* voxel ``(i, j, k)`` sits at physical position ``origin + index*spacing``
  (node-centred, units of mm)
* a transform is stored as a displacement field ``u`` on its own grid and
  evaluated as ``h(x) = x + u(x)`` with trilinear interpolation between
  nodes and clamp-to-edge outside
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import _kernels


def _as_geometry(spacing, origin):
    spacing = np.asarray(spacing, dtype=np.float64).reshape(3)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    if np.any(spacing <= 0):
        raise ValueError("spacing must be positive")
    return spacing, origin


@dataclass(frozen=True)
class ScalarVolume:
    """Scalar image on a regular grid.

    `background` is the value reported when sampling outside the grid.
    """

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    background: float = 0.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError("scalar volume data must be 3-d")
        spacing, origin = _as_geometry(self.spacing, self.origin)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self):
        return self.data.shape

    def extent(self):
        """Physical size of the grid hull, per axis (mm)."""
        return (np.array(self.shape) - 1) * self.spacing

    def voxel_centers(self):
        return voxel_centers(self.shape, self.spacing, self.origin)

    def sample(self, points, mode="background"):
        """Trilinear interpolation at physical `points`, shape (n, 3)."""
        return sample_scalar(self, points, mode=mode)

    def with_data(self, data):
        return replace(self, data=data)


@dataclass(frozen=True)
class DisplacementField:
    """Dense displacement field u; the transform is h(x) = x + u(x).

    Evaluation outside the grid clamps to the nearest edge node so that
    h stays continuous and defined on all of space.
    """

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[3] != 3:
            raise ValueError("displacement data must have shape (nx,ny,nz,3)")
        spacing, origin = _as_geometry(self.spacing, self.origin)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self):
        return self.data.shape[:3]

    @classmethod
    def zeros(cls, shape, spacing, origin, dtype=np.float64):
        return cls(np.zeros(tuple(shape) + (3,), dtype=dtype), spacing, origin)

    def voxel_centers(self):
        return voxel_centers(self.shape, self.spacing, self.origin)

    def displacement_at(self, points):
        """u(points) by trilinear interpolation, clamped at the edges."""
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty((pts.shape[0], 3), dtype=np.float64)
        _kernels.sample_vector(
            np.ascontiguousarray(self.data, dtype=np.float64),
            self.origin[0], self.origin[1], self.origin[2],
            self.spacing[0], self.spacing[1], self.spacing[2],
            pts, True, out)
        return out

    def transform_points(self, points):
        """h(points) = points + u(points)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts + self.displacement_at(pts)

    def max_magnitude(self):
        return float(np.sqrt((self.data.astype(np.float64) ** 2)
                             .sum(axis=3).max()))


@dataclass(frozen=True)
class PointSet:
    """Unordered physical points, shape (n, 3)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must have shape (n, 3)")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangle mesh: vertices (n, 3) float, faces (m, 3) int indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ValueError("vertices must have shape (n, 3)")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError("faces must have shape (m, 3)")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    def with_vertices(self, vertices):
        return replace(self, vertices=vertices)

    def enclosed_volume(self):
        """Signed volume by the divergence theorem (positive for outward
        oriented surfaces)."""
        v = self.vertices
        a = v[self.faces[:, 0]]
        b = v[self.faces[:, 1]]
        c = v[self.faces[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


_CENTER_CACHE = {}


def voxel_centers(shape, spacing, origin):
    """Physical coordinates of all grid nodes, shape (nx, ny, nz, 3).

    Cached per geometry; callers must not mutate the result.
    """
    spacing, origin = _as_geometry(spacing, origin)
    key = (tuple(shape), tuple(spacing), tuple(origin))
    hit = _CENTER_CACHE.get(key)
    if hit is not None:
        return hit
    ax = origin[0] + spacing[0] * np.arange(shape[0])
    ay = origin[1] + spacing[1] * np.arange(shape[1])
    az = origin[2] + spacing[2] * np.arange(shape[2])
    out = np.empty(tuple(shape) + (3,), dtype=np.float64)
    out[..., 0] = ax[:, None, None]
    out[..., 1] = ay[None, :, None]
    out[..., 2] = az[None, None, :]
    out.setflags(write=False)
    if len(_CENTER_CACHE) > 16:
        _CENTER_CACHE.clear()
    _CENTER_CACHE[key] = out
    return out


def sample_scalar(volume, points, mode="background"):
    """Trilinear interpolation of `volume` at physical `points`.

    mode="background" returns volume.background outside the node hull,
    mode="clamp" clamps the query to the nearest edge.
    """
    if mode not in ("background", "clamp"):
        raise ValueError("mode must be 'background' or 'clamp'")
    pts = np.ascontiguousarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    out = np.empty(flat.shape[0], dtype=np.float64)
    _kernels.sample_scalar(
        np.ascontiguousarray(volume.data, dtype=np.float64),
        volume.origin[0], volume.origin[1], volume.origin[2],
        volume.spacing[0], volume.spacing[1], volume.spacing[2],
        flat, float(volume.background), mode == "clamp", out)
    return out.reshape(pts.shape[:-1])


def warp_volume(volume, field, out_background=None):
    """Resample `volume` through the transform h = id + field.

    The result lives on the field's grid: out(x) = volume(x + u(x)).
    """
    centers = field.voxel_centers()
    pts = centers.reshape(-1, 3) + field.data.reshape(-1, 3)
    vals = sample_scalar(volume, pts)
    bg = volume.background if out_background is None else out_background
    return ScalarVolume(vals.reshape(field.shape), field.spacing,
                        field.origin, background=bg)


def compose(outer, inner):
    """Displacement field of h_outer ∘ h_inner on the inner field's grid.

    (h_o ∘ h_i)(x) = h_o(x + u_i(x)), so the composed displacement is
    u_i(x) + u_o(x + u_i(x)).
    """
    centers = inner.voxel_centers().reshape(-1, 3)
    u_i = inner.data.reshape(-1, 3).astype(np.float64)
    u_o = outer.displacement_at(centers + u_i)
    data = (u_i + u_o).reshape(inner.data.shape[:3] + (3,))
    return DisplacementField(data.astype(inner.data.dtype, copy=False),
                             inner.spacing, inner.origin)


@dataclass(frozen=True)
class InversionResult:
    points: np.ndarray
    residuals: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray = field(default=None)


def invert_at_points(fld, targets, initial=None, tol=1e-3, max_iter=200,
                     damping=1.0):
    """Solve h(p) = m for p, per target m, where h = id + fld.

    Damped fixed-point iteration p <- p - damping*(h(p) - m); `initial`
    supplies warm starts (defaults to the targets themselves).  Residuals
    are reported as |h(p) - m| in mm.
    """
    m = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    p = np.array(initial, dtype=np.float64).reshape(-1, 3) if initial is not None \
        else m.copy()
    if p.shape != m.shape:
        raise ValueError("initial must match targets in shape")
    active = np.ones(len(m), dtype=bool)
    res = np.empty(len(m), dtype=np.float64)
    iters = np.zeros(len(m), dtype=np.int64)
    step = float(damping)
    for it in range(max_iter):
        if not active.any():
            break
        err = p[active] + fld.displacement_at(p[active]) - m[active]
        rn = np.linalg.norm(err, axis=1)
        res[active] = rn
        done = rn <= tol
        idx = np.flatnonzero(active)
        p[idx[~done]] -= step * err[~done]
        iters[idx[~done]] += 1
        active[idx[done]] = False
    if active.any():
        err = p[active] + fld.displacement_at(p[active]) - m[active]
        res[active] = np.linalg.norm(err, axis=1)
    return InversionResult(points=p, residuals=res,
                           converged=res <= tol, iterations=iters)


def invert_field(fld, grid_shape=None, spacing=None, origin=None,
                 tol=1e-3, max_iter=200, initial=None):
    """Dense inverse of h = id + fld, sampled on a target grid.

    Returns a DisplacementField v on the target grid with
    h(x + v(x)) ~= x.  Defaults to the field's own grid.
    """
    if grid_shape is None:
        grid_shape, spacing, origin = fld.shape, fld.spacing, fld.origin
    centers = voxel_centers(grid_shape, spacing, origin).reshape(-1, 3)
    init = None if initial is None else initial.reshape(-1, 3)
    inv = invert_at_points(fld, centers, initial=init, tol=tol,
                           max_iter=max_iter)
    data = (inv.points - centers).reshape(tuple(grid_shape) + (3,))
    return DisplacementField(data, spacing, origin), inv


def gaussian_smooth(data, sigma_mm, spacing, mode="nearest"):
    """Separable Gaussian blur with physical standard deviation (mm).

    Works on scalar (nx,ny,nz) or vector (nx,ny,nz,3) arrays; vector
    components are smoothed independently.
    """
    out = np.asarray(data, dtype=data.dtype)
    sig = np.broadcast_to(np.asarray(sigma_mm, dtype=np.float64), (3,))
    spacing = np.asarray(spacing, dtype=np.float64).reshape(3)
    for ax in range(3):
        s = sig[ax] / spacing[ax]
        if s <= 0:
            continue
        out = gaussian_filter1d(out, s, axis=ax, mode=mode, truncate=3.0)
    return out


def central_gradient(data, spacing):
    """Central-difference gradient of a scalar grid, physical units.

    One-sided differences at the boundary.  Returns (nx, ny, nz, 3).
    """
    g = np.gradient(np.asarray(data, dtype=np.float64),
                    *np.asarray(spacing, dtype=np.float64), edge_order=1)
    return np.stack(g, axis=-1)


def jacobian_determinant(fld):
    """det(I + grad u) per voxel for the transform h = id + u."""
    u = np.asarray(fld.data, dtype=np.float64)
    jac = np.empty(u.shape[:3] + (3, 3))
    for c in range(3):
        g = np.gradient(u[..., c], *fld.spacing, edge_order=1)
        for ax in range(3):
            jac[..., c, ax] = g[ax]
        jac[..., c, c] += 1.0
    return np.linalg.det(jac)
