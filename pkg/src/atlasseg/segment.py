"""End-to-end atlas-guided segmentation and evaluation metrics.

The pipeline rigidly registers the atlas mean onto the study, continues
with the alternating intensity/geometry solver using the two user seeds
as scene points under the atlas region priors, maps the atlas surface
through the inverse transform, regularizes it with the shape model, and
voxelizes the result.

Metrics: voxel-count sensitivity/positive predictive value and
surface-to-surface distances binned into three equal slabs (base,
central, apex) along the seed axis.  Distances are one-directional,
automatic surface to truth surface.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .bspline import SplineTransform
from .correspondence import SigmaSchedule
from .grid import DisplacementField, PointSet, ScalarVolume, SurfaceMesh
from .hybrid import HybridConfig, register_hybrid
from .preprocess import RigidConfig, register_rigid
from .shape import ShapeCoefficients, project_shape

ZONES = ("base", "central", "apex")


@dataclass(frozen=True)
class SegmentConfig:
    rigid_cfg: RigidConfig = RigidConfig()
    # a fast anneal keeps the two-seed pull local; a slow one lets the
    # broad posterior drag whole surface regions off the intensity match
    hybrid_cfg: HybridConfig = field(default_factory=lambda: HybridConfig(
        beta=1e-3, correspondence_mode="posterior",
        sigma_schedule=SigmaSchedule(initial=9.0, decay=0.7, floor=2.0)))
    clamp: float | None = 3.0


@dataclass(frozen=True)
class SegmentationResult:
    surface: SurfaceMesh
    label_volume: ScalarVolume
    field: DisplacementField
    coefficients: ShapeCoefficients
    trace: list
    converged: bool
    rigid_ssd: float


@dataclass(frozen=True)
class ZoneMetrics:
    """Per-zone surface distance statistics, optionally with volume
    overlap scores attached."""

    base_mean: float
    base_std: float
    central_mean: float
    central_std: float
    apex_mean: float
    apex_std: float
    all_mean: float
    all_std: float
    counts: tuple = (0, 0, 0)
    sens: float | None = None
    ppv: float | None = None

    def __post_init__(self):
        for z in ZONES + ("all",):
            if getattr(self, z + "_mean") < 0 or getattr(self, z + "_std") < 0:
                raise ValueError("distances must be nonnegative")
        for name in ("sens", "ppv"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(name + " must be in [0, 1]")

    def zone(self, name):
        return (getattr(self, name + "_mean"), getattr(self, name + "_std"))


def _rigid_field(transform, shape, spacing, origin):
    from .grid import voxel_centers

    x = voxel_centers(shape, spacing, origin)
    u = transform.apply(x.reshape(-1, 3)) - x.reshape(-1, 3)
    return DisplacementField(u.reshape(x.shape), spacing, origin)


def _rigid_spline(transform, shape, spacing, origin, spline_cfg):
    """Spline whose coefficients sample the rigid displacement.

    Coefficients equal to samples of an affine field reproduce it
    exactly (linear precision), so the geometric solve starts at the
    rigid pose instead of zero.
    """
    lattice = SplineTransform.cover(
        shape, spacing, origin,
        spline_cfg.lattice_spacing_vox * np.asarray(spacing, dtype=float),
        spline_cfg.degree)
    nc = lattice.coefficients.shape[:3]
    axes = [lattice.origin[a] + lattice.spacing[a] * np.arange(nc[a])
            for a in range(3)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    coeff = transform.apply(nodes.reshape(-1, 3)) - nodes.reshape(-1, 3)
    return lattice.with_coefficients(coeff.reshape(nc + (3,)))


def segment(atlas, study, seed_base, seed_apex, shape_model=None,
            cfg=SegmentConfig()):
    """Segment a study volume with two seed points and an atlas.

    Returns a best-effort result even when a stage fails to converge;
    the `converged` flag reports it.
    """
    seeds = np.array([seed_base, seed_apex], dtype=np.float64)
    lo = np.asarray(study.origin, dtype=np.float64)
    hi = lo + study.extent()
    if np.any(seeds < lo - 1e-9) or np.any(seeds > hi + 1e-9):
        raise ValueError("seed points must lie inside the study extent")
    if atlas.region_priors is None:
        raise ValueError("atlas has no region priors attached")
    rigid = register_rigid(atlas.mean_image, study, cfg.rigid_cfg)
    rt = rigid.transform
    verts = atlas.surface.vertices
    res = register_hybrid(
        atlas.mean_image, study, PointSet(verts), PointSet(seeds),
        priors=atlas.region_priors, cfg=cfg.hybrid_cfg,
        h_init=_rigid_field(rt, study.shape, study.spacing, study.origin),
        base_init=rt.inverse().apply(verts),
        spline_init=_rigid_spline(rt, study.shape, study.spacing,
                                  study.origin, cfg.hybrid_cfg.spline_cfg))
    out_verts = res.model_points
    if shape_model is not None:
        projected, coeff = project_shape(shape_model, PointSet(out_verts),
                                         clamp=cfg.clamp)
        out_verts = projected.points
    else:
        coeff = ShapeCoefficients(np.zeros(0))
    surface = SurfaceMesh(out_verts, atlas.surface.faces)
    label = voxelize_mesh(surface, study.shape, study.spacing, study.origin)
    return SegmentationResult(
        surface=surface, label_volume=label, field=res.field,
        coefficients=coeff, trace=res.trace,
        converged=rigid.converged and res.converged,
        rigid_ssd=rigid.ssd)


def volume_metrics(auto, truth):
    """(sensitivity, positive predictive value) from binary volumes."""
    a = np.asarray(getattr(auto, "data", auto)) > 0.5
    t = np.asarray(getattr(truth, "data", truth)) > 0.5
    if a.shape != t.shape:
        raise ValueError("volumes must share geometry")
    if not t.any():
        raise ValueError("empty truth: sensitivity undefined")
    if not a.any():
        raise ValueError("empty automatic mask: PPV undefined")
    tp = float(np.count_nonzero(a & t))
    fn = float(np.count_nonzero(~a & t))
    fp = float(np.count_nonzero(a & ~t))
    return tp / (tp + fn), tp / (tp + fp)


def point_triangle_distances(points, tri_a, tri_b, tri_c):
    """Distances from each point to each triangle, shape (P, T).

    Closest-point classification by barycentric regions; degenerate
    triangles resolve to their nearest edge or vertex.
    """
    p = np.asarray(points, dtype=np.float64)[:, None, :]
    a = np.asarray(tri_a, dtype=np.float64)[None, :, :]
    b = np.asarray(tri_b, dtype=np.float64)[None, :, :]
    c = np.asarray(tri_c, dtype=np.float64)[None, :, :]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def safe_div(num, den):
        return num / np.where(den == 0.0, 1.0, den)

    closest = a + safe_div(vb, va + vb + vc)[..., None] * ab \
        + safe_div(vc, va + vb + vc)[..., None] * ac
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    w_bc = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    closest = np.where(on_bc[..., None], b + w_bc[..., None] * (c - b),
                       closest)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[..., None],
                       a + safe_div(d2, d2 - d6)[..., None] * ac, closest)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[..., None],
                       a + safe_div(d1, d1 - d3)[..., None] * ab, closest)
    at_c = (d6 >= 0) & (d5 <= d6)
    closest = np.where(at_c[..., None], c, closest)
    at_b = (d3 >= 0) & (d4 <= d3)
    closest = np.where(at_b[..., None], b, closest)
    at_a = (d1 <= 0) & (d2 <= 0)
    closest = np.where(at_a[..., None], a, closest)
    return np.linalg.norm(p - closest, axis=-1)


def point_mesh_distance(points, mesh, chunk=4096):
    """Minimum distance from each point to the mesh surface."""
    pts = np.asarray(getattr(points, "points", points),
                     dtype=np.float64).reshape(-1, 3)
    v = mesh.vertices
    f = mesh.faces
    if len(f) == 0:
        raise ValueError("mesh has no faces")
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    out = np.empty(len(pts))
    for lo in range(0, len(pts), chunk):
        sub = pts[lo:lo + chunk]
        out[lo:lo + chunk] = point_triangle_distances(sub, a, b, c) \
            .min(axis=1)
    return out


def zone_distance_metrics(auto, truth, axis):
    """Surface distances binned into base/central/apex thirds.

    Every automatic vertex's distance to the truth surface is assigned
    to one of three equal slabs of the truth's extent along `axis` (unit
    vector pointing base to apex); projections beyond the extent clamp
    to the end zones so the zones partition the vertices.
    """
    ax = np.asarray(axis, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(ax)
    if norm == 0:
        raise ValueError("axis must be a nonzero vector")
    ax = ax / norm
    if len(auto.vertices) == 0 or len(truth.vertices) == 0:
        raise ValueError("meshes must be nonempty")
    areas = 0.5 * np.linalg.norm(
        np.cross(truth.vertices[truth.faces[:, 1]]
                 - truth.vertices[truth.faces[:, 0]],
                 truth.vertices[truth.faces[:, 2]]
                 - truth.vertices[truth.faces[:, 0]]), axis=1)
    if not np.any(areas > 0):
        raise ValueError("degenerate truth mesh")
    d = point_mesh_distance(auto.vertices, truth)
    t = truth.vertices @ ax
    t_lo, t_hi = t.min(), t.max()
    if t_hi <= t_lo:
        raise ValueError("degenerate truth mesh")
    pos = (auto.vertices @ ax - t_lo) / (t_hi - t_lo)
    zone_idx = np.clip(np.floor(pos * 3.0).astype(int), 0, 2)
    stats = {}
    counts = []
    for k, name in enumerate(ZONES):
        sel = d[zone_idx == k]
        counts.append(len(sel))
        stats[name + "_mean"] = float(sel.mean()) if len(sel) else 0.0
        stats[name + "_std"] = float(sel.std()) if len(sel) else 0.0
    return ZoneMetrics(all_mean=float(d.mean()), all_std=float(d.std()),
                       counts=tuple(counts), **stats)


def metrics_report(zm):
    """One metric per line, key=value."""
    lines = []
    for name in ZONES + ("all",):
        mean, std = zm.zone(name)
        lines.append(f"{name}_mean_mm={mean!r}")
        lines.append(f"{name}_std_mm={std!r}")
    for k, name in enumerate(ZONES):
        lines.append(f"{name}_vertices={zm.counts[k]}")
    if zm.sens is not None:
        lines.append(f"sens={zm.sens!r}")
    if zm.ppv is not None:
        lines.append(f"ppv={zm.ppv!r}")
    return "\n".join(lines) + "\n"


def voxelize_mesh(mesh, shape, spacing, origin, max_jitter=40):
    """Binary volume of voxel centers inside a closed mesh.

    Scanline parity along the x axis; rows whose ray grazes a vertex or
    edge (odd crossing count or coincident hits) are re-cast with a
    small irrational jitter until the parity is clean.
    """
    shape = tuple(int(n) for n in shape)
    spacing = np.asarray(spacing, dtype=np.float64).reshape(3)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    v = mesh.vertices
    f = mesh.faces
    if len(f) == 0:
        raise ValueError("mesh has no faces")
    tri = v[f]                                    # (T, 3 verts, xyz)
    xs = origin[0] + spacing[0] * np.arange(shape[0])
    ys = origin[1] + spacing[1] * np.arange(shape[1])
    zs = origin[2] + spacing[2] * np.arange(shape[2])
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    rows = np.stack([yy.ravel(), zz.ravel()], axis=1)   # (R, 2)
    data = np.zeros(shape, dtype=np.float32)
    pending = np.arange(len(rows))
    for level in range(max_jitter + 1):
        if not len(pending):
            break
        jitter = level * 1e-6 * np.array([math.sqrt(2.0) * spacing[1],
                                          math.sqrt(3.0) * spacing[2]])
        pending = _scan_rows(tri, rows[pending] + jitter, pending, xs,
                             data, shape)
    if len(pending):
        raise ValueError("voxelization failed to resolve grazing rays")
    return ScalarVolume(data, spacing, origin, background=0.0)


def _scan_rows(tri, rows, row_ids, xs, data, shape, chunk=512):
    """Fill parity spans for the given rows; returns ids needing re-cast."""
    y0 = tri[None, :, 0, 1]
    z0 = tri[None, :, 0, 2]
    ey = tri[:, 1, 1] - tri[:, 0, 1]
    ez = tri[:, 1, 2] - tri[:, 0, 2]
    fy = tri[:, 2, 1] - tri[:, 0, 1]
    fz = tri[:, 2, 2] - tri[:, 0, 2]
    det = ey * fz - ez * fy                       # projected tri area*2
    ok = det != 0.0
    inv = np.where(ok, det, 1.0)
    bad = []
    for lo in range(0, len(rows), chunk):
        ry = rows[lo:lo + chunk, 0:1]
        rz = rows[lo:lo + chunk, 1:2]
        py = ry - y0
        pz = rz - z0
        u = (py * fz[None] - pz * fy[None]) / inv[None]
        w = (ey[None] * pz - ez[None] * py) / inv[None]
        eps = 1e-10
        hit = ok[None] & (u > eps) & (w > eps) & (u + w < 1.0 - eps)
        # a ray skimming an edge or vertex can keep even parity while
        # dropping a crossing; treat any borderline hit as grazing
        graze = ok[None] & (u > -eps) & (w > -eps) & (u + w < 1.0 + eps) \
            & ~hit
        x_hit = tri[None, :, 0, 0] \
            + u * (tri[None, :, 1, 0] - tri[None, :, 0, 0]) \
            + w * (tri[None, :, 2, 0] - tri[None, :, 0, 0])
        for r in range(len(ry)):
            sel = hit[r]
            n = int(sel.sum())
            rid = row_ids[lo + r]
            if graze[r].any():
                bad.append(rid)
                continue
            if n == 0:
                continue
            t = np.sort(x_hit[r][sel])
            if n % 2 or (np.diff(t) < 1e-9).any():
                bad.append(rid)
                continue
            j, k = rid // shape[2], rid % shape[2]
            inside = np.zeros(shape[0], dtype=bool)
            for s in range(0, n, 2):
                inside ^= (xs > t[s]) & (xs < t[s + 1])
            data[:, j, k] = inside
    return np.array(bad, dtype=int)
