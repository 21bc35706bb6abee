"""Synthetic organ phantoms with exact ground truth.

A phantom is an analytic smooth-rimmed ellipsoid pushed through a known
invertible warp g (global similarity composed with a band-limited
sinusoidal displacement), rendered as W(x) = E(g(x)) with optional noise
and gain applied last.  Because E and g are analytic, the ground-truth
labels, surface mesh, pole seed points and dense field carry no
discretization error beyond the final voxel grid itself.
"""

from dataclasses import dataclass, replace

import numpy as np

from .grid import (
    DisplacementField,
    ScalarVolume,
    SurfaceMesh,
    jacobian_determinant,
    voxel_centers,
)
from .preprocess import _rot_matrix


def _tuple3(v):
    return tuple(float(x) for x in np.broadcast_to(np.asarray(v, float), (3,)))


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (64, 64, 64)
    spacing: float = 1.0
    origin: tuple = (0.0, 0.0, 0.0)
    semi_axes: tuple = (12.0, 10.0, 15.0)     # mm; long axis = z by default
    pose_rotation: tuple = (0.0, 0.0, 0.0)    # organ orientation, radians
    organ_value: float = 100.0
    background_value: float = 10.0
    rim_value: float = 30.0                   # additive peak at the surface
    edge_width: float = 1.2                   # mm, organ/background blend
    rim_width: float = 1.5                    # mm
    noise_sigma: float = 1.8
    bias_gain: tuple = (0.0, 0.0, 0.0)        # linear gain slope per axis
    warp_scale: float = 1.0
    warp_rotation: tuple = (0.0, 0.0, 0.0)
    warp_translation: tuple = (0.0, 0.0, 0.0)
    sin_amplitude: tuple = (0.0, 0.0, 0.0)    # mm, per displacement component
    sin_freq: tuple = ((0.5, 0.5, 0.5),) * 3  # cycles across the extent
    sin_phase: tuple = ((0.0, 0.0, 0.0),) * 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "origin", _tuple3(self.origin))
        object.__setattr__(self, "semi_axes", _tuple3(self.semi_axes))
        object.__setattr__(self, "pose_rotation", _tuple3(self.pose_rotation))
        object.__setattr__(self, "bias_gain", _tuple3(self.bias_gain))
        object.__setattr__(self, "warp_rotation", _tuple3(self.warp_rotation))
        object.__setattr__(self, "warp_translation",
                           _tuple3(self.warp_translation))
        object.__setattr__(self, "sin_amplitude", _tuple3(self.sin_amplitude))
        freq = np.asarray(self.sin_freq, dtype=float).reshape(3, 3)
        phase = np.asarray(self.sin_phase, dtype=float).reshape(3, 3)
        object.__setattr__(self, "sin_freq",
                           tuple(tuple(row) for row in freq))
        object.__setattr__(self, "sin_phase",
                           tuple(tuple(row) for row in phase))
        if min(self.semi_axes) <= 0:
            raise ValueError("semi-axes must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if min(self.sin_amplitude) < 0:
            raise ValueError("sinusoid amplitudes must be >= 0")

    @property
    def grid_center(self):
        return np.asarray(self.origin) \
            + (np.asarray(self.shape) - 1) * self.spacing / 2.0

    @property
    def extent(self):
        return (np.asarray(self.shape) - 1) * self.spacing

    @property
    def organ_center(self):
        return self.grid_center


class _Warp:
    """g(x) = sim(x + u_sin(x)); analytic forward and inverse maps."""

    def __init__(self, spec):
        self.center = spec.grid_center
        self.origin = np.asarray(spec.origin)
        self.extent = np.maximum(spec.extent, 1e-9)
        self.scale = float(spec.warp_scale)
        self.rot = _rot_matrix(spec.warp_rotation)
        self.trans = np.asarray(spec.warp_translation)
        self.amp = np.asarray(spec.sin_amplitude)
        self.freq = np.asarray(spec.sin_freq)
        self.phase = np.asarray(spec.sin_phase)

    def sinusoid(self, pts):
        that = (pts - self.origin) / self.extent
        u = np.empty_like(pts)
        for c in range(3):
            term = self.amp[c]
            for d in range(3):
                term = term * np.sin(2.0 * np.pi * self.freq[c, d]
                                     * that[:, d] + self.phase[c, d])
            u[:, c] = term
        return u

    def similarity(self, pts):
        return self.scale * (pts - self.center) @ self.rot.T \
            + self.center + self.trans

    def similarity_inv(self, pts):
        return ((pts - self.center - self.trans) / self.scale) @ self.rot \
            + self.center

    def forward(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return self.similarity(pts + self.sinusoid(pts))

    def inverse(self, targets, tol=1e-10, max_iter=200):
        # fixed point x = sim^-1(v) - u_sin(x); contraction when |grad u| < 1
        v = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
        base = self.similarity_inv(v)
        x = base.copy()
        for _ in range(max_iter):
            nxt = base - self.sinusoid(x)
            if np.abs(nxt - x).max() < tol:
                return nxt
            x = nxt
        raise ValueError("warp inverse iteration did not converge")


def _ellipsoid_rho(pts, spec):
    rot = _rot_matrix(spec.pose_rotation)
    local = (np.asarray(pts).reshape(-1, 3) - spec.organ_center) @ rot
    return np.sqrt(((local / np.asarray(spec.semi_axes)) ** 2).sum(axis=1))


def _intensity_profile(rho, spec):
    width = spec.edge_width / np.mean(spec.semi_axes)
    rimw = spec.rim_width / np.mean(spec.semi_axes)
    body = 1.0 / (1.0 + np.exp(-(1.0 - rho) / max(width, 1e-9)))
    rim = np.exp(-0.5 * ((rho - 1.0) / max(rimw, 1e-9)) ** 2)
    return spec.background_value \
        + (spec.organ_value - spec.background_value) * body \
        + spec.rim_value * rim


def ellipsoid_mesh(spec, n_theta=17, n_phi=24):
    """Triangulated ellipsoid surface in the canonical (template) pose."""
    thetas = np.linspace(0.0, np.pi, n_theta)[1:-1]
    phis = 2.0 * np.pi * np.arange(n_phi) / n_phi
    verts = [np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0])]
    for th in thetas:
        for ph in phis:
            verts.append(np.array([np.sin(th) * np.cos(ph),
                                   np.sin(th) * np.sin(ph),
                                   np.cos(th)]))
    unit = np.array(verts)
    faces = []
    def ring(r, p):
        return 2 + r * n_phi + (p % n_phi)
    for p in range(n_phi):
        faces.append([0, ring(0, p), ring(0, p + 1)])
        faces.append([1, ring(n_theta - 3, p + 1), ring(n_theta - 3, p)])
    for r in range(n_theta - 3):
        for p in range(n_phi):
            a, b = ring(r, p), ring(r, p + 1)
            c, d = ring(r + 1, p), ring(r + 1, p + 1)
            faces.append([a, d, b])
            faces.append([a, c, d])
    rot = _rot_matrix(spec.pose_rotation)
    vertices = spec.organ_center \
        + (unit * np.asarray(spec.semi_axes)) @ rot.T
    return SurfaceMesh(vertices, np.asarray(faces, dtype=np.int64))


def pole_points(spec):
    """Template base/apex points: the poles along the longest semi-axis."""
    ax = int(np.argmax(spec.semi_axes))
    e = np.zeros(3)
    e[ax] = spec.semi_axes[ax]
    rot = _rot_matrix(spec.pose_rotation)
    base = spec.organ_center + rot @ e
    apex = spec.organ_center - rot @ e
    return base, apex


@dataclass(frozen=True)
class Phantom:
    image: ScalarVolume
    mesh: SurfaceMesh
    field: DisplacementField
    seed_base: np.ndarray
    seed_apex: np.ndarray
    mask: np.ndarray
    spec: PhantomSpec


def generate_phantom(spec, mesh_resolution=(17, 24)):
    """Render one phantom: image, truth surface, truth field, pole seeds.

    Raises ValueError if the requested warp folds (non-positive Jacobian
    anywhere on the grid).
    """
    warp = _Warp(spec)
    sp = (spec.spacing,) * 3 if np.isscalar(spec.spacing) else spec.spacing
    centers = voxel_centers(spec.shape, sp, spec.origin)
    flat = centers.reshape(-1, 3)
    mapped = warp.forward(flat)
    fld = DisplacementField((mapped - flat).reshape(centers.shape),
                            sp, spec.origin)
    if jacobian_determinant(fld).min() <= 0.0:
        raise ValueError("requested warp is not invertible on the grid")
    rho = _ellipsoid_rho(mapped, spec)
    data = _intensity_profile(rho, spec).reshape(spec.shape)
    rng = np.random.default_rng(spec.seed)
    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)
    if any(spec.bias_gain):
        that = (centers - np.asarray(spec.origin)) \
            / np.maximum(spec.extent, 1e-9)
        gain = 1.0 + (that * np.asarray(spec.bias_gain)).sum(axis=-1)
        data = data * gain
    mask = (rho <= 1.0).reshape(spec.shape)
    template = ellipsoid_mesh(spec, *mesh_resolution)
    verts = warp.inverse(template.vertices)
    base_t, apex_t = pole_points(spec)
    seeds = warp.inverse(np.stack([base_t, apex_t]))
    image = ScalarVolume(data, sp, spec.origin,
                         background=spec.background_value)
    return Phantom(image=image, mesh=template.with_vertices(verts),
                   field=fld, seed_base=seeds[0], seed_apex=seeds[1],
                   mask=mask, spec=spec)


@dataclass(frozen=True)
class VariationConfig:
    """Population spread; zero everything for identical members."""

    axes_frac: float = 0.08           # relative semi-axis perturbation
    amplitude: float = 2.5            # mm, sinusoid amplitude range
    scale: float = 0.03
    rotation: float = 0.02            # radians
    translation: float = 0.8          # mm
    small_member_scale: float = 0.78  # axes factor for the small-organ case
    base_focus: bool = True           # concentrate warp at the base pole

    def is_zero(self):
        return (self.axes_frac == 0 and self.amplitude == 0
                and self.scale == 0 and self.rotation == 0
                and self.translation == 0)


def _base_focus_zfactor(spec):
    """Frequency/phase of a z sinusoid that vanishes at the apex pole and
    peaks at the base pole (quarter wave between the poles)."""
    base_t, apex_t = pole_points(spec)
    ext = max(spec.extent[2], 1e-9)
    zb = (base_t[2] - spec.origin[2]) / ext
    za = (apex_t[2] - spec.origin[2]) / ext
    rate = (np.pi / 2.0) / (zb - za)
    freq = rate / (2.0 * np.pi)
    phase = -rate * za
    return freq, phase


def generate_population(base_spec, n, variation=VariationConfig(),
                        mesh_resolution=(17, 24)):
    """Draw n phantoms around a base spec with seeded variation.

    One member (the last) gets uniformly shrunk semi-axes so every
    population contains a small-organ case; with zero variation all
    members are identical.
    """
    if n < 3:
        raise ValueError("population needs n >= 3")
    rng = np.random.default_rng(base_spec.seed)
    zf, zp = _base_focus_zfactor(base_spec)
    phantoms = []
    for i in range(n):
        axes = np.asarray(base_spec.semi_axes) \
            * (1.0 + rng.uniform(-variation.axes_frac, variation.axes_frac, 3))
        amp = rng.uniform(0.4, 1.0, 3) * variation.amplitude
        freq = rng.uniform(0.35, 0.75, (3, 3))
        phase = rng.uniform(0.0, 2.0 * np.pi, (3, 3))
        if variation.base_focus:
            freq[:, 2] = zf
            phase[:, 2] = zp
        spec = replace(
            base_spec,
            semi_axes=tuple(axes),
            sin_amplitude=tuple(amp) if variation.amplitude else (0.0,) * 3,
            sin_freq=tuple(tuple(row) for row in freq),
            sin_phase=tuple(tuple(row) for row in phase),
            warp_scale=1.0 + rng.uniform(-variation.scale, variation.scale),
            warp_rotation=tuple(rng.uniform(-variation.rotation,
                                            variation.rotation, 3)),
            warp_translation=tuple(rng.uniform(-variation.translation,
                                               variation.translation, 3)),
            seed=base_spec.seed + 1000 * (i + 1),
        )
        if variation.is_zero():
            spec = replace(spec, semi_axes=base_spec.semi_axes,
                           warp_scale=base_spec.warp_scale,
                           warp_rotation=base_spec.warp_rotation,
                           warp_translation=base_spec.warp_translation,
                           sin_freq=base_spec.sin_freq,
                           sin_phase=base_spec.sin_phase,
                           seed=base_spec.seed)
        if i == n - 1 and not variation.is_zero():
            spec = replace(spec, semi_axes=tuple(
                np.asarray(spec.semi_axes) * variation.small_member_scale))
        phantoms.append(generate_phantom(spec, mesh_resolution))
    return phantoms
