"""Intensity-driven deformable registration (fluid flow + elastic prior).

The similarity energy is plain SSD between the warped template T(h(x))
and the reference R(x).  Each iteration computes the per-voxel SSD
gradient, smooths it (fluid regularization of the flow), caps the step
at a fraction of a voxel, composes it into the running transform, and
then relaxes the accumulated field toward lower linear-elastic energy
(elastic regularization of the deformation itself).
"""

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .grid import (
    DisplacementField,
    ScalarVolume,
    central_gradient,
    compose,
    gaussian_smooth,
    voxel_centers,
    warp_volume,
)


@dataclass(frozen=True)
class FluidElasticConfig:
    sigma_fluid: float = 2.0          # mm, smoothing of the flow update
    max_step: float = 0.5             # voxels, cap on |c(x)|
    lambda_lame: float = 0.0
    mu_lame: float = 1.0
    diffusion_time: float = 1.0       # strength of one elastic step
    sweeps: int = 2                   # relaxation sweeps per elastic step
    max_iters: int = 120
    convergence_tol: float = 1e-4     # relative SSD decrease over window
    window: int = 5
    pyramid_levels: int = 2

    def __post_init__(self):
        if self.sigma_fluid < 0:
            raise ValueError("sigma_fluid must be >= 0")
        if self.max_step <= 0:
            raise ValueError("max_step must be positive")
        if self.mu_lame <= 0 or self.lambda_lame + self.mu_lame <= 0:
            raise ValueError("need mu > 0 and lambda + mu > 0")


def ssd(t_vol, r_vol, h):
    """Sum of squared differences of T(h(x)) and R(x) over R's grid."""
    warped = warp_volume(t_vol, h)
    diff = np.asarray(warped.data, dtype=np.float64) \
        - np.asarray(r_vol.data, dtype=np.float64)
    return float((diff ** 2).sum())


def ssd_force(t_vol, r_vol, h):
    """Per-voxel SSD gradient 2 (T(h(x)) - R(x)) grad[T o h](x)."""
    warped = warp_volume(t_vol, h)
    diff = np.asarray(warped.data, dtype=np.float64) \
        - np.asarray(r_vol.data, dtype=np.float64)
    grad = central_gradient(warped.data, r_vol.spacing)
    return DisplacementField(2.0 * diff[..., None] * grad,
                             r_vol.spacing, r_vol.origin)


def elastic_energy(fld, lambda_lame=0.0, mu_lame=1.0):
    """Discrete linear-elastic potential of a displacement field.

    Forward differences, terms dropped at the far boundary; this is the
    exact quadratic form whose gradient the relaxation kernel drives to
    zero, so the semi-implicit step can never increase it.
    """
    u = np.asarray(fld.data, dtype=np.float64)
    h = fld.spacing
    energy = 0.0
    div = np.zeros(u.shape[:3])
    for ax in range(3):
        sl = [slice(None)] * 3
        sl[ax] = slice(0, -1)
        div[tuple(sl)] += np.diff(u[..., ax], axis=ax) / h[ax]
        for c in range(3):
            dc = np.diff(u[..., c], axis=ax) / h[ax]
            energy += mu_lame / 2.0 * float((dc ** 2).sum())
    energy += (lambda_lame + mu_lame) / 2.0 * float((div ** 2).sum())
    return energy


def elastic_regularize(fld, cfg=FluidElasticConfig()):
    """One semi-implicit step of the elastic gradient flow.

    Solves (I + tau A) u_new = u_old approximately with red-black
    Gauss-Seidel sweeps, A being the discrete elastic operator; every
    partial sweep already has elastic energy <= the input's.
    """
    u = np.array(fld.data)
    rhs = u.copy()
    hx, hy, hz = (float(s) for s in fld.spacing)
    for _ in range(cfg.sweeps):
        for comp in range(3):
            for parity in (0, 1):
                _kernels.elastic_halfsweep(
                    u, rhs, cfg.diffusion_time, cfg.mu_lame,
                    cfg.lambda_lame + cfg.mu_lame, hx, hy, hz, comp, parity)
    return replace(fld, data=u)


@dataclass(frozen=True)
class FluidResult:
    field: DisplacementField
    ssd_initial: float
    ssd_final: float
    converged: bool
    trace: list                       # per iteration: (ssd, max |c| voxels)


def _decimate_volume(v):
    sm = gaussian_smooth(np.asarray(v.data, dtype=np.float64), v.spacing,
                         v.spacing)
    return ScalarVolume(sm[::2, ::2, ::2].astype(v.data.dtype),
                        v.spacing * 2, v.origin, background=v.background)


def _resample_field(fld, shape, spacing, origin):
    centers = voxel_centers(shape, spacing, origin).reshape(-1, 3)
    data = fld.displacement_at(centers).reshape(tuple(shape) + (3,))
    return DisplacementField(data.astype(fld.data.dtype, copy=False),
                             spacing, origin)


def _fluid_level(t_vol, r_vol, h, cfg, max_iters, trace):
    h = DisplacementField(np.asarray(h.data, dtype=np.float32),
                          h.spacing, h.origin)
    r_data = np.asarray(r_vol.data, dtype=np.float32)
    spacing = r_vol.spacing
    inv_sp = (1.0 / spacing).astype(np.float32)
    best = None
    history = []
    converged = False
    for it in range(max_iters + 1):
        warped = warp_volume(t_vol, h)
        diff = np.asarray(warped.data, dtype=np.float32) - r_data
        cur = float((diff.astype(np.float64) ** 2).sum())
        history.append(cur)
        if best is None or cur < best[0]:
            best = (cur, h)
        if it == max_iters:
            break
        if len(history) > cfg.window:
            prev = history[-1 - cfg.window]
            if prev - cur < cfg.convergence_tol * max(prev, 1e-30):
                converged = True
                break
        grad = central_gradient(warped.data, spacing).astype(np.float32)
        force = (2.0 * diff)[..., None] * grad
        flow = gaussian_smooth(force, cfg.sigma_fluid, spacing) \
            if cfg.sigma_fluid > 0 else force
        mag = float(np.sqrt(((flow * inv_sp) ** 2).sum(axis=3).max()))
        if mag == 0.0:
            converged = True
            break
        k = (1.0 - 1e-5) * cfg.max_step / mag
        c_data = (-k) * flow
        max_c = float(np.sqrt(
            ((c_data.astype(np.float64) / spacing) ** 2).sum(axis=3).max()))
        while max_c > cfg.max_step:
            c_data *= np.float32(0.999)
            max_c = float(np.sqrt(
                ((c_data.astype(np.float64) / spacing) ** 2)
                .sum(axis=3).max()))
        trace.append((cur, max_c))
        c = DisplacementField(c_data, h.spacing, h.origin)
        h = elastic_regularize(compose(h, c), cfg)
    return best[1], best[0], converged


def register_fluid_elastic(t_vol, r_vol, h_init=None,
                           cfg=FluidElasticConfig()):
    """Fluid-flow SSD registration with elastic regularization.

    Optionally runs a 2-level coarse-to-fine pyramid; the returned field
    lives on R's grid and is the best-SSD iterate seen, so the final SSD
    never exceeds the initial one.
    """
    if h_init is None:
        h_init = DisplacementField.zeros(r_vol.shape, r_vol.spacing,
                                         r_vol.origin, dtype=np.float32)
    ssd0 = ssd(t_vol, r_vol, h_init)
    trace = []
    levels = max(1, int(cfg.pyramid_levels))
    if levels > 1 and min(r_vol.shape) >= 16:
        t_c = _decimate_volume(t_vol)
        r_c = _decimate_volume(r_vol)
        h_c = _resample_field(h_init, r_c.shape, r_c.spacing, r_c.origin)
        n_coarse = int(0.6 * cfg.max_iters)
        h_c, _, _ = _fluid_level(t_c, r_c, h_c, cfg, n_coarse, trace)
        h = _resample_field(h_c, r_vol.shape, r_vol.spacing, r_vol.origin)
        if ssd(t_vol, r_vol, h) > ssd0:
            h = h_init
        n_fine = cfg.max_iters - n_coarse
    else:
        h = h_init
        n_fine = cfg.max_iters
    h, ssd_fine, converged = _fluid_level(t_vol, r_vol, h, cfg, n_fine, trace)
    if ssd_fine > ssd0:
        h, ssd_fine = h_init, ssd0
    h = DisplacementField(np.asarray(h.data, dtype=np.float64),
                          h.spacing, h.origin)
    return FluidResult(field=h, ssd_initial=ssd0, ssd_final=ssd_fine,
                       converged=converged, trace=trace)
