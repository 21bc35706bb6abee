"""Iterative population atlas: mean image, contour, and region priors.

Each generation registers the current reference onto every individual
(so the recovered field maps individual coordinates to reference
coordinates), inverts that field densely on the reference grid, and
averages the pulled-back individuals.  The mean becomes the next
reference image while the reference contour is kept as the atlas
surface.
"""

import hashlib
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .correspondence import RegionPriors, region_priors
from .fileio import (
    read_field,
    read_keyvalues,
    read_matrix,
    read_mesh,
    read_points,
    read_volume,
    write_field,
    write_keyvalues,
    write_matrix,
    write_mesh,
    write_points,
    write_volume,
)
from .grid import (
    DisplacementField,
    PointSet,
    ScalarVolume,
    SurfaceMesh,
    invert_field,
    warp_volume,
)
from .hybrid import HybridConfig, register_hybrid
from .preprocess import bias_correct


@dataclass(frozen=True)
class AtlasConfig:
    hybrid_cfg: HybridConfig = HybridConfig()
    max_generations: int = 5
    mean_tol: float = 1e-3       # relative RMS change of the mean image
    bias_order: int = 1
    invert_tol: float = 1e-3
    invert_max_iter: int = 100
    # False drops the expert contours from the registrations, leaving a
    # purely intensity-driven atlas for comparison runs
    use_contours: bool = True

    def __post_init__(self):
        if self.max_generations < 1:
            raise ValueError("max_generations must be >= 1")
        if self.mean_tol < 0:
            raise ValueError("mean_tol must be >= 0")


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    rms_change: float
    survivors: int
    excluded: tuple


@dataclass(frozen=True)
class Atlas:
    mean_image: ScalarVolume
    surface: SurfaceMesh
    region_priors: RegionPriors | None
    population_transforms: list
    generation: int
    # original population indices aligned with population_transforms
    member_indices: tuple = ()
    build_trace: tuple = ()

    def __post_init__(self):
        lo = np.asarray(self.mean_image.origin, dtype=np.float64)
        hi = lo + np.asarray(self.mean_image.extent())
        v = self.surface.vertices
        if len(v) and (np.any(v < lo - 1e-6) or np.any(v > hi + 1e-6)):
            raise ValueError("surface vertices outside mean image extent")
        if self.region_priors is not None \
                and self.region_priors.n_regions != 2:
            raise ValueError("expected exactly base and apex prior rows")
        if self.member_indices and \
                len(self.member_indices) != len(self.population_transforms):
            raise ValueError("member_indices must align with transforms")


def select_reference(population):
    """Index of the member with median segmentation volume."""
    vols = np.array([mesh.enclosed_volume() for _, mesh in population])
    return int(np.argsort(vols, kind="stable")[(len(vols) - 1) // 2])


def build_atlas(population, reference_index=None, cfg=AtlasConfig()):
    """Register the population, average it, and iterate on the mean.

    `population` is a sequence of (image, contour mesh) pairs.  A member
    whose registration does not converge is dropped with a warning; at
    least two members must survive the final generation.
    """
    population = list(population)
    if len(population) < 2:
        raise ValueError("population must have at least 2 members")
    images = [bias_correct(img, cfg.bias_order) for img, _ in population]
    meshes = [mesh for _, mesh in population]
    ref_idx = select_reference(population) if reference_index is None \
        else int(reference_index)
    if not 0 <= ref_idx < len(population):
        raise ValueError("reference_index out of range")
    ref_image = images[ref_idx]
    ref_mesh = meshes[ref_idx]
    ref_verts = PointSet(ref_mesh.vertices)
    prev_mean = ref_image
    trace = []
    transforms = []
    survivors = []
    generation = 0
    for gen in range(1, cfg.max_generations + 1):
        transforms = []
        warped = []
        excluded = []
        survivors = []
        for i, img in enumerate(images):
            scene = PointSet(meshes[i].vertices) if cfg.use_contours \
                else PointSet(np.zeros((0, 3)))
            res = register_hybrid(prev_mean, img, ref_verts, scene,
                                  cfg=cfg.hybrid_cfg)
            if not res.converged:
                excluded.append(i)
                warnings.warn(f"member {i} did not converge in "
                              f"generation {gen}; excluded")
                continue
            t_i, _ = invert_field(res.field, ref_image.shape,
                                  ref_image.spacing, ref_image.origin,
                                  tol=cfg.invert_tol,
                                  max_iter=cfg.invert_max_iter)
            transforms.append(t_i)
            survivors.append(i)
            warped.append(warp_volume(img, t_i).data)
        if len(warped) < 2:
            raise ValueError("fewer than 2 members survived registration")
        mean_data = np.mean(warped, axis=0)
        mean = ScalarVolume(mean_data, ref_image.spacing,
                            ref_image.origin,
                            background=ref_image.background)
        diff = mean_data - prev_mean.data
        rms_change = float(np.sqrt((diff ** 2).mean()))
        scale = float(np.sqrt((prev_mean.data ** 2).mean()))
        trace.append(GenerationRecord(gen, rms_change, len(warped),
                                      tuple(excluded)))
        prev_mean = mean
        generation = gen
        if rms_change < cfg.mean_tol * max(scale, 1e-30):
            break
    return Atlas(mean_image=prev_mean, surface=ref_mesh,
                 region_priors=None, population_transforms=transforms,
                 generation=generation, member_indices=tuple(survivors),
                 build_trace=tuple(trace))


def attach_region_priors(atlas, base_center, apex_center, kernel_sigma):
    """Store base/apex Gaussian priors over the atlas surface vertices."""
    lo = np.asarray(atlas.mean_image.origin, dtype=np.float64)
    hi = lo + np.asarray(atlas.mean_image.extent())
    centers = np.array([base_center, apex_center], dtype=np.float64)
    if np.any(centers < lo - 1e-6) or np.any(centers > hi + 1e-6):
        raise ValueError("region centers outside atlas extent")
    pr = region_priors(PointSet(atlas.surface.vertices),
                       PointSet(centers), kernel_sigma)
    return replace(atlas, region_priors=pr)


def save_atlas(dirpath, atlas, config_repr=""):
    """Persist an atlas as a directory of the standard file formats."""
    os.makedirs(dirpath, exist_ok=True)
    write_volume(os.path.join(dirpath, "mean.vol"), atlas.mean_image)
    write_mesh(os.path.join(dirpath, "surface.mesh"), atlas.surface)
    for i, t in enumerate(atlas.population_transforms):
        write_field(os.path.join(dirpath, f"transform_{i:03d}.field"), t)
    manifest = {
        "generation": atlas.generation,
        "members": len(atlas.population_transforms),
        "member_indices": " ".join(str(i) for i in atlas.member_indices),
        "config_hash": hashlib.sha256(
            config_repr.encode()).hexdigest()[:16],
    }
    if atlas.region_priors is not None:
        write_matrix(os.path.join(dirpath, "priors.txt"),
                     atlas.region_priors.pi)
        write_points(os.path.join(dirpath, "prior_centers.pts"),
                     atlas.region_priors.region_centers)
        manifest["prior_sigma"] = repr(atlas.region_priors.kernel_sigma)
    write_keyvalues(os.path.join(dirpath, "manifest.txt"), manifest)


def load_atlas(dirpath):
    mean = read_volume(os.path.join(dirpath, "mean.vol"))
    surface = read_mesh(os.path.join(dirpath, "surface.mesh"))
    manifest = read_keyvalues(os.path.join(dirpath, "manifest.txt"))
    n = int(manifest["members"])
    transforms = [
        read_field(os.path.join(dirpath, f"transform_{i:03d}.field"))
        for i in range(n)
    ]
    priors = None
    priors_path = os.path.join(dirpath, "priors.txt")
    if os.path.exists(priors_path):
        priors = RegionPriors(read_matrix(priors_path),
                              read_points(os.path.join(
                                  dirpath, "prior_centers.pts")),
                              float(manifest["prior_sigma"]))
    idx = tuple(int(t) for t in manifest.get("member_indices", "").split())
    return Atlas(mean_image=mean, surface=surface, region_priors=priors,
                 population_transforms=transforms,
                 generation=int(manifest["generation"]),
                 member_indices=idx)
