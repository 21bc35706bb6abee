"""Command-line workflows: phantom generation, atlas building,
segmentation, and evaluation.

Every run writes a manifest (command, merged configuration, input file
hashes, version, wall time, exit status) next to its outputs, so a run
can be reproduced bit-exactly from the manifest alone.

Exit codes: 0 success, 2 usage or input error, 3 precondition violation,
4 non-convergence (results are still written).
"""

import argparse
import hashlib
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .atlas import (
    AtlasConfig,
    attach_region_priors,
    build_atlas,
    load_atlas,
    save_atlas,
    select_reference,
)
from .bspline import E2Config
from .correspondence import SigmaSchedule
from .fileio import (
    read_keyvalues,
    read_mesh,
    read_points,
    read_shape_model,
    read_volume,
    write_field,
    write_keyvalues,
    write_mesh,
    write_points,
    write_volume,
)
from .grid import PointSet
from .hybrid import HybridConfig
from .intensity import FluidElasticConfig
from .preprocess import RigidConfig
from .segment import (
    SegmentConfig,
    metrics_report,
    segment,
    volume_metrics,
    voxelize_mesh,
    zone_distance_metrics,
)
from .synth import PhantomSpec, generate_phantom


class CommandError(Exception):
    """Failure with a designated process exit code."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# configuration keys accepted in config files and --set flags, with
# their parsers; a single flat namespace covers all commands
CONFIG_KEYS = {
    "beta": float,
    "max_alternations": int,
    "convergence_tol": float,
    "sigma_initial": float,
    "sigma_decay": float,
    "sigma_floor": float,
    "fluid_sigma": float,
    "fluid_time": float,
    "fluid_iters": int,
    "fluid_levels": int,
    "fluid_tol": float,
    "lattice_vox": float,
    "outer_iters": int,
    "inner_iters": int,
    "smooth_weight": float,
    "rigid_levels": int,
    "rigid_iters": int,
    "clamp": lambda s: None if s.lower() == "none" else float(s),
    "generations": int,
    "mean_tol": float,
    "bias_order": int,
    "use_contours": lambda s: bool(int(s)),
    "kernel_sigma": float,
}

CONFIG_DEFAULTS = {
    "beta": 1e-3,
    "max_alternations": 4,
    "convergence_tol": 2.5e-2,
    "sigma_initial": 9.0,
    "sigma_decay": 0.7,
    "sigma_floor": 2.0,
    "fluid_sigma": 12.0,
    "fluid_time": 1.0,
    "fluid_iters": 60,
    "fluid_levels": 2,
    "fluid_tol": 0.0,
    "lattice_vox": 8.0,
    "outer_iters": 4,
    "inner_iters": 10,
    "smooth_weight": 1e-3,
    "rigid_levels": 2,
    "rigid_iters": 40,
    "clamp": 3.0,
    "generations": 1,
    "mean_tol": 1e-3,
    "bias_order": 1,
    "use_contours": True,
    "kernel_sigma": 5.0,
}


def merge_config(config_path=None, overrides=()):
    """Layer defaults < config file < --set flags."""
    merged = dict(CONFIG_DEFAULTS)
    layers = []
    if config_path is not None:
        try:
            layers.append(read_keyvalues(config_path))
        except OSError as e:
            raise CommandError(2, f"cannot read config: {e}")
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise CommandError(2, f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        pairs[key.strip()] = val.strip()
    layers.append(pairs)
    for layer in layers:
        for key, val in layer.items():
            if key not in CONFIG_KEYS:
                raise CommandError(2, f"unknown config key {key!r}")
            try:
                merged[key] = CONFIG_KEYS[key](val)
            except ValueError:
                raise CommandError(2, f"bad value for {key}: {val!r}")
    return merged


def hybrid_config(c, mode="posterior"):
    fluid = FluidElasticConfig(sigma_fluid=c["fluid_sigma"],
                               diffusion_time=c["fluid_time"],
                               max_iters=c["fluid_iters"],
                               pyramid_levels=c["fluid_levels"],
                               convergence_tol=c["fluid_tol"])
    spline = E2Config(lattice_spacing_vox=c["lattice_vox"],
                      outer_iters=c["outer_iters"],
                      inner_iters=c["inner_iters"],
                      smooth_weight=c["smooth_weight"])
    return HybridConfig(beta=c["beta"],
                        max_alternations=c["max_alternations"],
                        convergence_tol=c["convergence_tol"],
                        correspondence_mode=mode,
                        sigma_schedule=SigmaSchedule(
                            initial=c["sigma_initial"],
                            decay=c["sigma_decay"],
                            floor=c["sigma_floor"]),
                        fluid_cfg=fluid, spline_cfg=spline)


def segment_config(c):
    return SegmentConfig(
        rigid_cfg=RigidConfig(levels=c["rigid_levels"],
                              max_iters=c["rigid_iters"]),
        hybrid_cfg=hybrid_config(c, "posterior"),
        clamp=c["clamp"])


def atlas_config(c):
    return AtlasConfig(hybrid_cfg=hybrid_config(c, "hard_icp"),
                       max_generations=c["generations"],
                       mean_tol=c["mean_tol"],
                       bias_order=c["bias_order"],
                       use_contours=c["use_contours"])


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, command, config, inputs, wall_time,
                   exit_status):
    rows = {"command": command, "version": __version__,
            "wall_time_s": f"{wall_time:.3f}", "exit_status": exit_status}
    for key in sorted(config):
        rows[f"config_{key}"] = config[key]
    for name, path in inputs.items():
        rows[f"input_{name}"] = _sha256(path)
    # run_manifest.txt, not manifest.txt: an atlas directory already
    # carries a manifest.txt of its own as part of the storage format
    write_keyvalues(os.path.join(out_dir, "run_manifest.txt"), rows)


def _vec3(text):
    try:
        parts = [float(p) for p in text.split(",")]
    except ValueError:
        parts = []
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"expected x,y,z coordinates, got {text!r}")
    return tuple(parts)


def _require_file(path, what):
    if not os.path.isfile(path):
        raise CommandError(2, f"{what} not found: {path}")
    return path


SPEC_KEYS = {
    "shape": lambda s: tuple(int(p) for p in s.split(",")),
    "spacing": float,
    "origin": lambda s: tuple(float(p) for p in s.split(",")),
    "semi_axes": lambda s: tuple(float(p) for p in s.split(",")),
    "pose_rotation": lambda s: tuple(float(p) for p in s.split(",")),
    "organ_value": float,
    "background_value": float,
    "rim_value": float,
    "edge_width": float,
    "rim_width": float,
    "noise_sigma": float,
    "bias_gain": lambda s: tuple(float(p) for p in s.split(",")),
    "warp_scale": float,
    "warp_rotation": lambda s: tuple(float(p) for p in s.split(",")),
    "warp_translation": lambda s: tuple(float(p) for p in s.split(",")),
    "sin_amplitude": lambda s: tuple(float(p) for p in s.split(",")),
    "seed": int,
}


def phantom_spec_from_file(path):
    raw = read_keyvalues(path)
    kwargs = {}
    for key, val in raw.items():
        if key not in SPEC_KEYS:
            raise CommandError(2, f"unknown phantom spec key {key!r}")
        try:
            kwargs[key] = SPEC_KEYS[key](val)
        except ValueError:
            raise CommandError(2, f"bad phantom spec value {key}={val!r}")
    try:
        return PhantomSpec(**kwargs)
    except (TypeError, ValueError) as e:
        raise CommandError(2, f"invalid phantom spec: {e}")


def cmd_phantom(args):
    _require_file(args.spec, "spec file")
    start = time.perf_counter()
    spec = phantom_spec_from_file(args.spec)
    try:
        ph = generate_phantom(spec)
    except ValueError as e:
        raise CommandError(3, str(e))
    os.makedirs(args.out, exist_ok=True)
    write_volume(os.path.join(args.out, "image.vol"), ph.image)
    write_mesh(os.path.join(args.out, "surface.mesh"), ph.mesh)
    write_field(os.path.join(args.out, "truth.field"), ph.field)
    write_points(os.path.join(args.out, "seeds.pts"),
                 PointSet(np.stack([ph.seed_base, ph.seed_apex])))
    write_manifest(args.out, "phantom", dict(read_keyvalues(args.spec)),
                   {"spec": args.spec}, time.perf_counter() - start, 0)
    return 0


def _load_member(line):
    d = line.strip()
    image = _require_file(os.path.join(d, "image.vol"), "member image")
    mesh = _require_file(os.path.join(d, "surface.mesh"), "member mesh")
    seeds = _require_file(os.path.join(d, "seeds.pts"), "member seeds")
    return read_volume(image), read_mesh(mesh), read_points(seeds), d


def cmd_atlas(args):
    _require_file(args.population, "population list")
    start = time.perf_counter()
    config = merge_config(args.config, args.set or ())
    with open(args.population) as f:
        dirs = [s for s in (ln.strip() for ln in f)
                if s and not s.startswith("#")]
    if len(dirs) < 2:
        raise CommandError(3, "population must list at least 2 members")
    members = [_load_member(d) for d in dirs]
    population = [(img, mesh) for img, mesh, _, _ in members]
    ref_idx = select_reference(population)
    cfg = atlas_config(config)
    try:
        atlas = build_atlas(population, reference_index=ref_idx, cfg=cfg)
    except ValueError as e:
        raise CommandError(3, str(e))
    ref_seeds = members[ref_idx][2].points
    atlas = attach_region_priors(atlas, ref_seeds[0], ref_seeds[1],
                                 config["kernel_sigma"])
    save_atlas(args.out, atlas, config_repr=repr(sorted(config.items())))
    stats = {}
    for rec in atlas.build_trace:
        stats[f"generation_{rec.generation}_rms_change"] = rec.rms_change
        stats[f"generation_{rec.generation}_survivors"] = rec.survivors
    write_keyvalues(os.path.join(args.out, "stats.txt"), stats)
    status = 0 if len(atlas.member_indices) == len(members) else 4
    inputs = {f"member_{i}": os.path.join(d, "image.vol")
              for i, (_, _, _, d) in enumerate(members)}
    inputs["population"] = args.population
    write_manifest(args.out, "atlas", config, inputs,
                   time.perf_counter() - start, status)
    return status


def cmd_segment(args):
    _require_file(os.path.join(args.atlas, "manifest.txt"),
                  "atlas directory")
    _require_file(args.study, "study volume")
    start = time.perf_counter()
    config = merge_config(args.config, args.set or ())
    atlas = load_atlas(args.atlas)
    study = read_volume(args.study)
    lo = np.asarray(study.origin)
    hi = lo + study.extent()
    for name, seed in (("seed-base", args.seed_base),
                       ("seed-apex", args.seed_apex)):
        if np.any(np.asarray(seed) < lo) or np.any(np.asarray(seed) > hi):
            raise CommandError(3, f"--{name} outside the study extent")
    shape_model = None
    inputs = {"study": args.study,
              "atlas_mean": os.path.join(args.atlas, "mean.vol")}
    if args.shape_model:
        _require_file(args.shape_model, "shape model")
        shape_model = read_shape_model(args.shape_model)
        inputs["shape_model"] = args.shape_model
    try:
        res = segment(atlas, study, args.seed_base, args.seed_apex,
                      shape_model=shape_model, cfg=segment_config(config))
    except ValueError as e:
        raise CommandError(3, str(e))
    os.makedirs(args.out, exist_ok=True)
    write_mesh(os.path.join(args.out, "surface.mesh"), res.surface)
    write_volume(os.path.join(args.out, "labels.vol"), res.label_volume)
    write_field(os.path.join(args.out, "field.field"), res.field)
    if args.truth:
        _require_file(args.truth, "truth mesh")
        inputs["truth"] = args.truth
        truth = read_mesh(args.truth)
        axis = np.asarray(args.seed_apex) - np.asarray(args.seed_base)
        zm = zone_distance_metrics(res.surface, truth, axis)
        truth_vol = voxelize_mesh(truth, study.shape, study.spacing,
                                  study.origin)
        sens, ppv = volume_metrics(res.label_volume, truth_vol)
        zm = replace(zm, sens=sens, ppv=ppv)
        with open(os.path.join(args.out, "report.txt"), "w") as f:
            f.write(metrics_report(zm))
    status = 0 if res.converged else 4
    write_manifest(args.out, "segment", config, inputs,
                   time.perf_counter() - start, status)
    return status


def _eval_pair(auto_mesh, truth_mesh, axis, auto_vol=None, truth_vol=None):
    zm = zone_distance_metrics(auto_mesh, truth_mesh, axis)
    if auto_vol is not None and truth_vol is not None:
        if auto_vol.shape != truth_vol.shape:
            raise CommandError(3, "auto/truth volumes differ in geometry")
        sens, ppv = volume_metrics(auto_vol, truth_vol)
        zm = replace(zm, sens=sens, ppv=ppv)
    return zm


def cmd_eval(args):
    start = time.perf_counter()
    inputs = {}
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    if args.pairs:
        if not os.path.isdir(args.pairs):
            raise CommandError(2, f"pairs directory not found: {args.pairs}")
        cases = sorted(d for d in os.listdir(args.pairs)
                       if os.path.isdir(os.path.join(args.pairs, d)))
        if not cases:
            raise CommandError(2, "pairs directory has no case folders")
        lines = []
        for case in cases:
            d = os.path.join(args.pairs, case)
            auto = read_mesh(_require_file(os.path.join(d, "auto.mesh"),
                                           "auto mesh"))
            truth = read_mesh(_require_file(os.path.join(d, "truth.mesh"),
                                            "truth mesh"))
            zm = _eval_pair(auto, truth, args.axis)
            lines.append(f"case={case} all_mean_mm={zm.all_mean!r} "
                         f"all_std_mm={zm.all_std!r}")
            inputs[f"auto_{case}"] = os.path.join(d, "auto.mesh")
            inputs[f"truth_{case}"] = os.path.join(d, "truth.mesh")
        with open(args.out, "w") as f:
            f.write("\n".join(lines) + "\n")
    else:
        if not (args.auto and args.truth):
            raise CommandError(2, "need --auto and --truth (or --pairs)")
        auto = read_mesh(_require_file(args.auto, "auto mesh"))
        truth = read_mesh(_require_file(args.truth, "truth mesh"))
        inputs["auto"] = args.auto
        inputs["truth"] = args.truth
        av = tv = None
        if args.auto_vol or args.truth_vol:
            if not (args.auto_vol and args.truth_vol):
                raise CommandError(2,
                                   "--auto-vol and --truth-vol go together")
            av = read_volume(_require_file(args.auto_vol, "auto volume"))
            tv = read_volume(_require_file(args.truth_vol, "truth volume"))
            inputs["auto_vol"] = args.auto_vol
            inputs["truth_vol"] = args.truth_vol
        zm = _eval_pair(auto, truth, args.axis, av, tv)
        with open(args.out, "w") as f:
            f.write(metrics_report(zm))
    write_manifest(os.path.dirname(os.path.abspath(args.out)), "eval", {},
                   inputs, time.perf_counter() - start, 0)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="atlasseg",
        description="Deformable registration and atlas-based segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom")
    p.add_argument("--spec", required=True, help="key=value spec file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("atlas", help="build an atlas from a population")
    p.add_argument("--population", required=True,
                   help="text file listing one phantom directory per line")
    p.add_argument("--out", required=True, help="atlas output directory")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a configuration key")
    p.set_defaults(func=cmd_atlas)

    p = sub.add_parser("segment", help="segment a study with an atlas")
    p.add_argument("--atlas", required=True, help="atlas directory")
    p.add_argument("--study", required=True, help="study volume file")
    p.add_argument("--seed-base", required=True, type=_vec3,
                   metavar="X,Y,Z")
    p.add_argument("--seed-apex", required=True, type=_vec3,
                   metavar="X,Y,Z")
    p.add_argument("--shape-model", help="shape model file")
    p.add_argument("--truth", help="truth mesh for an evaluation report")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score automatic against truth")
    p.add_argument("--auto", help="automatic surface mesh")
    p.add_argument("--truth", help="truth surface mesh")
    p.add_argument("--auto-vol", help="automatic binary volume")
    p.add_argument("--truth-vol", help="truth binary volume")
    p.add_argument("--axis", type=_vec3, default=(0.0, 0.0, 1.0),
                   metavar="X,Y,Z", help="base-to-apex direction")
    p.add_argument("--pairs", help="directory of case folders with "
                   "auto.mesh and truth.mesh")
    p.add_argument("--out", required=True, help="report file")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    try:
        return args.func(args)
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
