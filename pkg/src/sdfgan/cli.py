"""Command-line interface for the shape-generation pipeline.

One executable with subcommands covering the whole workflow: preprocess
meshes into SDF grids, train, sample shapes, extract meshes, render,
evaluate, and run the latent-space tools.  ``demo-toy`` runs the complete
pipeline end to end on a synthetic sphere dataset and writes a metric
report.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
import warnings
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .applications import (LatentCode, complete, decode_sdf, edit_style,
                           interpolate, invert, load_latent, load_plane,
                           save_latent)
from .errors import (ConfigError, DataError, DimensionError, DomainError,
                     NumericError, UsageError)
from .generator import PRESETS
from .geometry import (SdfGrid, grid_coords, marching_cubes, mesh_to_sdf,
                       normalize_mesh, normalize_to_unit_sphere, read_obj,
                       sample_surface_points, write_obj)
from .implicit import GridSdf
from .metrics import fpd, paper_protocol, shading_fid
from .render import render_views, write_image
from .training import GridDataset, TrainConfig, Trainer

_TRAIN_KEYS = tuple(f.name for f in dataclass_fields(TrainConfig))
_RUN_KEYS = frozenset(_TRAIN_KEYS) | {"preset", "seed"}


# ---------------------------------------------------------------------------
# configuration plumbing


def load_run_config(path):
    """Parse a JSON run-config file, rejecting unknown keys by name."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    try:
        values = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise DataError(f"{path} must hold a JSON object")
    for key in values:
        if key not in _RUN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    return values


def resolve_configs(args):
    """Model and train configs with discovery order flag > file > preset."""
    file_values = {}
    if getattr(args, "config", None):
        file_values = load_run_config(args.config)
    preset = getattr(args, "preset", None) or file_values.get("preset",
                                                              "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, "
                          f"expected one of {sorted(PRESETS)}")
    train_kwargs = {k: v for k, v in file_values.items() if k != "preset"}
    if getattr(args, "batch_size", None) is not None:
        train_kwargs["batch_size"] = args.batch_size
    if getattr(args, "seed", None) is not None:
        train_kwargs["seed"] = args.seed
    return PRESETS[preset](), TrainConfig(**train_kwargs), preset


def _seed_of(args):
    if getattr(args, "seed", None) is not None:
        return args.seed
    if getattr(args, "config", None):
        return int(load_run_config(args.config).get("seed", 0))
    return 0


def read_xyz(path):
    """Load a whitespace-separated x y z point file."""
    rows = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read point file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 coordinates, "
                            f"got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _sorted_files(directory, suffix, what):
    paths = sorted(Path(directory).glob(f"*{suffix}"))
    if not paths:
        raise DataError(f"no {suffix} files in {what} directory {directory}")
    return paths


def _load_trained(path):
    trainer = Trainer.load_checkpoint(path)
    return trainer, trainer.g_ema


def _extract(field, resolution):
    """Marching cubes that reports emptiness instead of warning."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mesh = marching_cubes(field, resolution)
    return mesh


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args):
    model_config, _, _ = resolve_configs(args)
    resolution = args.resolution or model_config.data_resolution
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = _sorted_files(args.input_dir, ".obj", "input")
    for path in paths:
        mesh = normalize_mesh(read_obj(str(path)))
        grid = mesh_to_sdf(mesh, resolution)
        grid.save(str(out_dir / (path.stem + ".sdfgrid")))
    print(f"preprocessed {len(paths)} meshes at resolution {resolution}")


def cmd_train(args):
    model_config, train_config, preset = resolve_configs(args)
    dataset = GridDataset.from_dir(args.data_dir, model_config)
    if args.resume:
        trainer = Trainer.load_checkpoint(args.resume)
    else:
        trainer = Trainer(model_config, train_config)
    trainer.train(dataset, args.epochs, log_path=args.log,
                  checkpoint_path=args.out)
    print(f"trained {args.epochs} epochs ({trainer.step} steps, "
          f"preset {preset}) -> {args.out}")


def cmd_generate(args):
    trainer, gen = _load_trained(args.checkpoint)
    resolution = args.resolution or trainer.model_config.data_resolution
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(_seed_of(args))
    latents = rng.standard_normal((args.count,
                                   trainer.model_config.latent_dim))
    written, empty = [], []
    for i in range(args.count):
        name = f"shape_{i:03d}"
        mesh = _extract(gen.generate_sdf(latents[i]), resolution)
        save_latent(str(out_dir / (name + ".lat")),
                    LatentCode("z", latents[i]))
        if mesh.num_triangles == 0:
            empty.append(name)
            continue
        write_obj(str(out_dir / (name + ".obj")), mesh)
        written.append(name)
    manifest = {"count": args.count, "seed": _seed_of(args),
                "resolution": resolution, "meshes": written, "empty": empty}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2),
                                           encoding="utf-8")
    print(f"generated {len(written)}/{args.count} nonempty meshes "
          f"-> {out_dir}")


def cmd_extract_mesh(args):
    if (args.input is None) == (args.latent is None):
        raise UsageError("pass exactly one of --input or --latent")
    if args.input is not None:
        field = SdfGrid.load(args.input)
        mesh = marching_cubes(field, iso=args.iso)
    else:
        if not args.checkpoint:
            raise UsageError("--latent needs --checkpoint")
        _, gen = _load_trained(args.checkpoint)
        code = load_latent(args.latent)
        resolution = args.resolution or 128
        mesh = marching_cubes(decode_sdf(gen, code), resolution,
                              iso=args.iso)
    write_obj(args.out, mesh)
    print(f"wrote {mesh.num_triangles} triangles -> {args.out}")


def cmd_render(args):
    mesh = normalize_to_unit_sphere(read_obj(args.mesh))
    images = render_views(mesh, args.res, args.kind)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "ppm" if args.kind == "shading" else "pgm"
    for i, image in enumerate(images):
        write_image(str(out_dir / f"view_{i:02d}.{ext}"), image)
    print(f"rendered 20 {args.kind} views at {args.res} -> {out_dir}")


def _point_sets(meshes, n, seed, tag):
    return [sample_surface_points(mesh, n, np.random.default_rng(
        [seed, tag, i])) for i, mesh in enumerate(meshes)]


def cmd_evaluate(args):
    seed = _seed_of(args)
    gen_meshes = [read_obj(str(p))
                  for p in _sorted_files(args.generated, ".obj", "generated")]
    ref_meshes = [read_obj(str(p))
                  for p in _sorted_files(args.reference, ".obj", "reference")]
    gen_points = _point_sets(gen_meshes, args.points, seed, 1)
    ref_points = _point_sets(ref_meshes, args.points, seed, 2)
    report = paper_protocol(gen_points, ref_points,
                            rng=np.random.default_rng([seed, 3]))
    report["shading_fid"] = shading_fid(gen_meshes, ref_meshes,
                                        res=args.fid_res)
    report["fpd"] = fpd(gen_meshes, ref_meshes, n=args.points, seed=seed)
    report = {k: float(v) for k, v in report.items()}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2),
                                  encoding="utf-8")
    for key, value in report.items():
        print(f"{key}: {value:.6f}")


def _load_target(path, model_config):
    """An SDF source, or raw surface points for .xyz targets."""
    name = str(path)
    if name.endswith(".sdfgrid"):
        return GridSdf(SdfGrid.load(name)), None
    if name.endswith(".obj"):
        mesh = normalize_mesh(read_obj(name))
        return GridSdf(mesh_to_sdf(mesh, model_config.data_resolution)), None
    if name.endswith(".xyz"):
        return None, read_xyz(name)
    raise UsageError(f"unsupported target {name!r} "
                     "(expected .sdfgrid, .obj, or .xyz)")


def cmd_invert(args):
    trainer, gen = _load_trained(args.checkpoint)
    source, points = _load_target(args.target, trainer.model_config)
    if source is not None:
        code = invert(source, gen, sample_count=args.samples,
                      iters=args.iters, rng=_seed_of(args), space=args.space,
                      restarts=args.restarts)
    else:
        # point targets carry no off-surface values, so optimize the
        # surface-only objective
        code, _ = complete(points, gen, iters=args.iters, rng=_seed_of(args),
                           space=args.space, restarts=args.restarts,
                           resolution=8)
    save_latent(args.out, code)
    print(f"inverted {args.target} -> {args.out}")


def cmd_complete(args):
    trainer, gen = _load_trained(args.checkpoint)
    points = read_xyz(args.points)
    resolution = args.resolution or trainer.model_config.data_resolution
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    code, mesh = complete(points, gen, iters=args.iters, rng=_seed_of(args),
                          space=args.space, restarts=args.restarts,
                          resolution=resolution)
    save_latent(str(out_dir / "completed.lat"), code)
    write_obj(str(out_dir / "completed.obj"), mesh)
    print(f"completed {points.shape[0]} points -> {out_dir}")


def cmd_edit(args):
    code = load_latent(args.latent)
    plane = load_plane(args.plane)
    save_latent(args.out, edit_style(code, plane, args.eta))
    print(f"edited latent with eta={args.eta} -> {args.out}")


def cmd_interpolate(args):
    a, b = load_latent(args.a), load_latent(args.b)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, code in enumerate(interpolate(a, b, args.steps)):
        save_latent(str(out_dir / f"step_{i:02d}.lat"), code)
    print(f"wrote {args.steps} interpolation steps -> {out_dir}")


# ---------------------------------------------------------------------------
# end-to-end toy demonstration


def _sphere_grids(radii, resolution):
    c = grid_coords(resolution)
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    r = np.sqrt(gx * gx + gy * gy + gz * gz)
    return [r - radius for radius in radii]


def _mesh_radii(meshes):
    return np.array([np.linalg.norm(m.vertices, axis=1).mean()
                     for m in meshes])


def demo_toy(out_dir, seed=0, preset="desk", steps=2000, train_size=256,
             heldout_size=64, gen_count=64, batch_size=8, sample_points=2048,
             fid_res=128, progress=None):
    """Train on synthetic spheres and evaluate the trained model.

    Synthesizes SDF grids of spheres with radii uniform in [0.3, 0.6],
    trains for about ``steps`` steps (rounded up to whole epochs),
    generates shapes from the EMA generator, and reports the full metric
    suite against held-out spheres.  Artifacts (checkpoint, loss log,
    meshes, latents, manifest, report) land in ``out_dir``.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, "
                          f"expected one of {sorted(PRESETS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_config = PRESETS[preset]()
    report = {"preset": preset, "seed": seed, "requested_steps": steps}
    timings = {}

    def run_stage(name, fn):
        start = time.time()
        try:
            result = fn()
        except Exception as exc:
            raise exc.__class__(f"demo-toy stage {name!r} failed: "
                                f"{exc}") from exc
        timings[name] = round(time.time() - start, 2)
        if progress is not None:
            progress(f"stage {name} done in {timings[name]}s")
        return result

    def make_data():
        rng = np.random.default_rng([seed, 1])
        radii = rng.uniform(0.3, 0.6, train_size + heldout_size)
        grids = _sphere_grids(radii, model_config.data_resolution)
        return radii, grids[:train_size], grids[train_size:]

    radii, train_grids, held_grids = run_stage("data", make_data)
    report["train_size"] = train_size
    report["heldout_size"] = heldout_size

    def do_train():
        train_config = TrainConfig(batch_size=batch_size, seed=seed)
        dataset = GridDataset(train_grids, model_config)
        trainer = Trainer(model_config, train_config)
        steps_per_epoch = max(1, len(dataset) // batch_size)
        epochs = math.ceil(steps / steps_per_epoch)
        trainer.train(dataset, epochs, log_path=str(out / "loss_log.txt"),
                      checkpoint_path=str(out / "checkpoint.chk"),
                      progress=progress)
        return trainer

    trainer = run_stage("train", do_train)
    report["steps"] = trainer.step

    def do_generate():
        gen = trainer.g_ema
        resolution = model_config.data_resolution
        latents = np.random.default_rng([seed, 2]).standard_normal(
            (gen_count, model_config.latent_dim))
        mesh_dir = out / "meshes"
        latent_dir = out / "latents"
        mesh_dir.mkdir(exist_ok=True)
        latent_dir.mkdir(exist_ok=True)
        meshes, written, empty = [], [], []
        for i in range(gen_count):
            name = f"gen_{i:03d}"
            save_latent(str(latent_dir / (name + ".lat")),
                        LatentCode("z", latents[i]))
            mesh = _extract(gen.generate_sdf(latents[i]), resolution)
            if mesh.num_triangles == 0:
                empty.append(name)
                continue
            write_obj(str(mesh_dir / (name + ".obj")), mesh)
            meshes.append(mesh)
            written.append(name)
        manifest = {"count": gen_count, "seed": seed,
                    "resolution": resolution, "meshes": written,
                    "empty": empty}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2),
                                           encoding="utf-8")
        return meshes, empty

    gen_meshes, empty = run_stage("generate", do_generate)
    report["nonempty_meshes"] = len(gen_meshes)
    report["empty_meshes"] = len(empty)
    report["nonempty_fraction"] = len(gen_meshes) / gen_count

    def do_metrics():
        if not gen_meshes:
            raise DataError("no nonempty generated meshes to evaluate")
        held_meshes = [_extract(SdfGrid(g), None) for g in held_grids]
        gen_points = _point_sets(gen_meshes, sample_points, seed, 3)
        ref_points = _point_sets(held_meshes, sample_points, seed, 4)
        # empty meshes shrink the generated set; the protocol needs
        # |gen| >= |ref|, so evaluate against a same-sized reference slice
        ref_points = ref_points[:len(gen_points)]
        metrics = paper_protocol(gen_points, ref_points,
                                 rng=np.random.default_rng([seed, 5]))
        metrics["shading_fid"] = shading_fid(gen_meshes, held_meshes,
                                             res=fid_res)
        metrics["fpd"] = fpd(gen_meshes, held_meshes, n=sample_points,
                             seed=seed)
        return {k: float(v) for k, v in metrics.items()}

    report["metrics"] = run_stage("metrics", do_metrics)

    def do_report():
        gen_radii = _mesh_radii(gen_meshes)
        lo, hi = 0.3, 0.6
        covered = (min(gen_radii.max(), hi) - max(gen_radii.min(), lo))
        report["radius"] = {
            "min": float(gen_radii.min()),
            "max": float(gen_radii.max()),
            "mean": float(gen_radii.mean()),
            "train_min": float(radii[:train_size].min()),
            "train_max": float(radii[:train_size].max()),
            "span_fraction": float(max(covered, 0.0) / (hi - lo)),
        }
        report["timings"] = timings

    run_stage("report", do_report)
    (out / "report.json").write_text(json.dumps(report, indent=2),
                                     encoding="utf-8")
    return report


def cmd_demo_toy(args):
    report = demo_toy(args.out_dir, seed=_seed_of(args),
                      preset=args.preset or "desk",
                      steps=args.steps, train_size=args.train_size,
                      heldout_size=args.heldout_size,
                      gen_count=args.gen_count, batch_size=args.batch_size,
                      fid_res=args.fid_res,
                      progress=lambda msg: print(f"[demo-toy] {msg}",
                                                 flush=True)
                      if args.verbose else None)
    for key, value in report["metrics"].items():
        print(f"{key}: {value:.6f}")
    print(f"nonempty fraction: {report['nonempty_fraction']:.3f}")
    print(f"radius span fraction: {report['radius']['span_fraction']:.3f}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sdfgan",
        description="3D shape generation with a style-based GAN over "
                    "implicit SDFs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="random seed (default 0)")
        p.add_argument("--config", default=None,
                       help="JSON run-config file")
        p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                       help="model size preset")

    p = sub.add_parser("preprocess", help="convert OBJ meshes to SDF grids")
    common(p)
    p.add_argument("--input-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on a directory of SDF grids")
    common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="loss log path")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample shapes from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("extract-mesh", help="marching cubes to OBJ")
    common(p)
    p.add_argument("--input", default=None, help=".sdfgrid file")
    p.add_argument("--latent", default=None, help="latent file")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--iso", type=float, default=0.0)
    p.set_defaults(func=cmd_extract_mesh)

    p = sub.add_parser("render", help="render the 20-view rig of a mesh")
    common(p)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--kind", choices=("shading", "silhouette"),
                   default="shading")
    p.add_argument("--res", type=int, default=299)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", help="compare generated vs reference")
    common(p)
    p.add_argument("--generated", required=True, help="directory of OBJ")
    p.add_argument("--reference", required=True, help="directory of OBJ")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--fid-res", type=int, default=299)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("invert", help="embed a target into latent space")
    common(p)
    p.add_argument("--target", required=True,
                   help=".sdfgrid, .obj, or .xyz file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="latent file path")
    p.add_argument("--samples", type=int, default=4096)
    p.add_argument("--iters", type=int, default=250)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--space", choices=("z", "w"), default="w")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("complete", help="complete a partial point cloud")
    common(p)
    p.add_argument("--points", required=True, help=".xyz file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--space", choices=("z", "w"), default="w")
    p.add_argument("--resolution", type=int, default=None)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("edit", help="move a latent across a style plane")
    common(p)
    p.add_argument("--latent", required=True)
    p.add_argument("--plane", required=True)
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("interpolate", help="linear path between two latents")
    common(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("demo-toy", help="end-to-end run on toy spheres")
    common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--train-size", type=int, default=256)
    p.add_argument("--heldout-size", type=int, default=64)
    p.add_argument("--gen-count", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--fid-res", type=int, default=128)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_demo_toy)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (UsageError, ConfigError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
