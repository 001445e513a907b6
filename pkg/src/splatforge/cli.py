"""Command-line interface for the full authoring pipeline."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import SplatForgeError


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=int, default=10000,
                   help="training iterations")
    p.add_argument("--lr", type=float, default=5e-4, help="learning rate")
    p.add_argument("--wd", type=float, default=1e-6, help="weight decay")
    p.add_argument("--alpha0", type=float, default=0.1,
                   help="infusion coefficient at step 0")
    p.add_argument("--alphaT", type=float, default=0.25,
                   help="infusion coefficient at step T")
    p.add_argument("--T-train", type=int, default=5,
                   help="transition steps per training rollout")
    p.add_argument("--lambda-z", type=float, default=0.01,
                   help="feature-term loss weight")
    p.add_argument("--depth", type=int, default=2, help="U-Net depth")
    p.add_argument("--base-channels", type=int, default=16,
                   help="stem channel width")


def _add_consistency_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--l", type=int, default=5, help="patch side length")
    p.add_argument("--w", type=float, default=0.5,
                   help="feature weight in the patch distance")
    p.add_argument("--beta", type=float, default=0.5,
                   help="occupancy voting threshold")
    p.add_argument("--lambda-patch", type=int, default=2,
                   help="max L1 expansion from the generated support")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatforge",
        description="Single-exemplar sparse-voxel generative authoring stack.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(
            name, help=help_text,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    p = add("ingest", "parse a splat file (+ optional feature sidecar) into a project")
    p.add_argument("--splat", required=True, help="input splat .ply")
    p.add_argument("--features", default=None,
                   help="optional raw feature sidecar file")
    p.add_argument("--out", required=True, help="output project file")

    p = add("select", "k-means cluster masks over reduced features")
    p.add_argument("--project", required=True, help="ingest project file")
    p.add_argument("--clusters", type=int, default=8, help="cluster count")
    p.add_argument("--seed", type=int, default=0, help="k-means seed")
    p.add_argument("--out", required=True, help="output clusters JSON")
    p.add_argument("--chosen", default=None,
                   help="comma-separated cluster ids for --out-mask")
    p.add_argument("--out-mask", default=None,
                   help="optional boolean mask .npy for the chosen clusters")

    p = add("voxelize", "build surface-voxel grids from a project or splat file")
    p.add_argument("--project", default=None, help="ingest project file")
    p.add_argument("--splat", default=None, help="input splat .ply")
    p.add_argument("--resolution", type=int, default=64,
                   help="target grid resolution")
    p.add_argument("--coarse-resolution", type=int, default=16,
                   help="coarse grid resolution")
    p.add_argument("--eta-thres", type=float, default=0.1,
                   help="surface opacity threshold")
    p.add_argument("--mask", default=None, help="boolean selection mask .npy")
    p.add_argument("--out-target", required=True, help="target grid JSON path")
    p.add_argument("--out-coarse", default=None, help="coarse grid JSON path")
    p.add_argument("--allow-any-resolution", action="store_true",
                   help="permit non-standard grid resolutions")

    p = add("train", "train a primitive from a project or splat file")
    p.add_argument("--project", default=None, help="ingest project file")
    p.add_argument("--splat", default=None, help="input splat .ply")
    p.add_argument("--features", default=None,
                   help="optional raw feature sidecar (with --splat)")
    p.add_argument("--mask", default=None, help="boolean selection mask .npy")
    p.add_argument("--name", default="primitive", help="primitive name")
    p.add_argument("--resolution", type=int, default=64,
                   help="target grid resolution")
    p.add_argument("--coarse-resolution", type=int, default=16,
                   help="coarse grid resolution")
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--out", required=True, help="output primitive archive")
    p.add_argument("--log", default=None,
                   help="write the training log (JSON lines) here")
    p.add_argument("--allow-any-resolution", action="store_true",
                   help="permit non-standard grid resolutions")
    _add_train_flags(p)

    p = add("generate", "sample a layer from a trained primitive")
    p.add_argument("--archive", required=True, help="primitive archive")
    p.add_argument("--conditioning", required=True,
                   help="conditioning voxel grid JSON (or an {\"edits\": [...]}) file")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--T-infer", type=int, default=7,
                   help="sampler transition steps before mode seeking")
    p.add_argument("--consistency-iterations", type=int, default=7,
                   help="patch-consistency refinement rounds")
    p.add_argument("--no-consistency", action="store_true",
                   help="skip the patch-consistency refinement")
    p.add_argument("--out-grid", default=None, help="output grid JSON path")
    p.add_argument("--out-splat", default=None, help="output splat .ply path")
    _add_consistency_flags(p)

    p = add("consistency", "run patch-consistency refinement on a grid")
    p.add_argument("--grid", required=True, help="input featured grid JSON")
    p.add_argument("--exemplar", default=None, help="exemplar featured grid JSON")
    p.add_argument("--archive", default=None,
                   help="primitive archive supplying the exemplar grid")
    p.add_argument("--iterations", type=int, default=7,
                   help="refinement rounds")
    p.add_argument("--out", required=True, help="output grid JSON path")
    _add_consistency_flags(p)

    p = add("compose", "composite a scene description into one splat file")
    p.add_argument("--scene", required=True, help="scene description JSON")
    p.add_argument("--out", required=True, help="output splat .ply path")

    p = add("export", "compose and export a scene (refuses empty output)")
    p.add_argument("--scene", required=True, help="scene description JSON")
    p.add_argument("--out", required=True, help="output splat .ply path")
    p.add_argument("--allow-empty", action="store_true",
                   help="permit exporting an empty scene")

    p = add("serve", "run the HTTP service")
    p.add_argument("--host", default="127.0.0.1", help="bind address")
    p.add_argument("--port", type=int, default=8000, help="bind port")
    p.add_argument("--data-dir", default=None,
                   help="directory for primitive archives")

    return parser


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _load_cloud(args) -> "object":
    from dataclasses import replace

    from .authoring import Project
    from .splat_io import parse_feature_sidecar, parse_splat_file

    if getattr(args, "project", None):
        return Project.load(args.project).cloud
    if getattr(args, "splat", None):
        cloud = parse_splat_file(_read_bytes(args.splat))
        if getattr(args, "features", None):
            raw = parse_feature_sidecar(_read_bytes(args.features))
            cloud = replace(cloud, raw_features=raw)
        return cloud
    raise SplatForgeError("one of --project or --splat is required")


def _load_mask(path: str | None):
    if path is None:
        return None
    return np.load(path).astype(bool)


def _load_grid_json(path: str):
    from .voxelize import grid_from_json

    with open(path, "r", encoding="utf-8") as fh:
        return grid_from_json(fh.read())


def _write_grid_json(path: str, grid) -> None:
    from .voxelize import grid_to_json

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(grid_to_json(grid))


def _cmd_ingest(args) -> int:
    from .authoring import ingest_cloud
    from .splat_io import parse_feature_sidecar, parse_splat_file

    cloud = parse_splat_file(_read_bytes(args.splat))
    raw = parse_feature_sidecar(_read_bytes(args.features)) if args.features else None
    project = ingest_cloud(cloud, raw)
    project.save(args.out)
    print(f"ingested {len(project.cloud)} gaussians "
          f"(semantic_substituted={project.cloud.semantic_substituted}) "
          f"-> {args.out}")
    return 0


def _cmd_select(args) -> int:
    from .authoring import Project
    from .features import kmeans_quantize, select_by_clusters

    project = Project.load(args.project)
    feats = project.cloud.reduced_features
    if feats is None:
        raise SplatForgeError("project has no reduced features")
    assignments, _centroids = kmeans_quantize(feats, args.clusters, args.seed)
    counts = np.bincount(assignments, minlength=args.clusters)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump({"k": args.clusters, "seed": args.seed,
                   "counts": [int(c) for c in counts],
                   "assignments": [int(a) for a in assignments]}, fh)
    print(f"clustered {len(assignments)} gaussians into {args.clusters} "
          f"clusters -> {args.out}")
    if args.chosen is not None:
        if args.out_mask is None:
            raise SplatForgeError("--chosen requires --out-mask")
        chosen = [int(v) for v in args.chosen.split(",") if v.strip() != ""]
        mask = select_by_clusters(assignments, chosen)
        np.save(args.out_mask, mask)
        print(f"mask with {int(mask.sum())} gaussians -> {args.out_mask}")
    return 0


def _cmd_voxelize(args) -> int:
    from .voxelize import (assign_representative_features, build_surface_voxels,
                           default_bounds, downsample_to)
    from .voxelize import VoxelizerConfig

    cloud = _load_cloud(args)
    mask = _load_mask(args.mask)
    if mask is not None:
        cloud = cloud.select(np.nonzero(mask)[0])
    bounds = default_bounds(cloud.positions)
    grid = build_surface_voxels(cloud, bounds, args.resolution,
                                cfg=VoxelizerConfig(eta_thres=args.eta_thres),
                                allow_any_resolution=args.allow_any_resolution)
    if cloud.reduced_features is not None and len(grid):
        grid = assign_representative_features(grid, cloud)
    _write_grid_json(args.out_target, grid)
    print(f"target grid: {len(grid)} cells at {args.resolution}^3 "
          f"({grid.dropped} gaussians outside bounds) -> {args.out_target}")
    if args.out_coarse is not None:
        coarse = downsample_to(grid, args.coarse_resolution)
        _write_grid_json(args.out_coarse, coarse)
        print(f"coarse grid: {len(coarse)} cells at "
              f"{args.coarse_resolution}^3 -> {args.out_coarse}")
    return 0


def _cmd_train(args) -> int:
    from .authoring import train_archive
    from .net.unet import NetworkConfig
    from .training import InfusionSchedule

    cloud = _load_cloud(args)
    mask = _load_mask(args.mask)
    schedule = InfusionSchedule(alpha0=args.alpha0, alphaT=args.alphaT,
                                T_train=args.T_train, lambda_z=args.lambda_z,
                                iterations=args.iters)
    net_cfg = NetworkConfig(base_channels=args.base_channels, depth=args.depth)

    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None

    def progress(rec) -> None:
        line = json.dumps(rec.as_dict())
        if log_fh is not None:
            log_fh.write(line + "\n")
            log_fh.flush()
        else:
            print(line)

    try:
        archive, _log = train_archive(
            cloud, args.name, seed=args.seed,
            target_resolution=args.resolution,
            coarse_resolution=args.coarse_resolution,
            net_cfg=net_cfg, schedule=schedule, mask=mask, progress=progress,
            lr=args.lr, weight_decay=args.wd,
            allow_any_resolution=args.allow_any_resolution)
    finally:
        if log_fh is not None:
            log_fh.close()
    archive.save(args.out)
    print(f"trained primitive '{args.name}' "
          f"({len(archive.target_grid)} exemplar cells) -> {args.out}")
    return 0


def _load_conditioning(path: str, archive) -> "object":
    from .authoring import assemble_conditioning
    from .errors import FormatError
    from .voxelize import grid_from_json_dict

    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid conditioning JSON: {e}") from None
    if isinstance(obj, dict) and "edits" in obj:
        grid, rejected = assemble_conditioning(
            obj["edits"], archive.coarse_resolution, archive.coarse_grid.bounds)
        for item in rejected:
            print(f"rejected edit {item['index']} ({item['op']}): "
                  f"{item['reason']}", file=sys.stderr)
        return grid
    return grid_from_json_dict(obj)


def _cmd_generate(args) -> int:
    from .authoring import PrimitiveArchive, generate_layer
    from .consistency import ConsistencyConfig
    from .gca import SamplerConfig
    from .splat_io import serialize_splat_file

    archive = PrimitiveArchive.load(args.archive)
    conditioning = _load_conditioning(args.conditioning, archive)
    layer = generate_layer(
        archive, conditioning, args.seed,
        sampler_cfg=SamplerConfig(T_infer=args.T_infer, seed=args.seed),
        consistency_cfg=ConsistencyConfig(
            l=args.l, iterations=args.consistency_iterations, w=args.w,
            beta=args.beta, lambda_patch=args.lambda_patch),
        apply_consistency=not args.no_consistency)
    if args.out_grid is not None:
        _write_grid_json(args.out_grid, layer.grid)
    if args.out_splat is not None:
        from .authoring import atomic_write
        atomic_write(args.out_splat, serialize_splat_file(layer.cloud))
    print(f"generated {len(layer.grid)} cells / {len(layer.cloud)} gaussians "
          f"(seed {args.seed}, {layer.skipped_voxels} empty-payload voxels)")
    return 0


def _cmd_consistency(args) -> int:
    from .consistency import ConsistencyConfig, run_consistency

    grid = _load_grid_json(args.grid)
    if args.exemplar is not None:
        exemplar = _load_grid_json(args.exemplar)
    elif args.archive is not None:
        from .authoring import PrimitiveArchive
        exemplar = PrimitiveArchive.load(args.archive).target_grid
    else:
        raise SplatForgeError("one of --exemplar or --archive is required")
    cfg = ConsistencyConfig(l=args.l, iterations=args.iterations, w=args.w,
                            beta=args.beta, lambda_patch=args.lambda_patch)
    refined = run_consistency(grid, exemplar, cfg)
    _write_grid_json(args.out, refined)
    print(f"refined {len(grid)} -> {len(refined)} cells -> {args.out}")
    return 0


def _load_scene(path: str) -> "object":
    from .authoring import Layer, Scene, transform_from_json
    from .errors import FormatError
    from .splat_io import parse_splat_file
    from .voxelize import VoxelGrid

    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid scene JSON: {e}") from None
    layers = []
    for i, spec in enumerate(obj.get("layers", [])):
        cloud = parse_splat_file(_read_bytes(spec["splat"]))
        transform = (transform_from_json(spec["transform"])
                     if spec.get("transform") else None)
        layer = Layer(id=spec.get("id", f"layer-{i}"),
                      primitive_id=spec.get("primitive_id", ""),
                      cloud=cloud,
                      conditioning=VoxelGrid.empty(1),
                      color_gain=spec.get("color_gain", [1.0, 1.0, 1.0]))
        if transform is not None:
            layer.transform = transform
        layers.append(layer)
    static = [parse_splat_file(_read_bytes(p)) for p in obj.get("static", [])]
    return Scene(name=obj.get("name", ""), layers=layers, static_regions=static)


def _cmd_compose(args) -> int:
    from .authoring import atomic_write, composite_scene
    from .splat_io import serialize_splat_file

    scene = _load_scene(args.scene)
    cloud = composite_scene(scene)
    atomic_write(args.out, serialize_splat_file(cloud))
    print(f"composited {len(scene.layers)} layers "
          f"({len(cloud)} gaussians) -> {args.out}")
    return 0


def _cmd_export(args) -> int:
    from .authoring import export_scene

    scene = _load_scene(args.scene)
    cloud = export_scene(scene, args.out, allow_empty=args.allow_empty)
    print(f"exported {len(cloud)} gaussians -> {args.out}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(data_dir=args.data_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "select": _cmd_select,
    "voxelize": _cmd_voxelize,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "consistency": _cmd_consistency,
    "compose": _cmd_compose,
    "export": _cmd_export,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (SplatForgeError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
