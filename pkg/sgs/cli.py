"""
SGS CLI - one entry point for the whole pipeline.

Commands:
  sgs synth      - Procedural scenes, a rendered training pool and an object database
  sgs ingest     - Turn a manifest of raw frames into a training pool
  sgs train      - Adversarial training with checkpoints and a metric log
  sgs generate   - Sample semantic volumes from a checkpoint at a room size
  sgs assemble   - Replace generated instances by database shapes
  sgs analyze    - Co-occurrence maps, view-configuration study, depth distributions
  sgs render     - Render a volume into SGSI images (and PGM/PPM previews)
  sgs gradcheck  - Finite-difference check of every analytic backward
  sgs inspect    - Show the header of any SGS container
  sgs identify   - Quick check whether a file is an SGS container

Global options: --config, --preset, --set key=value, --seed, --threads, -v / -q.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from sgs.errors import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, SGSError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def load_config(args: argparse.Namespace):
    """Preset or config file, then --set overrides, then --seed / --threads."""
    from sgs.config import PipelineConfig, preset

    config = PipelineConfig.load(args.config) if args.config else preset(args.preset)
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if overrides:
        config = config.with_overrides(overrides)
    return config


def _threads(args: argparse.Namespace, config) -> int:
    return args.threads or config.threads


def _grid_labels(config):
    from sgs.core import GridSpec, LabelSpace

    g = config.grid
    return GridSpec(g.w, g.h, g.d, g.gamma), LabelSpace(config.labels.classes)


def _room(values, grid):
    from sgs.core import RoomSpec

    if values is None:
        return None
    room = RoomSpec(tuple(float(v) for v in values))
    room.check(grid)
    return room


def _require(value, flag: str):
    if value is None:
        raise _Usage(f"{flag} is required (or set it under paths in the config)")
    return value


class _Usage(SGSError):
    exit_code = EXIT_USAGE


def _write_json(data, path: Path) -> None:
    from sgs.writer import ContainerWriter

    ContainerWriter.write_bytes((json.dumps(data, indent=2, sort_keys=True) + "\n").encode("utf-8"), path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> None:
    """Procedural GT scenes, a training pool rendered from wall cameras, and a template database."""
    from sgs.config import rng_for
    from sgs.synth import SyntheticSceneSpec, synth_database, synth_manifest, synth_pool, synth_scenes, write_scenes

    config = load_config(args)
    grid, labels = _grid_labels(config)
    out = Path(args.out_dir)
    rng = rng_for(config.seed, "synth")
    scenes = synth_scenes(SyntheticSceneSpec.default(labels), args.scenes, grid, labels, rng)
    write_scenes(scenes, out / "scenes", config.hash())
    pool = synth_pool(
        scenes, grid, args.views, rng, tuple(config.network.image_size),
        config.train.view_coverage_degrees, out / "pool", config.hash(),
    )
    db = synth_database(labels, grid.gamma, points_per_entry=config.retrieval.points_per_entry,
                        rng=rng_for(config.seed, "synth-db"))
    db.save(out / "database")
    print(f"Scenes:   {len(scenes)} -> {out / 'scenes'}")
    print(f"Pool:     {len(pool)} images -> {out / 'pool'}")
    print(f"Database: {len(db)} entries -> {out / 'database'}")
    if args.manifest:
        manifest = synth_manifest(scenes, grid, args.views, rng, out / "raw", hfov_deg=config.train.view_coverage_degrees)
        print(f"Manifest: {manifest}")


def cmd_ingest(args: argparse.Namespace) -> None:
    """Ingest a manifest of raw frames into a training pool."""
    from sgs.ingestion import ingest_manifest, load_manifest, load_remap

    config = load_config(args)
    if args.skip_bad:
        config = config.with_overrides(["ingest.skip_bad=true"])
    grid, labels = _grid_labels(config)
    remap = load_remap(args.remap, labels) if args.remap else None
    manifest = load_manifest(args.manifest, remap)
    out = Path(_require(args.out_dir or config.paths.pool, "--out-dir"))
    _, report = ingest_manifest(
        manifest, labels, grid, config.ingest, out, _threads(args, config),
        config.projection.far_depth, config.hash(),
    )
    print(f"Images:  {report.images}")
    print(f"Scenes:  {report.scenes}")
    print(f"Classes: {report.classes}")
    print(f"Filtered {report.filtered}, failed {report.failed}, skipped {report.skipped_entries}")


def cmd_train(args: argparse.Namespace) -> None:
    """Train generator and discriminator on an ingested pool."""
    from sgs.ingestion import load_pool
    from sgs.training import train

    config = load_config(args)
    _, labels = _grid_labels(config)
    pool = load_pool(_require(args.pool or config.paths.pool, "--pool"), labels)
    out = Path(_require(args.out_dir or config.paths.out_dir, "--out-dir"))
    result = train(pool, config, out, resume=args.resume, threads=_threads(args, config))
    print(f"Epochs:     {result.epochs}")
    print(f"Checkpoint: {result.checkpoint}")
    print(f"Metrics:    {result.metrics_path}")


def cmd_generate(args: argparse.Namespace) -> None:
    """Sample n volumes at one room size; deterministic per seed."""
    from sgs.config import rng_for
    from sgs.core import make_room_mask
    from sgs.neural import generate
    from sgs.training import load_generator
    from sgs.writer import ContainerWriter

    gan, config, _ = load_generator(args.checkpoint)
    seed = args.seed if args.seed is not None else config.seed
    room = _room(args.room, gan.grid)
    mask = make_room_mask(room, gan.grid)
    rng = rng_for(seed, "generate")
    out = Path(args.out_dir)
    if args.n > 0:
        out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        z = rng.standard_normal(gan.generator.latent_dim)
        volume = generate(z, mask, gan.generator)
        ContainerWriter.write_volume(volume, out / f"{i:05d}.sgsv", config.hash())
    print(f"Generated {args.n} volume(s) in {out}")


def cmd_assemble(args: argparse.Namespace) -> None:
    """Retrieve database shapes for every instance of a volume."""
    from sgs.assembly import ObjectDatabase, assemble
    from sgs.export import scene_json, scene_obj
    from sgs.reader import ContainerReader
    from sgs.writer import ContainerWriter

    config = load_config(args)
    _, labels = _grid_labels(config)
    kind = ContainerReader.identify(args.volume)
    if kind == "label volume":
        volume, _ = ContainerReader.read_labels(args.volume)
    elif kind == "semantic volume":
        volume, _ = ContainerReader.read_volume(args.volume, labels)
    else:
        raise _Usage(f"{args.volume} is not a volume or label container")
    db = ObjectDatabase.load(_require(args.database or config.paths.database, "--database"), labels)
    room = _room(args.room, volume.grid)
    description = assemble(volume, db, config.retrieval, room, _threads(args, config))
    out = Path(args.output)
    ContainerWriter.write_bytes((scene_json(description) + "\n").encode("utf-8"), out)
    if args.obj:
        ContainerWriter.write_bytes(scene_obj(description, db).encode("utf-8"), Path(args.obj))
    print(f"Placed {len(description.placements)}, unresolved {len(description.unresolved)}, "
          f"dropped {description.dropped} -> {out}")


def cmd_analyze(args: argparse.Namespace) -> None:
    """Scene statistics: cooc | viewstudy | depthdist."""
    from sgs.config import rng_for

    config = load_config(args)
    grid, labels = _grid_labels(config)
    ac = config.analytics
    out = Path(args.out_dir)

    if args.analysis == "cooc":
        from sgs.analytics import cooccurrence, scene_classes
        from sgs.export import cooccurrence_csv
        from sgs.synth import read_scenes

        scenes = read_scenes(_require(args.scenes, "--scenes"), labels)
        cooc = cooccurrence([scene_classes(v) for v, _ in scenes], labels, ac.denominator)
        _write_json({"classes": list(labels.class_names), "matrix": cooc.to_rows()}, out / "cooccurrence.json")
        (out / "cooccurrence.csv").write_text(cooccurrence_csv(cooc), encoding="utf-8")
        print(f"Co-occurrence over {len(scenes)} scenes -> {out}")

    elif args.analysis == "viewstudy":
        from sgs.analytics import render_panorama, scene_classes, view_config_study
        from sgs.export import view_study_csv
        from sgs.synth import read_scenes

        scenes = read_scenes(_require(args.scenes, "--scenes"), labels)
        gt = [(scene_classes(v), render_panorama(v, room, ac.panorama_rows)) for v, room in scenes]
        report = view_config_study(
            gt, labels, ac.view_counts, ac.coverages, ac.samples, rng_for(config.seed, "analyze"),
            ac.presence_pixels, ac.denominator,
        )
        report.clamp = ac.clamp
        _write_json(report.to_dict(), out / "viewstudy.json")
        (out / "viewstudy.csv").write_text(view_study_csv(report), encoding="utf-8")
        print(f"View study over {len(scenes)} scenes -> {out}")

    elif args.analysis == "depthdist":
        from sgs.analytics import center_rig, depth_distribution, wasserstein1
        from sgs.core import one_hot
        from sgs.ingestion import load_pool
        from sgs.projection import render_view
        from sgs.synth import read_scenes

        pool = load_pool(_require(args.pool or config.paths.pool, "--pool"), labels)
        scenes = read_scenes(_require(args.scenes, "--scenes"), labels)
        far = config.projection.far_depth or grid.diagonal
        rendered = [
            render_view(one_hot(v, labels), cam, config.projection.semantic_mode)
            for v, room in scenes
            for cam in center_rig(v.grid, room, tuple(config.network.image_size),
                                  config.train.view_coverage_degrees, far)
        ]
        pool_hist = depth_distribution(pool.images, ac.depth_bins, far)
        rig_hist = depth_distribution(rendered, ac.depth_bins, far)
        w1 = wasserstein1(pool_hist, rig_hist)
        _write_json({
            "edges": pool_hist.edges.tolist(),
            "pool": pool_hist.mass.tolist(),
            "center_rig": rig_hist.mass.tolist(),
            "w1": w1,
        }, out / "depthdist.json")
        print(f"W1(pool, center rig) = {w1:.4f} m -> {out}")


def cmd_render(args: argparse.Namespace) -> None:
    """Render a volume from the center rig or from cameras replayed out of a pool."""
    from sgs.analytics import center_rig
    from sgs.core import one_hot
    from sgs.export import labels_legend, write_image_previews
    from sgs.ingestion import load_pool
    from sgs.projection import render_view
    from sgs.reader import ContainerReader
    from sgs.writer import ContainerWriter

    config = load_config(args)
    _, labels = _grid_labels(config)
    kind = ContainerReader.identify(args.volume)
    if kind == "label volume":
        volume = one_hot(ContainerReader.read_labels(args.volume)[0], labels)
    elif kind == "semantic volume":
        volume, _ = ContainerReader.read_volume(args.volume, labels)
    else:
        raise _Usage(f"{args.volume} is not a volume or label container")
    if args.pool:
        cameras = load_pool(args.pool, labels).cameras[:args.views]
    else:
        far = config.projection.far_depth or volume.grid.diagonal
        cameras = center_rig(volume.grid, _room(args.room, volume.grid), tuple(config.network.image_size),
                             config.train.view_coverage_degrees, far)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, camera in enumerate(cameras):
        image = render_view(volume, camera, config.projection.semantic_mode)
        ContainerWriter.write_image(image, out / f"{i:05d}.sgsi", config.hash())
        if args.preview:
            write_image_previews(image, out / f"{i:05d}")
    if args.preview:
        _write_json(labels_legend(labels), out / "legend.json")
    print(f"Rendered {len(cameras)} view(s) -> {out}")


def cmd_gradcheck(args: argparse.Namespace) -> None:
    """Finite-difference check; exits 3 when any primitive exceeds the tolerance."""
    from sgs.gradcheck import run_gradcheck

    config = load_config(args)
    report = run_gradcheck(args.cases, config.seed, args.primitive or None)
    for r in report.results:
        status = "ok" if r.passed else "FAIL"
        print(f"  {r.name:20s} cases={r.cases:>4d}  max_rel_error={r.max_rel_error:.3e}  {status}")
    if not report.passed:
        names = ", ".join(r.name for r in report.failures)
        print(f"Gradient check FAILED: {names}", file=sys.stderr)
        sys.exit(EXIT_NUMERICAL)
    print("Gradient check passed")


def cmd_inspect(args: argparse.Namespace) -> None:
    """Show the header of a container; checksum problems are reported, not raised."""
    from sgs.reader import ContainerReader

    info = ContainerReader.inspect(args.path)
    if args.json:
        print(json.dumps(info.to_dict(), indent=2, sort_keys=True))
        return
    print(f"{info.kind.upper()} v{info.version} ({info.magic.decode('ascii')})")
    print(f"  config hash:  {info.config_hash.hex()}")
    print(f"  header:       {list(info.header)}")
    print(f"  payload:      {info.payload_size} bytes")
    for key, value in info.extra.items():
        print(f"  {key + ':':13s} {value}")
    print(f"CHECKSUM: {'VALID' if info.checksum_ok else 'INVALID'}")
    if not info.checksum_ok:
        sys.exit(EXIT_DATA)


def cmd_identify(args: argparse.Namespace) -> None:
    """Quick check if a file is an SGS container."""
    from sgs.reader import ContainerReader

    kind = ContainerReader.identify(args.path)
    if kind:
        print(f"{args.path}: SGS {kind} container")
    else:
        print(f"{args.path}: Not an SGS container")
        sys.exit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from sgs import __version__

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Pipeline config (JSON)")
    common.add_argument("--preset", choices=["full", "reduced"], default="reduced",
                        help="Starting config when --config is absent (default: reduced)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config value (repeatable)")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--threads", type=int, help="Worker cap")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")

    parser = argparse.ArgumentParser(
        prog="sgs",
        description="SGS - indoor scene generation learned from semantic-segmented depth images",
    )
    parser.add_argument("--version", action="version", version=f"sgs {__version__}")
    sub = parser.add_subparsers(dest="command")

    p_synth = sub.add_parser("synth", parents=[common], help="Procedural scenes, pool and database")
    p_synth.add_argument("-o", "--out-dir", required=True, help="Output directory")
    p_synth.add_argument("-n", "--scenes", type=int, default=100, help="Number of scenes (default: 100)")
    p_synth.add_argument("--views", type=int, default=5, help="Pool images per scene (default: 5)")
    p_synth.add_argument("--manifest", action="store_true", help="Also write raw frames + manifest.jsonl")

    p_ingest = sub.add_parser("ingest", parents=[common], help="Manifest -> training pool")
    p_ingest.add_argument("manifest", help="Path to manifest.jsonl")
    p_ingest.add_argument("-o", "--out-dir", help="Pool directory")
    p_ingest.add_argument("--remap", help="Label remap table (JSON)")
    p_ingest.add_argument("--skip-bad", action="store_true", help="Skip unreadable entries instead of failing")

    p_train = sub.add_parser("train", parents=[common], help="Adversarial training")
    p_train.add_argument("--pool", help="Pool directory")
    p_train.add_argument("-o", "--out-dir", help="Checkpoint / metric directory")
    p_train.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint")

    p_generate = sub.add_parser("generate", parents=[common], help="Sample volumes from a checkpoint")
    p_generate.add_argument("checkpoint", help="Path to ckpt-XXXXX.sgsc")
    p_generate.add_argument("--room", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"),
                            help="Room size in meters")
    p_generate.add_argument("-n", type=int, default=1, help="Number of volumes (default: 1)")
    p_generate.add_argument("-o", "--out-dir", required=True, help="Output directory")

    p_assemble = sub.add_parser("assemble", parents=[common], help="Volume -> placed database shapes")
    p_assemble.add_argument("volume", help="Path to .sgsv or .sgsl")
    p_assemble.add_argument("--database", help="Object database directory")
    p_assemble.add_argument("--room", type=float, nargs=3, metavar=("X", "Y", "Z"), help="Room size in meters")
    p_assemble.add_argument("-o", "--output", default="scene.json", help="Scene JSON (default: scene.json)")
    p_assemble.add_argument("--obj", help="Also write a box-proxy OBJ mesh")

    p_analyze = sub.add_parser("analyze", parents=[common], help="Scene statistics")
    p_analyze.add_argument("analysis", choices=["cooc", "viewstudy", "depthdist"])
    p_analyze.add_argument("--scenes", help="Scene directory (scenes.jsonl or .sgsl/.sgsv files)")
    p_analyze.add_argument("--pool", help="Pool directory (depthdist)")
    p_analyze.add_argument("-o", "--out-dir", default=".", help="Output directory (default: .)")

    p_render = sub.add_parser("render", parents=[common], help="Volume -> SGSI images")
    p_render.add_argument("volume", help="Path to .sgsv or .sgsl")
    p_render.add_argument("-o", "--out-dir", required=True, help="Output directory")
    p_render.add_argument("--pool", help="Replay cameras from this pool instead of the center rig")
    p_render.add_argument("--views", type=int, default=4, help="Cameras taken from --pool (default: 4)")
    p_render.add_argument("--room", type=float, nargs=3, metavar=("X", "Y", "Z"), help="Room size for the rig height")
    p_render.add_argument("--preview", action="store_true", help="Also write PGM/PPM previews")

    p_grad = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient check")
    p_grad.add_argument("--cases", type=int, default=100, help="Random cases per primitive (default: 100)")
    p_grad.add_argument("--primitive", action="append", help="Check only this primitive (repeatable)")

    p_inspect = sub.add_parser("inspect", parents=[common], help="Show a container header")
    p_inspect.add_argument("path", help="Path to an SGS container")
    p_inspect.add_argument("--json", action="store_true", help="Machine-readable output")

    p_identify = sub.add_parser("identify", parents=[common], help="Quick check if a file is SGS")
    p_identify.add_argument("path", help="Path to file")

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "generate": cmd_generate,
    "assemble": cmd_assemble,
    "analyze": cmd_analyze,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
    "identify": cmd_identify,
}


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.INFO
    if getattr(args, "verbose", False):
        level = logging.DEBUG
    elif getattr(args, "quiet", False):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        print()
        print("Typical run:")
        print("  sgs synth -o work -n 100")
        print("  sgs train --pool work/pool -o work/run")
        print("  sgs generate work/run/ckpt-00200.sgsc --room 5.6 5.6 2.8 -n 4 -o work/gen")
        print("  sgs assemble work/gen/00000.sgsv --database work/database -o scene.json")
        sys.exit(EXIT_OK)

    _configure_logging(args)
    try:
        COMMANDS[args.command](args)
    except SGSError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
    except FileNotFoundError as e:
        print(f"Error: File not found: {e.filename}", file=sys.stderr)
        sys.exit(EXIT_DATA)
    except (OSError, json.JSONDecodeError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_DATA)


if __name__ == "__main__":
    main()
