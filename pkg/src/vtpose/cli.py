"""Command-line front end: ``vtpose run | report | render-scene | validate-config``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .declutter import SegMask
from .geometry import save_xyz
from .pipeline import (PIPELINES, ConfigError, ExperimentConfig, load_records, report, run_pipeline,
                       write_run)
from .sim import BUNDLED_SCENE, Scene, SceneError, load_scene, random_scene, render_depth

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("vtpose")


def resolve_scene(spec: str) -> Scene:
    """``bundled``, ``random:N``, ``random:N:degraded`` or a path to a scene TOML file."""
    if spec == "bundled":
        return load_scene(BUNDLED_SCENE)
    if spec.startswith("random:"):
        parts = spec.split(":")
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] != "degraded"):
            raise ConfigError(f"bad random scene spec {spec!r}; use random:N or random:N:degraded")
        try:
            seed = int(parts[1])
        except ValueError as exc:
            raise ConfigError(f"bad random scene seed in {spec!r}") from exc
        return random_scene(seed, degraded=len(parts) == 3)
    if not Path(spec).is_file():
        raise ConfigError(f"scene file {spec!r} not found")
    return load_scene(spec)


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0-19"`` or ``"1,4,9"`` (ranges may be mixed in)."""
    seeds = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part[1:]:
                a, b = part.split("-", 1)
                lo, hi = int(a), int(b)
                if hi < lo:
                    raise ConfigError(f"empty seed range {part!r}")
                seeds.extend(range(lo, hi + 1))
            elif part:
                seeds.append(int(part))
    except ValueError as exc:
        raise ConfigError(f"cannot parse seeds {text!r}") from exc
    if not seeds:
        raise ConfigError("no seeds given")
    return seeds


def parse_params(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--param expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    unknown = set(doc) - {"scene", "pipeline", "seeds", "params", "out"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if isinstance(doc.get("seeds"), str):
        doc["seeds"] = parse_seeds(doc["seeds"])
    return doc


def build_configs(args) -> list[ExperimentConfig]:
    doc = load_config_file(args.config) if getattr(args, "config", None) else {}
    scene = args.scene or doc.get("scene")
    if scene is None:
        raise ConfigError("no scene given (use --scene or a config file)")
    pipeline = args.pipeline or doc.get("pipeline", "full")
    if args.seeds is not None:
        seeds = parse_seeds(args.seeds)
    elif args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = list(doc.get("seeds", [0]))
    params = {**doc.get("params", {}), **parse_params(args.param)}
    out = args.out or doc.get("out", "runs")
    pipes = PIPELINES if pipeline == "all" else (pipeline,)
    return [ExperimentConfig(str(scene), p, seeds, params, str(out)) for p in pipes]


def _run_one(job):
    config, seed = job
    scene = resolve_scene(config.scene)
    record = run_pipeline(scene, config.pipeline, seed, config.resolved_params())
    path = write_run(record, config, config.out)
    return record, path


def cmd_run(args) -> int:
    configs = build_configs(args)
    for c in configs:
        resolve_scene(c.scene)
    jobs = [(c, s) for c in configs for s in c.seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    failed = 0
    for record, path in results:
        final = record.final
        status = "FAILED " + record.failure["message"] if record.failure else \
            f"adi {1e3 * final.metrics.err_adi:.2f} mm, err_T {1e3 * final.metrics.err_T:.2f} mm"
        print(f"{record.pipeline:<24} seed {record.seed:<4} {status}  -> {path}")
        failed += record.failure is not None
    if not args.no_report:
        paths = report([r for r, _ in results], configs[0].out)
        print(f"summary: {paths['summary']}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_report(args) -> int:
    records = load_records(args.runs)
    if not records:
        raise ConfigError(f"no run records under {args.runs}")
    paths = report(records, args.out or args.runs)
    for k, p in paths.items():
        print(f"{k}: {p}")
    return EXIT_OK


def cmd_render_scene(args) -> int:
    from .pipeline import PipelineParams

    scene = resolve_scene(args.scene)
    params = PipelineParams().with_overrides(parse_params(args.param))
    if args.view == "top":
        view, sensor = scene.top_viewpoint(), params.top_sensor()
    else:
        view, sensor = scene.static_viewpoint(), params.sensor()
    r = render_depth(scene, view, sensor, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_xyz(r.cloud, out / f"{args.view}.xyz")
    SegMask(r.id_image).to_pgm(out / f"{args.view}-mask.pgm")
    visible = {int(i): int(n) for i, n in zip(*np.unique(r.ids, return_counts=True))}
    (out / f"{args.view}-view.json").write_text(json.dumps(
        {"view": view.to_dict(), "points_per_object": visible}, indent=2) + "\n")
    print(f"{len(r.cloud)} points, per object {visible} -> {out}")
    return EXIT_OK


def cmd_validate_config(args) -> int:
    path = Path(args.path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if "objects" in doc:
        scene = load_scene(path)
        print(f"scene {scene.name}: {len(scene.objects)} objects, target {scene.target.id}")
    else:
        doc = load_config_file(path)
        scene = doc.get("scene")
        if scene is None:
            raise ConfigError("config has no scene")
        if not str(scene).startswith(("random:", "bundled")) and not Path(scene).is_absolute():
            scene = str(path.parent / scene)
        resolve_scene(str(scene))
        pipes = PIPELINES if doc.get("pipeline") == "all" else (doc.get("pipeline", "full"),)
        for p in pipes:
            ExperimentConfig(str(scene), p, list(doc.get("seeds", [0])), doc.get("params", {}))
        print(f"config ok: {', '.join(pipes)} on {scene}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vtpose", description="Active visuo-tactile pose estimation experiments.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run pipelines on a scene")
    run.add_argument("--config", help="experiment TOML (scene, pipeline, seeds, out, [params])")
    run.add_argument("--scene", help="scene TOML path, 'bundled', 'random:N' or 'random:N:degraded'")
    run.add_argument("--pipeline", choices=PIPELINES + ("all",))
    g = run.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int)
    g.add_argument("--seeds", help="e.g. 0-19 or 1,4,9")
    run.add_argument("--out", help="output directory (default runs)")
    run.add_argument("--param", action="append", metavar="KEY=VALUE", help="override a pipeline parameter")
    run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    run.add_argument("--no-report", action="store_true", help="skip the aggregate summary")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="aggregate run records into summary CSV and plot")
    rep.add_argument("runs", help="directory holding run outputs")
    rep.add_argument("--out", help="where to write the summary (default: the runs directory)")
    rep.set_defaults(func=cmd_report)

    ren = sub.add_parser("render-scene", help="render a scene view to a point cloud and mask")
    ren.add_argument("--scene", required=True)
    ren.add_argument("--view", choices=("static", "top"), default="static")
    ren.add_argument("--seed", type=int, default=0)
    ren.add_argument("--out", default="render")
    ren.add_argument("--param", action="append", metavar="KEY=VALUE")
    ren.set_defaults(func=cmd_render_scene)

    val = sub.add_parser("validate-config", help="check a scene or experiment TOML file")
    val.add_argument("path")
    val.set_defaults(func=cmd_validate_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SceneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
