"""Experiment runner: the static, active-vision, declutter and visuo-tactile pipelines."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .declutter import (GRASP, DiscardZone, DiscardZoneFull, PushPlan, SegMask, attribute_actions,
                        build_graph, cluttered, extract_detections, next_object, plan_grasp, plan_push)
from .geometry import MeshIndex, Pose
from .nbt import StopCriterion, TABLETOP_FACES, localize_by_touch, should_stop
from .nbv import OccupancyGrid, SensorModel, integrate_measurement, sample_viewpoints, select_nbv
from .sim import (NOISELESS, PUSH_CONTACT_LOST, MetricsReport, Scene, SceneError, apply_grasp_removal,
                  apply_push, compute_metrics, grasp_quality_stub, render_depth, simulate_touch)
from .tiqf import InsufficientDataError, TiqfParams, register

log = logging.getLogger(__name__)

PIPELINES = ("static", "active-vision", "declutter+active-vision", "full")
METRIC_COLUMNS = ("scene", "seed", "stage", "err_T_mm", "err_R_deg", "adi_mm")
SUMMARY_COLUMNS = ("pipeline", "n", "err_T_mean_mm", "err_T_median_mm", "err_T_std_mm", "err_T_mad_mm",
                   "adi_mean_mm", "adi_median_mm", "adi_std_mm", "adi_mad_mm")
SERIES_COLUMNS = ("pipeline", "scene", "seed", "step", "action", "err_T_mm", "adi_mm")


class ConfigError(ValueError):
    pass


class PipelineFailure(RuntimeError):
    pass


@dataclass
class PipelineParams:
    view_budget: int = 5
    touch_budget: int = 10
    n_view_candidates: int = 32
    view_radius: float = 0.5
    grid_res: float = 0.005
    grid_margin: float = 0.15
    hfov: float = 60.0
    vfov: float = 45.0
    ray_cols: int = 64
    ray_rows: int = 48
    d_ray: float = 1.5
    top_hfov: float = 50.0
    top_vfov: float = 40.0
    top_cols: int = 160
    top_rows: int = 120
    stop_trans: float = 0.005
    stop_rot: float = 2.0
    rho: float = 0.05
    conv_trans: float = 1e-4
    conv_rot: float = 0.1
    max_iterations: int = 100
    max_pairs_per_iter: int = 500
    init_covariance_scale: float = 0.5
    touch_prior_scale: float = 0.05
    per_face: int = 20
    standoff: float = 0.05
    n_bootstrap: int = 3
    mu_o: float = 0.05
    mu_d: float = 0.5
    mu_q: float = 0.1
    push_distance: float = 0.05
    push_samples: int = 32
    gripper_length: float = 0.04
    declutter_budget_factor: int = 2
    adi_points: int = 5000

    def __post_init__(self):
        if min(self.view_budget, self.touch_budget, self.n_view_candidates) < 1:
            raise ConfigError("budgets and candidate counts must be >= 1")
        if self.n_bootstrap < 3:
            raise ConfigError("n_bootstrap must be >= 3")

    def with_overrides(self, overrides: dict) -> "PipelineParams":
        """Copy with ``name -> value`` overrides; string values are coerced to the field type."""
        types = {f.name: type(getattr(self, f.name)) for f in dataclasses.fields(self)}
        kw = {}
        for k, v in overrides.items():
            if k not in types:
                raise ConfigError(f"unknown parameter {k!r}")
            try:
                kw[k] = types[k](v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"parameter {k}: cannot read {v!r} as {types[k].__name__}") from exc
        return dataclasses.replace(self, **kw)

    def tiqf(self) -> TiqfParams:
        return TiqfParams(rho=self.rho, conv_trans=self.conv_trans, conv_rot=self.conv_rot,
                          max_iterations=self.max_iterations, max_pairs_per_iter=self.max_pairs_per_iter,
                          init_covariance_scale=self.init_covariance_scale)

    def sensor(self) -> SensorModel:
        return SensorModel(self.hfov, self.vfov, self.ray_cols, self.ray_rows, self.d_ray)

    def top_sensor(self) -> SensorModel:
        return SensorModel(self.top_hfov, self.top_vfov, self.top_cols, self.top_rows, self.d_ray)

    def stop(self) -> StopCriterion:
        return StopCriterion(self.stop_trans, self.stop_rot)


@dataclass
class ExperimentConfig:
    scene: str
    pipeline: str
    seeds: list
    params: dict = field(default_factory=dict)
    out: str = "runs"

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}; choose from {', '.join(PIPELINES)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.resolved_params()

    def resolved_params(self) -> PipelineParams:
        try:
            return PipelineParams().with_overrides(self.params)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {"scene": self.scene, "pipeline": self.pipeline, "seeds": list(self.seeds),
                "params": dict(self.params), "out": self.out}


@dataclass
class StageRecord:
    name: str
    metrics: MetricsReport
    pose: Pose
    iterations: int = 0
    n_actions: int = 0

    def to_dict(self) -> dict:
        return {"name": self.name, "metrics": self.metrics.to_dict(), "pose": self.pose.to_dict(),
                "iterations": self.iterations, "n_actions": self.n_actions}

    @classmethod
    def from_dict(cls, d: dict) -> "StageRecord":
        return cls(d["name"], MetricsReport(**d["metrics"]), Pose.from_dict(d["pose"]),
                   d["iterations"], d["n_actions"])


@dataclass
class RunRecord:
    scene: str
    pipeline: str
    seed: int
    stages: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    series: list = field(default_factory=list)
    wall_time: float = 0.0
    failure: dict | None = None

    @property
    def final(self) -> StageRecord | None:
        return self.stages[-1] if self.stages else None

    @property
    def declutter_count(self) -> int:
        return sum(1 for a in self.actions if a["type"] in ("grasp", "push"))

    def views(self) -> list:
        return [a for a in self.actions if a["type"] == "view"]

    def touches(self) -> list:
        return [a for a in self.actions if a["type"] == "touch"]

    def to_dict(self) -> dict:
        return {"scene": self.scene, "pipeline": self.pipeline, "seed": self.seed,
                "stages": [s.to_dict() for s in self.stages], "actions": self.actions,
                "series": self.series, "wall_time": self.wall_time, "failure": self.failure}

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(d["scene"], d["pipeline"], d["seed"], [StageRecord.from_dict(s) for s in d["stages"]],
                   d["actions"], d["series"], d.get("wall_time", 0.0), d.get("failure"))

    def metric_rows(self) -> list[dict]:
        return [{"scene": self.scene, "seed": self.seed, "stage": s.name,
                 "err_T_mm": _fmt(1e3 * s.metrics.err_T), "err_R_deg": _fmt(s.metrics.err_R),
                 "adi_mm": _fmt(1e3 * s.metrics.err_adi)} for s in self.stages]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ----------------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------------

class _Run:
    """Mutable state of one pipeline execution."""

    def __init__(self, scene: Scene, params: PipelineParams, seed: int, record: RunRecord):
        self.scene = scene
        self.p = params
        self.seed = seed
        self.record = record
        self.target = scene.target
        self.model = self.target.mesh
        self.index = MeshIndex(self.model)
        self.model_cloud = scene.model_cloud(self.target.id, params.adi_points, seed)
        self.renders = 0

    def metrics(self, pose: Pose) -> MetricsReport:
        return compute_metrics(pose, self.target.pose, self.model_cloud)

    def log_step(self, action: str, pose: Pose) -> None:
        m = self.metrics(pose)
        self.record.series.append({"step": len(self.record.series), "action": action,
                                   "err_T": m.err_T, "err_adi": m.err_adi})

    def render(self, view, sensor, noise=None):
        self.renders += 1
        return render_depth(self.scene, view, sensor, noise, self.seed * 10_007 + self.renders)

    def register(self, points, init: Pose | None):
        if len(points) < 3:
            raise PipelineFailure("target not visible in the captured views")
        return register(points, self.index, init, self.p.tiqf(), self.seed)

    # -- declutter ---------------------------------------------------------
    def declutter(self) -> int:
        p = self.p
        view = self.scene.top_viewpoint()
        sensor = p.top_sensor()
        meters_per_px = 2 * self.scene.top_view_height * np.tan(np.deg2rad(p.top_hfov) / 2) / p.top_cols
        gripper_px = p.gripper_length / meters_per_px
        zone = DiscardZone(self.scene.discard_slots)
        budget = p.declutter_budget_factor * len(self.scene.objects)
        done = 0
        for step in range(budget):
            r = self.render(view, sensor)
            mask = SegMask(r.id_image)
            tid = self.target.id
            if tid not in mask.ids():
                log.warning("target not visible from the declutter camera; stopping")
                break
            quals = {oid: grasp_quality_stub(self.scene, oid, view, sensor, r) for oid in mask.ids() if oid != tid}
            dets = extract_detections(mask, quals)
            graph = attribute_actions(build_graph(dets, tid, mask.diagonal, p.mu_o, p.mu_d), p.mu_q)
            if not cluttered(graph):
                break
            oid, action = next_object(graph)
            det = graph.detections[oid]
            if action == GRASP:
                try:
                    plan = plan_grasp(det, zone)
                except ValueError:
                    action = "push"
                except DiscardZoneFull:
                    raise PipelineFailure("discard zone is full")
            if action == GRASP:
                apply_grasp_removal(self.scene, oid)
                self.record.actions.append({"type": "grasp", "object": oid, "weight": graph.weight[oid],
                                            "plan": plan.to_dict()})
            else:
                plan = plan_push(dets, oid, gripper_px, p.push_samples, self.seed + step, p.push_distance)
                plan = self._lift_push(plan, r, view)
                outcome = apply_push(self.scene, oid, plan)
                self.record.actions.append({"type": "push", "object": oid, "weight": graph.weight[oid],
                                            "plan": plan.to_dict(), "outcome": outcome})
                if outcome == PUSH_CONTACT_LOST:
                    log.info("push on object %d lost contact; replanning", oid)
            done += 1
        else:
            log.warning("declutter budget of %d actions exhausted", budget)
        return done

    @staticmethod
    def _lift_push(plan: PushPlan, render, view) -> PushPlan:
        col, row = np.clip(np.round(plan.point_px).astype(int), 0,
                           [render.id_image.shape[1] - 1, render.id_image.shape[0] - 1])
        point = render.points_image[row, col]
        world = view.rotation @ np.array([plan.direction_px[0], plan.direction_px[1], 0.0])
        d = world[:2] / np.linalg.norm(world[:2])
        return dataclasses.replace(plan, point=None if np.any(np.isnan(point)) else point, direction=d)

    # -- vision ------------------------------------------------------------
    def first_view(self):
        view = self.scene.static_viewpoint()
        r = self.render(view, self.p.sensor())
        self.record.actions.append({"type": "view", "position": view.position.tolist(), "gain": None})
        pts = r.object_points(self.target.id)
        res = self.register(pts, None)
        self.log_step("view", res.pose)
        return view, r, pts, res

    def active_vision(self, view, r, pts, res):
        p = self.p
        sensor = p.sensor()
        grid = OccupancyGrid.around(pts, p.grid_margin, p.grid_res)
        integrate_measurement(grid, view.position, r.cloud, clip_origin=True)
        poses = [res.pose]
        iterations = res.iterations
        for k in range(1, p.view_budget):
            cands = sample_viewpoints(pts.mean(axis=0), p.view_radius, p.n_view_candidates,
                                      self.seed * 101 + k, self.scene.workspace)
            view, gain = select_nbv(grid, cands, sensor)
            r = self.render(view, sensor)
            integrate_measurement(grid, view.position, r.cloud, clip_origin=True)
            pts = np.vstack([pts, r.object_points(self.target.id)])
            res = self.register(pts, res.pose)
            iterations += res.iterations
            poses.append(res.pose)
            self.record.actions.append({"type": "view", "position": view.position.tolist(), "gain": gain})
            self.log_step("view", res.pose)
            if should_stop(poses, p.stop()):
                break
        return res.pose, iterations, len(poses)

    # -- touch -------------------------------------------------------------
    def tactile(self, estimate: Pose):
        p = self.p
        counter = [0]

        def touch(ray):
            counter[0] += 1
            hit = simulate_touch(self.scene, ray, None, self.seed * 10_009 + counter[0])
            if hit is None or hit[1] != self.target.id:
                return None
            return hit[0]

        res = localize_by_touch(touch, self.model, estimate, p.touch_budget, n_bootstrap=p.n_bootstrap,
                                params=p.tiqf(), per_face=p.per_face, standoff=p.standoff,
                                faces=TABLETOP_FACES, crit=p.stop(), seed=self.seed,
                                prior_scale=p.touch_prior_scale)
        for step, pose in zip([t for t in res.trace if t["contact"] is not None], res.poses):
            self.record.actions.append({"type": "touch", **step})
            self.log_step("touch", pose)
        return res


def run_pipeline(scene: Scene, pipeline: str, seed: int, params: PipelineParams | None = None) -> RunRecord:
    """Run one pipeline on a private copy of ``scene``; module errors end the run
    with a failure entry instead of raising."""
    if pipeline not in PIPELINES:
        raise ConfigError(f"unknown pipeline {pipeline!r}")
    params = params or PipelineParams()
    record = RunRecord(scene.name, pipeline, int(seed))
    t0 = time.perf_counter()
    run = _Run(scene.copy(), params, int(seed), record)
    stage = "setup"
    try:
        if pipeline in ("declutter+active-vision", "full"):
            stage = "declutter"
            n = run.declutter()
            view, r, pts, res = run.first_view()
            record.stages.append(StageRecord("declutter", run.metrics(res.pose), res.pose, res.iterations, n))
        else:
            stage = "static"
            view, r, pts, res = run.first_view()
            record.stages.append(StageRecord("static" if pipeline == "static" else "initial-view",
                                             run.metrics(res.pose), res.pose, res.iterations, 1))
        if pipeline != "static":
            stage = "active-vision"
            pose, its, n_views = run.active_vision(view, r, pts, res)
            record.stages.append(StageRecord("active-vision", run.metrics(pose), pose, its, n_views))
        if pipeline == "full":
            stage = "tactile"
            tres = run.tactile(record.stages[-1].pose)
            record.stages.append(StageRecord("tactile", run.metrics(tres.pose), tres.pose,
                                             0, len(tres.contacts)))
    except (PipelineFailure, InsufficientDataError, SceneError, ValueError, RuntimeError,
            np.linalg.LinAlgError) as exc:
        log.error("run %s/%s/%d failed in %s: %s", scene.name, pipeline, seed, stage, exc)
        record.failure = {"stage": stage, "error": type(exc).__name__, "message": str(exc)}
    record.wall_time = time.perf_counter() - t0
    return record


# ----------------------------------------------------------------------------
# output
# ----------------------------------------------------------------------------

def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def write_run(record: RunRecord, config: ExperimentConfig, out_dir) -> Path:
    """``<out>/<scene>/<pipeline>/seed-<n>/`` with the config snapshot, record JSON and metrics CSV."""
    d = Path(out_dir) / record.scene / record.pipeline / f"seed-{record.seed}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    (d / "record.json").write_text(json.dumps(record.to_dict(), indent=2) + "\n")
    (d / "metrics.csv").write_text(_csv_text(METRIC_COLUMNS, record.metric_rows()))
    return d


def load_records(root) -> list[RunRecord]:
    return [RunRecord.from_dict(json.loads(p.read_text())) for p in sorted(Path(root).rglob("record.json"))]


def _stats(values) -> dict:
    v = np.asarray(values, dtype=float)
    med = float(np.median(v))
    return {"mean": float(v.mean()), "median": med, "std": float(v.std()),
            "mad": float(np.median(np.abs(v - med)))}


def summarize(records) -> list[dict]:
    """Per-pipeline statistics of the final-stage errors (mm)."""
    rows = []
    for pipe in PIPELINES:
        done = [r for r in records if r.pipeline == pipe and r.failure is None and r.final]
        if not done:
            continue
        t = _stats([1e3 * r.final.metrics.err_T for r in done])
        a = _stats([1e3 * r.final.metrics.err_adi for r in done])
        rows.append({"pipeline": pipe, "n": len(done),
                     **{f"err_T_{k}_mm": _fmt(t[k]) for k in ("mean", "median", "std", "mad")},
                     **{f"adi_{k}_mm": _fmt(a[k]) for k in ("mean", "median", "std", "mad")}})
    return rows


def series_rows(records) -> list[dict]:
    rows = []
    for r in records:
        for s in r.series:
            rows.append({"pipeline": r.pipeline, "scene": r.scene, "seed": r.seed, "step": s["step"],
                         "action": s["action"], "err_T_mm": _fmt(1e3 * s["err_T"]),
                         "adi_mm": _fmt(1e3 * s["err_adi"])})
    return rows


def report(records, out_dir) -> dict:
    """Write ``summary.csv``, ``metrics.csv``, ``series.csv`` and ``series.svg``; returns their paths."""
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"summary": out / "summary.csv", "metrics": out / "metrics.csv",
             "series": out / "series.csv", "plot": out / "series.svg"}
    paths["summary"].write_text(_csv_text(SUMMARY_COLUMNS, summarize(records)))
    metric_rows = [{"pipeline": r.pipeline, **row} for r in records for row in r.metric_rows()]
    paths["metrics"].write_text(_csv_text(("pipeline",) + METRIC_COLUMNS, metric_rows))
    srows = series_rows(records)
    paths["series"].write_text(_csv_text(SERIES_COLUMNS, srows))
    _plot_series(records, paths["plot"])
    return paths


def _plot_series(records, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "vtpose"
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for pipe in PIPELINES:
        runs = [r for r in records if r.pipeline == pipe and r.series]
        if not runs:
            continue
        n = max(len(r.series) for r in runs)
        errs = np.full((len(runs), n), np.nan)
        for i, r in enumerate(runs):
            e = [1e3 * s["err_T"] for s in r.series]
            errs[i, :len(e)] = e
            errs[i, len(e):] = e[-1]
        ax.plot(np.arange(1, n + 1), np.median(errs, axis=0), marker="o", label=pipe)
    ax.set_xlabel("sensing action")
    ax.set_ylabel("translation error (mm)")
    if ax.get_lines():
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
