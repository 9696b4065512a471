"""Deterministic tabletop simulator: depth and label rendering, guarded touches,
push and grasp outcomes, stub grasp qualities and pose-error metrics."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .declutter import GraspPose, PushPlan, largest_component, min_area_rect
from .geometry import (GeometryError, Pose, Ray, TriangleMesh, box_mesh, intersect_rays_triangles,
                       lathe_mesh, load_obj, quat_from_axis_angle, rotation_angle, sample_mesh_surface)
from .nbv import SensorModel, Viewpoint, make_viewpoint

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
BUNDLED_SCENE = DATA_DIR / "bundled.toml"
TABLE_EXTENT = 10.0
DEGRADED_DROP = 0.8
VIEW_OFFSET = 0.008   # per-view calibration offset used by random_scene, m


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    depth_sigma: float = 0.002        # m, along each camera ray
    touch_sigma: float = 0.001        # m, isotropic
    view_offset_sigma: float = 0.0    # m per axis, one rigid offset per rendered view
    seed: int = 0

    def __post_init__(self):
        if min(self.depth_sigma, self.touch_sigma, self.view_offset_sigma) < 0:
            raise ValueError("noise sigmas must be >= 0")

    def rng(self, seed: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, seed])


NOISELESS = NoiseModel(0.0, 0.0, 0.0)


@dataclass
class SceneObject:
    id: int
    mesh: TriangleMesh                 # model frame
    pose: Pose                         # ground truth
    is_target: bool = False
    grasp_quality: float = 0.5         # base quality for the grasp stub
    name: str = ""
    shape: dict = field(default_factory=dict)   # how the mesh was specified, for saving

    def world_mesh(self) -> TriangleMesh:
        return self.mesh.transformed(self.pose)


@dataclass
class Scene:
    objects: list
    workspace: tuple = ((-0.6, -0.6, 0.0), (0.6, 0.6, 1.0))   # reach of camera, probe and pushes
    table_height: float = 0.0
    noise: NoiseModel = field(default_factory=NoiseModel)
    static_view: tuple = (0.45, -0.25, 0.35)
    look_at: tuple = (0.0, 0.0, 0.1)
    top_view_height: float = 0.6
    discard_slots: list = field(default_factory=lambda: [[0.6, round(-0.3 + 0.1 * k, 2), 0.05] for k in range(8)])
    degraded_depth: bool = False
    name: str = "scene"
    # test hook: (object id, push count) -> True makes that push lose contact halfway
    push_failure: Callable[[int, int], bool] | None = None
    push_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids) or any(i <= 0 for i in ids):
            raise SceneError("object ids must be unique positive integers")
        if sum(o.is_target for o in self.objects) != 1:
            raise SceneError("scene needs exactly one target")
        for o in self.objects:
            lo, _ = o.world_mesh().bounds()
            if lo[2] < self.table_height - 1e-6:
                raise SceneError(f"object {o.id} reaches below the table")

    @property
    def target(self) -> SceneObject:
        return next(o for o in self.objects if o.is_target)

    def get(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise SceneError(f"no object with id {oid}")

    def copy(self) -> "Scene":
        return copy.deepcopy(self)

    def static_viewpoint(self) -> Viewpoint:
        return make_viewpoint(self.static_view, self.look_at)

    def top_viewpoint(self) -> Viewpoint:
        c = np.array([self.look_at[0], self.look_at[1], self.table_height], dtype=float)
        return make_viewpoint(c + [0.0, 0.0, self.top_view_height], c)

    def model_cloud(self, oid: int, n: int = 500, seed: int = 0) -> np.ndarray:
        return sample_mesh_surface(self.get(oid).mesh, n, seed)


# ----------------------------------------------------------------------------
# scene files
# ----------------------------------------------------------------------------

BOTTLE_PROFILE = ((0.04, -0.11), (0.04, 0.05), (0.015, 0.10), (0.015, 0.13))


def bottle_mesh(segments: int = 24) -> TriangleMesh:
    """Bottle-like solid of revolution, 24 cm tall and 8 cm wide, with its origin near the centroid."""
    return lathe_mesh(BOTTLE_PROFILE, segments)


def cylinder_mesh(radius: float, height: float, segments: int = 24) -> TriangleMesh:
    return lathe_mesh([(radius, -height / 2), (radius, height / 2)], segments)


def shape_mesh(shape: dict, base: Path | None = None) -> TriangleMesh:
    if "box" in shape:
        return box_mesh(shape["box"])
    if "cylinder" in shape:
        r, h = shape["cylinder"]
        return cylinder_mesh(r, h)
    if "bottle" in shape:
        return bottle_mesh()
    if "mesh" in shape:
        p = Path(shape["mesh"])
        if not p.is_absolute():
            p = (base or DATA_DIR) / p
        return load_obj(p)
    raise SceneError(f"unknown shape {shape!r}")


def scene_from_dict(doc: dict, base: Path | None = None) -> Scene:
    objs = []
    for od in doc.get("objects", []):
        shape = {k: od[k] for k in ("box", "cylinder", "bottle", "mesh") if k in od}
        if len(shape) != 1:
            raise SceneError(f"object {od.get('id')} needs exactly one of box/cylinder/bottle/mesh")
        try:
            pose = Pose(od.get("rotation_wxyz", [1, 0, 0, 0]), od["translation"])
        except (KeyError, GeometryError) as exc:
            raise SceneError(f"object {od.get('id')}: bad pose ({exc})") from exc
        q = float(od.get("grasp_quality", 0.5))
        if not 0.0 <= q <= 1.0:
            raise SceneError(f"object {od.get('id')}: grasp_quality outside [0, 1]")
        objs.append(SceneObject(int(od["id"]), shape_mesh(shape, base), pose, bool(od.get("is_target", False)),
                                q, str(od.get("name", "")), shape))
    nd = doc.get("noise", {})
    cam = doc.get("cameras", {})
    kw = {}
    if "workspace" in doc:
        kw["workspace"] = tuple(tuple(float(v) for v in c) for c in doc["workspace"])
    if "static_view" in cam:
        kw["static_view"] = tuple(cam["static_view"])
    if "look_at" in cam:
        kw["look_at"] = tuple(cam["look_at"])
    if "top_view_height" in cam:
        kw["top_view_height"] = float(cam["top_view_height"])
    if "discard" in doc:
        kw["discard_slots"] = [list(s) for s in doc["discard"]["slots"]]
    try:
        noise = NoiseModel(float(nd.get("depth_sigma", 0.002)), float(nd.get("touch_sigma", 0.001)),
                           float(nd.get("view_offset_sigma", 0.0)), int(nd.get("seed", 0)))
    except ValueError as exc:
        raise SceneError(str(exc)) from exc
    return Scene(objs, table_height=float(doc.get("table_height", 0.0)), noise=noise,
                 degraded_depth=bool(doc.get("degraded_depth", False)), name=str(doc.get("name", "scene")), **kw)


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise SceneError(f"cannot read scene {path}: {exc}") from exc
    doc.setdefault("name", path.stem)
    return scene_from_dict(doc, path.parent)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def scene_to_toml(scene: Scene) -> str:
    n = scene.noise
    lines = [f"name = {_toml_value(scene.name)}", f"table_height = {_toml_value(scene.table_height)}",
             f"workspace = {_toml_value(scene.workspace)}", f"degraded_depth = {_toml_value(scene.degraded_depth)}",
             "", "[noise]", f"depth_sigma = {_toml_value(n.depth_sigma)}", f"touch_sigma = {_toml_value(n.touch_sigma)}",
             f"view_offset_sigma = {_toml_value(n.view_offset_sigma)}", f"seed = {n.seed}",
             "", "[cameras]", f"static_view = {_toml_value(scene.static_view)}",
             f"look_at = {_toml_value(scene.look_at)}", f"top_view_height = {_toml_value(scene.top_view_height)}",
             "", "[discard]", f"slots = {_toml_value(scene.discard_slots)}"]
    for o in scene.objects:
        if not o.shape:
            raise SceneError(f"object {o.id} has no shape description to save")
        lines += ["", "[[objects]]", f"id = {o.id}", f"name = {_toml_value(o.name)}"]
        lines += [f"{k} = {_toml_value(v)}" for k, v in o.shape.items()]
        lines += [f"translation = {_toml_value(o.pose.translation)}",
                  f"rotation_wxyz = {_toml_value(o.pose.rotation)}",
                  f"is_target = {_toml_value(o.is_target)}", f"grasp_quality = {_toml_value(o.grasp_quality)}"]
    return "\n".join(lines) + "\n"


def random_scene(seed: int, degraded: bool = False, n_clutter: int = 4) -> Scene:
    """Bottle target ringed by boxes and cans; the first clutter item stands
    between the static camera and the target."""
    rng = np.random.default_rng(seed)
    target_xy = rng.uniform(-0.04, 0.04, 2)
    target = SceneObject(1, bottle_mesh(), Pose(quat_from_axis_angle([0, 0, 1], rng.uniform(0, 2 * np.pi)),
                                                [*target_xy, 0.11]),
                         True, float(rng.uniform(0.4, 0.9)), "bottle", {"bottle": True})
    cam_az = rng.uniform(0, 2 * np.pi)
    cam = np.array([*(target_xy + 0.45 * np.array([np.cos(cam_az), np.sin(cam_az)])), 0.33])
    placed = [(target_xy, 0.04)]
    objs = [target]
    for k in range(n_clutter):
        for _ in range(1000):
            if k == 0:
                az = cam_az + rng.uniform(-0.25, 0.25)
                dist = rng.uniform(0.085, 0.11)
            else:
                az = rng.uniform(0, 2 * np.pi)
                dist = rng.uniform(0.08, 0.17)
            xy = target_xy + dist * np.array([np.cos(az), np.sin(az)])
            if k == 0 or rng.random() < 0.6:
                sx, sy = rng.uniform(0.04, 0.07), rng.uniform(0.03, 0.06)
                h = rng.uniform(0.16, 0.22) if k == 0 else rng.uniform(0.05, 0.2)
                shape = {"box": [float(sx), float(sy), float(h)]}
                radius = 0.5 * np.hypot(sx, sy)
            else:
                r, h = rng.uniform(0.025, 0.035), rng.uniform(0.08, 0.16)
                shape = {"cylinder": [float(r), float(h)]}
                radius = r
            if all(np.linalg.norm(xy - p) > radius + pr + 0.005 for p, pr in placed):
                break
        else:
            raise SceneError("could not place clutter without overlap")
        placed.append((xy, radius))
        h = shape["box"][2] if "box" in shape else shape["cylinder"][1]
        objs.append(SceneObject(k + 2, shape_mesh(shape), Pose(quat_from_axis_angle([0, 0, 1], rng.uniform(0, np.pi)),
                                                               [*xy, h / 2 + 1e-4]),
                                False, float(rng.uniform(0.3, 0.9)), "box" if "box" in shape else "can", shape))
    return Scene(objs, noise=NoiseModel(0.002, 0.001, VIEW_OFFSET, seed), static_view=tuple(cam),
                 look_at=(*target_xy, 0.11), degraded_depth=degraded, name=f"random-{seed}")


# ----------------------------------------------------------------------------
# rendering and touch
# ----------------------------------------------------------------------------

@dataclass
class Render:
    cloud: np.ndarray          # (N, 3) hit points
    ids: np.ndarray            # (N,) object id per point, 0 = table
    pixels: np.ndarray         # (N,) flat pixel index per point
    id_image: np.ndarray       # (rows, cols), 0 = table or nothing
    points_image: np.ndarray   # (rows, cols, 3), NaN where no return

    def object_points(self, oid: int) -> np.ndarray:
        return self.cloud[self.ids == oid]


def _aabb_hits(origins, dirs, lo, hi) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - origins) / dirs
        tb = (hi - origins) / dirs
    tmin = np.nanmax(np.minimum(ta, tb), axis=1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=1)
    return (tmax >= np.maximum(tmin, 0.0))


def cast_rays(objects, origins, dirs, table_height: float | None = None):
    """Nearest hit per ray over ``objects`` (and the table plane): ``(dist, id)``; misses give inf, -1."""
    origins = np.broadcast_to(np.asarray(origins, dtype=float), np.shape(dirs))
    best = np.full(len(dirs), np.inf)
    ids = np.full(len(dirs), -1, dtype=np.int64)
    if table_height is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (table_height - origins[:, 2]) / dirs[:, 2]
        p = origins + t[:, None] * dirs
        ok = (t > 0) & np.isfinite(t) & (np.abs(p[:, 0]) <= TABLE_EXTENT) & (np.abs(p[:, 1]) <= TABLE_EXTENT)
        best[ok] = t[ok]
        ids[ok] = 0
    for o in objects:
        mesh = o.world_mesh()
        lo, hi = mesh.bounds()
        cand = np.flatnonzero(_aabb_hits(origins, dirs, lo - 1e-9, hi + 1e-9))
        if len(cand) == 0:
            continue
        d, _ = intersect_rays_triangles(origins[cand], dirs[cand], mesh.triangles)
        closer = d < best[cand]
        best[cand[closer]] = d[closer]
        ids[cand[closer]] = o.id
    return best, ids


def render_depth(scene: Scene, view: Viewpoint, sensor: SensorModel, noise: NoiseModel | None = None,
                 seed: int = 0) -> Render:
    """One ray per pixel against every object and the table.

    Returns are jittered along their ray by ``depth_sigma`` and the whole view
    is shifted by one offset drawn with ``view_offset_sigma``. In degraded
    depth scenes 80% of the target's returns are dropped; its labels remain.
    """
    noise = scene.noise if noise is None else noise
    rng = noise.rng(seed)
    dirs = view.world_rays(sensor)
    dist, ids = cast_rays(scene.objects, view.position, dirs, scene.table_height)
    valid = np.isfinite(dist)
    jitter = rng.normal(0.0, noise.depth_sigma, len(dirs)) if noise.depth_sigma > 0 else np.zeros(len(dirs))
    offset = rng.normal(0.0, noise.view_offset_sigma, 3) if noise.view_offset_sigma > 0 else np.zeros(3)
    keep = valid.copy()
    if scene.degraded_depth:
        tgt = scene.target.id
        drop = rng.random(len(dirs)) < DEGRADED_DROP
        keep &= ~((ids == tgt) & drop)
    pts = view.position + (dist + jitter)[:, None] * dirs + offset
    rows, cols = sensor.ray_rows, sensor.ray_cols
    id_image = np.where(valid, np.maximum(ids, 0), 0).reshape(rows, cols)
    points_image = np.full((rows * cols, 3), np.nan)
    points_image[keep] = pts[keep]
    pix = np.flatnonzero(keep)
    return Render(pts[keep], ids[keep], pix, id_image, points_image.reshape(rows, cols, 3))


def simulate_touch(scene: Scene, ray: Ray, noise: NoiseModel | None = None, seed: int = 0):
    """Guarded probe along ``ray``: first contact with any object as ``(point, id)``, or None."""
    noise = scene.noise if noise is None else noise
    dist, ids = cast_rays(scene.objects, ray.origin, ray.direction[None])
    if not np.isfinite(dist[0]):
        return None
    p = ray.at(dist[0])
    if noise.touch_sigma > 0:
        p = p + noise.rng(seed).normal(0.0, noise.touch_sigma, 3)
    return p, int(ids[0])


# ----------------------------------------------------------------------------
# manipulation
# ----------------------------------------------------------------------------

PUSH_OK, PUSH_CLAMPED, PUSH_CONTACT_LOST = "ok", "clamped", "contact_lost"


def apply_push(scene: Scene, oid: int, plan: PushPlan) -> str:
    """Translate the object by ``plan.distance`` along its world xy direction.

    Returns ``"ok"``, ``"clamped"`` when the workspace edge stopped it, or
    ``"contact_lost"`` when the injected failure hook cut the push short.
    """
    obj = scene.get(oid)
    if plan.direction is None:
        raise ValueError("push plan has no world direction")
    d = np.asarray(plan.direction, dtype=float)[:2]
    n = np.linalg.norm(d)
    if plan.distance != 0 and n < 1e-12:
        raise ValueError("push direction is zero")
    count = scene.push_counts.get(oid, 0)
    scene.push_counts[oid] = count + 1
    dist = plan.distance
    outcome = PUSH_OK
    if scene.push_failure is not None and scene.push_failure(oid, count):
        dist *= 0.5
        outcome = PUSH_CONTACT_LOST
    if dist == 0:
        return outcome
    t = obj.pose.translation.copy()
    t[:2] += dist * d / n
    lo, hi = (np.asarray(w, dtype=float) for w in scene.workspace)
    clamped = np.clip(t[:2], lo[:2], hi[:2])
    if np.any(clamped != t[:2]):
        t[:2] = clamped
        outcome = PUSH_CLAMPED if outcome == PUSH_OK else outcome
    obj.pose = Pose(obj.pose.rotation, t)
    return outcome


def apply_grasp_removal(scene: Scene, oid: int) -> Scene:
    obj = scene.get(oid)
    if obj.is_target:
        raise SceneError("the target cannot be removed")
    scene.objects = [o for o in scene.objects if o.id != oid]
    return scene


def grasp_quality_stub(scene: Scene, oid: int, view: Viewpoint, sensor: SensorModel,
                       render: Render | None = None):
    """``(q, GraspPose | None)``: base quality times the visible fraction of the
    object's unoccluded image footprint; grasp at the visible centroid with the
    angle along the minor axis of its minimum-area box."""
    obj = scene.get(oid)
    render = render or render_depth(scene, view, sensor, NOISELESS)
    visible = render.id_image == oid
    dirs = view.world_rays(sensor)
    _, solo_ids = cast_rays([obj], view.position, dirs)
    solo = int((solo_ids == oid).sum())
    n_vis = int(visible.sum())
    if solo == 0 or n_vis == 0:
        return 0.0, None
    q = obj.grasp_quality * min(1.0, n_vis / solo)
    region = largest_component(visible)
    rows, cols = np.nonzero(region)
    c = np.array([cols.mean(), rows.mean()])
    k = int(np.argmin((cols - c[0]) ** 2 + (rows - c[1]) ** 2))
    pixel = np.array([cols[k], rows[k]], dtype=float)
    corners = min_area_rect(np.column_stack([cols, rows]))
    e1, e2 = corners[1] - corners[0], corners[2] - corners[1]
    minor = e1 if np.linalg.norm(e1) <= np.linalg.norm(e2) else e2
    angle = float(np.arctan2(minor[1], minor[0])) if np.linalg.norm(minor) > 0 else 0.0
    point = render.points_image[rows[k], cols[k]]
    return float(q), GraspPose(pixel, angle, None if np.any(np.isnan(point)) else point.copy())


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    err_T: float      # m
    err_R: float      # degrees
    err_adi: float    # m

    def to_dict(self) -> dict:
        return {"err_T": self.err_T, "err_R": self.err_R, "err_adi": self.err_adi}


def compute_metrics(est: Pose, gt: Pose, model) -> MetricsReport:
    """Translation error, geodesic rotation error and the average closest-point distance (ADI)."""
    pts = np.asarray(model, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("model cloud is empty")
    err_t = float(np.linalg.norm(est.translation - gt.translation))
    err_r = float(np.rad2deg(rotation_angle(est.R, gt.R)))
    d, _ = cKDTree(est.apply(pts)).query(gt.apply(pts))
    return MetricsReport(err_t, err_r, float(np.mean(d)))
