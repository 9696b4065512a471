"""Declutter graph: object relations from segmentation masks, action attribution and push planning."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import ndimage
from shapely.geometry import LineString, LinearRing, MultiPoint, Point, Polygon
from skimage.measure import find_contours

log = logging.getLogger(__name__)

MU_O = 0.05
MU_D = 0.5          # fraction of the image diagonal
MU_Q = 0.1
UNREACHABLE_WEIGHT = 1e-6
MIN_DISTANCE = 1e-6  # normalized; keeps the 1/d branch finite for touching contours
GRASP, PUSH = "grasp", "push"


class DeclutterComplete(Exception):
    """Only the target remains in the graph."""


class DiscardZoneFull(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# masks
# ----------------------------------------------------------------------------

@dataclass
class SegMask:
    labels: np.ndarray   # (height, width) int, 0 = background

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("label image must be 2-d")
        self.labels = self.labels.astype(np.int64)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    def ids(self) -> list[int]:
        return [int(i) for i in np.unique(self.labels) if i != 0]

    # PGM: P2 (ascii) or P5 (binary, 8 or 16 bit big-endian)
    @classmethod
    def from_pgm(cls, path) -> "SegMask":
        data = open(path, "rb").read()
        tokens, pos = [], 0
        while len(tokens) < 4:
            while data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                pos = data.index(b"\n", pos) + 1
                continue
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
        magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
        if magic == b"P2":
            vals = np.array(data[pos:].split(), dtype=np.int64)
        elif magic == b"P5":
            dtype = ">u2" if maxval > 255 else "u1"
            vals = np.frombuffer(data[pos + 1:], dtype=dtype).astype(np.int64)
        else:
            raise ValueError(f"unsupported PGM magic {magic!r}")
        if vals.size < w * h:
            raise ValueError("PGM payload shorter than its header claims")
        return cls(vals[:w * h].reshape(h, w))

    def to_pgm(self, path) -> None:
        maxval = max(1, int(self.labels.max()))
        with open(path, "w") as fh:
            fh.write(f"P2\n{self.width} {self.height}\n{maxval}\n")
            for row in self.labels:
                fh.write(" ".join(str(int(v)) for v in row) + "\n")

    @classmethod
    def from_rle(cls, doc: dict) -> "SegMask":
        """``{"width", "height", "runs": [[id, length], ...]}`` in row-major order."""
        w, h = int(doc["width"]), int(doc["height"])
        flat = np.concatenate([np.full(int(n), int(i)) for i, n in doc["runs"]]) if doc["runs"] else np.zeros(0)
        if flat.size != w * h:
            raise ValueError("run lengths do not cover the image")
        return cls(flat.reshape(h, w))

    def to_rle(self) -> dict:
        flat = self.labels.ravel()
        cut = np.flatnonzero(np.diff(flat)) + 1
        starts = np.concatenate([[0], cut])
        lengths = np.diff(np.concatenate([starts, [flat.size]]))
        return {"width": self.width, "height": self.height,
                "runs": [[int(flat[s]), int(n)] for s, n in zip(starts, lengths)]}

    @classmethod
    def from_rle_json(cls, path) -> "SegMask":
        with open(path) as fh:
            return cls.from_rle(json.load(fh))


# ----------------------------------------------------------------------------
# detections
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class GraspPose:
    pixel: np.ndarray          # (x, y)
    angle: float               # radians in the image plane
    point: np.ndarray | None = None   # lifted 3-d point, m


@dataclass
class Detection:
    id: int
    contour: np.ndarray        # (K, 2) pixel polygon (x, y), open ring
    box: np.ndarray            # (4, 2) minimum-area rectangle corners
    centroid: np.ndarray       # (x, y) area centroid
    area: int = 0              # pixel count
    q: float = 0.0
    grasp_pose: GraspPose | None = None

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("grasp quality must lie in [0, 1]")

    @property
    def box_polygon(self) -> Polygon:
        return Polygon(self.box)

    def box_area(self) -> float:
        return float(self.box_polygon.area)


def min_area_rect(points) -> np.ndarray:
    """Corners of the minimum-area enclosing rectangle, counter-clockwise."""
    pts = np.asarray(points, dtype=float)
    env = MultiPoint([tuple(p) for p in pts]).minimum_rotated_rectangle
    if env.geom_type == "Polygon":
        ring = np.asarray(env.exterior.coords)[:-1]
        if Polygon(ring).exterior.is_ccw:
            return ring
        return ring[::-1]
    # collinear or single point: degenerate rectangle
    coords = np.asarray(env.coords)
    return np.array([coords[0], coords[-1], coords[-1], coords[0]])


def largest_component(binary: np.ndarray) -> np.ndarray:
    """Largest 8-connected component; ties go to the lowest component label."""
    labels, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    if n <= 1:
        return labels > 0
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


def mask_contour(region: np.ndarray) -> np.ndarray:
    """Outer marching-squares contour at level 0.5 as (x, y) pixel coordinates."""
    padded = np.pad(region.astype(float), 1)
    contours = find_contours(padded, 0.5)
    ring = max(contours, key=len)[:-1] - 1.0
    return ring[:, ::-1].copy()


def extract_detections(mask: SegMask, qualities: dict | None = None) -> list[Detection]:
    """One detection per label id, built from its largest connected component."""
    if mask.labels.size == 0 or not mask.ids():
        raise ValueError("mask has no labelled pixels")
    out = []
    for oid in mask.ids():
        region = largest_component(mask.labels == oid)
        n = int(region.sum())
        if n == 0:
            log.warning("object %d has no pixels; skipped", oid)
            continue
        rows, cols = np.nonzero(region)
        contour = mask_contour(region)
        q, grasp = 0.0, None
        if qualities and oid in qualities:
            q, grasp = qualities[oid]
        out.append(Detection(oid, contour, min_area_rect(contour),
                             np.array([cols.mean(), rows.mean()]), n, float(q), grasp))
    return out


# ----------------------------------------------------------------------------
# pairwise relations
# ----------------------------------------------------------------------------

def iou(a, b) -> float:
    """Intersection over union of two convex polygons given as (K, 2) corners."""
    pa = a if isinstance(a, Polygon) else Polygon(np.asarray(a, dtype=float))
    pb = b if isinstance(b, Polygon) else Polygon(np.asarray(b, dtype=float))
    union = pa.union(pb).area
    if union <= 0:
        return 0.0
    return float(np.clip(pa.intersection(pb).area / union, 0.0, 1.0))


def _ring(contour) -> LinearRing | LineString | Point:
    c = np.asarray(contour, dtype=float)
    if len(c) >= 3:
        return LinearRing(c)
    if len(c) == 2:
        return LineString(c)
    return Point(c[0])


def min_contour_distance(a, b) -> float:
    """Smallest distance between the boundary segments of two contours (0 when they cross)."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty contour")
    return float(_ring(a).distance(_ring(b)))


def edge_weight(overlap: float, distance: float, mu_o: float = MU_O, mu_d: float = MU_D) -> float:
    """Overlap when above ``mu_o``; else inverse distance when closer than ``mu_d``; else 0."""
    if overlap > mu_o:
        return float(overlap)
    if distance < mu_d:
        return 1.0 / max(distance, MIN_DISTANCE)
    return 0.0


# ----------------------------------------------------------------------------
# graph
# ----------------------------------------------------------------------------

@dataclass
class DeclutterGraph:
    root: int
    detections: dict                              # id -> Detection
    parent: dict = field(default_factory=dict)    # child id -> parent id
    weight: dict = field(default_factory=dict)    # child id -> incoming edge weight
    action: dict = field(default_factory=dict)    # child id -> GRASP | PUSH
    direct: dict = field(default_factory=dict)    # id -> pairwise weight against the root

    @property
    def vertices(self) -> list[int]:
        return sorted(self.detections)

    def children(self, v: int) -> list[int]:
        return sorted(c for c, p in self.parent.items() if p == v)

    def leaves(self) -> list[int]:
        return [v for v in self.vertices if v != self.root and not self.children(v)]

    def is_tree(self) -> bool:
        if self.root not in self.detections or self.root in self.parent:
            return False
        if set(self.parent) != set(self.detections) - {self.root}:
            return False
        for v in self.parent:
            seen = set()
            while v != self.root:
                if v in seen or v not in self.parent:
                    return False
                seen.add(v)
                v = self.parent[v]
        return True

    def copy(self) -> "DeclutterGraph":
        return replace(self, detections=dict(self.detections), parent=dict(self.parent),
                       weight=dict(self.weight), action=dict(self.action), direct=dict(self.direct))

    def to_dot(self) -> str:
        lines = ["digraph declutter {", f'  {self.root} [shape=doublecircle, label="target {self.root}"];']
        for v in self.vertices:
            if v != self.root:
                lines.append(f'  {v} [label="{v} q={self.detections[v].q:.2f}"];')
        for c in sorted(self.parent):
            act = self.action.get(c, "")
            lines.append(f'  {self.parent[c]} -> {c} [label="{self.weight[c]:.4g} {act}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def pairwise_weights(detections, image_diag: float, mu_o: float = MU_O, mu_d: float = MU_D) -> dict:
    """Edge weight for every unordered id pair; distances normalized by ``image_diag``."""
    out = {}
    dets = sorted(detections, key=lambda d: d.id)
    for i, a in enumerate(dets):
        for b in dets[i + 1:]:
            o = iou(a.box_polygon, b.box_polygon)
            d = min_contour_distance(a.contour, b.contour) / image_diag if o <= mu_o else np.inf
            w = edge_weight(o, d, mu_o, mu_d)
            out[(a.id, b.id)] = out[(b.id, a.id)] = w
    return out


def build_graph(detections, target_id: int, image_diag: float, mu_o: float = MU_O,
                mu_d: float = MU_D) -> DeclutterGraph:
    """Tree rooted at the target, grown breadth-first over nonzero-weight pairs.

    Each newly reached vertex hangs from its heaviest edge into the already
    explored set (ties to the lower id). Vertices with no path to the target
    hang from the root with weight ``UNREACHABLE_WEIGHT``.
    """
    if not detections:
        raise ValueError("no detections")
    dets = {d.id: d for d in detections}
    if target_id not in dets:
        raise ValueError(f"target {target_id} not among detections")
    W = pairwise_weights(detections, image_diag, mu_o, mu_d)
    g = DeclutterGraph(target_id, dets)
    g.direct = {v: W[(v, target_id)] for v in dets if v != target_id}
    explored = {target_id}
    frontier = [target_id]
    while frontier:
        reached = sorted(v for v in dets if v not in explored
                         and any(W[(v, u)] > 0 for u in explored))
        for v in reached:
            best = max(sorted(explored), key=lambda u: (W[(v, u)], -u))
            g.parent[v] = best
            g.weight[v] = W[(v, best)]
        explored.update(reached)
        frontier = reached
    for v in sorted(dets):
        if v not in explored:
            g.parent[v] = target_id
            g.weight[v] = UNREACHABLE_WEIGHT
    return g


def attribute_actions(graph: DeclutterGraph, mu_q: float = MU_Q) -> DeclutterGraph:
    """Label each edge grasp when the child's quality reaches ``mu_q``, push otherwise."""
    g = graph.copy()
    g.action = {c: GRASP if g.detections[c].q >= mu_q else PUSH for c in g.parent}
    return g


def next_object(graph: DeclutterGraph) -> tuple[int, str]:
    """Leaf with the heaviest incoming edge (ties to the lower id) and its action."""
    leaves = graph.leaves()
    if not leaves:
        raise DeclutterComplete("only the target remains")
    best = max(leaves, key=lambda v: (graph.weight[v], -v))
    return best, graph.action.get(best, GRASP if graph.detections[best].q >= MU_Q else PUSH)


def remove_and_update(graph: DeclutterGraph, v: int) -> DeclutterGraph:
    if v == graph.root:
        raise ValueError("the target cannot be removed")
    if v not in graph.detections:
        raise KeyError(f"vertex {v} not in graph")
    if graph.children(v):
        raise ValueError(f"vertex {v} is not a leaf")
    g = graph.copy()
    for d in (g.detections, g.parent, g.weight, g.action, g.direct):
        d.pop(v, None)
    return g


def cluttered(graph: DeclutterGraph) -> bool:
    """True while some object still relates directly to the target."""
    return any(w > 0 for w in graph.direct.values())


# ----------------------------------------------------------------------------
# actions
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PushPlan:
    point_px: np.ndarray
    direction_px: np.ndarray
    distance: float = 0.05           # m
    point: np.ndarray | None = None  # lifted contact point, m
    direction: np.ndarray | None = None  # unit world xy direction

    def to_dict(self) -> dict:
        f = lambda a: None if a is None else [float(v) for v in a]
        return {"type": PUSH, "point_px": f(self.point_px), "direction_px": f(self.direction_px),
                "distance": self.distance, "point": f(self.point), "direction": f(self.direction)}


@dataclass(frozen=True)
class GraspPlan:
    point: np.ndarray
    angle: float
    place: np.ndarray

    def to_dict(self) -> dict:
        return {"type": GRASP, "point": [float(v) for v in self.point], "angle": float(self.angle),
                "place": [float(v) for v in self.place]}


@dataclass
class DiscardZone:
    slots: list
    used: int = 0

    def take(self) -> np.ndarray:
        if self.used >= len(self.slots):
            raise DiscardZoneFull("discard zone has no free slot")
        self.used += 1
        return np.asarray(self.slots[self.used - 1], dtype=float)


def push_direction(centroid, others) -> np.ndarray:
    """Unit direction away from the inverse-distance weighted neighbour pull."""
    c = np.asarray(centroid, dtype=float)
    v = np.zeros(2)
    for o in others:
        d = np.asarray(o, dtype=float) - c
        n = np.linalg.norm(d)
        if n > 1e-12:
            v += d / n   # w_i * v_i with w_i = 1 / |v_i|
    n = np.linalg.norm(v)
    if n < 1e-12:
        return np.array([1.0, 0.0])
    return -v / n


def _gripper_box(point, direction, size: float) -> Polygon:
    """Square footprint of side ``size`` centred on ``point`` and aligned with ``direction``."""
    d = np.asarray(direction, dtype=float)
    n = np.array([-d[1], d[0]])
    h = 0.5 * size
    p = np.asarray(point, dtype=float)
    return Polygon([p + h * d + h * n, p - h * d + h * n, p - h * d - h * n, p + h * d - h * n])


def plan_push(detections, obj_id: int, gripper_px: float, n_samples: int = 32, seed: int = 0,
              distance: float = 0.05) -> PushPlan:
    """Push point and direction for ``obj_id``.

    The nominal contact is where the ray from the centroid against the push
    direction leaves the contour. Up to ``n_samples`` contour points within
    ``1.5 * gripper_px`` of it are scored by the mean IoU of a gripper
    footprint against the other objects' boxes; the lowest wins, ties going to
    the point nearest the nominal one.
    """
    dets = {d.id: d for d in detections}
    det = dets[obj_id]
    others = [d for d in detections if d.id != obj_id]
    direction = push_direction(det.centroid, [o.centroid for o in others])
    contour = np.asarray(det.contour, dtype=float)
    reach = 2.0 * float(np.ptp(contour, axis=0).max() + 1.0)
    c = det.centroid
    ray = LineString([tuple(c), tuple(c - reach * direction)])
    hit = ray.intersection(_ring(contour))
    pts = [] if hit.is_empty else [np.asarray(g.coords[0]) for g in getattr(hit, "geoms", [hit])]
    if pts:
        nominal = min(pts, key=lambda p: np.linalg.norm(p - c))
    else:
        k = int(np.argmin([ray.distance(Point(p)) for p in contour]))
        nominal = contour[k]
    near = contour[np.linalg.norm(contour - nominal, axis=1) <= 1.5 * gripper_px]
    rng = np.random.default_rng(seed)
    if len(near) > n_samples:
        near = near[np.sort(rng.choice(len(near), n_samples, replace=False))]
    cands = np.vstack([nominal[None], near]) if len(near) else nominal[None]
    boxes = [o.box_polygon for o in others]
    scores = np.array([np.mean([iou(_gripper_box(p, direction, gripper_px), b) for b in boxes])
                       if boxes else 0.0 for p in cands])
    dist = np.linalg.norm(cands - nominal, axis=1)
    best = int(np.lexsort((dist, scores))[0])
    return PushPlan(cands[best], direction, distance)


def plan_grasp(detection: Detection, zone: DiscardZone,
               lift: Callable[[np.ndarray], np.ndarray] | None = None) -> GraspPlan:
    """Grasp at the provider's pixel, lifted to 3-d, with the next discard slot."""
    gp = detection.grasp_pose
    if gp is None:
        raise ValueError(f"object {detection.id} has no grasp pose")
    point = gp.point if lift is None else lift(gp.pixel)
    if point is None:
        raise ValueError(f"grasp pixel of object {detection.id} has no depth")
    return GraspPlan(np.asarray(point, dtype=float), float(gp.angle), zone.take())
