"""Next-best-touch selection by expected information gain on the TIQF belief."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .geometry import (GeometryError, MeshIndex, Pose, Ray, TriangleMesh, as_cloud,
                       intersect_rays_triangles, ray_mesh_intersect)
from .tiqf import (CorrespondencePair, FilterState, TiqfParams, build_pseudo_measurement,
                   kalman_update, measurement_noise, register)

log = logging.getLogger(__name__)

STATE_DIM = 4
# face order of the candidate box: (axis, outward sign)
BOX_FACES = ((0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1))
# every face except the one facing the table
TABLETOP_FACES = BOX_FACES[:5]


class NoContactError(RuntimeError):
    """Every candidate touch is predicted to miss the object."""


@dataclass(frozen=True)
class TouchAction:
    ray: Ray
    face: int = -1

    def to_dict(self) -> dict:
        return {"start": [float(v) for v in self.ray.origin],
                "direction": [float(v) for v in self.ray.direction],
                "face": self.face}


@dataclass(frozen=True)
class StopCriterion:
    trans_thresh: float = 0.005     # m
    rot_thresh: float = 2.0         # degrees

    def __post_init__(self):
        if self.trans_thresh <= 0 or self.rot_thresh <= 0:
            raise ValueError("stop thresholds must be positive")


def sample_touch_actions(estimate: Pose, model: TriangleMesh, per_face: int = 20,
                         standoff: float = 0.05, seed: int = 0, faces=BOX_FACES) -> list[TouchAction]:
    """Rays aimed inward through the faces of the world-aligned bounding box
    of ``model`` placed at ``estimate``.

    For each face, ``per_face`` start points are drawn uniformly on the face,
    pushed out by ``standoff`` along its normal, and directed against it.
    """
    if per_face < 1:
        raise ValueError("per_face must be >= 1")
    lo, hi = model.transformed(estimate).bounds()
    extent = hi - lo
    if np.any(extent <= 1e-9):
        raise GeometryError("bounding box has zero extent")
    rng = np.random.default_rng(seed)
    actions = []
    for axis, sign in faces:
        others = [a for a in range(3) if a != axis]
        for _ in range(per_face):
            p = np.empty(3)
            p[others] = lo[others] + rng.random(2) * extent[others]
            p[axis] = (hi[axis] if sign > 0 else lo[axis]) + sign * standoff
            d = np.zeros(3)
            d[axis] = -sign
            actions.append(TouchAction(Ray(p, d), BOX_FACES.index((axis, sign))))
    return actions


def predict_contact(action: TouchAction, model: TriangleMesh, estimate: Pose):
    hit = ray_mesh_intersect(action.ray, model, estimate)
    return None if hit is None else hit[0]


def _model_points(points, index, estimate: Pose) -> np.ndarray:
    closest, _ = index.closest(estimate.inverse().apply(points))
    return closest


def hypothetical_update(state: FilterState, predicted, recent_contacts, model_index,
                        estimate: Pose, rho: float = 0.05, n_recent: int = 2) -> FilterState:
    """Belief after adding a predicted contact, paired with the latest real contacts.

    The predicted point lies on the estimated surface, so its model-frame
    counterpart is its image under the inverse estimate. Real contacts are
    matched to their nearest model points as in registration. ``state`` is
    not modified.
    """
    contacts = as_cloud(recent_contacts)
    if len(contacts) < 2:
        raise ValueError("need at least 2 prior contacts")
    predicted = np.asarray(predicted, dtype=float)
    o_pred = estimate.inverse().apply(predicted)
    recent = contacts[-n_recent:]
    o_recent = _model_points(recent, model_index, estimate)
    post = state.copy()
    for c, oc in zip(recent, o_recent):
        pair = CorrespondencePair(c, predicted, oc, o_pred)
        if pair.is_degenerate():
            continue
        post = kalman_update(post, build_pseudo_measurement(pair), measurement_noise(post, rho))
    return post


def kl_divergence(posterior: FilterState, prior: FilterState) -> float:
    """KL(posterior || prior) between two 4-d Gaussians."""
    Sp = prior.covariance
    Sq = posterior.covariance
    sign_p, logdet_p = np.linalg.slogdet(Sp)
    if sign_p <= 0 or np.linalg.cond(Sp) > 1e14:
        raise np.linalg.LinAlgError("prior covariance is singular")
    sign_q, logdet_q = np.linalg.slogdet(Sq)
    if sign_q <= 0:
        raise np.linalg.LinAlgError("posterior covariance is not positive definite")
    diff = posterior.mean - prior.mean
    d = len(diff)
    tr = np.trace(np.linalg.solve(Sp, Sq))
    maha = diff @ np.linalg.solve(Sp, diff)
    return float(0.5 * (logdet_p - logdet_q + tr - d + maha))


def predict_contacts(actions, model: TriangleMesh, estimate: Pose, min_incidence: float = 0.0):
    """Predicted contact per action, or None.

    Contacts whose surface normal makes ``|cos| < min_incidence`` with the ray
    are treated as misses: a guarded probe sliding along a grazing surface
    rarely lands where predicted.
    """
    placed = model.transformed(estimate)
    origins = np.array([a.ray.origin for a in actions]).reshape(-1, 3)
    dirs = np.array([a.ray.direction for a in actions]).reshape(-1, 3)
    dist, face = intersect_rays_triangles(origins, dirs, placed.triangles)
    out = [None] * len(actions)
    hit = np.flatnonzero(face >= 0)
    if len(hit):
        cos = np.abs(np.einsum("ij,ij->i", placed.face_normals()[face[hit]], dirs[hit]))
        for k, c in zip(hit, cos):
            if c >= min_incidence:
                out[k] = origins[k] + dist[k] * dirs[k]
    return out


def score_actions(state: FilterState, actions, model: TriangleMesh, estimate: Pose,
                  recent_contacts, model_index, rho: float = 0.05,
                  min_incidence: float = 0.0) -> np.ndarray:
    """KL gain per action; predicted misses score -inf."""
    scores = np.full(len(actions), -np.inf)
    for k, hit in enumerate(predict_contacts(actions, model, estimate, min_incidence)):
        if hit is None:
            continue
        post = hypothetical_update(state, hit, recent_contacts, model_index, estimate, rho)
        scores[k] = kl_divergence(post, state)
    return scores


def select_nbt(state: FilterState, actions, model: TriangleMesh, estimate: Pose,
               recent_contacts, model_index, rho: float = 0.05, min_incidence: float = 0.0):
    """Return ``(action, kl)`` maximizing the information gain; ties go to the lower index."""
    if not actions:
        raise ValueError("no candidate actions")
    scores = score_actions(state, actions, model, estimate, recent_contacts, model_index, rho,
                           min_incidence)
    if not np.any(np.isfinite(scores)):
        raise NoContactError("all candidate touches miss; re-sample with a larger box or standoff")
    best = int(np.argmax(scores))
    return actions[best], float(scores[best])


def should_stop(pose_history, crit: StopCriterion = StopCriterion()) -> bool:
    if len(pose_history) < 2:
        return False
    a, b = pose_history[-2], pose_history[-1]
    return (b.translation_change(a) < crit.trans_thresh
            and np.rad2deg(b.angle_change(a)) < crit.rot_thresh)


@dataclass
class TouchResult:
    pose: Pose
    state: FilterState
    contacts: np.ndarray
    poses: list = field(default_factory=list)      # estimate after each contact
    trace: list = field(default_factory=list)      # one dict per attempted touch
    stopped: bool = False


def localize_by_touch(touch: Callable[[Ray], np.ndarray | None], model: TriangleMesh, estimate: Pose,
                      budget: int = 10, *, n_bootstrap: int = 3, params: TiqfParams | None = None,
                      per_face: int = 20, standoff: float = 0.05, faces=TABLETOP_FACES,
                      crit: StopCriterion | None = StopCriterion(), seed: int = 0,
                      prior_scale: float = 0.05, min_incidence: float = 0.0,
                      max_attempts: int | None = None) -> TouchResult:
    """Refine ``estimate`` with guarded touches.

    ``touch`` executes a ray on the real object and returns the contact point
    or None. The first ``n_bootstrap`` contacts come from actions drawn
    uniformly from the candidate set, each on a box axis not touched before;
    later ones are chosen by :func:`select_nbt`. From the third contact on,
    every contact so far is re-registered starting at the input ``estimate``
    with rotation covariance ``prior_scale * I``; restarting from the same anchor keeps an early,
    badly constrained fit from steering later touches. The loop ends after
    ``budget`` contacts, or earlier once ``crit`` holds between consecutive
    active touches.
    Active candidates predicted to hit at grazing incidence
    (``|cos| < min_incidence``) are skipped.
    """
    if n_bootstrap < 3:
        raise ValueError("n_bootstrap must be >= 3")
    params = replace(params or TiqfParams(), pairing="all")
    max_attempts = max_attempts or 10 * budget
    index = MeshIndex(model)
    rng = np.random.default_rng(seed)
    anchor = estimate
    prior = FilterState.initial(anchor.rotation, prior_scale)
    state = prior
    contacts, poses, trace = [], [], []
    used_axes = set()
    stopped = False
    for attempt in range(max_attempts):
        if len(contacts) >= budget:
            break
        actions = sample_touch_actions(estimate, model, per_face, standoff, seed * 7919 + attempt, faces)
        if len(contacts) < n_bootstrap:
            # spread the random touches over box axes not yet touched
            pool = [a for a in actions if BOX_FACES[a.face][0] not in used_axes] or actions
            action, kl = pool[int(rng.integers(len(pool)))], None
        else:
            try:
                action, kl = select_nbt(state, actions, model, estimate, np.array(contacts), index,
                                        params.rho, min_incidence)
            except NoContactError:
                log.warning("no candidate touch predicted to hit; re-sampling")
                trace.append({"candidates": len(actions), "action": None, "kl": None, "contact": None})
                continue
        hit = touch(action.ray)
        step = {"candidates": len(actions), "action": action.to_dict(), "kl": kl,
                "contact": None if hit is None else [float(v) for v in hit]}
        trace.append(step)
        if hit is None:
            continue
        contacts.append(np.asarray(hit, dtype=float))
        used_axes.add(BOX_FACES[action.face][0])
        if len(contacts) >= 3:
            res = register(np.array(contacts), index, anchor, params, seed, init_state=prior)
            estimate, state = res.pose, res.state
            step["posterior_trace"] = float(np.trace(state.covariance))
        poses.append(estimate)
        if crit is not None and len(contacts) > n_bootstrap and should_stop(poses, crit):
            stopped = True
            break
    if not stopped and len(contacts) < budget:
        log.warning("touch loop used %d attempts with %d contacts", max_attempts, len(contacts))
    return TouchResult(estimate, state, np.array(contacts).reshape(-1, 3), poses, trace, stopped)
