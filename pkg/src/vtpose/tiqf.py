"""Translation-invariant quaternion filter (TIQF) for rigid registration.

Rotation is tracked by a linear Kalman filter over a unit quaternion using
zero-valued pseudo-measurements built from pairs of correspondences; the
translation follows in closed form once a rotation estimate is available.
The same loop serves dense depth clouds and a handful of tactile contacts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from numba import njit

from .geometry import (
    GeometryError,
    MeshIndex,
    PointIndex,
    Pose,
    TriangleMesh,
    as_cloud,
    quat_to_rotmat,
    skew,
)

log = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-9
COV_TRACE_CAP = 1e6
COND_MAX = 1e13


class InsufficientDataError(ValueError):
    """Not enough usable correspondences to form a single pair."""


@dataclass(frozen=True)
class FilterState:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(4))
        object.__setattr__(self, "covariance", np.asarray(self.covariance, dtype=float).reshape(4, 4))

    @classmethod
    def initial(cls, rotation=(1.0, 0.0, 0.0, 0.0), scale: float = 0.5) -> "FilterState":
        q = np.asarray(rotation, dtype=float)
        return cls(q / np.linalg.norm(q), scale * np.eye(4))

    def copy(self) -> "FilterState":
        return FilterState(self.mean.copy(), self.covariance.copy())


@dataclass(frozen=True)
class CorrespondencePair:
    s_i: np.ndarray
    s_j: np.ndarray
    o_i: np.ndarray
    o_j: np.ndarray

    @property
    def s_ji(self) -> np.ndarray:
        return np.asarray(self.s_j, dtype=float) - np.asarray(self.s_i, dtype=float)

    @property
    def o_ji(self) -> np.ndarray:
        return np.asarray(self.o_j, dtype=float) - np.asarray(self.o_i, dtype=float)

    def is_degenerate(self) -> bool:
        return (np.linalg.norm(self.s_ji) <= DEGENERATE_EPS
                or np.linalg.norm(self.o_ji) <= DEGENERATE_EPS)


@dataclass(frozen=True)
class TiqfParams:
    rho: float = 0.05
    conv_trans: float = 1e-4          # m
    conv_rot: float = 0.1             # degrees
    max_iterations: int = 100
    max_pairs_per_iter: int = 500
    init_covariance_scale: float = 0.5
    pairing: str = "permutation"      # or "all" for sparse tactile clouds
    reset_covariance: bool = True

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.pairing not in ("permutation", "all"):
            raise ValueError(f"unknown pairing scheme {self.pairing!r}")


@dataclass
class RegistrationResult:
    pose: Pose
    state: FilterState
    iterations: int
    converged: bool
    skipped_updates: int = 0
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_dict(),
            "covariance_trace": float(np.trace(self.state.covariance)),
            "iterations": self.iterations,
            "converged": self.converged,
            "skipped_updates": self.skipped_updates,
        }


# ----------------------------------------------------------------------------
# filter primitives
# ----------------------------------------------------------------------------

def build_pseudo_measurement(pair: CorrespondencePair) -> np.ndarray:
    """Matrix H with H @ x = 0 for the quaternion x mapping o_ji onto s_ji.

    Obtained from s̃ ⊙ x − x ⊙ õ = 0 with the left/right product matrices of
    the pure quaternions s̃ = (0, s_ji) and õ = (0, o_ji).
    """
    if pair.is_degenerate():
        raise GeometryError("degenerate correspondence pair")
    s, o = pair.s_ji, pair.o_ji
    H = np.zeros((4, 4))
    H[0, 1:] = -(s - o)
    H[1:, 0] = s - o
    H[1:, 1:] = skew(s + o)
    return H


def measurement_noise(state: FilterState, rho: float) -> np.ndarray:
    """State-dependent pseudo-measurement covariance."""
    A = np.outer(state.mean, state.mean) + state.covariance
    return 0.25 * rho * (np.trace(A) * np.eye(4) - A)


def kalman_update(state: FilterState, H: np.ndarray, noise: np.ndarray) -> FilterState:
    """One pseudo-measurement update (z = 0) followed by unit-norm projection.

    When the innovation covariance is singular the update is skipped: the
    input state object itself is returned and a warning is logged.
    """
    x = state.mean
    P = state.covariance
    S = H @ P @ H.T + noise
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > COND_MAX:
        log.warning("singular innovation covariance; update skipped")
        return state
    K = np.linalg.solve(S, H @ P).T  # P Hᵀ S⁻¹ with P, S symmetric
    x_new = x - K @ (H @ x)
    P_new = (np.eye(4) - K @ H) @ P
    P_new = 0.5 * (P_new + P_new.T)
    n = np.linalg.norm(x_new)
    P_new = P_new / (n * n)
    tr = np.trace(P_new)
    if tr > COV_TRACE_CAP:
        # gain is invariant to the covariance scale in this regime; rescale to stay finite
        P_new *= COV_TRACE_CAP / tr
    return FilterState(x_new / n, P_new)


def estimate_translation(rotation, scene, model) -> np.ndarray:
    """Closed-form translation mean(s_i − R o_i) for index-matched clouds."""
    scene = as_cloud(scene)
    model = as_cloud(model)
    if len(scene) != len(model) or len(scene) == 0:
        raise GeometryError("scene and model must be non-empty and index-matched")
    R = quat_to_rotmat(rotation)
    return (scene - model @ R.T).mean(axis=0)


# ----------------------------------------------------------------------------
# correspondences
# ----------------------------------------------------------------------------

def model_index(model):
    """Closest-point index: exact surface for meshes, k-d tree for clouds."""
    if isinstance(model, (PointIndex, MeshIndex)):
        return model
    if isinstance(model, TriangleMesh):
        return MeshIndex(model)
    return PointIndex(model)


def match_points(scene, index, current: Pose):
    """Nearest model point (model frame) for every scene point under ``current``."""
    scene = as_cloud(scene)
    closest, _ = index.closest(current.inverse().apply(scene))
    return scene, closest


def _pair_indices(n: int, rng: np.random.Generator | None, pairing: str):
    if pairing == "all":
        ij = np.array(list(combinations(range(n), 2)), dtype=np.int64).reshape(-1, 2)
        return ij[:, 0], ij[:, 1]
    perm = rng.permutation(n)
    return perm[:-1], perm[1:]


def relative_vectors(scene_pts, model_pts, rng, pairing: str = "permutation"):
    """(s_ji, o_ji) arrays of the non-degenerate pairs, in processing order."""
    i, j = _pair_indices(len(scene_pts), rng, pairing)
    s_rel = scene_pts[j] - scene_pts[i]
    o_rel = model_pts[j] - model_pts[i]
    ok = (np.linalg.norm(s_rel, axis=1) > DEGENERATE_EPS) & (np.linalg.norm(o_rel, axis=1) > DEGENERATE_EPS)
    return s_rel[ok], o_rel[ok]


def pair_matches(scene_pts, model_pts, rng: np.random.Generator | None,
                 pairing: str = "permutation") -> list[CorrespondencePair]:
    i, j = _pair_indices(len(scene_pts), rng, pairing)
    pairs = (CorrespondencePair(scene_pts[a], scene_pts[b], model_pts[a], model_pts[b])
             for a, b in zip(i, j))
    return [p for p in pairs if not p.is_degenerate()]


def _subsample(scene: np.ndarray, max_pairs: int, rng: np.random.Generator) -> np.ndarray:
    if len(scene) <= max_pairs + 1:
        return scene
    keep = np.sort(rng.choice(len(scene), size=max_pairs + 1, replace=False))
    return scene[keep]


def find_correspondences(scene, model, current: Pose, max_pairs: int = 500, seed: int = 0,
                         pairing: str = "permutation") -> list[CorrespondencePair]:
    """Nearest-neighbour matches turned into translation-invariant pairs.

    ``model`` is a model-frame cloud, a TriangleMesh, or a prebuilt index.
    Dense scenes are subsampled to ``max_pairs + 1`` points, permuted with
    ``seed`` and chained into consecutive pairs; ``pairing="all"`` instead
    uses every unordered pair (sparse tactile data).
    """
    index = model_index(model)
    rng = np.random.default_rng(seed)
    scene = as_cloud(scene)
    if pairing == "permutation":
        scene = _subsample(scene, max_pairs, rng)
    if len(scene) < 2:
        raise InsufficientDataError("need at least 2 scene points")
    s, o = match_points(scene, index, current)
    pairs = pair_matches(s, o, rng, pairing)
    if not pairs:
        raise InsufficientDataError("no non-degenerate correspondence pairs")
    return pairs


# ----------------------------------------------------------------------------
# registration loop
# ----------------------------------------------------------------------------

def _sequential_update(state: FilterState, pairs, rho: float) -> tuple[FilterState, int]:
    """Reference path: one :func:`kalman_update` per pair."""
    skipped = 0
    for pair in pairs:
        new = kalman_update(state, build_pseudo_measurement(pair), measurement_noise(state, rho))
        if new is state:
            skipped += 1
        state = new
    return state, skipped


@njit(cache=True)
def _sequential_update_kernel(x, P, s_rel, o_rel, rho, cond_max, cap):
    eye = np.eye(4)
    skipped = 0
    H = np.zeros((4, 4))
    for k in range(s_rel.shape[0]):
        a = s_rel[k] - o_rel[k]
        b = s_rel[k] + o_rel[k]
        H[0, 0] = 0.0
        H[0, 1] = -a[0]
        H[0, 2] = -a[1]
        H[0, 3] = -a[2]
        H[1, 0] = a[0]
        H[2, 0] = a[1]
        H[3, 0] = a[2]
        H[1, 1] = 0.0
        H[1, 2] = -b[2]
        H[1, 3] = b[1]
        H[2, 1] = b[2]
        H[2, 2] = 0.0
        H[2, 3] = -b[0]
        H[3, 1] = -b[1]
        H[3, 2] = b[0]
        H[3, 3] = 0.0
        A = np.outer(x, x) + P
        noise = 0.25 * rho * (np.trace(A) * eye - A)
        S = H @ P @ H.T + noise
        if not np.all(np.isfinite(S)) or np.linalg.cond(S) > cond_max:
            skipped += 1
            continue
        K = np.linalg.solve(S, H @ P).T
        x_new = x - K @ (H @ x)
        P_new = (eye - K @ H) @ P
        P_new = 0.5 * (P_new + P_new.T)
        n = np.sqrt(np.sum(x_new * x_new))
        P_new = P_new / (n * n)
        tr = np.trace(P_new)
        if tr > cap:
            P_new = P_new * (cap / tr)
        x = x_new / n
        P = P_new
    return x, P, skipped


def sequential_update(state: FilterState, s_rel, o_rel, rho: float) -> tuple[FilterState, int]:
    """Apply the pseudo-measurements of all relative-vector pairs in order.

    Numerically the same as calling :func:`kalman_update` once per pair;
    returns the new state and the number of skipped (singular) updates.
    """
    s_rel = np.ascontiguousarray(s_rel, dtype=float).reshape(-1, 3)
    o_rel = np.ascontiguousarray(o_rel, dtype=float).reshape(-1, 3)
    x, P, skipped = _sequential_update_kernel(
        state.mean.copy(), state.covariance.copy(), s_rel, o_rel, float(rho), COND_MAX, COV_TRACE_CAP)
    if skipped:
        log.warning("%d singular innovation covariances; updates skipped", skipped)
    return FilterState(x, P), int(skipped)


def model_centroid(index) -> np.ndarray:
    if isinstance(index, MeshIndex):
        tri = index.mesh.triangles
        w = index.mesh.face_areas()
        return (tri.mean(axis=1) * w[:, None]).sum(axis=0) / w.sum()
    return index.points.mean(axis=0)


def register(scene, model, init: Pose | None = None, params: TiqfParams = TiqfParams(),
             seed: int = 0, init_state: FilterState | None = None) -> RegistrationResult:
    """Estimate the pose mapping ``model`` onto ``scene``.

    ``model`` is a TriangleMesh (matched by exact closest surface point), a
    model-frame cloud (nearest sample) or a prebuilt index of either.
    Without ``init`` the model centroid is moved onto the scene centroid at
    identity rotation. ``init_state`` carries a belief from an earlier stage;
    otherwise the filter starts at the initial rotation with covariance
    ``init_covariance_scale * I``.
    """
    scene = as_cloud(scene)
    if len(scene) < 3:
        raise InsufficientDataError("registration needs at least 3 scene points")
    index = model_index(model)
    if init is None:
        init = Pose(translation=scene.mean(axis=0) - model_centroid(index))
    if init_state is None:
        state = FilterState.initial(init.rotation, params.init_covariance_scale)
    else:
        state = init_state
        init = Pose(state.mean, init.translation)
    prior_cov = state.covariance
    rng = np.random.default_rng(seed)
    pose = init
    skipped = 0
    history = [pose]
    conv_rot = np.deg2rad(params.conv_rot)
    for it in range(1, params.max_iterations + 1):
        sub = _subsample(scene, params.max_pairs_per_iter, rng) if params.pairing == "permutation" else scene
        s, o = match_points(sub, index, pose)
        s_rel, o_rel = relative_vectors(s, o, rng, params.pairing)
        if len(s_rel) == 0:
            raise InsufficientDataError("no non-degenerate correspondence pairs")
        if params.reset_covariance:
            state = FilterState(state.mean, prior_cov)
        state, k = sequential_update(state, s_rel, o_rel, params.rho)
        skipped += k
        t = estimate_translation(state.mean, s, o)
        new_pose = Pose(state.mean, t)
        d_t = new_pose.translation_change(pose)
        d_r = new_pose.angle_change(pose)
        pose = new_pose
        history.append(pose)
        if d_t < params.conv_trans and d_r < conv_rot:
            return RegistrationResult(pose, state, it, True, skipped, history)
    log.info("TIQF hit max_iterations=%d without converging", params.max_iterations)
    return RegistrationResult(pose, state, params.max_iterations, False, skipped, history)

