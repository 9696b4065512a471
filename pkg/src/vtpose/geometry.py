"""Exact-geometry primitives shared by the estimator, planners and simulator.

Quaternions are Hamilton, scalar-first ``(w, x, y, z)`` numpy arrays.
Point clouds are ``(N, 3)`` float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.spatial import cKDTree

UNIT_TOL = 1e-9
# accepts hand-typed quaternions such as (0.7071, 0, 0, 0.7071)
ROTATION_INPUT_TOL = 1e-3
HIT_EPS = 1e-9


class GeometryError(ValueError):
    pass


# ----------------------------------------------------------------------------
# quaternion algebra
# ----------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product a ⊙ b."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-15:
        raise GeometryError("cannot normalize a zero quaternion")
    return q / n


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-15:
        raise GeometryError("rotation axis has zero length")
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quat_distance(p, q) -> float:
    """Sign-invariant distance min(|p - q|, |p + q|)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(min(np.linalg.norm(p - q), np.linalg.norm(p + q)))


def quat_angle(p, q) -> float:
    """Geodesic angle (radians) between the rotations of two unit quaternions."""
    d = abs(float(np.dot(quat_normalize(p), quat_normalize(q))))
    return 2.0 * float(np.arccos(min(1.0, d)))


def quat_to_rotmat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > ROTATION_INPUT_TOL:
        raise GeometryError(f"quaternion is not unit (norm {n:.6g})")
    w, x, y, z = q / n
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def rotmat_to_quat(R) -> np.ndarray:
    """Shepperd's method; returns the representative with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


def rotation_angle(Ra, Rb) -> float:
    """Geodesic angle (radians) between two rotation matrices.

    Equal to ``acos((tr(Ra Rb^T) - 1) / 2)``; the atan2 form keeps precision
    near 0 and 180 degrees.
    """
    R = np.asarray(Ra) @ np.asarray(Rb).T
    c = (np.trace(R) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


def skew(v) -> np.ndarray:
    """Matrix form of the cross product: skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


# ----------------------------------------------------------------------------
# rigid transforms
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=quat_identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > ROTATION_INPUT_TOL:
            raise GeometryError(f"pose rotation is not a unit quaternion (norm {n:.6g})")
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("pose translation must be finite")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rotmat(cls, R, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rotmat_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Map points (N, 3) or a single 3-vector from the local to the world frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first."""
        q = quat_normalize(quat_mul(self.rotation, other.rotation))
        return Pose(q, self.R @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        qc = quat_conj(self.rotation)
        return Pose(qc, -(quat_to_rotmat(qc) @ self.translation))

    def translation_change(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def angle_change(self, other: "Pose") -> float:
        """Geodesic rotation difference in radians."""
        return quat_angle(self.rotation, other.rotation)

    def to_dict(self) -> dict:
        return {"rotation_wxyz": [float(v) for v in self.rotation],
                "translation": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(d["rotation_wxyz"], d["translation"])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n < 1e-15:
            raise GeometryError("ray direction has zero length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)

    def at(self, distance: float) -> np.ndarray:
        return self.origin + distance * self.direction


# ----------------------------------------------------------------------------
# meshes and clouds
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        if not np.all(np.isfinite(v)):
            raise GeometryError("mesh vertices must be finite")
        if f.size:
            tri = v[f]
            area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
            f = f[area > 1e-15]
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner coordinates."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def transformed(self, pose: Pose) -> "TriangleMesh":
        return TriangleMesh(pose.apply(self.vertices), self.faces)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def as_cloud(points) -> np.ndarray:
    """Validate and return an (N, 3) float array."""
    p = np.asarray(points, dtype=float)
    if p.size == 0:
        return p.reshape(0, 3)
    p = p.reshape(-1, 3)
    if not np.all(np.isfinite(p)):
        raise GeometryError("point cloud contains non-finite coordinates")
    return p


def box_mesh(size, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned box with outward-wound faces."""
    hx, hy, hz = 0.5 * np.asarray(size, dtype=float)
    c = np.asarray(center, dtype=float)
    v = np.array([
        [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
        [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
    ]) + c
    f = np.array([
        [0, 2, 1], [0, 3, 2],  # -z
        [4, 5, 6], [4, 6, 7],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [1, 2, 6], [1, 6, 5],  # +x
        [3, 0, 4], [3, 4, 7],  # -x
    ])
    return TriangleMesh(v, f)


def lathe_mesh(profile, segments: int = 24, center=(0.0, 0.0)) -> TriangleMesh:
    """Closed, ring-by-ring surface of revolution about the z axis.

    ``profile`` rows are ``(radius, z)`` or ``(radius, z, dx, dy)`` with
    increasing z and positive radii; ``(dx, dy)`` shifts that ring off the
    axis. Flat caps close the bottom and top.
    """
    prof = np.asarray(profile, dtype=float)
    if prof.ndim != 2 or prof.shape[1] not in (2, 4) or len(prof) < 2:
        raise GeometryError("profile must be (k, 2) or (k, 4) with k >= 2")
    if np.any(prof[:, 0] <= 0) or np.any(np.diff(prof[:, 1]) <= 0):
        raise GeometryError("profile needs positive radii and increasing z")
    if segments < 3:
        raise GeometryError("segments must be >= 3")
    k = len(prof)
    centers = np.asarray(center, dtype=float) + (prof[:, 2:4] if prof.shape[1] == 4 else 0.0)
    centers = np.broadcast_to(centers, (k, 2))
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    rim = np.concatenate([
        np.column_stack([prof[i, 0] * ring + centers[i], np.full(segments, prof[i, 1])])
        for i in range(k)
    ])
    bottom = len(rim)
    verts = np.vstack([rim, [[*centers[0], prof[0, 1]], [*centers[-1], prof[-1, 1]]]])
    faces = []
    for i in range(k - 1):
        for j in range(segments):
            a, b = i * segments + j, i * segments + (j + 1) % segments
            faces += [[a, b, b + segments], [a, b + segments, a + segments]]
    top_row = (k - 1) * segments
    for j in range(segments):
        jn = (j + 1) % segments
        faces.append([bottom, jn, j])
        faces.append([bottom + 1, top_row + j, top_row + jn])
    return TriangleMesh(verts, np.array(faces))


def merge_meshes(meshes) -> TriangleMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.vstack(verts), np.vstack(faces))


def load_obj(path) -> TriangleMesh:
    """Read the ``v``/``f`` records of an ASCII OBJ file.

    Face entries may carry texture/normal indices (``f 1/2/3 ...``); only the
    vertex index is used. Polygons are fan-triangulated.
    """
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                # negative indices are relative to the vertices read so far
                idx.append(i - 1 if i > 0 else len(verts) + i)
            if len(idx) < 3:
                raise GeometryError(f"{path}:{lineno}: face with fewer than 3 vertices")
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    if not faces:
        raise GeometryError(f"{path}: no faces")
    return TriangleMesh(np.array(verts), np.array(faces))


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_xyz(path) -> np.ndarray:
    """Whitespace-separated XYZ text file (meters)."""
    return as_cloud(np.loadtxt(path, ndmin=2)[:, :3])


def save_xyz(points, path) -> None:
    np.savetxt(path, as_cloud(points), fmt="%.9g")


# ----------------------------------------------------------------------------
# ray casting
# ----------------------------------------------------------------------------

def intersect_rays_triangles(origins, directions, triangles, chunk: int = 4096):
    """Möller–Trumbore for many rays against many triangles.

    Returns ``(dist, face)`` arrays of length R; misses have ``dist = inf`` and
    ``face = -1``. Hits closer than HIT_EPS are ignored.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    directions = np.asarray(directions, dtype=float).reshape(-1, 3)
    tri = np.asarray(triangles, dtype=float).reshape(-1, 3, 3)
    n_rays = len(origins)
    best = np.full(n_rays, np.inf)
    face = np.full(n_rays, -1, dtype=np.int64)
    if n_rays == 0 or len(tri) == 0:
        return best, face
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    for lo in range(0, n_rays, chunk):
        o = origins[lo:lo + chunk, None, :]
        d = directions[lo:lo + chunk, None, :]
        pvec = np.cross(d, e2[None])
        det = np.einsum("fk,rfk->rf", e1, pvec)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o - v0[None]
        u = np.einsum("rfk,rfk->rf", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None])
        v = np.einsum("rfk,rfk->rf", np.broadcast_to(d, qvec.shape), qvec) * inv
        t = np.einsum("fk,rfk->rf", e2, qvec) * inv
        hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t >= HIT_EPS)
        t = np.where(hit, t, np.inf)
        idx = np.argmin(t, axis=1)
        tmin = t[np.arange(len(t)), idx]
        best[lo:lo + chunk] = tmin
        face[lo:lo + chunk] = np.where(np.isfinite(tmin), idx, -1)
    return best, face


def ray_mesh_intersect(ray: Ray, mesh: TriangleMesh, mesh_pose: Pose | None = None):
    """Nearest hit of ``ray`` on ``mesh`` placed at ``mesh_pose``.

    Returns ``(point, distance)`` or ``None``.
    """
    if mesh_pose is not None:
        mesh = mesh.transformed(mesh_pose)
    dist, _ = intersect_rays_triangles(ray.origin, ray.direction, mesh.triangles)
    if not np.isfinite(dist[0]):
        return None
    return ray.at(dist[0]), float(dist[0])


# ----------------------------------------------------------------------------
# nearest neighbours and sampling
# ----------------------------------------------------------------------------

class PointIndex:
    """k-d tree over a cloud with lowest-index tie breaking."""

    def __init__(self, cloud):
        self.points = as_cloud(cloud)
        if len(self.points) == 0:
            raise GeometryError("cannot index an empty cloud")
        self._tree = cKDTree(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest index and distance for each query point."""
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        k = min(4, len(self.points))
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            return idx.reshape(-1), dist.reshape(-1)
        # among exact ties keep the lowest index
        tied = dist == dist[:, :1]
        idx = np.where(tied, idx, np.iinfo(np.int64).max)
        col = np.argmin(idx, axis=1)
        rows = np.arange(len(q))
        return idx[rows, col], dist[rows, col]

    def closest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        idx, dist = self.query(queries)
        return self.points[idx], dist


@numba.njit(cache=True)
def _closest_on_triangle(px, py, pz, t):
    """Barycentric weights (v on vertex b, w on vertex c) of the closest point."""
    abx, aby, abz = t[1, 0] - t[0, 0], t[1, 1] - t[0, 1], t[1, 2] - t[0, 2]
    acx, acy, acz = t[2, 0] - t[0, 0], t[2, 1] - t[0, 1], t[2, 2] - t[0, 2]
    apx, apy, apz = px - t[0, 0], py - t[0, 1], pz - t[0, 2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return 0.0, 0.0
    bpx, bpy, bpz = px - t[1, 0], py - t[1, 1], pz - t[1, 2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        return d1 / (d1 - d3), 0.0
    cpx, cpy, cpz = px - t[2, 0], py - t[2, 1], pz - t[2, 2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        return 0.0, d2 / (d2 - d6)
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and d4 - d3 >= 0.0 and d5 - d6 >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    return vb * denom, vc * denom


@numba.njit(cache=True)
def _closest_kernel(P, tri, out, face, dist):
    for i in range(P.shape[0]):
        px, py, pz = P[i, 0], P[i, 1], P[i, 2]
        best = np.inf
        for f in range(tri.shape[0]):
            t = tri[f]
            v, w = _closest_on_triangle(px, py, pz, t)
            qx = t[0, 0] + v * (t[1, 0] - t[0, 0]) + w * (t[2, 0] - t[0, 0])
            qy = t[0, 1] + v * (t[1, 1] - t[0, 1]) + w * (t[2, 1] - t[0, 1])
            qz = t[0, 2] + v * (t[1, 2] - t[0, 2]) + w * (t[2, 2] - t[0, 2])
            d = (qx - px) ** 2 + (qy - py) ** 2 + (qz - pz) ** 2
            if d < best:
                best = d
                out[i, 0], out[i, 1], out[i, 2] = qx, qy, qz
                face[i] = f
        dist[i] = np.sqrt(best)


def closest_points_on_triangles(points, triangles):
    """Closest surface point over all triangles for each query point.

    Voronoi-region test of Ericson, Real-Time Collision Detection 5.1.5;
    the first face attaining the minimum wins ties.
    Returns ``(closest (N, 3), face (N,), distance (N,))``.
    """
    P = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    tri = np.ascontiguousarray(np.asarray(triangles, dtype=float).reshape(-1, 3, 3))
    out = np.empty_like(P)
    face = np.empty(len(P), dtype=np.int64)
    dist = np.empty(len(P))
    _closest_kernel(P, tri, out, face, dist)
    return out, face, dist


class MeshIndex:
    """Closest-point queries against a triangle mesh (model frame)."""

    def __init__(self, mesh: TriangleMesh):
        if len(mesh.faces) == 0:
            raise GeometryError("cannot index an empty mesh")
        self.mesh = mesh
        self._tri = mesh.triangles

    def closest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q, _, d = closest_points_on_triangles(queries, self._tri)
        return q, d


def nearest_neighbor(query, cloud) -> tuple[int, np.ndarray]:
    cloud = as_cloud(cloud)
    idx, _ = PointIndex(cloud).query(query)
    return int(idx[0]), cloud[idx[0]].copy()


def sample_mesh_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if n < 1:
        raise GeometryError("sample count must be >= 1")
    if len(mesh.faces) == 0:
        raise GeometryError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    fidx = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles[fidx]
    return ((1.0 - r1)[:, None] * tri[:, 0]
            + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
            + (r1 * r2)[:, None] * tri[:, 2])


def random_rotation(rng: np.random.Generator, max_angle: float | None = None) -> np.ndarray:
    """Uniform random unit quaternion, or a uniform-axis rotation of at most ``max_angle`` rad."""
    if max_angle is None:
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        return -q if q[0] < 0 else q
    axis = rng.normal(size=3)
    return quat_from_axis_angle(axis, rng.uniform(0.0, max_angle))
