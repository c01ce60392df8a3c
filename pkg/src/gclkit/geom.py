"""Geometric primitives: point clouds, rigid transforms, spatial queries."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, InvalidArgumentError

_ORTHO_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3): ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("transform entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InvalidArgumentError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation about +z by ``yaw`` radians."""
        c, s = math.cos(yaw), math.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(axis_angle_matrix(axis, angle), translation)

    @classmethod
    def random(cls, rng: np.random.Generator, max_translation: float = 10.0) -> "RigidTransform":
        # uniform rotation via a normalized Gaussian quaternion
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        t = rng.uniform(-max_translation, max_translation, size=3)
        return cls(quaternion_matrix(q), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """Composition: ``(a @ b)(x) == a(b(x))``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def to_list(self) -> list:
        return self.matrix().tolist()


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def quaternion_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with an optional per-point scalar attribute."""

    points: np.ndarray
    attributes: Optional[np.ndarray] = None
    frame_id: int = 0

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise InvalidArgumentError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(p))
        if self.attributes is not None:
            a = np.array(self.attributes, dtype=np.float64).reshape(-1)
            if len(a) != len(p):
                raise InvalidArgumentError("attributes must have one value per point")
            object.__setattr__(self, "attributes", _frozen(a))
        object.__setattr__(self, "frame_id", int(self.frame_id))

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        attrs = None if self.attributes is None else self.attributes[idx]
        return PointCloud(self.points[idx], attrs, self.frame_id)

    def ranges(self) -> np.ndarray:
        """Distance of every point to the frame origin (the sensor)."""
        return np.sqrt(np.sum(self.points ** 2, axis=1))


def _require_nonempty(cloud: PointCloud) -> None:
    if len(cloud) == 0:
        raise InvalidArgumentError("point cloud is empty")


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    _require_nonempty(cloud)
    return PointCloud(T.apply(cloud.points), cloud.attributes, cloud.frame_id)


def _voxel_cells(points: np.ndarray, voxel: float):
    if not voxel > 0:
        raise InvalidArgumentError(f"voxel size must be positive, got {voxel}")
    keys = np.floor(points / voxel).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # relabel cells by first occurrence so output follows input order
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return first[order], rank[inverse]


def voxel_sample_indices(points, voxel: float) -> np.ndarray:
    """Index of the first point falling in each occupied voxel, in input order."""
    first, _ = _voxel_cells(np.asarray(points, dtype=np.float64).reshape(-1, 3), voxel)
    return first


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid."""
    if not voxel > 0:
        raise InvalidArgumentError(f"voxel size must be positive, got {voxel}")
    if len(cloud) == 0:
        return cloud
    _, cell = _voxel_cells(cloud.points, voxel)
    n_cells = int(cell.max()) + 1
    counts = np.bincount(cell, minlength=n_cells).astype(np.float64)
    centroid = np.stack(
        [np.bincount(cell, weights=cloud.points[:, k], minlength=n_cells) for k in range(3)], axis=1
    ) / counts[:, None]
    attrs = None
    if cloud.attributes is not None:
        attrs = np.bincount(cell, weights=cloud.attributes, minlength=n_cells) / counts
    return PointCloud(centroid, attrs, cloud.frame_id)


def _exact_dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((points - q) ** 2, axis=-1))


class SpatialIndex:
    """Exact nearest-neighbour and radius queries over a fixed point set.

    A k-d tree proposes candidates; final distances are always recomputed as
    ``sqrt(sum((p - q)**2))`` so answers agree bit-for-bit with a brute-force
    scan, and ties go to the lowest point index.
    """

    # relative slack when widening tree results before exact re-ranking
    _SLACK = 1e-9

    def __init__(self, points):
        pts = np.array(points, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise InvalidArgumentError("spatial index needs a non-empty (N, D) array")
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts)

    @classmethod
    def from_cloud(cls, cloud: PointCloud) -> "SpatialIndex":
        return cls(cloud.points)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, q) -> tuple[int, float]:
        idx, dist = self.nearest_many(np.asarray(q, dtype=np.float64)[None, :])
        return int(idx[0]), float(dist[0])

    def nearest_many(self, queries, max_distance: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Nearest stored point for each query row.

        Queries with no point within ``max_distance`` get index -1 and
        distance ``inf``.
        """
        Q = np.asarray(queries, dtype=np.float64).reshape(-1, self.points.shape[1])
        n = len(self.points)
        out_idx = np.full(len(Q), -1, dtype=np.int64)
        out_dist = np.full(len(Q), np.inf)
        if len(Q) == 0:
            return out_idx, out_dist
        k = min(4, n)
        bound = max_distance * (1 + self._SLACK) + 1e-12 if np.isfinite(max_distance) else np.inf
        d, i = self._tree.query(Q, k=k, distance_upper_bound=bound)
        d = d.reshape(len(Q), k)
        i = i.reshape(len(Q), k)
        found = np.isfinite(d[:, 0])
        rows = np.nonzero(found)[0]
        if len(rows) == 0:
            return out_idx, out_dist
        cand = i[rows]
        valid = cand < n
        safe = np.where(valid, cand, 0)
        exact = np.sqrt(np.sum((self.points[safe] - Q[rows, None, :]) ** 2, axis=-1))
        exact = np.where(valid, exact, np.inf)
        best = exact.min(axis=1)
        # all k candidates may be tied; widen with a ball query for those rows
        kth = d[rows, -1]
        crowded = valid[:, -1] & (kth <= best * (1 + self._SLACK) + 1e-12)
        tie_key = np.where(exact <= best[:, None], cand, n)
        choice = tie_key.min(axis=1)
        for r in np.nonzero(crowded)[0]:
            q = Q[rows[r]]
            ball = np.asarray(self._tree.query_ball_point(q, best[r] * (1 + self._SLACK) + 1e-12), dtype=np.int64)
            ex = _exact_dist(self.points[ball], q)
            m = ex.min()
            best[r] = m
            choice[r] = ball[ex == m].min()
        keep = best <= max_distance
        out_idx[rows[keep]] = choice[keep]
        out_dist[rows[keep]] = best[keep]
        return out_idx, out_dist

    def radius(self, q, r: float) -> np.ndarray:
        """Sorted indices of stored points within distance ``r`` of ``q`` (inclusive)."""
        q = np.asarray(q, dtype=np.float64)
        ball = np.asarray(self._tree.query_ball_point(q, r * (1 + self._SLACK) + 1e-12), dtype=np.int64)
        if len(ball) == 0:
            return ball
        ball = ball[_exact_dist(self.points[ball], q) <= r]
        return np.sort(ball)

    def radius_pairs(self, queries, r: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All (query, stored) index pairs within ``r``, sorted by (query, stored).

        Returns ``(query_idx, point_idx, offsets)`` where ``offsets`` holds
        ``points[point_idx] - queries[query_idx]``.
        """
        Q = np.asarray(queries, dtype=np.float64).reshape(-1, self.points.shape[1])
        if len(Q) == 0 or len(self.points) == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, self.points.shape[1]))
        # per-query lists come back sorted, so (query, stored) order is free
        lists = self._tree.query_ball_point(Q, r * (1 + self._SLACK) + 1e-12, return_sorted=True)
        lengths = np.fromiter(map(len, lists), dtype=np.int64, count=len(lists))
        qi = np.repeat(np.arange(len(Q)), lengths)
        pi = np.fromiter(itertools.chain.from_iterable(lists), dtype=np.int64, count=int(lengths.sum()))
        off = self.points[pi] - Q[qi]
        keep = np.sqrt(np.sum(off ** 2, axis=1)) <= r
        return qi[keep], pi[keep], off[keep]

    def self_pairs(self, r: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unordered pairs ``i < j`` of stored points within ``r``, with ``points[j] - points[i]``."""
        pairs = self._tree.query_pairs(r * (1 + self._SLACK) + 1e-12, output_type="ndarray")
        i = pairs[:, 0].astype(np.int64)
        j = pairs[:, 1].astype(np.int64)
        off = self.points[j] - self.points[i]
        keep = np.sqrt(np.sum(off ** 2, axis=1)) <= r
        return i[keep], j[keep], off[keep]


def nearest_neighbor(index: SpatialIndex, q) -> tuple[int, float]:
    return index.nearest(q)


def kabsch_align(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst``."""
    A = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if A.shape != B.shape:
        raise InvalidArgumentError("src and dst must have the same number of points")
    if len(A) < 3:
        raise DegenerateInputError(f"need at least 3 point pairs, got {len(A)}")
    ca = A.mean(axis=0)
    cb = B.mean(axis=0)
    A0 = A - ca
    B0 = B - cb
    s = np.linalg.svd(A0, compute_uv=False)
    if s[0] == 0 or s[1] <= 1e-9 * s[0]:
        raise DegenerateInputError("point configuration is collinear or coincident")
    H = A0.T @ B0
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    # re-orthonormalise against round-off before constructing the transform
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, cb - R @ ca)


def rre(R_est, R_gt) -> float:
    """Geodesic angle between two rotations, in degrees.

    Uses ``atan2(sin, cos)`` of the relative rotation rather than
    ``acos(cos)``, which loses half the digits near zero.
    """
    R_est = np.asarray(R_est, dtype=np.float64)
    R_gt = np.asarray(R_gt, dtype=np.float64)
    E = R_gt.T @ R_est
    c = (np.trace(E) - 1.0) / 2.0
    s = 0.5 * math.sqrt((E[2, 1] - E[1, 2]) ** 2 + (E[0, 2] - E[2, 0]) ** 2 + (E[1, 0] - E[0, 1]) ** 2)
    return math.degrees(math.atan2(s, c))


def rte(t_est, t_gt) -> float:
    diff = np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)
    return float(np.sqrt(np.sum(diff ** 2)))


# --- file formats -------------------------------------------------------------

def write_bin(path, cloud: PointCloud) -> None:
    """KITTI-style scan: little-endian float32 (x, y, z, intensity) records."""
    n = len(cloud)
    rec = np.zeros((n, 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if cloud.attributes is not None:
        rec[:, 3] = cloud.attributes
    Path(path).write_bytes(rec.tobytes())


def read_bin(path, frame_id: int = 0) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise InvalidArgumentError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3], frame_id)


def read_csv(path, frame_id: int = 0) -> PointCloud:
    """Read ``x,y,z`` rows; blank lines and ``#`` comments are skipped."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            rows.append([float(v) for v in row[:3]])
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3), frame_id=frame_id)


def write_csv(path, cloud: PointCloud) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for p in cloud.points:
            w.writerow([repr(float(v)) for v in p])
