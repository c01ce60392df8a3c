"""Correspondences, positive groups and density-correlation diagnostics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .geom import PointCloud, RigidTransform, SpatialIndex, apply_transform, voxel_downsample

OVERLAP_VOXEL = 0.3
OVERLAP_RADIUS = 0.45
GROUP_RADIUS = OVERLAP_RADIUS


class Correspondence(NamedTuple):
    idx_a: int
    idx_b: int
    dist: float


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Column-oriented sequence of :class:`Correspondence`."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    dist: np.ndarray

    def __post_init__(self):
        for name in ("idx_a", "idx_b"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        object.__setattr__(self, "dist", np.asarray(self.dist, dtype=np.float64).reshape(-1))
        if not len(self.idx_a) == len(self.idx_b) == len(self.dist):
            raise InvalidArgumentError("correspondence columns differ in length")

    @classmethod
    def empty(cls) -> "Correspondences":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_list(cls, items: Sequence) -> "Correspondences":
        if len(items) == 0:
            return cls.empty()
        a, b, d = zip(*items)
        return cls(np.array(a), np.array(b), np.array(d))

    def __len__(self) -> int:
        return len(self.idx_a)

    def __iter__(self) -> Iterator[Correspondence]:
        for a, b, d in zip(self.idx_a, self.idx_b, self.dist):
            yield Correspondence(int(a), int(b), float(d))

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Correspondence(int(self.idx_a[i]), int(self.idx_b[i]), float(self.dist[i]))
        return Correspondences(self.idx_a[i], self.idx_b[i], self.dist[i])


def overlap_ratio(S: PointCloud, T: PointCloud, gt: RigidTransform,
                  voxel: float = OVERLAP_VOXEL, delta: float = OVERLAP_RADIUS) -> float:
    """Fraction of voxelised S with a neighbour in voxelised, aligned T within ``delta``."""
    if len(S) == 0 or len(T) == 0:
        raise InvalidArgumentError("overlap_ratio needs non-empty clouds")
    s = voxel_downsample(S, voxel)
    t = apply_transform(voxel_downsample(T, voxel), gt)
    _, dist = SpatialIndex(t.points).nearest_many(s.points, max_distance=delta)
    return float(np.count_nonzero(np.isfinite(dist))) / len(s)


def mutual_nearest(a: np.ndarray, b: np.ndarray, radius: float = np.inf) -> Correspondences:
    """Pairs (i, j) where j is i's nearest point in ``b`` and i is j's nearest in ``a``."""
    ia = SpatialIndex(b)
    ib = SpatialIndex(a)
    j, d = ia.nearest_many(a, max_distance=radius)
    back, _ = ib.nearest_many(b, max_distance=radius)
    i = np.arange(len(a))
    ok = (j >= 0)
    ok[ok] = back[j[ok]] == i[ok]
    return Correspondences(i[ok], j[ok], d[ok])


def find_pcl_positives(S: PointCloud, T: PointCloud, gt: RigidTransform, radius: float = OVERLAP_RADIUS,
                       max_count: int | None = None, seed: int = 0) -> Correspondences:
    """Mutual nearest-neighbour matches within ``radius`` between S and T aligned by ``gt``."""
    if not radius > 0:
        raise InvalidArgumentError("radius must be positive")
    if len(S) == 0 or len(T) == 0:
        return Correspondences.empty()
    corr = mutual_nearest(S.points, gt.apply(T.points), radius)
    if max_count is not None and len(corr) > max_count:
        keep = np.sort(np.random.default_rng(seed).choice(len(corr), size=max_count, replace=False))
        corr = corr[keep]
    return corr


# --- positive groups --------------------------------------------------------

class Member(NamedTuple):
    scan_id: int
    point_idx: int
    scan_distance: float


@dataclass(frozen=True)
class PositiveGroup:
    anchor_idx: int
    members: tuple

    def __post_init__(self):
        if len(self.members) < 2:
            raise InvalidArgumentError("a positive group needs at least two members")


@dataclass(frozen=True, eq=False)
class GroupTable:
    """Positive groups packed into padded arrays, one row per group.

    Column 0 is the central-frame anchor (scan id 0); column k holds the
    match in neighbour scan k, or -1 in ``point_idx`` when there is none.
    """

    anchor_idx: np.ndarray
    point_idx: np.ndarray
    scan_distance: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor_idx)

    @property
    def n_scans(self) -> int:
        return self.point_idx.shape[1]

    @property
    def present(self) -> np.ndarray:
        return self.point_idx >= 0

    def sizes(self) -> np.ndarray:
        return self.present.sum(axis=1)

    def __getitem__(self, g):
        if isinstance(g, (int, np.integer)):
            cols = np.nonzero(self.point_idx[g] >= 0)[0]
            members = tuple(Member(int(k), int(self.point_idx[g, k]), float(self.scan_distance[g, k])) for k in cols)
            return PositiveGroup(int(self.anchor_idx[g]), members)
        return GroupTable(self.anchor_idx[g], self.point_idx[g], self.scan_distance[g])

    def __iter__(self) -> Iterator[PositiveGroup]:
        for g in range(len(self)):
            yield self[g]

    def to_jsonl(self) -> str:
        lines = []
        for grp in self:
            lines.append(json.dumps({
                "anchor_idx": grp.anchor_idx,
                "members": [[m.scan_id, m.point_idx, m.scan_distance] for m in grp.members],
            }))
        return "\n".join(lines) + ("\n" if lines else "")


def find_positive_groups(central: PointCloud, neighbors: Sequence[PointCloud], poses: Sequence[RigidTransform],
                         radius: float = GROUP_RADIUS) -> GroupTable:
    """Search every central point's nearest neighbour (within ``radius``) in each aligned neighbour scan.

    ``poses[k]`` maps neighbour k's sensor frame into the central frame.
    Central points with no match in any neighbour are dropped.
    """
    if len(neighbors) != len(poses):
        raise InvalidArgumentError(f"{len(neighbors)} neighbour scans but {len(poses)} poses")
    if len(neighbors) < 1:
        raise InvalidArgumentError("need at least one neighbour scan")
    n = len(central)
    idx = np.full((n, len(neighbors) + 1), -1, dtype=np.int64)
    dist = np.full((n, len(neighbors) + 1), np.nan)
    idx[:, 0] = np.arange(n)
    dist[:, 0] = central.ranges()
    for k, (cloud, pose) in enumerate(zip(neighbors, poses), start=1):
        if len(cloud) == 0 or n == 0:
            continue
        j, _ = SpatialIndex(pose.apply(cloud.points)).nearest_many(central.points, max_distance=radius)
        hit = j >= 0
        idx[hit, k] = j[hit]
        dist[hit, k] = cloud.ranges()[j[hit]]
    keep = (idx[:, 1:] >= 0).any(axis=1)
    return GroupTable(np.nonzero(keep)[0], idx[keep], dist[keep])


def group_coverage(groups: GroupTable, central: PointCloud) -> float:
    return len(groups) / len(central)


# --- density diagnostics ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class DensityScatter:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    def pearson(self) -> float:
        return pearson(self.x, self.y)

    def to_csv(self) -> str:
        rows = ["x_m,y_m"] + [f"{a!r},{b!r}" for a, b in zip(self.x.tolist(), self.y.tolist())]
        return "\n".join(rows) + "\n"


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    den = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    return float(np.dot(xc, yc)) / den if den > 0 else 0.0


def density_scatter(source, clouds: Sequence[PointCloud] | None = None, origins=None) -> DensityScatter:
    """Distances from each positive to the sensors that observed it.

    ``source`` is either :class:`Correspondences` (then ``clouds`` gives the
    two point clouds and ``origins`` the two sensor positions, defaulting to
    each cloud's own frame origin) or a :class:`GroupTable`, where every
    unordered member pair contributes one ``(x, y)`` sample.
    """
    if len(source) == 0:
        raise InvalidArgumentError("density_scatter needs at least one positive")
    if isinstance(source, GroupTable):
        xs, ys = [], []
        k = source.n_scans
        for a in range(k):
            for b in range(a + 1, k):
                both = source.present[:, a] & source.present[:, b]
                xs.append(source.scan_distance[both, a])
                ys.append(source.scan_distance[both, b])
        return DensityScatter(np.concatenate(xs), np.concatenate(ys))
    if clouds is None:
        raise InvalidArgumentError("correspondences need the two clouds they index")
    oa, ob = (np.zeros(3), np.zeros(3)) if origins is None else (np.asarray(o, dtype=np.float64) for o in origins)
    pa = clouds[0].points[source.idx_a]
    pb = clouds[1].points[source.idx_b]
    return DensityScatter(np.sqrt(np.sum((pa - oa) ** 2, axis=1)), np.sqrt(np.sum((pb - ob) ** 2, axis=1)))


def u_curve_model(h: float, b: float, x: float) -> tuple:
    """All y >= 0 with | sqrt(x^2 - h^2) +- sqrt(y^2 - h^2) | = b, ascending.

    A point on a line at lateral offset ``h`` from two sensors ``b`` apart
    is ``x`` from the first sensor and one of these from the second.
    """
    if not b > 0 or h < 0:
        raise InvalidArgumentError("need b > 0 and h >= 0")
    if x < h:
        raise InvalidArgumentError(f"x = {x} is closer than the line offset h = {h}")
    a = math.sqrt(x * x - h * h)
    cs = {abs(a - b), a + b}
    return tuple(sorted({math.sqrt(c * c + h * h) for c in cs}))


def u_curve_residual(h: float, b: float, x: float, y: float) -> float:
    """Residual of the two-sign line equation at (x, y): min over signs of ||a +- c| - b|."""
    a = math.sqrt(max(x * x - h * h, 0.0))
    c = math.sqrt(max(y * y - h * h, 0.0))
    return min(abs(abs(a + c) - b), abs(abs(a - c) - b))


def _offset_interval(d_lo: float, d_hi: float, h: float):
    """Interval of |s| for which sqrt(h^2 + s^2) lies in [d_lo, d_hi]; None if empty."""
    if d_hi < h:
        return None
    lo = math.sqrt(max(d_lo * d_lo - h * h, 0.0)) if d_lo > h else 0.0
    return lo, math.sqrt(d_hi * d_hi - h * h)


def _signed(iv):
    lo, hi = iv
    return [(lo, hi), (-hi, -lo)]


def near_u_curve(h: float, b: float, x: float, y: float, tol: float) -> bool:
    """True when some point of the U curve lies within ``tol`` of (x, y) in both coordinates.

    The curve is traced by a point sliding along the line: its distances to
    the sensors at along-line positions 0 and ``b`` are (x(s), y(s)).
    """
    ix = _offset_interval(x - tol, x + tol, h)
    iy = _offset_interval(y - tol, y + tol, h)
    if ix is None or iy is None:
        return False
    for a0, a1 in _signed(ix):
        for c0, c1 in _signed(iy):
            # s in [a0, a1] and s - b in [c0, c1]
            if max(a0, c0 + b) <= min(a1, c1 + b):
                return True
    return False
