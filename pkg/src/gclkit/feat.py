"""Hand-crafted local descriptors and a small point-wise embedder.

The descriptor keeps the raw neighbour count on purpose: it makes the
untrained features density dependent, so any density invariance has to be
learned from the supervision signal.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corr import GroupTable, PositiveGroup
from .errors import InvalidArgumentError
from .geom import PointCloud, SpatialIndex
from .simworld import SENSOR_HEIGHT

DESCRIPTOR_RADIUS = 1.0
DESCRIPTOR_DIM = 6
MIN_NEIGHBORS = 3
# Fixed input standardisation, applied after log1p of the count column.
# Measured on held-out default scenarios; without it the raw counts (in
# the hundreds) saturate the tanh layer and every point embeds alike.
INPUT_SHIFT = (4.9, 0.61, 0.35, 0.017, 0.6, 0.39)
INPUT_SCALE = (1.25, 0.16, 0.14, 0.036, 0.9, 0.46)


def compute_descriptors(cloud: PointCloud, radius: float = DESCRIPTOR_RADIUS,
                        sensor_height: float = SENSOR_HEIGHT, at=None) -> np.ndarray:
    """Per-point ``[count, l1, l2, l3, height, verticality]``, shape (N, 6).

    ``count`` is the number of other points within ``radius``. The
    eigenvalues of the neighbourhood covariance (point included) are sorted
    descending and divided by their sum. Verticality is ``1 - |n_z|`` where
    ``n`` is the smallest-eigenvalue direction, so walls and poles score near
    1 and flat ground near 0. Points with fewer than three neighbours get
    zeros for the eigenvalues and verticality.

    ``at`` restricts the output to the given point indices (neighbourhoods
    still use the whole cloud); rows then follow the order of ``at``.
    """
    pts = cloud.points
    if at is None:
        n = len(pts)
        if n == 0:
            return np.zeros((0, DESCRIPTOR_DIM))
        i, j, off = SpatialIndex(pts).self_pairs(radius)
        # pair (i, j) adds +off to i and -off to j
        rows = np.concatenate([i, j])
        offsets = np.concatenate([off, -off])
        z = pts[:, 2]
    else:
        at = np.asarray(at, dtype=np.int64).reshape(-1)
        n = len(at)
        if n == 0:
            return np.zeros((0, DESCRIPTOR_DIM))
        if at.min() < 0 or at.max() >= len(pts):
            raise InvalidArgumentError("descriptor indices out of range")
        q, p, offsets = SpatialIndex(pts).radius_pairs(pts[at], radius)
        keep = p != at[q]
        rows, offsets = q[keep], offsets[keep]
        z = pts[at, 2]
    return _descriptor_rows(n, rows, offsets, z + sensor_height)


def _descriptor_rows(n: int, rows: np.ndarray, off: np.ndarray, height: np.ndarray) -> np.ndarray:
    out = np.zeros((n, DESCRIPTOR_DIM))
    out[:, 4] = height
    count = np.bincount(rows, minlength=n)
    out[:, 0] = count
    # moments of neighbour offsets relative to the query point; the point
    # itself contributes a zero offset
    m = (count + 1).astype(np.float64)
    s1 = np.stack([np.bincount(rows, weights=off[:, k], minlength=n) for k in range(3)], axis=1)
    s2 = np.zeros((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            v = np.bincount(rows, weights=off[:, a] * off[:, b], minlength=n)
            s2[:, a, b] = v
            s2[:, b, a] = v
    mean = s1 / m[:, None]
    cov = s2 / m[:, None, None] - mean[:, :, None] * mean[:, None, :]
    ok = count >= MIN_NEIGHBORS
    if ok.any():
        w, v = np.linalg.eigh(cov[ok])
        w = np.clip(w, 0.0, None)
        tot = w.sum(axis=1)
        good = tot > 0
        lam = np.zeros_like(w)
        lam[good] = w[good][:, ::-1] / tot[good, None]
        idx = np.nonzero(ok)[0]
        out[idx, 1:4] = lam
        out[idx, 5] = np.where(good, 1.0 - np.abs(v[:, 2, 0]), 0.0)
    return out


def standardize(x: np.ndarray, shift=INPUT_SHIFT, scale=INPUT_SCALE) -> np.ndarray:
    """``(x' - shift) / scale`` where ``x'`` replaces the count column by ``log1p(count)``."""
    x = np.array(x, dtype=np.float64)
    x[:, 0] = np.log1p(x[:, 0])
    return (x - np.asarray(shift)) / np.asarray(scale)


@dataclass(eq=False)
class Embedder:
    """``x -> normalize(W2 @ tanh(W1 @ standardize(x) + b1) + b2)``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    seed: int | None = None
    shift: tuple = INPUT_SHIFT
    scale: tuple = INPUT_SCALE

    def __post_init__(self):
        self.W1 = np.array(self.W1, dtype=np.float64)
        self.b1 = np.array(self.b1, dtype=np.float64).reshape(-1)
        self.W2 = np.array(self.W2, dtype=np.float64)
        self.b2 = np.array(self.b2, dtype=np.float64).reshape(-1)
        h, i = self.W1.shape
        d, h2 = self.W2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (d,):
            raise InvalidArgumentError("inconsistent embedder layer shapes")
        self.shift = tuple(float(v) for v in self.shift)
        self.scale = tuple(float(v) for v in self.scale)
        if len(self.shift) != i or len(self.scale) != i or min(self.scale) <= 0:
            raise InvalidArgumentError("input normalisation must match the input width with positive scales")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.W2.shape[0]

    # flat parameter vector, ordered W1, b1, W2, b2 (row-major)
    def params(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def with_params(self, theta: np.ndarray) -> "Embedder":
        theta = np.asarray(theta, dtype=np.float64)
        h, i = self.W1.shape
        d = self.W2.shape[0]
        sizes = [h * i, h, d * h, d]
        if len(theta) != sum(sizes):
            raise InvalidArgumentError("parameter vector has the wrong length")
        a, b, c, _ = np.split(theta, np.cumsum(sizes)[:-1])
        return Embedder(a.reshape(h, i), b, c.reshape(d, h), theta[-d:], self.seed, self.shift, self.scale)

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise InvalidArgumentError(f"expected descriptors of width {self.input_dim}, got {x.shape}")
        x = standardize(x, self.shift, self.scale)
        hid = np.tanh(x @ self.W1.T + self.b1)
        out = hid @ self.W2.T + self.b2
        norm = np.sqrt(np.sum(out ** 2, axis=1))
        f = np.zeros_like(out)
        nz = norm > 0
        f[nz] = out[nz] / norm[nz, None]
        f[~nz, 0] = 1.0
        return f, (x, hid, norm, nz)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, f: np.ndarray, cache, grad_f: np.ndarray) -> np.ndarray:
        """Gradient of a scalar loss w.r.t. the flat parameters, given dL/df."""
        x, hid, norm, nz = cache
        g = np.zeros_like(f)
        # d normalize(o) = (I - f f^T) / |o|; the fallback rows are constant
        proj = grad_f[nz] - f[nz] * np.sum(grad_f[nz] * f[nz], axis=1, keepdims=True)
        g[nz] = proj / norm[nz, None]
        gW2 = g.T @ hid
        gb2 = g.sum(axis=0)
        gh = (g @ self.W2) * (1.0 - hid ** 2)
        gW1 = gh.T @ x
        gb1 = gh.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"shape": list(self.W1.shape), "weight": self.W1.ravel().tolist(), "bias": self.b1.tolist()},
                {"shape": list(self.W2.shape), "weight": self.W2.ravel().tolist(), "bias": self.b2.tolist()},
            ],
            "activation": "tanh",
            "input_normalization": {"log1p_columns": [0], "shift": list(self.shift), "scale": list(self.scale)},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Embedder":
        l1, l2 = d["layers"]
        return cls(
            np.array(l1["weight"]).reshape(l1["shape"]), l1["bias"],
            np.array(l2["weight"]).reshape(l2["shape"]), l2["bias"],
            d.get("seed"),
            *((d["input_normalization"]["shift"], d["input_normalization"]["scale"])
              if "input_normalization" in d else ()),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Embedder":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_embedder(seed: int, input_dim: int = DESCRIPTOR_DIM, hidden: int = 32, out: int = 16) -> Embedder:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    a1 = np.sqrt(6.0 / (input_dim + hidden))
    a2 = np.sqrt(6.0 / (hidden + out))
    return Embedder(
        rng.uniform(-a1, a1, size=(hidden, input_dim)), np.zeros(hidden),
        rng.uniform(-a2, a2, size=(out, hidden)), np.zeros(out),
        seed,
    )


def embed(embedder: Embedder, descriptors: np.ndarray) -> np.ndarray:
    return embedder(descriptors)


def _features_for(features: Mapping[int, np.ndarray] | Sequence[np.ndarray], scan_id: int) -> np.ndarray:
    try:
        return features[scan_id]
    except (KeyError, IndexError):
        raise InvalidArgumentError(f"no feature set for scan {scan_id}") from None


def finest_member(group: PositiveGroup):
    """Member with the smallest scan distance; ties go to lower scan id, then point index."""
    return min(group.members, key=lambda m: (m.scan_distance, m.scan_id, m.point_idx))


def finest_feature(group: PositiveGroup, features) -> np.ndarray:
    m = finest_member(group)
    return _features_for(features, m.scan_id)[m.point_idx]


def feature_drift(group: PositiveGroup, features) -> list[tuple[float, float]]:
    """``(scan_distance, |f_member - f_finest|)`` for every member of the group."""
    ref = finest_feature(group, features)
    out = []
    for m in group.members:
        f = _features_for(features, m.scan_id)[m.point_idx]
        out.append((m.scan_distance, float(np.sqrt(np.sum((f - ref) ** 2)))))
    return out


def finest_columns(groups: GroupTable) -> np.ndarray:
    """Column of the finest member in each row of a group table."""
    d = np.where(groups.present, groups.scan_distance, np.inf)
    # argmin returns the first minimum, i.e. the lowest scan id; each column
    # holds a single point so the point-index tie-break never triggers
    return np.argmin(d, axis=1)


def table_drift(groups: GroupTable, features: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`feature_drift` over a whole table; returns flat (distance, drift)."""
    fin = finest_columns(groups)
    rows = np.arange(len(groups))
    ref = np.empty((len(groups), features[0].shape[1]))
    for k in range(groups.n_scans):
        sel = fin == k
        if sel.any():
            ref[sel] = _features_for(features, k)[groups.point_idx[sel, k]]
    dists, drifts = [], []
    for k in range(groups.n_scans):
        sel = groups.present[:, k]
        f = _features_for(features, k)[groups.point_idx[sel, k]]
        dists.append(groups.scan_distance[sel, k])
        drifts.append(np.sqrt(np.sum((f - ref[rows[sel]]) ** 2, axis=1)))
    return np.concatenate(dists), np.concatenate(drifts)


def binned_means(x: np.ndarray, y: np.ndarray, edges: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Mean of ``y`` per ``x`` bin ``[edges[i], edges[i+1])`` and per-bin counts (NaN when empty)."""
    edges = np.asarray(edges, dtype=np.float64)
    which = np.digitize(x, edges) - 1
    means = np.full(len(edges) - 1, np.nan)
    counts = np.zeros(len(edges) - 1, dtype=np.int64)
    for i in range(len(edges) - 1):
        sel = which == i
        counts[i] = sel.sum()
        if counts[i]:
            means[i] = y[sel].mean()
    return means, counts
