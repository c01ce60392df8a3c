"""Pair-wise and group-wise contrastive losses with analytic feature gradients.

Features of a batch live in one ``(N, d)`` array. Rows are grouped
contiguously: ``group[i]`` is non-decreasing, so row order is (group,
member) order and "lowest index" tie-breaks follow it.

Hinges take the zero branch at the kink and hardest-negative ties route the
gradient to the lowest-index argmin.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class LossConfig:
    r: float = 2.0
    m1: float = 0.1
    m2: float = 0.1
    m3: float = 0.2
    m4: float = 1.4
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    enable_pp: bool = False
    enable_pv: bool = True
    enable_f: bool = True
    enable_hn: bool = True
    block_finest_gradient: bool = False

    def __post_init__(self):
        if not self.r >= 1 or not np.isfinite(self.r):
            raise InvalidArgumentError(f"norm order must be finite and >= 1, got {self.r}")
        if min(self.m1, self.m2, self.m3, self.m4) < 0:
            raise InvalidArgumentError("margins must be non-negative")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise InvalidArgumentError("loss weights must be non-negative")

    @classmethod
    def gcl(cls, **kw) -> "LossConfig":
        """F + PV + HN."""
        return cls(**kw)

    @classmethod
    def pcl(cls, **kw) -> "LossConfig":
        """PP + HN, the pair-wise baseline."""
        base = dict(enable_pp=True, enable_pv=False, enable_f=False, enable_hn=True)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "LossConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class LossValueAndGrad:
    value: float
    grad: np.ndarray
    terms: dict = field(default_factory=dict)


@dataclass(eq=False)
class GroupBatch:
    """Features of a batch of positive groups.

    ``group`` assigns each feature row to a group (non-decreasing);
    ``finest`` holds, per group, the row of its finest member.
    """

    features: np.ndarray
    group: np.ndarray
    finest: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.group = np.asarray(self.group, dtype=np.int64)
        if self.features.ndim != 2 or len(self.group) != len(self.features):
            raise InvalidArgumentError("features must be (N, d) with one group id per row")
        if len(self.group) == 0:
            raise InvalidArgumentError("empty batch")
        if np.any(np.diff(self.group) < 0) or self.group[0] != 0:
            raise InvalidArgumentError("group ids must be contiguous, starting at 0, non-decreasing")
        self.sizes = np.bincount(self.group)
        if np.any(self.sizes == 0):
            raise InvalidArgumentError("group ids must not skip values")
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        if self.finest is not None:
            self.finest = np.asarray(self.finest, dtype=np.int64)
            if len(self.finest) != self.n_groups or np.any(self.group[self.finest] != np.arange(self.n_groups)):
                raise InvalidArgumentError("finest rows must belong to their own group")

    @classmethod
    def from_groups(cls, groups, finest=None) -> "GroupBatch":
        """Build from a list of ``(size_g, d)`` arrays and optional in-group finest positions."""
        feats = np.concatenate([np.asarray(g, dtype=np.float64) for g in groups])
        gid = np.repeat(np.arange(len(groups)), [len(g) for g in groups])
        rows = None
        if finest is not None:
            starts = np.concatenate([[0], np.cumsum([len(g) for g in groups])[:-1]])
            rows = starts + np.asarray(finest)
        return cls(feats, gid, rows)

    @property
    def n_groups(self) -> int:
        return len(self.sizes)

    def with_features(self, features) -> "GroupBatch":
        return GroupBatch(features, self.group, self.finest)

    def members(self, g: int) -> np.ndarray:
        return np.arange(self.starts[g], self.starts[g] + self.sizes[g])


def rnorm(v: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise r-norm and its gradient (zero where the norm vanishes)."""
    v = np.atleast_2d(v)
    if r == 2:
        n = np.sqrt(np.sum(v * v, axis=1))
        g = np.zeros_like(v)
        nz = n > 0
        g[nz] = v[nz] / n[nz, None]
        return n, g
    a = np.abs(v)
    n = np.sum(a ** r, axis=1) ** (1.0 / r)
    g = np.zeros_like(v)
    nz = n > 0
    if r == 1:
        g[nz] = np.sign(v[nz])
    else:
        g[nz] = np.sign(v[nz]) * (a[nz] / n[nz, None]) ** (r - 1)
    return n, g


def loss_pos_pairwise(fa, fb, M: float, r: float = 2.0) -> LossValueAndGrad:
    """Mean hinge ``max(|f_a - f_b|_r - M, 0)`` over correspondence pairs.

    ``grad`` has shape (2, n, d): gradients for ``fa`` and ``fb``.
    """
    fa = np.atleast_2d(np.asarray(fa, dtype=np.float64))
    fb = np.atleast_2d(np.asarray(fb, dtype=np.float64))
    if len(fa) == 0 or fa.shape != fb.shape:
        raise InvalidArgumentError("need a non-empty set of equally shaped feature pairs")
    n, g = rnorm(fa - fb, r)
    active = n > M
    w = active / len(fa)
    ga = g * w[:, None]
    return LossValueAndGrad(float(np.sum(np.where(active, n - M, 0.0)) / len(fa)), np.stack([ga, -ga]))


def sample_pp_pairs(batch: GroupBatch, rng: np.random.Generator) -> np.ndarray:
    """One uniformly random unordered member pair per group, as (G, 2) row indices."""
    s = batch.sizes
    if np.any(s < 2):
        raise InvalidArgumentError("every group needs at least two members for a positive pair")
    a = np.floor(rng.random(len(s)) * s).astype(np.int64)
    b = np.floor(rng.random(len(s)) * (s - 1)).astype(np.int64)
    b = b + (b >= a)
    return np.stack([batch.starts + a, batch.starts + b], axis=1)


def loss_pp(batch: GroupBatch, cfg: LossConfig, pairs: np.ndarray | None = None,
            rng: np.random.Generator | None = None) -> LossValueAndGrad:
    """Positive-pair loss on one member pair per group.

    ``pairs`` fixes the sampled pairs; otherwise they are drawn from ``rng``
    and returned in ``terms['pairs']``.
    """
    if np.any(batch.sizes < 2):
        raise InvalidArgumentError("every group needs at least two members")
    if pairs is None:
        pairs = sample_pp_pairs(batch, rng if rng is not None else np.random.default_rng(0))
    pairs = np.asarray(pairs, dtype=np.int64)
    F = batch.features
    n, g = rnorm(F[pairs[:, 0]] - F[pairs[:, 1]], cfg.r)
    active = n > cfg.m1
    G = batch.n_groups
    value = float(np.sum(np.where(active, n - cfg.m1, 0.0)) / G)
    gi = g * (active / G)[:, None]
    grad = np.zeros_like(F)
    np.add.at(grad, pairs[:, 0], gi)
    np.add.at(grad, pairs[:, 1], -gi)
    return LossValueAndGrad(value, grad, {"pairs": pairs})


def _group_mean(batch: GroupBatch) -> np.ndarray:
    F = batch.features
    sums = np.zeros((batch.n_groups, F.shape[1]))
    np.add.at(sums, batch.group, F)
    return sums / batch.sizes[:, None]


def loss_pv(batch: GroupBatch, cfg: LossConfig) -> LossValueAndGrad:
    """Hinged distance of every member to its group mean, weighted 1 / (|G| |g|)."""
    F = batch.features
    mu = _group_mean(batch)
    n, g = rnorm(F - mu[batch.group], cfg.r)
    active = n > cfg.m2
    w = active / (batch.n_groups * batch.sizes[batch.group])
    value = float(np.sum(np.where(active, n - cfg.m2, 0.0) / (batch.n_groups * batch.sizes[batch.group])))
    u = g * w[:, None]
    # each member also moves every sibling's mean: subtract the group-average of u
    usum = np.zeros((batch.n_groups, F.shape[1]))
    np.add.at(usum, batch.group, u)
    grad = u - (usum / batch.sizes[:, None])[batch.group]
    return LossValueAndGrad(value, grad)


def loss_f(batch: GroupBatch, cfg: LossConfig) -> LossValueAndGrad:
    """Hinged distance from each group's finest feature to the group mean.

    With ``cfg.block_finest_gradient`` the finest feature is treated as a
    constant; only the path through the mean carries gradient.
    """
    if batch.finest is None:
        raise InvalidArgumentError("finest members are required for the finest loss")
    F = batch.features
    G = batch.n_groups
    mu = _group_mean(batch)
    n, g = rnorm(F[batch.finest] - mu, cfg.r)
    active = n > cfg.m3
    value = float(np.sum(np.where(active, n - cfg.m3, 0.0)) / G)
    u = g * (active / G)[:, None]
    grad = -(u / batch.sizes[:, None])[batch.group]
    if not cfg.block_finest_gradient:
        grad[batch.finest] += u
    return LossValueAndGrad(value, grad)


def _pairwise_dist_block(A: np.ndarray, B: np.ndarray, r: float) -> np.ndarray:
    if r == 2:
        return np.sqrt(np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=-1))
    return np.sum(np.abs(A[:, None, :] - B[None, :, :]) ** r, axis=-1) ** (1.0 / r)


def hardest_negatives(features: np.ndarray, group: np.ndarray, r: float = 2.0,
                      block: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Distance to, and row of, each feature's nearest feature in a different group.

    Exact: candidates are ranked on a Gram-matrix estimate and every
    near-tie is re-evaluated with the direct formula; ties go to the lowest row.
    """
    F = np.asarray(features, dtype=np.float64)
    group = np.asarray(group)
    N = len(F)
    if len(np.unique(group)) < 2:
        raise InvalidArgumentError("hardest negatives need at least two groups")
    dist = np.empty(N)
    arg = np.empty(N, dtype=np.int64)
    sq = np.sum(F * F, axis=1)
    scale = float(sq.max()) if N else 1.0
    for s in range(0, N, block):
        rows = slice(s, min(s + block, N))
        if r == 2:
            d2 = sq[rows, None] + sq[None, :] - 2.0 * (F[rows] @ F.T)
            same = group[rows, None] == group[None, :]
            d2[same] = np.inf
            best = d2.min(axis=1)
            tol = 1e-9 * scale + 1e-12
            cand = d2 <= best[:, None] + 8 * tol
            first = np.argmax(cand, axis=1)
            rr = np.arange(rows.start, rows.stop)
            dist[rows] = np.sqrt(np.sum((F[first] - F[rr]) ** 2, axis=1))
            arg[rows] = first
            for k in np.nonzero(cand.sum(axis=1) > 1)[0]:
                row = rows.start + k
                idx = np.nonzero(cand[k])[0]
                exact = np.sqrt(np.sum((F[idx] - F[row]) ** 2, axis=1))
                m = exact.min()
                dist[row] = m
                arg[row] = idx[exact == m].min()
        else:
            d = _pairwise_dist_block(F[rows], F, r)
            d[group[rows, None] == group[None, :]] = np.inf
            a = np.argmin(d, axis=1)
            arg[rows] = a
            dist[rows] = d[np.arange(len(a)), a]
    return dist, arg


def hardest_negative_distance(f, own_group: int, batch: GroupBatch, r: float = 2.0) -> tuple[float, int]:
    """Distance from ``f`` to the nearest member of any other group, and that member's row."""
    if batch.n_groups < 2:
        raise InvalidArgumentError("hardest negatives need at least two groups")
    others = np.nonzero(batch.group != own_group)[0]
    d = rnorm(batch.features[others] - np.asarray(f, dtype=np.float64), r)[0]
    k = int(np.argmin(d))
    return float(d[k]), int(others[k])


def loss_hn(batch: GroupBatch, cfg: LossConfig) -> LossValueAndGrad:
    """Hinged hardest-negative loss ``max(m4 - H(f), 0)`` weighted 1 / (|G| |g|)."""
    if batch.n_groups < 2:
        raise InvalidArgumentError("the hardest-negative loss needs at least two groups")
    F = batch.features
    H, neg = hardest_negatives(F, batch.group, cfg.r)
    active = H < cfg.m4
    wden = batch.n_groups * batch.sizes[batch.group]
    value = float(np.sum(np.where(active, cfg.m4 - H, 0.0) / wden))
    _, g = rnorm(F - F[neg], cfg.r)
    u = g * (active / wden)[:, None]
    grad = -u
    np.add.at(grad, neg, u)
    return LossValueAndGrad(value, grad, {"negatives": neg})


def total_loss(batch: GroupBatch, cfg: LossConfig, pp_pairs: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> LossValueAndGrad:
    """``lambda1 * (PV and/or PP) + lambda2 * F + lambda3 * HN`` over the enabled terms."""
    if not (cfg.enable_pp or cfg.enable_pv or cfg.enable_f or cfg.enable_hn):
        raise InvalidArgumentError("no loss term is enabled")
    value = 0.0
    grad = np.zeros_like(batch.features)
    terms = {}
    parts = []
    if cfg.enable_pp:
        res = loss_pp(batch, cfg, pp_pairs, rng)
        terms["pairs"] = res.terms["pairs"]
        parts.append(("pp", cfg.lambda1, res))
    if cfg.enable_pv:
        parts.append(("pv", cfg.lambda1, loss_pv(batch, cfg)))
    if cfg.enable_f:
        parts.append(("f", cfg.lambda2, loss_f(batch, cfg)))
    if cfg.enable_hn:
        parts.append(("hn", cfg.lambda3, loss_hn(batch, cfg)))
    for name, lam, res in parts:
        terms[name] = res.value
        value += lam * res.value
        grad += lam * res.grad
    terms["total"] = value
    return LossValueAndGrad(value, grad, terms)
