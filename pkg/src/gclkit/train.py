"""Deterministic PCL / GCL training of the point-wise embedder.

Scans are rendered once into a seeded pool of scenarios; every step draws
its positives from that pool. Rendering is a pure function of the seed, so
caching does not change what a step sees, only how long it takes.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import corr, feat, simworld
from .errors import InvalidArgumentError, TrainingFailedError
from .geom import voxel_sample_indices
from .loss import GroupBatch, LossConfig, total_loss

log = logging.getLogger(__name__)

MODES = ("gcl", "pcl")
TRACE_FIELDS = ("step", "skipped", "groups", "pp", "pv", "f", "hn", "total")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "gcl"
    phi: int = simworld.DEFAULT_PHI
    pair_range: tuple = (5.0, 20.0)
    loss: LossConfig | None = None
    learning_rate: float = 0.05
    momentum: float = 0.9
    steps: int = 2000
    scenarios_per_step: int = 1
    groups_per_batch: int = 512
    seed: int = 0
    pool_size: int = 8
    anchor_voxel: float = 0.3
    group_radius: float = corr.GROUP_RADIUS
    hidden: int = 32
    out_dim: int = 16
    lidar: simworld.LidarModel = field(default_factory=simworld.LidarModel)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise InvalidArgumentError("steps must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidArgumentError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError("momentum must lie in [0, 1)")
        if self.groups_per_batch < 2:
            raise InvalidArgumentError("groups_per_batch must be >= 2")
        if self.scenarios_per_step < 1 or self.pool_size < 1:
            raise InvalidArgumentError("scenarios_per_step and pool_size must be >= 1")
        b1, b2 = self.pair_range
        if not 0 <= b1 <= b2:
            raise InvalidArgumentError("pair_range must satisfy 0 <= b1 <= b2")
        object.__setattr__(self, "pair_range", (float(b1), float(b2)))
        if self.loss is None:
            object.__setattr__(self, "loss", LossConfig.gcl() if self.mode == "gcl" else LossConfig.pcl())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pair_range"] = list(self.pair_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("loss") is not None:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if "lidar" in d:
            d["lidar"] = simworld.LidarModel(**d["lidar"])
        if "pair_range" in d:
            d["pair_range"] = tuple(d["pair_range"])
        return cls(**d)


@dataclass
class TrainReport:
    trace: list
    embedder: feat.Embedder
    initial_params: np.ndarray
    wall_seconds: float
    seed: int
    skipped: int

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in self.trace:
            w.writerow([row["step"], row["skipped"], row["groups"]] +
                       [repr(float(row[k])) for k in ("pp", "pv", "f", "hn", "total")])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "steps": len(self.trace),
            "skipped": self.skipped,
            "final_total": self.trace[-1]["total"] if self.trace else None,
            "embedder": self.embedder.to_dict(),
        }


# --- training data ----------------------------------------------------------

@dataclass
class ScenarioData:
    """A rendered scenario: scans (0 = central), their descriptors, and positives."""

    clouds: list
    descriptors: list
    poses: list
    groups: corr.GroupTable | None  # GCL mode
    pairs: list  # (partner scan id, Correspondences), PCL mode


def _substream(seed: int, name: str) -> np.random.Generator:
    key = [ord(c) for c in name]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1)] + key))


def prepare_scenario(scenario: simworld.ScanScenario, mode: str = "gcl", anchor_voxel: float = 0.3,
                     radius: float = corr.GROUP_RADIUS) -> ScenarioData:
    """Render ``scenario`` and build its positives.

    GCL mode searches positive groups over all scans; PCL mode pairs the
    central scan with each partner scan separately. Anchors are central
    points voxel-sampled at ``anchor_voxel`` so that no two anchors of a
    batch are near-duplicates.
    """
    central, neighbors = scenario.render()
    poses = scenario.relative_poses()
    clouds = [central] + list(neighbors)
    anchors = voxel_sample_indices(central.points, anchor_voxel)
    sub = central.subset(anchors)
    groups = None
    pairs = []
    if mode == "gcl":
        table = corr.find_positive_groups(sub, neighbors, poses, radius)
        # report anchors in central-frame indices
        groups = corr.GroupTable(anchors[table.anchor_idx], _remap_anchor(table, anchors), table.scan_distance)
    else:
        for k, (cloud, pose) in enumerate(zip(neighbors, poses), start=1):
            c = corr.find_pcl_positives(sub, cloud, pose, radius)
            pairs.append((k, corr.Correspondences(anchors[c.idx_a], c.idx_b, c.dist)))
    # descriptors only where a positive references a point; other rows stay zero
    used = [set() for _ in clouds]
    if groups is not None:
        for k in range(groups.n_scans):
            col = groups.point_idx[:, k]
            used[k].update(col[col >= 0].tolist())
    for k, c in pairs:
        used[0].update(c.idx_a.tolist())
        used[k].update(c.idx_b.tolist())
    desc = []
    for cloud, rows in zip(clouds, used):
        d = np.zeros((len(cloud), feat.DESCRIPTOR_DIM))
        rows = np.array(sorted(rows), dtype=np.int64)
        if len(rows):
            d[rows] = feat.compute_descriptors(cloud, at=rows)
        desc.append(d)
    return ScenarioData(clouds, desc, poses, groups, pairs)


def _remap_anchor(groups: corr.GroupTable, anchors: np.ndarray) -> np.ndarray:
    idx = groups.point_idx.copy()
    idx[:, 0] = anchors[idx[:, 0]]
    return idx


def build_pool(cfg: TrainConfig) -> list:
    """Render and preprocess the seeded scenario pool for ``cfg``.

    Both modes draw the same scenes and central scans for a given seed; GCL
    surrounds the central scan with ``phi`` neighbours spread over +-60 m,
    PCL with ``phi`` partners at separations drawn from ``pair_range``.
    """
    return ScenarioPool(cfg)


class ScenarioPool:
    """Seeded scenarios of ``cfg``, rendered and preprocessed on first use."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.scenarios = pool_scenarios(cfg)
        self._data: dict = {}

    def __len__(self) -> int:
        return len(self.scenarios)

    def __getitem__(self, i: int) -> ScenarioData:
        if i not in self._data:
            self._data[i] = prepare_scenario(self.scenarios[i], self.cfg.mode, self.cfg.anchor_voxel,
                                             self.cfg.group_radius)
        return self._data[i]

    def materialize(self) -> "ScenarioPool":
        for i in range(len(self)):
            self[i]
        return self


def pool_scenarios(cfg: TrainConfig) -> list:
    rng = _substream(cfg.seed, "scenarios")
    out = []
    for _ in range(cfg.pool_size):
        scene_seed, scen_seed = (int(v) for v in rng.integers(0, 2**63 - 1, size=2))
        scene = simworld.generate_scene(scene_seed)
        if cfg.mode == "gcl":
            out.append(simworld.sample_neighborhood(scene, cfg.lidar, phi=cfg.phi, seed=scen_seed))
        else:
            b1, b2 = cfg.pair_range
            out.append(simworld.sample_pair_scenario(scene, cfg.lidar, b1, b2, n_pairs=cfg.phi, seed=scen_seed))
    return out


def _gcl_rows(data: ScenarioData, cap: int, rng: np.random.Generator):
    """Member rows (scan, point) of up to ``cap`` groups that share no point."""
    table = data.groups
    order = rng.permutation(len(table))
    used: set = set()
    picked = []
    for g in order:
        cols = np.nonzero(table.present[g])[0]
        keys = [(int(k), int(table.point_idx[g, k])) for k in cols]
        if any(k in used for k in keys):
            continue
        used.update(keys)
        picked.append((keys, table.scan_distance[g, cols]))
        if len(picked) == cap:
            break
    return picked


def _pcl_rows(data: ScenarioData, cap: int, rng: np.random.Generator):
    if not data.pairs:
        return []
    k, c = data.pairs[int(rng.integers(len(data.pairs)))]
    order = rng.permutation(len(c))[:cap]
    central_r = data.clouds[0].ranges()
    other_r = data.clouds[k].ranges()
    return [([(0, int(c.idx_a[i])), (k, int(c.idx_b[i]))],
             np.array([central_r[c.idx_a[i]], other_r[c.idx_b[i]]])) for i in order]


def assemble_batch(pool: list, cfg: TrainConfig, rng: np.random.Generator):
    """Descriptor rows, group ids and finest rows for one step; None if < 2 groups."""
    picks = []
    chosen = rng.integers(len(pool), size=cfg.scenarios_per_step)
    per = max(2, cfg.groups_per_batch // cfg.scenarios_per_step)
    for p in chosen:
        data = pool[int(p)]
        rows = _gcl_rows(data, per, rng) if cfg.mode == "gcl" else _pcl_rows(data, per, rng)
        picks.extend((data, keys, dist) for keys, dist in rows)
    if len(picks) < 2:
        return None
    X, gid, finest = [], [], []
    start = 0
    for g, (data, keys, dist) in enumerate(picks):
        X.append(np.stack([data.descriptors[s][i] for s, i in keys]))
        gid.append(np.full(len(keys), g))
        finest.append(start + int(np.argmin(dist)))
        start += len(keys)
    return np.concatenate(X), np.concatenate(gid), np.array(finest)


def sgd_momentum_step(theta: np.ndarray, velocity: np.ndarray, grad: np.ndarray, lr: float, beta: float):
    """``v <- beta * v + g``; ``theta <- theta - lr * v``."""
    velocity = beta * velocity + grad
    return theta - lr * velocity, velocity


def train(cfg: TrainConfig, pool: list | None = None, init: feat.Embedder | None = None) -> TrainReport:
    t0 = time.perf_counter()
    if pool is None:
        pool = build_pool(cfg)
    emb = init if init is not None else feat.init_embedder(cfg.seed, hidden=cfg.hidden, out=cfg.out_dim)
    theta0 = emb.params()
    theta = theta0.copy()
    vel = np.zeros_like(theta)
    rng = _substream(cfg.seed, "batches")
    trace = []
    skipped = 0
    for step in range(cfg.steps):
        batch = assemble_batch(pool, cfg, rng)
        if batch is None:
            skipped += 1
            trace.append({"step": step, "skipped": 1, "groups": 0,
                          **{k: float("nan") for k in ("pp", "pv", "f", "hn", "total")}})
            continue
        X, gid, finest = batch
        model = emb.with_params(theta)
        f, cache = model.forward(X)
        res = total_loss(GroupBatch(f, gid, finest), cfg.loss, rng=rng)
        grad = model.backward(f, cache, res.grad)
        theta, vel = sgd_momentum_step(theta, vel, grad, cfg.learning_rate, cfg.momentum)
        trace.append({"step": step, "skipped": 0, "groups": int(gid[-1]) + 1,
                      **{k: float(res.terms.get(k, 0.0)) for k in ("pp", "pv", "f", "hn", "total")}})
        if step % 200 == 0:
            log.debug("step %d total %.4f", step, res.value)
    if skipped * 2 > cfg.steps:
        raise TrainingFailedError(f"{skipped} of {cfg.steps} steps had fewer than two positive groups")
    return TrainReport(trace, emb.with_params(theta), theta0, time.perf_counter() - t0, cfg.seed, skipped)
