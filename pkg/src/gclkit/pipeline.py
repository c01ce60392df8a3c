"""Feature matching, RANSAC registration and the distance-bucket benchmark."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import corr, feat, simworld
from .corr import Correspondences
from .errors import InvalidArgumentError, NotEnoughMatchesError
from .geom import PointCloud, RigidTransform, kabsch_align, rre, rte, voxel_sample_indices

STRICT_RTE = 0.6
STRICT_RRE = 1.5
LOOSE_RTE = 2.0
LOOSE_RRE = 5.0
DEFAULT_BUCKETS = ((5.0, 10.0), (10.0, 20.0), (20.0, 30.0), (30.0, 40.0), (40.0, 50.0))
LOW_OVERLAP = 0.30
INLIER_RADIUS = corr.OVERLAP_RADIUS
MAX_ITERS = 50_000
CONFIDENCE = 0.999
_CHUNK = 256


def thread_cap() -> int:
    """Worker cap from ``GCLKIT_THREADS`` (default 1)."""
    raw = os.environ.get("GCLKIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidArgumentError(f"GCLKIT_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# --- matching ---------------------------------------------------------------

def match_features(feat_S: np.ndarray, feat_T: np.ndarray) -> Correspondences:
    """Mutual nearest neighbours in feature space; ties resolve to the lowest index.

    ``dist`` holds the feature-space distance of each match.
    """
    a = np.asarray(feat_S, dtype=np.float64)
    b = np.asarray(feat_T, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise InvalidArgumentError("match_features needs two non-empty feature sets")
    return corr.mutual_nearest(a, b)


# --- RANSAC -----------------------------------------------------------------

@dataclass(frozen=True)
class RegistrationResult:
    estimated: RigidTransform
    inliers: int
    iterations: int
    rre_deg: float = math.nan
    rte_m: float = math.nan
    success_strict: bool = False
    success_loose: bool = False
    failed: bool = False

    def to_dict(self) -> dict:
        return {
            "estimated": self.estimated.to_list(),
            "inliers": self.inliers,
            "iterations": self.iterations,
            "rre_deg": self.rre_deg,
            "rte_m": self.rte_m,
            "success_strict": self.success_strict,
            "success_loose": self.success_loose,
            "failed": self.failed,
        }


def success_flags(rre_deg: float, rte_m: float) -> tuple[bool, bool]:
    """(strict, loose) success; the thresholds themselves count as success."""
    strict = rte_m <= STRICT_RTE and rre_deg <= STRICT_RRE
    loose = rte_m <= LOOSE_RTE and rre_deg <= LOOSE_RRE
    return bool(strict), bool(loose)


def judge(estimated: RigidTransform, gt: RigidTransform | None, inliers: int, iterations: int,
          failed: bool = False) -> RegistrationResult:
    if gt is None:
        return RegistrationResult(estimated, inliers, iterations, failed=failed)
    e_r = rre(estimated.rotation, gt.rotation)
    e_t = rte(estimated.translation, gt.translation)
    strict, loose = success_flags(e_r, e_t)
    if failed:
        strict = loose = False
    return RegistrationResult(estimated, inliers, iterations, e_r, e_t, strict, loose, failed)


def _canonical(src: np.ndarray, dst: np.ndarray):
    """Correspondences sorted by content, and a hash of that content."""
    keys = np.concatenate([dst, src], axis=1)
    order = np.lexsort(keys.T[::-1])
    src, dst = src[order], dst[order]
    h = hashlib.sha256(np.ascontiguousarray(src).tobytes() + np.ascontiguousarray(dst).tobytes()).digest()
    return src, dst, int.from_bytes(h[:8], "little")


def _distinct_triples(u: np.ndarray, n: int) -> np.ndarray:
    """Map uniforms (B, 3) to index triples without repetition."""
    i0 = np.minimum((u[:, 0] * n).astype(np.int64), n - 1)
    i1 = np.minimum((u[:, 1] * (n - 1)).astype(np.int64), n - 2)
    i1 = i1 + (i1 >= i0)
    lo, hi = np.minimum(i0, i1), np.maximum(i0, i1)
    i2 = np.minimum((u[:, 2] * (n - 2)).astype(np.int64), n - 3)
    i2 = i2 + (i2 >= lo)
    i2 = i2 + (i2 >= hi)
    return np.stack([i0, i1, i2], axis=1)


def _batched_kabsch(P: np.ndarray, Q: np.ndarray):
    """Rigid fits mapping P[b] onto Q[b] for a batch of 3-point samples; also a validity mask."""
    cp = P.mean(axis=1, keepdims=True)
    cq = Q.mean(axis=1, keepdims=True)
    H = np.einsum("bki,bkj->bij", P - cp, Q - cq)
    U, s, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("bji,bkj->bik", Vt, U)))
    d[d == 0] = 1.0
    D = np.ones((len(P), 3))
    D[:, 2] = d
    R = np.einsum("bji,bj,bkj->bik", Vt, D, U)
    t = cq[:, 0] - np.einsum("bij,bj->bi", R, cp[:, 0])
    ok = s[:, 1] > 1e-9 * np.maximum(s[:, 0], 1e-300)
    return R, t, ok


def required_iterations(inlier_ratio: float, confidence: float, sample_size: int = 3) -> float:
    """Iterations after which a sample of all inliers was drawn with probability ``confidence``."""
    w = inlier_ratio ** sample_size
    if w <= 0:
        return math.inf
    if w >= 1:
        return 0.0
    return math.log(1 - confidence) / math.log1p(-w)


def _required_iterations_many(ratio: np.ndarray, confidence: float) -> np.ndarray:
    """Vectorised :func:`required_iterations` for samples of three."""
    w = ratio ** 3
    out = np.full(len(w), np.inf)
    out[w >= 1] = 0.0
    mid = (w > 0) & (w < 1)
    out[mid] = math.log(1 - confidence) / np.log1p(-w[mid])
    return out


def ransac_register(correspondences: Correspondences, source: np.ndarray, target: np.ndarray,
                    max_iters: int = MAX_ITERS, inlier_radius: float = INLIER_RADIUS,
                    confidence: float = CONFIDENCE, seed: int = 0,
                    gt: RigidTransform | None = None) -> RegistrationResult:
    """Estimate the transform mapping ``target`` points onto ``source`` points.

    ``correspondences`` index ``source`` (``idx_a``) and ``target``
    (``idx_b``), so the estimate follows the ground-truth convention of
    :func:`simworld.sample_pcl_pair` (T's frame into S's frame). Hypotheses
    come from a random stream keyed to ``seed`` and the correspondence
    content, which makes the result independent of correspondence order.
    """
    if len(correspondences) < 3:
        raise NotEnoughMatchesError(f"RANSAC needs at least 3 correspondences, got {len(correspondences)}")
    if max_iters < 1 or not 0 < confidence < 1 or not inlier_radius > 0:
        raise InvalidArgumentError("need max_iters >= 1, 0 < confidence < 1 and a positive inlier radius")
    dst = np.asarray(source, dtype=np.float64)[correspondences.idx_a]
    src = np.asarray(target, dtype=np.float64)[correspondences.idx_b]
    src, dst, key = _canonical(src, dst)
    n = len(src)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), key]))
    r2 = inlier_radius * inlier_radius

    best_count, best_R, best_t = -1, np.eye(3), np.zeros(3)
    done = 0
    while done < max_iters:
        b = min(_CHUNK, max_iters - done)
        tri = _distinct_triples(rng.random((b, 3)), n)
        R, t, ok = _batched_kabsch(src[tri], dst[tri])
        moved = np.matmul(src, R.transpose(0, 2, 1)) + t[:, None, :]
        counts = np.count_nonzero(np.sum((moved - dst) ** 2, axis=2) <= r2, axis=1)
        counts[~ok] = -1
        # walk the chunk in order so the stopping point does not depend on chunking
        running = np.maximum.accumulate(np.maximum(counts, best_count))
        need = _required_iterations_many(np.maximum(running, 0) / n, confidence)
        stop = np.nonzero(done + np.arange(1, b + 1) >= need)[0]
        last = int(stop[0]) if len(stop) else b - 1
        seg = counts[: last + 1]
        k = int(np.argmax(seg))
        if seg[k] > best_count:
            best_count, best_R, best_t = int(seg[k]), R[k], t[k]
        done += last + 1
        if len(stop):
            break

    if best_count < 3:
        est = RigidTransform(best_R, best_t) if best_count >= 0 else RigidTransform.identity()
        return judge(est, gt, max(best_count, 0), done, failed=True)
    res = np.sum((src @ best_R.T + best_t - dst) ** 2, axis=1)
    inl = res <= r2
    try:
        est = kabsch_align(src[inl], dst[inl])
    except Exception:  # degenerate inlier set: keep the sampled hypothesis
        est = RigidTransform(best_R, best_t)
    final = int(np.count_nonzero(np.sum((est.apply(src) - dst) ** 2, axis=1) <= r2))
    return judge(est, gt, final, done)


# --- keypoints and the per-pair chain ----------------------------------------

@dataclass(frozen=True)
class RegistrationConfig:
    keypoint_voxel: float = 0.3
    min_height: float = 0.3
    min_scatter: float = 0.05
    min_linearity: float = 0.8
    max_keypoints: int = 3000
    max_iters: int = MAX_ITERS
    inlier_radius: float = INLIER_RADIUS
    confidence: float = CONFIDENCE

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def select_keypoints(cloud: PointCloud, descriptors: np.ndarray, cfg: RegistrationConfig = RegistrationConfig(),
                     seed: int = 0) -> np.ndarray:
    """Positions (into ``descriptors``) of salient points: off the ground and not planar.

    Flat ground and wall faces dominate a LiDAR scan, but their descriptors
    look alike everywhere and mostly encode the range to the sensor, so
    matching them pulls RANSAC toward the identity. Corners and clutter
    (large smallest eigenvalue) or line-like structure (poles, edges) are kept.
    """
    salient = (descriptors[:, 4] > cfg.min_height) & (
        (descriptors[:, 3] > cfg.min_scatter) | (descriptors[:, 1] > cfg.min_linearity))
    pos = np.nonzero(salient)[0]
    if len(pos) > cfg.max_keypoints:
        pick = np.random.default_rng(seed).choice(len(pos), size=cfg.max_keypoints, replace=False)
        pos = pos[np.sort(pick)]
    return pos


def describe(cloud: PointCloud, cfg: RegistrationConfig = RegistrationConfig(), seed: int = 0):
    """Keypoint indices (into ``cloud``) and their descriptors."""
    idx = voxel_sample_indices(cloud.points, cfg.keypoint_voxel)
    # the height test needs no neighbourhood, so apply it before the expensive part
    idx = idx[cloud.points[idx, 2] + simworld.SENSOR_HEIGHT > cfg.min_height]
    desc = feat.compute_descriptors(cloud, at=idx)
    pos = select_keypoints(cloud, desc, cfg, seed)
    return idx[pos], desc[pos]


def register_described(S: PointCloud, T: PointCloud, kp_S, desc_S, kp_T, desc_T, embedder: feat.Embedder,
                       cfg: RegistrationConfig = RegistrationConfig(), seed: int = 0,
                       gt: RigidTransform | None = None) -> RegistrationResult:
    if len(kp_S) == 0 or len(kp_T) == 0:
        raise NotEnoughMatchesError("no keypoints to match")
    m = match_features(embedder(desc_S), embedder(desc_T))
    matches = Correspondences(kp_S[m.idx_a], kp_T[m.idx_b], m.dist)
    return ransac_register(matches, S.points, T.points, cfg.max_iters, cfg.inlier_radius, cfg.confidence,
                           seed, gt)


def register_pair(S: PointCloud, T: PointCloud, embedder: feat.Embedder,
                  cfg: RegistrationConfig = RegistrationConfig(), seed: int = 0,
                  gt: RigidTransform | None = None) -> RegistrationResult:
    """Keypoints -> descriptors -> features -> mutual matching -> RANSAC."""
    kp_S, d_S = describe(S, cfg, seed)
    kp_T, d_T = describe(T, cfg, seed + 1)
    return register_described(S, T, kp_S, d_S, kp_T, d_T, embedder, cfg, seed, gt)


# --- benchmark ----------------------------------------------------------------

@dataclass(frozen=True)
class PairResult:
    bucket: str
    pair: int
    b: float
    overlap: float
    rre_deg: float
    rte_m: float
    success_strict: bool
    success_loose: bool
    inliers: int


@dataclass
class BenchmarkReport:
    buckets: list  # bucket labels, in order
    rr: dict  # label -> RR in percent (strict criterion)
    rr_loose: dict
    pairs: list = field(default_factory=list)
    seed: int = 0

    @property
    def mrr(self) -> float:
        return mean_rr([self.rr[b] for b in self.buckets])

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "buckets": self.buckets,
            "rr": self.rr,
            "rr_loose": self.rr_loose,
            "mrr": self.mrr,
            "pairs": [p.__dict__ for p in self.pairs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket", "b", "rre_deg", "rte_m", "success_strict", "success_loose", "inliers"])
        for p in self.pairs:
            w.writerow([p.bucket, repr(p.b), repr(p.rre_deg), repr(p.rte_m), int(p.success_strict),
                        int(p.success_loose), p.inliers])
        return buf.getvalue()


def mean_rr(values) -> float:
    """Arithmetic mean of bucket RRs."""
    values = [float(v) for v in values]
    if not values:
        raise InvalidArgumentError("mRR needs at least one bucket")
    return math.fsum(values) / len(values)


def bucket_label(bucket) -> str:
    b1, b2 = bucket
    return f"{b1:g}-{b2:g}"


def parse_buckets(text: str) -> list:
    out = []
    for part in text.split(","):
        try:
            a, b = part.strip().split("-")
            a, b = float(a), float(b)
        except ValueError:
            raise InvalidArgumentError(f"bad bucket {part!r}; expected e.g. 5-10") from None
        if not 0 <= a <= b:
            raise InvalidArgumentError(f"bad bucket {part!r}; need 0 <= b1 <= b2")
        out.append((a, b))
    if not out:
        raise InvalidArgumentError("no buckets given")
    return out


def _pair_seed(seed: int, bucket_index: int, attempt: int) -> int:
    ss = np.random.SeedSequence([int(seed) & (2**63 - 1), bucket_index, attempt])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def benchmark_pair(seed: int, bucket_index: int, attempt: int, bucket, lidar: simworld.LidarModel):
    """The scan pair for one benchmark slot: a fresh scene and a pair drawn in ``bucket``."""
    ps = _pair_seed(seed, bucket_index, attempt)
    scene = simworld.generate_scene(ps)
    S, T, gt = simworld.sample_pcl_pair(scene, lidar, bucket[0], bucket[1], ps)
    return S, T, gt


def _evaluate_slot(args):
    embedders, cfg, seed, bi, attempt, bucket, lidar, low_overlap_only = args
    S, T, gt = benchmark_pair(seed, bi, attempt, bucket, lidar)
    ov = corr.overlap_ratio(S, T, gt)
    if low_overlap_only and ov > LOW_OVERLAP:
        return None
    b = float(np.linalg.norm(gt.translation))
    pseed = _pair_seed(seed, bi, attempt)
    kp_S, d_S = describe(S, cfg, pseed)
    kp_T, d_T = describe(T, cfg, pseed + 1)
    out = []
    for emb in embedders:
        try:
            r = register_described(S, T, kp_S, d_S, kp_T, d_T, emb, cfg, pseed, gt)
        except NotEnoughMatchesError:
            r = judge(RigidTransform.identity(), gt, 0, 0, failed=True)
        out.append(PairResult(bucket_label(bucket), attempt, b, ov, r.rre_deg, r.rte_m,
                              r.success_strict, r.success_loose, r.inliers))
    return out


def evaluate_benchmarks(embedders: list, pairs_per_bucket: int, seed: int = 0, buckets=DEFAULT_BUCKETS,
                        cfg: RegistrationConfig = RegistrationConfig(), lidar: simworld.LidarModel | None = None,
                        low_overlap_only: bool = False, max_attempts_factor: int = 20) -> list:
    """One :class:`BenchmarkReport` per embedder, all on the very same scan pairs.

    With ``low_overlap_only`` pairs above 30 % overlap are redrawn, up to
    ``max_attempts_factor * pairs_per_bucket`` draws per bucket; a bucket
    that yields no qualifying pair reports RR = NaN.
    """
    if pairs_per_bucket < 1:
        raise InvalidArgumentError("pairs_per_bucket must be >= 1")
    lidar = lidar or simworld.LidarModel()
    buckets = [tuple(map(float, b)) for b in buckets]
    per = [[] for _ in embedders]
    workers = thread_cap()
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for bi, bucket in enumerate(buckets):
            limit = pairs_per_bucket * (max_attempts_factor if low_overlap_only else 1)
            found = 0
            attempt = 0
            while found < pairs_per_bucket and attempt < limit:
                n = min(max(workers, pairs_per_bucket - found), limit - attempt) if pool else 1
                jobs = [(embedders, cfg, seed, bi, a, bucket, lidar, low_overlap_only)
                        for a in range(attempt, attempt + n)]
                results = pool.map(_evaluate_slot, jobs) if pool else map(_evaluate_slot, jobs)
                for res in results:
                    if res is None or found >= pairs_per_bucket:
                        continue
                    found += 1
                    for k, pr in enumerate(res):
                        per[k].append(pr)
                attempt += n
    finally:
        if pool:
            pool.shutdown()
    reports = []
    for pairs in per:
        rr, rr_loose = {}, {}
        for bucket in buckets:
            label = bucket_label(bucket)
            rows = [p for p in pairs if p.bucket == label]
            rr[label] = 100.0 * sum(p.success_strict for p in rows) / len(rows) if rows else math.nan
            rr_loose[label] = 100.0 * sum(p.success_loose for p in rows) / len(rows) if rows else math.nan
        reports.append(BenchmarkReport([bucket_label(b) for b in buckets], rr, rr_loose, pairs, seed))
    return reports


def evaluate_benchmark(embedder: feat.Embedder, pairs_per_bucket: int, seed: int = 0, buckets=DEFAULT_BUCKETS,
                       **kw) -> BenchmarkReport:
    return evaluate_benchmarks([embedder], pairs_per_bucket, seed, buckets, **kw)[0]
