"""Synthetic road scenes and a spinning multi-beam LiDAR ray caster.

The road runs along the world x axis with the ground at z = 0 and roadside
walls at y = +h and y = -h. Sensors sit on the road axis at ``SENSOR_HEIGHT``.
Because every beam covers a fixed solid angle, the number of returns from a
surface patch falls off with the inverse square of its range.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .geom import PointCloud, RigidTransform

SENSOR_HEIGHT = 1.73
NEIGHBOR_SPAN = 60.0
DEFAULT_PHI = 6


@dataclass(frozen=True)
class Wall:
    """Vertical wall in the plane y = ``y`` spanning x in [x0, x1], z in [0, height]."""

    x0: float
    x1: float
    y: float
    height: float


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple


@dataclass(frozen=True)
class Pole:
    x: float
    y: float
    radius: float
    height: float


@dataclass(frozen=True)
class Scene:
    walls: tuple = ()
    boxes: tuple = ()
    poles: tuple = ()
    lateral_offset: float = 10.0

    def __post_init__(self):
        for b in self.boxes:
            if b.lo[2] < 0:
                raise InvalidArgumentError("boxes must sit above the ground plane")
        for w in self.walls:
            if w.height <= 0 or w.x1 <= w.x0:
                raise InvalidArgumentError("walls need positive height and length")
        for p in self.poles:
            if p.radius <= 0 or p.height <= 0:
                raise InvalidArgumentError("poles need positive radius and height")

    def to_dict(self) -> dict:
        return {
            "lateral_offset": self.lateral_offset,
            "walls": [asdict(w) for w in self.walls],
            "boxes": [{"lo": list(b.lo), "hi": list(b.hi)} for b in self.boxes],
            "poles": [asdict(p) for p in self.poles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            walls=tuple(Wall(**w) for w in d.get("walls", [])),
            boxes=tuple(Box(tuple(b["lo"]), tuple(b["hi"])) for b in d.get("boxes", [])),
            poles=tuple(Pole(**p) for p in d.get("poles", [])),
            lateral_offset=float(d.get("lateral_offset", 10.0)),
        )


def generate_scene(seed: int, lateral_offset: float | None = None, extent: float = 200.0) -> Scene:
    """Random straight-road scene: broken roadside walls, parked boxes and poles."""
    rng = np.random.default_rng(seed)
    h = float(rng.uniform(7.0, 12.0)) if lateral_offset is None else float(lateral_offset)
    walls, boxes, poles = [], [], []
    for side in (1.0, -1.0):
        x = -extent + rng.uniform(0.0, 5.0)
        while x < extent:
            length = rng.uniform(8.0, 40.0)
            walls.append(Wall(x, min(x + length, extent), side * h, rng.uniform(2.5, 8.0)))
            x += length + rng.uniform(1.0, 8.0)
        x = -extent + rng.uniform(0.0, 10.0)
        while x < extent:
            length, width, height = rng.uniform(3.5, 5.0), rng.uniform(1.6, 2.0), rng.uniform(1.3, 2.2)
            yc = side * (h - rng.uniform(1.5, 3.0))
            boxes.append(Box((x, yc - width / 2, 0.0), (x + length, yc + width / 2, height)))
            x += length + rng.uniform(4.0, 25.0)
        x = -extent + rng.uniform(0.0, 10.0)
        while x < extent:
            poles.append(Pole(x, side * (h - rng.uniform(0.4, 1.2)), rng.uniform(0.1, 0.3), rng.uniform(3.0, 9.0)))
            x += rng.uniform(8.0, 25.0)
    return Scene(tuple(walls), tuple(boxes), tuple(poles), h)


@dataclass(frozen=True)
class LidarModel:
    beams: int = 32
    azimuth_steps: int = 720
    elevation_min: float = -25.0
    elevation_max: float = 5.0
    max_range: float = 80.0
    range_noise_sigma: float = 0.02

    def __post_init__(self):
        if self.beams < 1 or self.azimuth_steps < 8 or not self.max_range > 0 or self.range_noise_sigma < 0:
            raise InvalidArgumentError(f"invalid LiDAR model {self}")
        if self.elevation_max < self.elevation_min:
            raise InvalidArgumentError("elevation_max must be >= elevation_min")

    def elevations(self) -> np.ndarray:
        """Beam elevations in radians, ascending."""
        if self.beams == 1:
            return np.radians([self.elevation_min])
        return np.radians(np.linspace(self.elevation_min, self.elevation_max, self.beams))

    def ray_directions(self, azimuth_phase: float = 0.0) -> np.ndarray:
        """Unit ray directions in the sensor frame, beam-major order."""
        el = self.elevations()
        az = 2.0 * np.pi * (np.arange(self.azimuth_steps) + azimuth_phase) / self.azimuth_steps
        ce, se = np.cos(el)[:, None], np.sin(el)[:, None]
        d = np.stack([ce * np.cos(az), ce * np.sin(az), np.broadcast_to(se, (len(el), len(az)))], axis=-1)
        return d.reshape(-1, 3)


def truncated_normal(rng: np.random.Generator, sigma: float, n: int, clip: float = 3.0) -> np.ndarray:
    """Gaussian(0, sigma) samples redrawn until they fall within ``clip`` sigma."""
    out = rng.normal(0.0, sigma, n) if sigma > 0 else np.zeros(n)
    if sigma > 0:
        bad = np.abs(out) > clip * sigma
        while bad.any():
            out[bad] = rng.normal(0.0, sigma, int(bad.sum()))
            bad = np.abs(out) > clip * sigma
    return out


def cast_rays(scene: Scene, origin, dirs: np.ndarray, max_range: float = np.inf) -> np.ndarray:
    """Distance along each unit ray to the first scene surface (``inf`` on a miss)."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    best = np.full(len(d), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        down = d[:, 2] < 0
        best[down] = -o[2] / d[down, 2]
        best[best <= 0] = np.inf

        reach = max_range + 1.0
        walls = [w for w in scene.walls if _seg_dist(o, w) <= reach]
        if walls:
            wx0 = np.array([w.x0 for w in walls])
            wx1 = np.array([w.x1 for w in walls])
            wy = np.array([w.y for w in walls])
            wh = np.array([w.height for w in walls])
            t = (wy[None, :] - o[1]) / d[:, 1:2]
            x = o[0] + t * d[:, 0:1]
            z = o[2] + t * d[:, 2:3]
            ok = (t > 0) & (x >= wx0) & (x <= wx1) & (z >= 0) & (z <= wh)
            best = np.minimum(best, np.where(ok, t, np.inf).min(axis=1))

        boxes = [b for b in scene.boxes if _box_dist(o, b) <= reach]
        if boxes:
            lo = np.array([b.lo for b in boxes])
            hi = np.array([b.hi for b in boxes])
            dd = np.where(d == 0, 1e-300, d)
            t1 = (lo[None, :, :] - o) / dd[:, None, :]
            t2 = (hi[None, :, :] - o) / dd[:, None, :]
            tmin = np.minimum(t1, t2).max(axis=2)
            tmax = np.maximum(t1, t2).min(axis=2)
            ok = (tmax >= tmin) & (tmin > 0)
            best = np.minimum(best, np.where(ok, tmin, np.inf).min(axis=1))

        poles = [p for p in scene.poles if math.hypot(p.x - o[0], p.y - o[1]) - p.radius <= reach]
        if poles:
            cx = np.array([p.x for p in poles])
            cy = np.array([p.y for p in poles])
            rad = np.array([p.radius for p in poles])
            ph = np.array([p.height for p in poles])
            ox, oy = o[0] - cx, o[1] - cy
            a = (d[:, 0] ** 2 + d[:, 1] ** 2)[:, None]
            bq = d[:, 0:1] * ox + d[:, 1:2] * oy
            c = ox ** 2 + oy ** 2 - rad ** 2
            disc = bq ** 2 - a * c
            t = (-bq - np.sqrt(np.where(disc >= 0, disc, 0.0))) / a
            z = o[2] + t * d[:, 2:3]
            ok = (disc >= 0) & (a > 0) & (t > 0) & (z >= 0) & (z <= ph)
            best = np.minimum(best, np.where(ok, t, np.inf).min(axis=1))
    return best


def _seg_dist(o, w: Wall) -> float:
    dx = max(w.x0 - o[0], 0.0, o[0] - w.x1)
    return math.hypot(dx, w.y - o[1])


def _box_dist(o, b: Box) -> float:
    dx = max(b.lo[0] - o[0], 0.0, o[0] - b.hi[0])
    dy = max(b.lo[1] - o[1], 0.0, o[1] - b.hi[1])
    return math.hypot(dx, dy)


def render_scan(scene: Scene, lidar: LidarModel, pose: RigidTransform, seed: int, frame_id: int = 0) -> PointCloud:
    """One LiDAR revolution from ``pose`` (sensor -> world), returned in the sensor frame.

    Each (beam, azimuth) cell fires one ray; the revolution's azimuth phase
    and the range noise are drawn from ``seed``.
    """
    rng = np.random.default_rng(seed)
    phase = rng.random()
    dirs = lidar.ray_directions(phase)
    t = cast_rays(scene, pose.translation, dirs @ pose.rotation.T, lidar.max_range)
    hit = t <= lidar.max_range
    rng_t = t[hit] + truncated_normal(rng, lidar.range_noise_sigma, int(hit.sum()))
    return PointCloud(dirs[hit] * rng_t[:, None], frame_id=frame_id)


def road_pose(offset: float = 0.0, yaw: float = 0.0, lateral: float = 0.0) -> RigidTransform:
    """Sensor pose on the road: ``offset`` meters along the axis, heading rotated by ``yaw`` rad."""
    return RigidTransform.from_yaw(yaw, (offset, lateral, SENSOR_HEIGHT))


@dataclass(frozen=True, eq=False)
class ScanScenario:
    scene: Scene
    lidar: LidarModel
    central_pose: RigidTransform
    neighbor_poses: tuple
    seed: int

    def __post_init__(self):
        for p in self.neighbor_poses:
            off = p.translation[0] - self.central_pose.translation[0]
            if not -NEIGHBOR_SPAN <= off <= NEIGHBOR_SPAN:
                raise InvalidArgumentError(f"neighbor offset {off:.3f} m outside [-60, 60]")

    @property
    def phi(self) -> int:
        return len(self.neighbor_poses)

    def relative_poses(self) -> list:
        """Neighbor sensor frames expressed in the central sensor frame."""
        inv = self.central_pose.inverse()
        return [inv @ p for p in self.neighbor_poses]

    def render(self) -> tuple[PointCloud, list]:
        """Render the central scan and every neighbor scan (frame ids 0..phi)."""
        seeds = np.random.SeedSequence(self.seed).spawn(self.phi + 1)
        clouds = [
            render_scan(self.scene, self.lidar, pose, int(s.generate_state(1)[0]), frame_id=k)
            for k, (pose, s) in enumerate(zip((self.central_pose, *self.neighbor_poses), seeds))
        ]
        return clouds[0], clouds[1:]

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "lidar": asdict(self.lidar),
            "central_pose": self.central_pose.to_list(),
            "neighbor_poses": [p.to_list() for p in self.neighbor_poses],
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanScenario":
        return cls(
            Scene.from_dict(d["scene"]),
            LidarModel(**d["lidar"]),
            RigidTransform.from_matrix(d["central_pose"]),
            tuple(RigidTransform.from_matrix(m) for m in d["neighbor_poses"]),
            int(d["seed"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ScanScenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sample_neighborhood(scene: Scene, lidar: LidarModel, central_pose: RigidTransform | None = None,
                        phi: int = DEFAULT_PHI, seed: int = 0, yaw_jitter_deg: float = 5.0) -> ScanScenario:
    """Split [-60, 60] m along the road into ``phi`` segments and place one neighbor uniformly in each."""
    if phi < 1:
        raise InvalidArgumentError(f"phi must be >= 1, got {phi}")
    central_pose = road_pose() if central_pose is None else central_pose
    rng = np.random.default_rng(seed)
    width = 2 * NEIGHBOR_SPAN / phi
    poses = []
    for k in range(phi):
        off = rng.uniform(-NEIGHBOR_SPAN + k * width, -NEIGHBOR_SPAN + (k + 1) * width)
        yaw = math.radians(rng.uniform(-yaw_jitter_deg, yaw_jitter_deg)) if yaw_jitter_deg > 0 else 0.0
        t = central_pose.translation + np.array([off, 0.0, 0.0])
        poses.append(RigidTransform(RigidTransform.from_yaw(yaw).rotation @ central_pose.rotation, t))
    return ScanScenario(scene, lidar, central_pose, tuple(poses), seed)


def sample_pair_scenario(scene: Scene, lidar: LidarModel, b1: float, b2: float, n_pairs: int = DEFAULT_PHI,
                         seed: int = 0, central_pose: RigidTransform | None = None,
                         yaw_jitter_deg: float = 5.0) -> ScanScenario:
    """A central scan plus ``n_pairs`` partners, each ``b ~ U[b1, b2]`` m away in a random direction.

    Each (central, partner) pair follows the :func:`sample_pcl_pair`
    protocol; sharing the central scan lets pair-wise training reuse the
    scenario machinery.
    """
    if not 0 <= b1 <= b2:
        raise InvalidArgumentError(f"need 0 <= b1 <= b2, got [{b1}, {b2}]")
    if n_pairs < 1:
        raise InvalidArgumentError("need at least one pair")
    central_pose = road_pose() if central_pose is None else central_pose
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(n_pairs):
        b = b1 if b1 == b2 else float(rng.uniform(b1, b2))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        yaw = math.radians(rng.uniform(-yaw_jitter_deg, yaw_jitter_deg)) if yaw_jitter_deg > 0 else 0.0
        t = central_pose.translation + np.array([sign * b, 0.0, 0.0])
        poses.append(RigidTransform(RigidTransform.from_yaw(yaw).rotation @ central_pose.rotation, t))
    return ScanScenario(scene, lidar, central_pose, tuple(poses), seed)


def neighbor_offsets(scenario: ScanScenario) -> np.ndarray:
    return np.array([p.translation[0] - scenario.central_pose.translation[0] for p in scenario.neighbor_poses])


def sample_pcl_pair(scene: Scene, lidar: LidarModel, b1: float, b2: float, seed: int,
                    central_pose: RigidTransform | None = None,
                    yaw_jitter_deg: float = 0.0) -> tuple[PointCloud, PointCloud, RigidTransform]:
    """Render a scan pair whose sensors are ``b`` ~ U[b1, b2] meters apart along the road.

    Returns ``(S, T, gt)`` where ``gt`` maps points of T's frame into S's frame.
    """
    if not 0 <= b1 <= b2:
        raise InvalidArgumentError(f"need 0 <= b1 <= b2, got [{b1}, {b2}]")
    central_pose = road_pose() if central_pose is None else central_pose
    rng = np.random.default_rng(seed)
    b = b1 if b1 == b2 else float(rng.uniform(b1, b2))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    yaw = math.radians(rng.uniform(-yaw_jitter_deg, yaw_jitter_deg)) if yaw_jitter_deg > 0 else 0.0
    s_seed, t_seed = (int(v) for v in rng.integers(0, 2**63 - 1, size=2))
    t_pose = RigidTransform(
        RigidTransform.from_yaw(yaw).rotation @ central_pose.rotation,
        central_pose.translation + np.array([sign * b, 0.0, 0.0]),
    )
    S = render_scan(scene, lidar, central_pose, s_seed, frame_id=0)
    T = render_scan(scene, lidar, t_pose, t_seed, frame_id=1)
    return S, T, central_pose.inverse() @ t_pose
