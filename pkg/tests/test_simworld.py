import math

import numpy as np
import pytest
from scipy import stats

from gclkit.errors import InvalidArgumentError
from gclkit.geom import RigidTransform
from gclkit.simworld import (Box, LidarModel, ScanScenario, Scene, Wall, cast_rays, generate_scene, neighbor_offsets,
                             render_scan, road_pose, sample_neighborhood, sample_pair_scenario, sample_pcl_pair)

NOISELESS = LidarModel(range_noise_sigma=0.0)


def test_ground_hits_match_ray_plane_intersection():
    pose = RigidTransform.from_yaw(0.3, (5.0, -2.0, 2.0))
    cloud = render_scan(Scene(), NOISELESS, pose, seed=4)
    el = NOISELESS.elevations()
    reach = el[(el < 0)]
    reach = reach[2.0 / np.sin(-reach) <= NOISELESS.max_range]
    assert len(cloud) == len(reach) * NOISELESS.azimuth_steps
    p = cloud.points
    assert np.max(np.abs(p[:, 2] + 2.0)) < 1e-12
    # each point is where its ray meets z = -2: range = 2 / sin(-elevation)
    r = np.linalg.norm(p, axis=1)
    sin_el = -p[:, 2] / r
    assert np.allclose(r, 2.0 / sin_el, rtol=1e-12)
    observed = np.unique(np.round(np.degrees(np.arcsin(p[:, 2] / r)), 9))
    assert np.allclose(observed, np.round(np.degrees(reach), 9))


def _patch_scene(r, z0, x0=-1.0, size=2.0):
    return Scene(boxes=(Box((x0, r, z0), (x0 + size, r + 0.05, z0 + size)),))


def _patch_hits(r, seed, beam_pitch):
    rng = np.random.default_rng(seed)
    z0 = 0.3 + rng.uniform(0.0, beam_pitch * r)
    x0 = -1.0 + rng.uniform(-0.5, 0.5)
    cloud = render_scan(_patch_scene(r, z0, x0), NOISELESS, road_pose(), seed)
    p = cloud.points
    on_patch = (np.abs(p[:, 1] - r) < 0.01) & (p[:, 2] > -1.5)  # sensor frame: ground is z = -1.73
    return int(np.sum(on_patch))


def test_wall_patch_hit_ratio_10_vs_20m():
    pitch = math.radians(30.0 / 31)
    near = sum(_patch_hits(10.0, s, pitch) for s in range(20))
    far = sum(_patch_hits(20.0, s, pitch) for s in range(20))
    assert 3.5 <= near / far <= 4.5


def test_density_falls_off_as_inverse_square():
    pitch = math.radians(30.0 / 31)
    ref = None
    for r in (10.0, 20.0, 30.0, 40.0, 50.0):
        scaled = np.mean([_patch_hits(r, s, pitch) for s in range(100)]) * r * r
        ref = scaled if ref is None else ref
        assert 0.8 <= scaled / ref <= 1.25, r


def test_render_is_deterministic_and_seed_sensitive():
    scene = generate_scene(3)
    a = render_scan(scene, LidarModel(), road_pose(), 11)
    b = render_scan(scene, LidarModel(), road_pose(), 11)
    c = render_scan(scene, LidarModel(), road_pose(), 12)
    assert np.array_equal(a.points, b.points)
    assert len(a) != len(c) or not np.array_equal(a.points, c.points)


def test_points_within_max_range():
    lidar = LidarModel(max_range=30.0, range_noise_sigma=0.05)
    cloud = render_scan(generate_scene(1), lidar, road_pose(), 0)
    assert len(cloud) > 1000
    assert np.max(np.linalg.norm(cloud.points, axis=1)) <= 30.0 + 5 * 0.05


def test_noise_is_bounded_along_ray():
    lidar = LidarModel(range_noise_sigma=0.02)
    scene = Scene()
    clean = render_scan(scene, NOISELESS, road_pose(), 5)
    noisy = render_scan(scene, lidar, road_pose(), 5)
    assert len(clean) == len(noisy)
    dr = np.linalg.norm(noisy.points, axis=1) - np.linalg.norm(clean.points, axis=1)
    assert np.max(np.abs(dr)) <= 3 * 0.02 + 1e-12
    assert 0.01 < np.std(dr) < 0.03


def test_cast_rays_hits_wall_and_misses_outside():
    scene = Scene(walls=(Wall(-5.0, 5.0, 10.0, 3.0),))
    d = np.array([[0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0]])
    t = cast_rays(scene, (0.0, 0.0, 1.0), d)
    assert t[0] == pytest.approx(10.0) and math.isinf(t[1]) and math.isinf(t[2])


def test_scene_invariants():
    s = generate_scene(0)
    ys = {w.y for w in s.walls}
    assert len(s.walls) >= 2 and min(ys) < 0 < max(ys)
    assert all(b.lo[2] >= 0 for b in s.boxes)
    with pytest.raises(InvalidArgumentError):
        Scene(boxes=(Box((0, 0, -1), (1, 1, 1)),))


def test_lidar_model_validation():
    for bad in (dict(beams=0), dict(azimuth_steps=4), dict(max_range=0.0), dict(range_noise_sigma=-1.0)):
        with pytest.raises(InvalidArgumentError):
            LidarModel(**bad)


# --- neighbourhoods ---------------------------------------------------------

def test_phi_two_segments():
    for seed in range(50):
        off = neighbor_offsets(sample_neighborhood(generate_scene(0), LidarModel(), phi=2, seed=seed))
        assert -60 <= off[0] < 0 <= off[1] <= 60


def test_phi_zero_rejected():
    with pytest.raises(InvalidArgumentError):
        sample_neighborhood(generate_scene(0), LidarModel(), phi=0)


def test_segment_offsets_are_uniform():
    scene = generate_scene(0)
    offs = np.array([neighbor_offsets(sample_neighborhood(scene, LidarModel(), phi=6, seed=s)) for s in range(1000)])
    for k in range(6):
        lo = -60 + 20 * k
        u = (offs[:, k] - lo) / 20.0
        assert np.all((u >= 0) & (u <= 1))
        assert stats.kstest(u, "uniform").pvalue > 0.01, k


def test_neighborhood_determinism_and_round_trip(tmp_path):
    scene = generate_scene(2)
    a = sample_neighborhood(scene, LidarModel(), phi=6, seed=9)
    b = sample_neighborhood(scene, LidarModel(), phi=6, seed=9)
    assert [p.matrix().tolist() for p in a.neighbor_poses] == [p.matrix().tolist() for p in b.neighbor_poses]
    a.save(tmp_path / "s.json")
    back = ScanScenario.load(tmp_path / "s.json")
    assert back.to_dict() == a.to_dict()
    assert back.scene == a.scene and back.lidar == a.lidar


def test_neighbor_offsets_outside_span_rejected():
    with pytest.raises(InvalidArgumentError):
        ScanScenario(Scene(), LidarModel(), road_pose(), (road_pose(61.0),), 0)


def test_pair_scenario_offsets():
    scen = sample_pair_scenario(generate_scene(0), LidarModel(), 5.0, 20.0, n_pairs=50, seed=1)
    b = np.abs(neighbor_offsets(scen))
    assert np.all((b >= 5) & (b <= 20))
    with pytest.raises(InvalidArgumentError):
        sample_pair_scenario(generate_scene(0), LidarModel(), 20.0, 5.0)


# --- PCL pairs ----------------------------------------------------------------

def test_concentric_pair_has_identity_ground_truth():
    S, T, gt = sample_pcl_pair(generate_scene(0), LidarModel(), 0.0, 0.0, seed=1)
    assert np.array_equal(gt.matrix(), np.eye(4))
    assert len(S) > 0 and len(T) > 0


def test_pair_separation_in_bucket():
    for seed in range(20):
        _, _, gt = sample_pcl_pair(generate_scene(seed), LidarModel(beams=4, azimuth_steps=16), 40.0, 50.0, seed)
        assert 40.0 <= np.linalg.norm(gt.translation) <= 50.0


def test_pair_ground_truth_aligns_scans():
    from gclkit.corr import overlap_ratio
    from gclkit.geom import PointCloud
    scene = generate_scene(4)
    S, T, gt = sample_pcl_pair(scene, NOISELESS, 10.0, 10.0, seed=3)
    # the ground ring around each sensor looks the same in every scan, so compare above-ground structure
    above = lambda c: PointCloud(c.points[c.points[:, 2] > -1.5])
    S, T = above(S), above(T)
    assert overlap_ratio(S, T, gt) > 0.3
    assert overlap_ratio(S, T, gt) > overlap_ratio(S, T, RigidTransform.identity()) + 0.1


def test_pair_is_reproducible_and_validated():
    scene = generate_scene(0)
    a = sample_pcl_pair(scene, LidarModel(), 5, 10, seed=7)
    b = sample_pcl_pair(scene, LidarModel(), 5, 10, seed=7)
    assert np.array_equal(a[0].points, b[0].points) and np.array_equal(a[1].points, b[1].points)
    assert np.array_equal(a[2].matrix(), b[2].matrix())
    with pytest.raises(InvalidArgumentError):
        sample_pcl_pair(scene, LidarModel(), 10, 5, seed=0)
