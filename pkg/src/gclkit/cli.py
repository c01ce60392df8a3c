"""``gclkit`` command line: simulate, train, register, eval, analyze.

Exit codes: 0 success, 2 input/config error, 3 training failure,
4 empty result.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, corr, feat, pipeline, simworld, train
from .errors import GCLError, InvalidArgumentError, NotEnoughMatchesError, TrainingFailedError
from .geom import PointCloud, RigidTransform, read_bin, read_csv, write_bin

log = logging.getLogger("gclkit")

EXIT_OK, EXIT_INPUT, EXIT_TRAIN, EXIT_EMPTY = 0, 2, 3, 4
DRIFT_EDGES = (0, 10, 20, 40, 80)


class InputError(Exception):
    """Bad command-line input; maps to exit code 2."""


class EmptyResult(Exception):
    """Nothing to report; maps to exit code 4."""


# --- output helpers -----------------------------------------------------------

def write_atomic(path: Path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_manifest(out: Path, command: str, config: dict, seed: int, artifacts: list, started: float) -> None:
    """Record the resolved run; every field except ``wall_clock_s`` is deterministic."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": sorted(str(Path(a).name) for a in artifacts),
        "tool_version": __version__,
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    write_atomic(out / "manifest.json", dump_json(manifest))


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise InputError(f"config {path} must hold a JSON object")
    return data


def read_cloud(path, frame_id: int = 0) -> PointCloud:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such point cloud file: {p}")
    try:
        return read_csv(p, frame_id) if p.suffix.lower() == ".csv" else read_bin(p, frame_id)
    except (ValueError, OSError) as e:
        raise InputError(f"cannot read point cloud {p}: {e}") from None


def load_embedder(path) -> feat.Embedder:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such checkpoint: {p}")
    try:
        return feat.Embedder.load(p)
    except (ValueError, KeyError, TypeError) as e:
        raise InputError(f"cannot read checkpoint {p}: {e}") from None


def svg_scatter(x, y, xlabel: str, ylabel: str, title: str = "") -> str:
    """Minimal deterministic SVG scatter plot."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    W, H, M = 480, 480, 50
    lo = min(x.min(), y.min(), 0.0) if len(x) else 0.0
    hi = max(x.max(), y.max(), 1.0) if len(x) else 1.0
    sx = lambda v: M + (v - lo) / (hi - lo) * (W - 2 * M)
    sy = lambda v: H - M - (v - lo) / (hi - lo) * (H - 2 * M)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             f'<rect x="{M}" y="{M}" width="{W - 2 * M}" height="{H - 2 * M}" fill="none" stroke="black"/>',
             f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle">{xlabel}</text>',
             f'<text x="15" y="{H / 2}" transform="rotate(-90 15 {H / 2})" text-anchor="middle">{ylabel}</text>',
             f'<text x="{W / 2}" y="25" text-anchor="middle">{title}</text>']
    step = max(1, len(x) // 20000)
    for a, b in zip(x[::step], y[::step]):
        parts.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="1" fill="steelblue" fill-opacity="0.4"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- commands -------------------------------------------------------------------

def cmd_simulate(args) -> list:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    phi = args.phi if args.phi is not None else int(cfg.get("phi", simworld.DEFAULT_PHI))
    try:
        lidar = simworld.LidarModel(**cfg.get("lidar", {}))
        scene_seed = int(cfg.get("scene_seed", seed))
        scene = simworld.generate_scene(scene_seed, cfg.get("lateral_offset"))
        scenario = simworld.sample_neighborhood(scene, lidar, phi=phi, seed=seed,
                                                yaw_jitter_deg=float(cfg.get("yaw_jitter_deg", 5.0)))
    except TypeError as e:
        raise InputError(f"bad simulate config: {e}") from None
    central, neighbors = scenario.render()
    out = Path(args.out)
    files = []
    for k, cloud in enumerate([central] + neighbors):
        path = out / f"scan_{k:03d}.bin"
        tmp = out / f".scan_{k:03d}.bin.tmp"
        out.mkdir(parents=True, exist_ok=True)
        write_bin(tmp, cloud)
        os.replace(tmp, path)
        files.append(path)
    poses = {
        "frames": [f.name for f in files],
        "relative_poses": [RigidTransform.identity().to_list()] + [p.to_list() for p in scenario.relative_poses()],
        "scenario": scenario.to_dict(),
    }
    write_atomic(out / "poses.json", dump_json(poses))
    files.append(out / "poses.json")
    resolved = {"seed": seed, "scene_seed": scene_seed, "phi": phi, "lidar": lidar.__dict__,
                "lateral_offset": scene.lateral_offset}
    return [("simulate", resolved, seed, files)]


def _train_config(args) -> train.TrainConfig:
    cfg = load_config(args.config)
    for key, val in (("mode", args.mode), ("seed", args.seed), ("phi", args.phi), ("steps", args.steps)):
        if val is not None:
            cfg[key] = val
    try:
        return train.TrainConfig.from_dict(cfg)
    except TypeError as e:
        raise InputError(f"bad train config: {e}") from None


def cmd_train(args) -> list:
    tc = _train_config(args)
    out = Path(args.out)
    report = train.train(tc)
    ckpt = out / "checkpoint.json"
    write_atomic(ckpt, dump_json(report.embedder.to_dict()))
    write_atomic(out / "loss.csv", report.trace_csv())
    summary = report.to_dict()
    summary.pop("embedder")
    write_atomic(out / "train_report.json", dump_json(summary))
    write_atomic(out / "train_config.json", dump_json(tc.to_dict()))
    files = [ckpt, out / "loss.csv", out / "train_report.json", out / "train_config.json"]
    return [("train", tc.to_dict(), tc.seed, files)]


def cmd_register(args) -> list:
    emb = load_embedder(args.checkpoint)
    S = read_cloud(args.cloud_a, 0)
    T = read_cloud(args.cloud_b, 1)
    gt = None
    if args.gt is not None:
        try:
            gt = RigidTransform.from_matrix(np.array(json.loads(Path(args.gt).read_text())))
        except (OSError, ValueError) as e:
            raise InputError(f"cannot read ground truth {args.gt}: {e}") from None
    seed = args.seed if args.seed is not None else 0
    try:
        res = pipeline.register_pair(S, T, emb, seed=seed, gt=gt)
    except NotEnoughMatchesError as e:
        raise EmptyResult(str(e)) from None
    text = dump_json(res.to_dict())
    if args.out:
        out = Path(args.out)
        write_atomic(out / "registration.json", text)
        return [("register", {"cloud_a": str(args.cloud_a), "cloud_b": str(args.cloud_b),
                              "checkpoint": str(args.checkpoint)}, seed, [out / "registration.json"])]
    sys.stdout.write(text)
    return []


def cmd_eval(args) -> list:
    emb = load_embedder(args.checkpoint)
    buckets = pipeline.parse_buckets(args.buckets) if args.buckets else list(pipeline.DEFAULT_BUCKETS)
    seed = args.seed if args.seed is not None else 0
    report = pipeline.evaluate_benchmark(emb, args.pairs_per_bucket, seed, buckets,
                                         low_overlap_only=args.low_overlap_only)
    out = Path(args.out)
    write_atomic(out / "benchmark.json", report.to_json())
    write_atomic(out / "pairs.csv", report.to_csv())
    resolved = {"checkpoint": str(args.checkpoint), "buckets": [list(b) for b in buckets],
                "pairs_per_bucket": args.pairs_per_bucket, "low_overlap_only": args.low_overlap_only}
    return [("eval", resolved, seed, [out / "benchmark.json", out / "pairs.csv"])]


def _load_scan_dir(path):
    d = Path(path)
    meta = d / "poses.json"
    if not meta.is_file():
        raise InputError(f"{d} holds no poses.json; run `gclkit simulate` first")
    info = json.loads(meta.read_text())
    clouds = [read_cloud(d / name, k) for k, name in enumerate(info["frames"])]
    poses = [RigidTransform.from_matrix(np.array(m)) for m in info["relative_poses"]]
    return clouds, poses


def cmd_analyze(args) -> list:
    out = Path(args.out)
    files = []
    resolved = {"mode": args.mode}
    if args.mode == "u-curve":
        if args.h is None or args.b is None:
            raise InputError("u-curve needs --h and --b")
        x_max = args.x_max
        xs = np.linspace(args.h, x_max, args.samples)
        rows = ["x_m,y_m"]
        for x in xs:
            for y in corr.u_curve_model(args.h, args.b, float(x)):
                rows.append(f"{float(x)!r},{y!r}")
        write_atomic(out / "u_curve.csv", "\n".join(rows) + "\n")
        files.append(out / "u_curve.csv")
        resolved.update(h=args.h, b=args.b, x_max=x_max, samples=args.samples)
        if args.svg:
            pts = np.array([list(map(float, r.split(","))) for r in rows[1:]])
            write_atomic(out / "u_curve.svg", svg_scatter(pts[:, 0], pts[:, 1], "x (m)", "y (m)",
                                                          f"U curve h={args.h:g} b={args.b:g}"))
            files.append(out / "u_curve.svg")
        return [("analyze", resolved, 0, files)]

    if args.scans is None:
        raise InputError(f"{args.mode} needs --scans DIR")
    clouds, poses = _load_scan_dir(args.scans)
    resolved["scans"] = str(args.scans)
    if args.mode == "density-scatter":
        if args.pair is not None:
            k = args.pair
            if not 1 <= k < len(clouds):
                raise InputError(f"--pair must name a neighbor scan 1..{len(clouds) - 1}")
            c = corr.find_pcl_positives(clouds[0], clouds[k], poses[k])
            if len(c) == 0:
                raise EmptyResult("no correspondences between the two scans")
            sc = corr.density_scatter(c, (clouds[0], clouds[k]))
            resolved["pair"] = k
        else:
            groups = corr.find_positive_groups(clouds[0], clouds[1:], poses[1:])
            if len(groups) == 0:
                raise EmptyResult("no positive groups")
            sc = corr.density_scatter(groups)
        text = sc.to_csv() + f"pearson,{sc.pearson()!r}\n"
        write_atomic(out / "density_scatter.csv", text)
        files.append(out / "density_scatter.csv")
        if args.svg:
            write_atomic(out / "density_scatter.svg", svg_scatter(sc.x, sc.y, "x (m)", "y (m)",
                                                                  f"Pearson {sc.pearson():.3f}"))
            files.append(out / "density_scatter.svg")
        return [("analyze", resolved, 0, files)]

    # feature-drift
    emb = load_embedder(args.checkpoint) if args.checkpoint else feat.init_embedder(args.seed or 0)
    resolved["checkpoint"] = str(args.checkpoint) if args.checkpoint else f"init:{args.seed or 0}"
    groups = corr.find_positive_groups(clouds[0], clouds[1:], poses[1:])
    if len(groups) == 0:
        raise EmptyResult("no positive groups")
    features = [emb(feat.compute_descriptors(c)) for c in clouds]
    x, y = feat.table_drift(groups, features)
    write_atomic(out / "feature_drift.csv",
                 "scan_distance_m,drift\n" + "".join(f"{a!r},{b!r}\n" for a, b in zip(x.tolist(), y.tolist())))
    means, counts = feat.binned_means(x, y, DRIFT_EDGES)
    rows = ["bin_lo_m,bin_hi_m,count,mean_drift"]
    for i in range(len(means)):
        rows.append(f"{DRIFT_EDGES[i]},{DRIFT_EDGES[i + 1]},{int(counts[i])},{float(means[i])!r}")
    write_atomic(out / "feature_drift_bins.csv", "\n".join(rows) + "\n")
    files += [out / "feature_drift.csv", out / "feature_drift_bins.csv"]
    if args.svg:
        write_atomic(out / "feature_drift.svg", svg_scatter(x, y, "scan distance (m)", "drift", "feature drift"))
        files.append(out / "feature_drift.svg")
    return [("analyze", resolved, 0, files)]


# --- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gclkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gclkit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="master seed")

    sp = sub.add_parser("simulate", help="render a central scan and its neighbors")
    common(sp)
    sp.add_argument("--phi", type=int, help="number of neighbor scans")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train an embedder with PCL or GCL")
    common(sp)
    sp.add_argument("--mode", choices=train.MODES)
    sp.add_argument("--phi", type=int)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("register", help="register two point cloud files")
    sp.add_argument("cloud_a", help="source cloud S (.bin or .csv)")
    sp.add_argument("cloud_b", help="target cloud T, mapped into S's frame")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--gt", help="JSON 4x4 ground-truth matrix (T into S) to score against")
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("eval", help="distance-bucket registration benchmark")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--buckets", help='e.g. "5-10,10-20,20-30,30-40,40-50"')
    sp.add_argument("--pairs-per-bucket", type=int, default=10)
    sp.add_argument("--low-overlap-only", action="store_true", help="keep only pairs with overlap <= 30%%")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="density scatter, U curve or feature drift data")
    sp.add_argument("mode", choices=("density-scatter", "u-curve", "feature-drift"))
    common(sp)
    sp.add_argument("--scans", help="directory written by `gclkit simulate`")
    sp.add_argument("--pair", type=int, help="density-scatter: use PCL matches with this neighbor scan")
    sp.add_argument("--checkpoint", help="feature-drift: embedder (default: untrained, --seed)")
    sp.add_argument("--h", type=float, help="u-curve: line offset (m)")
    sp.add_argument("--b", type=float, help="u-curve: sensor separation (m)")
    sp.add_argument("--x-max", type=float, default=80.0)
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--svg", action="store_true", help="also write an SVG scatter")
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        for name, config, seed, files in args.func(args):
            write_manifest(Path(args.out), name, config, seed, files, started)
    except (InputError, InvalidArgumentError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingFailedError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_TRAIN
    except EmptyResult as e:
        print(f"empty result: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except GCLError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
