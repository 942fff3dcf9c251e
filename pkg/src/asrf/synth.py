"""Synthetic asynchronous RGB-D sequences over a procedural box world.

World frame is z-up; the ground plane sits at z=0 with a checker albedo,
axis-aligned boxes stand on it, and a single directional light plus an
ambient term shade everything Lambertian.  A camera trajectory sampled at
a fixed base rate is resampled into asynchronous RGB and depth streams:
RGB keeps every s-th frame, depth frames lag each RGB frame by a fixed or
randomly drawn fraction of the RGB period.

Depth rasters store Euclidean hit distance in meters; 0 marks no hit.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import geom
from .geom import Intrinsics, Pose

DEPTH_MAGIC = b"DPTH0001"
MANIFEST_FORMAT = "asrf-dataset-v1"


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    extent: float = 100.0           # square footprint, centered on the origin
    n_boxes: int = 12
    box_size: tuple = (6.0, 20.0)   # footprint side range
    box_height: tuple = (4.0, 26.0)
    checker_scale: float = 8.0
    margin: float = 6.0             # keep boxes away from the rim

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.n_boxes < 0:
            raise ValueError("n_boxes must be >= 0")


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray


@dataclass
class Scene:
    spec: SceneSpec
    boxes: list
    bounds: np.ndarray              # (2, 3) world AABB of the geometry
    ground_albedo: tuple = ((0.42, 0.46, 0.42), (0.33, 0.37, 0.34))
    background: np.ndarray = field(default_factory=lambda: np.array([0.70, 0.78, 0.90]))
    sun: np.ndarray = field(default_factory=lambda: np.array([0.35, 0.20, -0.91]))
    ambient: float = 0.35


def build_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    half = spec.extent / 2.0
    place = half - spec.margin
    if place <= spec.box_size[1] / 2.0 and spec.n_boxes > 0:
        raise ValueError("extent too small for the requested boxes")
    boxes = []
    area = 0.0
    for _ in range(spec.n_boxes):
        w = rng.uniform(*spec.box_size)
        d = rng.uniform(*spec.box_size)
        h = rng.uniform(*spec.box_height)
        cx = rng.uniform(-place + w / 2, place - w / 2)
        cy = rng.uniform(-place + d / 2, place - d / 2)
        albedo = rng.uniform(0.25, 0.85, size=3)
        boxes.append(Box(lo=np.array([cx - w / 2, cy - d / 2, 0.0]),
                         hi=np.array([cx + w / 2, cy + d / 2, h]),
                         albedo=albedo))
        area += w * d
    if area > 0.6 * spec.extent ** 2:
        raise ValueError(f"boxes cover {area:.0f} m^2, more than 60% of the ground")
    zmax = max([float(b.hi[2]) for b in boxes], default=0.0)
    bounds = np.array([[-half, -half, 0.0], [half, half, max(zmax, 1.0)]])
    scene = Scene(spec=spec, boxes=boxes, bounds=bounds)
    scene.sun = scene.sun / np.linalg.norm(scene.sun)
    return scene


def gt_render(scene: Scene, pose: Pose, k: Intrinsics) -> tuple:
    """Exact render: (rgb (H,W,3) in [0,1], depth (H,W) float32 meters, 0 = miss)."""
    o, dirs = geom.camera_rays(pose, k)
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    nrm = np.zeros((n, 3))
    alb = np.zeros((n, 3))

    half = scene.spec.extent / 2.0
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(np.abs(dz) > 1e-12, (0.0 - o[2]) / dz, np.inf)
    px = o[0] + tg * dirs[:, 0]
    py = o[1] + tg * dirs[:, 1]
    ok = (tg > 1e-6) & (np.abs(px) <= half) & (np.abs(py) <= half)
    if ok.any():
        s = scene.spec.checker_scale
        parity = (np.floor(px[ok] / s) + np.floor(py[ok] / s)).astype(np.int64) & 1
        ca = np.array(scene.ground_albedo[0])
        cb = np.array(scene.ground_albedo[1])
        t_best[ok] = tg[ok]
        nrm[ok] = [0.0, 0.0, 1.0]
        alb[ok] = np.where(parity[:, None] == 0, ca, cb)

    for box in scene.boxes:
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (box.lo - o) / dirs
            t2 = (box.hi - o) / dirs
        tn = np.minimum(t1, t2)
        tf = np.maximum(t1, t2)
        tlo = tn.max(axis=1)
        thi = tf.min(axis=1)
        hit = (tlo <= thi) & (thi > 1e-6)
        t = np.where(tlo > 1e-6, tlo, thi)
        closer = hit & (t < t_best)
        if not closer.any():
            continue
        ax = np.argmax(tn[closer], axis=1)
        sign = -np.sign(dirs[closer, ax])
        t_best[closer] = t[closer]
        nn = np.zeros((int(closer.sum()), 3))
        nn[np.arange(len(ax)), ax] = sign
        nrm[closer] = nn
        alb[closer] = box.albedo

    hit = np.isfinite(t_best)
    lam = scene.ambient + (1.0 - scene.ambient) * np.maximum(0.0, nrm @ (-scene.sun))
    rgb = np.where(hit[:, None], alb * lam[:, None], scene.background)
    rgb = np.clip(rgb, 0.0, 1.0)
    depth = np.where(hit, t_best, 0.0)
    h, w = k.height, k.width
    return rgb.reshape(h, w, 3), depth.reshape(h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "simple"            # "simple" sweep or "hard" free waypoints
    duration_s: float = 60.0
    rate_hz: float = 50.0
    altitude: tuple = (28.0, 32.0)
    max_speed: float = 10.0
    legs: int = 4
    margin: float = 4.0
    pitch_deg: float = -45.0
    speed_jitter: float = 0.0       # along-track speed modulation amplitude
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("simple", "hard"):
            raise ValueError(f"unknown trajectory kind '{self.kind}'")
        if self.duration_s <= 0 or self.rate_hz <= 0:
            raise ValueError("duration and rate must be positive")
        if self.max_speed <= 0:
            raise ValueError("max_speed must be positive")
        if self.legs < 2:
            raise ValueError("need at least 2 sweep legs")
        if not 0 <= self.speed_jitter < 1:
            raise ValueError("speed_jitter must be in [0, 1)")


def look_rotation(forward) -> np.ndarray:
    """Quaternion of the camera frame looking along `forward` (z-up world)."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(f, up)
    rn = np.linalg.norm(right)
    if rn < 1e-8:
        right = np.cross(f, np.array([1.0, 0.0, 0.0]))
        rn = np.linalg.norm(right)
    right /= rn
    down = np.cross(f, right)
    return geom.quat_from_matrix(np.stack([right, down, f], axis=1))


def _heading_quat(yaw: float, pitch: float) -> np.ndarray:
    cp = math.cos(pitch)
    return look_rotation(np.array([math.cos(yaw) * cp, math.sin(yaw) * cp, math.sin(pitch)]))


def _smoothstep5(x: np.ndarray) -> np.ndarray:
    """Quintic ease 0->1 with zero first and second derivatives at the ends."""
    x = np.clip(x, 0.0, 1.0)
    return x * x * x * (x * (6.0 * x - 15.0) + 10.0)


def _simple_yaw(spec: TrajectorySpec, t: np.ndarray) -> np.ndarray:
    """Lawnmower heading: constant on legs, eased monotone +pi per turn.

    The quintic profile keeps yaw rate continuous (zero at junctions), so
    the integrated path has straight parallel legs joined by smooth turns.
    """
    n_turns = spec.legs - 1
    t_leg = spec.duration_s / (spec.legs + 0.6 * n_turns)
    t_turn = 0.6 * t_leg
    yaw = np.zeros_like(t)
    edge = t_leg
    for j in range(n_turns):
        u = (t - edge) / t_turn
        yaw = yaw + math.pi * _smoothstep5(u)
        edge += t_turn + t_leg
    return yaw


def _catmull_rom(pts: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Uniform Catmull-Rom through pts (K, D) at parameters u in [0, K-1]."""
    k = pts.shape[0]
    ext = np.vstack([2 * pts[0] - pts[1], pts, 2 * pts[-1] - pts[-2]])
    seg = np.clip(np.floor(u).astype(int), 0, k - 2)
    s = (u - seg)[:, None]
    p0, p1, p2, p3 = ext[seg], ext[seg + 1], ext[seg + 2], ext[seg + 3]
    return 0.5 * ((2 * p1) + (-p0 + p2) * s +
                  (2 * p0 - 5 * p1 + 4 * p2 - p3) * s ** 2 +
                  (-p0 + 3 * p1 - 3 * p2 + p3) * s ** 3)


def gen_trajectory(spec: TrajectorySpec, extent: float = 100.0) -> list:
    """Sampled trajectory [(t, Pose), ...] at spec.rate_hz over spec.duration_s."""
    n = int(round(spec.duration_s * spec.rate_hz))
    t = np.arange(n) / spec.rate_hz
    alt_mid = 0.5 * (spec.altitude[0] + spec.altitude[1])
    pitch = math.radians(spec.pitch_deg)

    if spec.kind == "simple":
        yaw = _simple_yaw(spec, t)
        # along-track speed profile: unit mean, modulated by two
        # incommensurate tones so throttle changes never lock to any
        # downstream frame stride
        v = np.ones_like(t)
        if spec.speed_jitter > 0:
            a = spec.speed_jitter
            v = v + a * np.sin(2 * math.pi * t / 2.3) \
                  + 0.6 * a * np.sin(2 * math.pi * t / 3.7 + 1.3)
        # integrate the path, then scale it into the usable square
        hdg = np.column_stack([np.cos(yaw), np.sin(yaw)])
        steps = 0.5 * (hdg[1:] * v[1:, None] + hdg[:-1] * v[:-1, None]) / spec.rate_hz
        xy = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])
        xy -= 0.5 * (xy.max(axis=0) + xy.min(axis=0))
        usable = extent / 2.0 - spec.margin
        if usable <= 1.0:
            raise ValueError("extent too small for one sweep leg")
        scale = usable / np.abs(xy).max()
        xy *= scale
        if scale * v.max() > spec.max_speed:
            raise ValueError(f"sweep needs {scale * v.max():.2f} m/s, "
                             f"above max_speed {spec.max_speed}")
        out = []
        for i, ti in enumerate(t):
            out.append((float(ti), Pose(_heading_quat(float(yaw[i]), pitch),
                                        np.array([xy[i, 0], xy[i, 1], alt_mid]))))
        return out

    # "hard": spline through random waypoints, free per-waypoint headings
    rng = np.random.default_rng(spec.seed)
    n_wp = max(4, int(spec.duration_s / 6.0))
    span = extent / 2.0 - spec.margin
    wps = rng.uniform(-0.7 * span, 0.7 * span, size=(n_wp, 2))
    u = t / spec.duration_s * (n_wp - 1)
    xy = _catmull_rom(wps, u)

    amp = 0.5 * (spec.altitude[1] - spec.altitude[0])
    z = alt_mid + amp * np.sin(2.0 * math.pi * t / spec.duration_s * 2.0)

    # scale xy about the centroid so finite-difference speed fits the cap
    pos = np.column_stack([xy, z])
    for _ in range(3):
        v = np.linalg.norm(np.diff(pos, axis=0), axis=1) * spec.rate_hz
        vmax = float(v.max())
        if vmax <= 0.9 * spec.max_speed:
            break
        f = 0.9 * spec.max_speed / vmax
        c = pos[:, :2].mean(axis=0)
        pos[:, :2] = c + (pos[:, :2] - c) * f

    yaw0 = rng.uniform(0, 2 * math.pi)
    yaws = yaw0 + np.cumsum(rng.uniform(-1.2, 1.2, size=n_wp))
    pitches = np.radians(np.clip(spec.pitch_deg + rng.uniform(-15, 15, size=n_wp), -80, -15))
    wq = [_heading_quat(float(y), float(p)) for y, p in zip(yaws, pitches)]

    seg = np.clip(np.floor(u).astype(int), 0, n_wp - 2)
    frac = u - seg
    out = []
    for i, ti in enumerate(t):
        q = geom.slerp(wq[seg[i]], wq[seg[i] + 1], float(frac[i]))
        out.append((float(ti), Pose(q, pos[i])))
    return out


# ---------------------------------------------------------------------------
# asynchronous resampling


@dataclass(frozen=True)
class ResampleProtocol:
    mode: str = "fixed"             # "fixed" or "random"
    rgb_stride: int = 10            # keep every s-th base frame as RGB
    x_pct: float = 30.0             # depth lag, percent of the RGB period
    y_pct: float = 50.0             # upper bound in random mode

    def __post_init__(self):
        if self.mode not in ("fixed", "random"):
            raise ValueError(f"unknown resample mode '{self.mode}'")
        if self.rgb_stride < 1:
            raise ValueError("rgb_stride must be >= 1")
        if not 0 <= self.x_pct <= 100:
            raise ValueError("x_pct must be in [0, 100]")
        if self.mode == "random" and not self.x_pct <= self.y_pct <= 100:
            raise ValueError("random mode needs x_pct <= y_pct <= 100")


def resample_indices(n_frames: int, protocol: ResampleProtocol,
                     rng: np.random.Generator | None = None) -> tuple:
    """Base-frame indices for the RGB and depth streams.

    Returns (rgb_idx, depth_idx, offsets_pct, n_dropped).  Pair k lags its
    RGB frame by round(stride * pct_k / 100) base frames; pairs whose depth
    frame would fall past the sequence end are dropped.
    """
    s = protocol.rgb_stride
    rgb = np.arange(0, n_frames, s)
    if protocol.mode == "fixed":
        pct = np.full(rgb.shape, float(protocol.x_pct))
    else:
        if rng is None:
            raise ValueError("random mode needs an rng")
        pct = rng.uniform(protocol.x_pct, protocol.y_pct, size=rgb.shape)
    off = np.round(s * pct / 100.0).astype(np.int64)
    depth = rgb + off
    keep = depth < n_frames
    n_dropped = int((~keep).sum())
    return rgb[keep], depth[keep], pct[keep], n_dropped


# ---------------------------------------------------------------------------
# dataset container and IO


@dataclass
class AsyncDataset:
    intrinsics: Intrinsics
    extrinsic: Pose                 # depth sensor in the RGB camera frame
    rgb_t: np.ndarray
    rgb_poses: list
    rgb_images: list                # (H, W, 3) float32 in [0, 1]
    depth_t: np.ndarray
    depth_rasters: list             # (H, W) float32 meters, 0 = miss
    provenance: dict
    gt_depth_poses: list | None = None   # evaluation only, never training

    def __post_init__(self):
        if len(self.rgb_t) != len(self.rgb_images) or len(self.rgb_t) != len(self.rgb_poses):
            raise DatasetError("RGB stream lengths disagree")
        if len(self.depth_t) != len(self.depth_rasters):
            raise DatasetError("depth stream lengths disagree")


def make_dataset(scene_spec: SceneSpec, traj_spec: TrajectorySpec,
                 protocol: ResampleProtocol, k: Intrinsics, extrinsic: Pose,
                 seed: int = 0) -> AsyncDataset:
    scene = build_scene(scene_spec)
    samples = gen_trajectory(traj_spec, extent=scene_spec.extent)
    rng = np.random.default_rng(seed)
    rgb_idx, depth_idx, pct, dropped = resample_indices(len(samples), protocol, rng)

    rgb_t, rgb_poses, rgb_images = [], [], []
    for i in rgb_idx:
        ti, pose = samples[i]
        rgb, _ = gt_render(scene, pose, k)
        rgb_t.append(ti)
        rgb_poses.append(pose)
        rgb_images.append(rgb.astype(np.float32))

    depth_t, depth_rasters, gt_depth_poses = [], [], []
    for j in depth_idx:
        tj, pose = samples[j]
        dpose = geom.rgb_to_depth_pose(pose, extrinsic)
        _, depth = gt_render(scene, dpose, k)
        depth_t.append(tj)
        depth_rasters.append(depth)
        gt_depth_poses.append(dpose)

    depth_t = np.array(depth_t)
    if len(depth_t) > 1 and not np.all(np.diff(depth_t) > 0):
        raise DatasetError("protocol produced non-monotone depth timestamps")

    provenance = {
        "scene": asdict(scene_spec),
        "trajectory": asdict(traj_spec),
        "protocol": asdict(protocol),
        "seed": seed,
        "offsets_pct": [float(p) for p in pct],
        "n_dropped_pairs": dropped,
        "base_frames": len(samples),
    }
    return AsyncDataset(k, extrinsic, np.array(rgb_t), rgb_poses, rgb_images,
                        depth_t, depth_rasters, provenance,
                        gt_depth_poses=gt_depth_poses)


def write_depth_raster(path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"depth raster must be 2-D, got {arr.shape}")
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<II", arr.shape[1], arr.shape[0]))
        f.write(arr.tobytes())


def read_depth_raster(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(DEPTH_MAGIC))
        if magic != DEPTH_MAGIC:
            raise DatasetError(f"{path}: bad depth raster magic {magic!r}")
        w, h = struct.unpack("<II", f.read(8))
        buf = f.read(4 * w * h)
        if len(buf) < 4 * w * h:
            raise DatasetError(f"{path}: truncated depth raster")
        return np.frombuffer(buf, dtype="<f4").reshape(h, w).copy()


def save_dataset(ds: AsyncDataset, root):
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)

    rgb_entries, depth_entries = [], []
    for i, (ti, img) in enumerate(zip(ds.rgb_t, ds.rgb_images)):
        name = f"rgb/{i:06d}.png"
        arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(root / name)
        rgb_entries.append({"t": float(ti), "file": name})
    for j, (tj, ras) in enumerate(zip(ds.depth_t, ds.depth_rasters)):
        name = f"depth/{j:06d}.f32"
        write_depth_raster(root / name, ras)
        depth_entries.append({"t": float(tj), "file": name})

    k = ds.intrinsics
    manifest = {
        "format": MANIFEST_FORMAT,
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                       "width": k.width, "height": k.height},
        "extrinsic": [float(v) for v in geom.pose_row(0.0, ds.extrinsic)],
        "frames": {"rgb": rgb_entries, "depth": depth_entries},
        "provenance": ds.provenance,
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)

    geom.save_pose_csv(root / "rgb_poses.csv", ds.rgb_t, ds.rgb_poses)
    if ds.gt_depth_poses is not None:
        geom.save_pose_csv(root / "gt_depth_poses.csv", ds.depth_t, ds.gt_depth_poses)


def _require(manifest: dict, key: str, path):
    if key not in manifest:
        raise DatasetError(f"{path}: manifest missing field '{key}'")
    return manifest[key]


def load_dataset(root) -> AsyncDataset:
    """Load a saved dataset; ground-truth depth poses are not attached here."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{mpath}: not found")
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}:{e.lineno}: malformed JSON ({e.msg})") from None

    if _require(manifest, "format", mpath) != MANIFEST_FORMAT:
        raise DatasetError(f"{mpath}: unsupported format '{manifest['format']}'")
    ki = _require(manifest, "intrinsics", mpath)
    try:
        k = Intrinsics(fx=ki["fx"], fy=ki["fy"], cx=ki["cx"], cy=ki["cy"],
                       width=ki["width"], height=ki["height"])
    except (KeyError, ValueError) as e:
        raise DatasetError(f"{mpath}: bad intrinsics ({e})") from None
    ext_row = _require(manifest, "extrinsic", mpath)
    _, extrinsic = geom.parse_pose_row([str(v) for v in ext_row])
    frames = _require(manifest, "frames", mpath)

    rgb_t, rgb_images = [], []
    for e in _require(frames, "rgb", mpath):
        p = root / e["file"]
        if not p.exists():
            raise DatasetError(f"{mpath}: listed image missing: {p}")
        rgb_images.append(np.asarray(Image.open(p), dtype=np.float32) / np.float32(255.0))
        rgb_t.append(float(e["t"]))
    depth_t, rasters = [], []
    for e in _require(frames, "depth", mpath):
        p = root / e["file"]
        if not p.exists():
            raise DatasetError(f"{mpath}: listed raster missing: {p}")
        rasters.append(read_depth_raster(p))
        depth_t.append(float(e["t"]))

    rgb_t = np.array(rgb_t)
    depth_t = np.array(depth_t)
    for name, arr in (("rgb", rgb_t), ("depth", depth_t)):
        if len(arr) > 1 and not np.all(np.diff(arr) > 0):
            raise DatasetError(f"{mpath}: {name} timestamps not strictly increasing")

    times, poses = geom.load_pose_csv(root / "rgb_poses.csv")
    if len(times) != len(rgb_t) or not np.allclose(times, rgb_t, atol=1e-12):
        raise DatasetError(f"{root / 'rgb_poses.csv'}: timestamps disagree with manifest")

    return AsyncDataset(k, extrinsic, rgb_t, poses, rgb_images, depth_t, rasters,
                        provenance=manifest.get("provenance", {}))


def load_gt_depth_poses(root) -> tuple:
    """Evaluation-only ground truth: (times, [Pose, ...])."""
    return geom.load_pose_csv(Path(root) / "gt_depth_poses.csv")
