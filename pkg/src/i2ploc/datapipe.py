"""Synthetic paired-scene generation and dataset assembly.

Scenes are a ground plane plus axis-aligned boxes with per-box
intensity. For every trajectory pose the pipeline renders a cylindrical
panorama (channels: normalized depth, surface intensity, normalized hit
height) by exact ray casting, and samples noisy surface points inside a
square window centered on the pose, expressed in the pose's local frame.
Image and cloud therefore describe the same geometry, which is what the
cross-modal training needs.

Dataset directory layout:
    poses.csv        id,x,y,z
    images/<id>.ppm  binary P6, 8-bit
    clouds/<id>.i2pc binary cloud container
    split.json       {"query_ids": [...], "database_ids": [...]}
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .evaluation import PoseRecord, split_query_database
from .pointops import read_cloud, write_cloud


@dataclass
class Landmark:
    """Axis-aligned box sitting on the ground plane."""

    center_xy: tuple[float, float]
    size: tuple[float, float, float]  # extents along x, y, z
    intensity: float

    def bounds(self):
        cx, cy = self.center_xy
        sx, sy, sz = self.size
        lo = np.array([cx - sx / 2, cy - sy / 2, 0.0])
        hi = np.array([cx + sx / 2, cy + sy / 2, sz])
        return lo, hi


@dataclass
class SyntheticScene:
    extent_m: float  # scene spans [-extent/2, extent/2] in x and y
    landmarks: list[Landmark]
    ground: bool = True
    seed: int = 0

    def contains_xy(self, x: float, y: float) -> bool:
        half = self.extent_m / 2
        return -half <= x <= half and -half <= y <= half


@dataclass
class RenderConfig:
    image_height: int = 64
    image_width: int = 256
    elevation_deg: tuple[float, float] = (-25.0, 25.0)  # bottom row, top row
    max_range_m: float = 60.0
    sensor_height_m: float = 1.8
    window_m: float = 40.0
    cloud_points: int = 2048
    noise_sigma_m: float = 0.02
    ground_intensity: float = 0.3
    ground_point_fraction: float = 0.4
    height_scale_m: float = 12.0  # normalizes the image height channel


@dataclass
class PairSample:
    pose: PoseRecord
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    cloud: np.ndarray  # (N, 3) float32, pose-local coordinates


def generate_scene(seed: int, extent_m: float = 120.0, landmark_count: int = 20) -> SyntheticScene:
    """Deterministic scene: boxes fully inside the extent, sizes bounded away from zero."""
    if extent_m <= 0 or landmark_count < 0:
        raise DataError("scene needs positive extent and nonnegative landmark count")
    rng = np.random.default_rng(seed)
    half = extent_m / 2
    landmarks = []
    for _ in range(landmark_count):
        sx = float(rng.uniform(1.0, 6.0))
        sy = float(rng.uniform(1.0, 6.0))
        sz = float(rng.uniform(2.0, 10.0))
        cx = float(rng.uniform(-half + sx / 2, half - sx / 2))
        cy = float(rng.uniform(-half + sy / 2, half - sy / 2))
        landmarks.append(Landmark((cx, cy), (sx, sy, sz), float(rng.uniform(0.35, 1.0))))
    return SyntheticScene(extent_m=extent_m, landmarks=landmarks, ground=True, seed=seed)


def _ray_box_hits(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab-method distances for a bundle of rays against one box, inf on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo[None, :] - origin[None, :]) * inv
        t1 = (hi[None, :] - origin[None, :]) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # rays parallel to a slab: hit only if the origin lies between the planes
    parallel = dirs == 0.0
    inside = (origin[None, :] >= lo[None, :]) & (origin[None, :] <= hi[None, :])
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    t = np.where((near <= far) & (far > 1e-9), np.maximum(near, 1e-9), np.inf)
    return t


def render_image(scene: SyntheticScene, pose: PoseRecord, cfg: RenderConfig) -> np.ndarray:
    """Cylindrical panorama from the pose; exact nearest-hit ray casting."""
    x, y, _ = pose.position
    if not scene.contains_xy(x, y):
        raise DataError(f"pose {pose.id} at ({x}, {y}) lies outside the scene extent")
    h, w = cfg.image_height, cfg.image_width
    azim = 2.0 * np.pi * (np.arange(w) + 0.5) / w
    lo_deg, hi_deg = cfg.elevation_deg
    elev = np.deg2rad(np.linspace(hi_deg, lo_deg, h))  # row 0 looks up
    ca, sa = np.cos(azim), np.sin(azim)
    ce, se = np.cos(elev), np.sin(elev)
    dirs = np.stack(
        [
            (ce[:, None] * ca[None, :]),
            (ce[:, None] * sa[None, :]),
            np.broadcast_to(se[:, None], (h, w)),
        ],
        axis=-1,
    ).reshape(-1, 3)
    origin = np.array([x, y, cfg.sensor_height_m])

    best_t = np.full(dirs.shape[0], np.inf)
    intensity = np.zeros(dirs.shape[0])
    if scene.ground:
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ground = np.where(dz < 0, -origin[2] / dz, np.inf)
        hit = t_ground < best_t
        best_t = np.where(hit, t_ground, best_t)
        intensity = np.where(hit, cfg.ground_intensity, intensity)
    for lm in scene.landmarks:
        lo, hi = lm.bounds()
        t = _ray_box_hits(origin, dirs, lo, hi)
        hit = t < best_t
        best_t = np.where(hit, t, best_t)
        intensity = np.where(hit, lm.intensity, intensity)

    capped = np.minimum(best_t, cfg.max_range_m)
    depth = capped / cfg.max_range_m
    safe_t = np.where(np.isfinite(best_t), best_t, 0.0)
    hit_z = np.where(np.isfinite(best_t), origin[2] + safe_t * dirs[:, 2], 0.0)
    height = np.clip(hit_z / cfg.height_scale_m, 0.0, 1.0)
    img = np.stack([depth, intensity, height], axis=-1).reshape(h, w, 3)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _sample_box_surface(rng, lm: Landmark, count: int) -> np.ndarray:
    """Uniform samples over the 4 side faces and the top, area-weighted."""
    lo, hi = lm.bounds()
    sx, sy, sz = lm.size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy])
    faces = rng.choice(5, size=count, p=areas / areas.sum())
    u = rng.uniform(0, 1, count)
    v = rng.uniform(0, 1, count)
    pts = np.empty((count, 3))
    for f in range(5):
        m = faces == f
        if not m.any():
            continue
        if f in (0, 1):  # x-minus / x-plus faces
            pts[m, 0] = lo[0] if f == 0 else hi[0]
            pts[m, 1] = lo[1] + u[m] * sy
            pts[m, 2] = v[m] * sz
        elif f in (2, 3):  # y-minus / y-plus faces
            pts[m, 0] = lo[0] + u[m] * sx
            pts[m, 1] = lo[1] if f == 2 else hi[1]
            pts[m, 2] = v[m] * sz
        else:  # top
            pts[m, 0] = lo[0] + u[m] * sx
            pts[m, 1] = lo[1] + v[m] * sy
            pts[m, 2] = sz
    return pts


def render_cloud(scene: SyntheticScene, pose: PoseRecord, cfg: RenderConfig, rng) -> np.ndarray:
    """Noisy surface samples within the window, in pose-local coordinates."""
    x, y, _ = pose.position
    if not scene.contains_xy(x, y):
        raise DataError(f"pose {pose.id} at ({x}, {y}) lies outside the scene extent")
    half_win = cfg.window_m / 2
    half_ext = scene.extent_m / 2
    wx0, wx1 = max(x - half_win, -half_ext), min(x + half_win, half_ext)
    wy0, wy1 = max(y - half_win, -half_ext), min(y + half_win, half_ext)

    in_window = [
        lm
        for lm in scene.landmarks
        if lm.bounds()[0][0] <= wx1
        and lm.bounds()[1][0] >= wx0
        and lm.bounds()[0][1] <= wy1
        and lm.bounds()[1][1] >= wy0
    ]
    if not scene.ground and not in_window:
        raise DataError(f"pose {pose.id}: nothing to sample inside the window")

    n_ground = int(cfg.cloud_points * cfg.ground_point_fraction) if scene.ground else 0
    if not in_window:
        n_ground = cfg.cloud_points
    n_boxes = cfg.cloud_points - n_ground

    parts = []
    if n_ground > 0:
        gx = rng.uniform(wx0, wx1, n_ground)
        gy = rng.uniform(wy0, wy1, n_ground)
        parts.append(np.column_stack([gx, gy, np.zeros(n_ground)]))
    if n_boxes > 0 and in_window:
        areas = np.array(
            [2 * s[0] * s[2] + 2 * s[1] * s[2] + s[0] * s[1] for s in (lm.size for lm in in_window)]
        )
        weights = areas / areas.sum()
        collected = []
        need = n_boxes
        for _ in range(12):  # top up until the window filter is satisfied
            counts = rng.multinomial(max(need * 2, 16), weights)
            batch = [
                _sample_box_surface(rng, lm, c) for lm, c in zip(in_window, counts) if c > 0
            ]
            if batch:
                pts = np.concatenate(batch)
                keep = (pts[:, 0] >= wx0) & (pts[:, 0] <= wx1) & (pts[:, 1] >= wy0) & (pts[:, 1] <= wy1)
                collected.append(pts[keep])
                need = n_boxes - sum(len(c) for c in collected)
            if need <= 0:
                break
        box_pts = np.concatenate(collected) if collected else np.zeros((0, 3))
        if len(box_pts) < n_boxes:  # pad from the ground so the budget holds
            extra = n_boxes - len(box_pts)
            gx = rng.uniform(wx0, wx1, extra)
            gy = rng.uniform(wy0, wy1, extra)
            box_pts = np.concatenate([box_pts, np.column_stack([gx, gy, np.zeros(extra)])])
        parts.append(box_pts[:n_boxes])

    cloud = np.concatenate(parts)
    cloud = cloud + rng.normal(0.0, cfg.noise_sigma_m, cloud.shape)
    cloud[:, 0] -= x  # pose-local frame, ground stays at z ~ 0
    cloud[:, 1] -= y
    return cloud.astype(np.float32)


def render_pair(scene: SyntheticScene, pose: PoseRecord, cfg: RenderConfig, rng=None) -> PairSample:
    """Correlated image + cloud for one pose; `rng` controls sampling noise."""
    if rng is None:
        rng = np.random.default_rng(scene.seed * 100003 + pose.id)
    image = render_image(scene, pose, cfg)
    cloud = render_cloud(scene, pose, cfg, rng)
    return PairSample(pose=pose, image=image, cloud=cloud)


# -- trajectories ---------------------------------------------------------------


def trajectory_line(count: int, step_m: float = 1.0, start=(0.0, 0.0), heading_deg: float = 0.0) -> list[PoseRecord]:
    rad = np.deg2rad(heading_deg)
    dx, dy = np.cos(rad) * step_m, np.sin(rad) * step_m
    return [PoseRecord(i, (start[0] + i * dx, start[1] + i * dy, 0.0)) for i in range(count)]


def trajectory_random_walk(
    seed: int,
    count: int,
    extent_m: float,
    step_m: float = 4.0,
    margin_m: float = 4.0,
    revisit_fraction: float = 0.0,
) -> list[PoseRecord]:
    """Heading-correlated random walk, reflected at the scene bounds.

    ``revisit_fraction`` appends that share of the walk's earliest poses
    again at the end (fresh ids), producing loop closures.
    """
    rng = np.random.default_rng(seed)
    half = extent_m / 2 - margin_m
    pos = np.array([rng.uniform(-half / 2, half / 2), rng.uniform(-half / 2, half / 2)])
    heading = rng.uniform(0, 2 * np.pi)
    points = []
    for _ in range(count):
        points.append(pos.copy())
        heading += rng.normal(0.0, 0.5)
        step = np.array([np.cos(heading), np.sin(heading)]) * step_m
        pos = pos + step
        for axis in range(2):
            if pos[axis] > half:
                pos[axis] = 2 * half - pos[axis]
                heading += np.pi / 2
            elif pos[axis] < -half:
                pos[axis] = -2 * half - pos[axis]
                heading += np.pi / 2
    n_revisit = int(count * revisit_fraction)
    for i in range(n_revisit):
        points.append(points[i].copy())
    return [PoseRecord(i, (float(p[0]), float(p[1]), 0.0)) for i, p in enumerate(points)]


# -- dataset assembly -------------------------------------------------------------


def make_dataset(
    scene: SyntheticScene,
    trajectory: list[PoseRecord],
    spacing_m: float = 3.0,
    cfg: RenderConfig | None = None,
) -> tuple[list[PairSample], list[int], list[int]]:
    """Render one pair per trajectory pose and split queries from database."""
    cfg = cfg or RenderConfig()
    pairs = [render_pair(scene, pose, cfg) for pose in trajectory]
    query_ids, database_ids = split_query_database(trajectory, spacing_m)
    return pairs, query_ids, database_ids


def write_dataset(out_dir: str, pairs: list[PairSample], query_ids: list[int], database_ids: list[int]) -> None:
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "clouds"), exist_ok=True)
    with open(os.path.join(out_dir, "poses.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y", "z"])
        for pair in pairs:
            x, y, z = pair.pose.position
            writer.writerow([pair.pose.id, f"{x:.6f}", f"{y:.6f}", f"{z:.6f}"])
    for pair in pairs:
        write_ppm(os.path.join(out_dir, "images", f"{pair.pose.id:06d}.ppm"), pair.image)
        write_cloud(os.path.join(out_dir, "clouds", f"{pair.pose.id:06d}.i2pc"), pair.cloud)
    with open(os.path.join(out_dir, "split.json"), "w") as fh:
        json.dump({"query_ids": list(query_ids), "database_ids": list(database_ids)}, fh, indent=1)
        fh.write("\n")


def load_dataset(root: str) -> tuple[list[PairSample], list[int], list[int]]:
    poses_path = os.path.join(root, "poses.csv")
    split_path = os.path.join(root, "split.json")
    try:
        with open(poses_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        with open(split_path) as fh:
            split = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read dataset at {root!r}: {exc}") from exc
    pairs = []
    for row in rows:
        pid = int(row["id"])
        pose = PoseRecord(pid, (float(row["x"]), float(row["y"]), float(row["z"])))
        image = load_image(os.path.join(root, "images", f"{pid:06d}.ppm"))
        cloud = read_cloud(os.path.join(root, "clouds", f"{pid:06d}.i2pc"))
        pairs.append(PairSample(pose=pose, image=image, cloud=cloud))
    return pairs, list(split["query_ids"]), list(split["database_ids"])


# -- image files -------------------------------------------------------------------


def write_ppm(path: str, img: np.ndarray) -> None:
    """Binary P6, 8-bit; values are clipped from [0, 1]."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"PPM wants (H, W, 3), got {arr.shape}")
    data = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read image {path!r}: {exc}") from exc
    if not raw.startswith(b"P6"):
        raise DataError(f"{path!r} is not a binary PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise DataError(f"{path!r}: only 8-bit PPM supported")
    expected = w * h * 3
    pixels = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=pos)
    if pixels.size != expected:
        raise DataError(f"{path!r} truncated")
    return (pixels.reshape(h, w, 3).astype(np.float32)) / 255.0


def load_image(path: str) -> np.ndarray:
    """Decode PPM natively or PNG via Pillow, always to float32 in [0, 1]."""
    if path.endswith(".ppm"):
        return read_ppm(path)
    if path.endswith(".png"):
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return arr
    raise DataError(f"unsupported image format: {path!r}")
