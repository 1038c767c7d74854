"""Point-cloud geometry primitives.

Farthest point sampling, k-nearest neighbors, patch grouping with center
normalization, and RANSAC ground-plane removal. Clouds are numpy arrays
of shape (N, 3) in meters; distances are accumulated in float64.

File formats: the binary ``.i2pc`` container (magic ``I2PC``, u32 count,
little-endian f32 xyz triples) and plain-text ``.xyz`` ingestion.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError

CLOUD_MAGIC = b"I2PC"


def validate_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise DataError(f"point cloud must be (N, 3) with N >= 1, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise DataError("point cloud holds non-finite coordinates")
    return pts


@dataclass
class PatchSet:
    """Sampled patch centers plus center-relative neighborhoods.

    ``neighborhoods[i, j]`` is the j-th neighbor of patch i expressed
    relative to ``centers[i]``; a patch whose center is one of its own
    neighbors therefore contains the origin.
    """

    centers: np.ndarray  # (m, 3)
    neighborhoods: np.ndarray  # (m, k, 3)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances (|a| x |b|), in float64."""
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)


def fps(points, m: int, seed: int = 0, allow_pad: bool = False) -> np.ndarray:
    """Greedy farthest point sampling: indices of m points.

    The first index is a seeded draw; each following pick maximizes its
    minimum distance to the points already chosen (lowest index wins
    ties). With ``allow_pad`` undersized clouds are padded by resampling
    with replacement, otherwise they are an error.
    """
    pts = validate_cloud(points)
    n = pts.shape[0]
    rng = np.random.default_rng(seed)
    if m < 1:
        raise DataError(f"fps sample count must be positive, got {m}")
    if m > n:
        if not allow_pad:
            raise DataError(f"fps cannot draw {m} from {n} points (enable padding)")
        warnings.warn(f"cloud has {n} < {m} points; padding with replacement")
        base = fps(pts, n, seed=seed)
        pad = rng.integers(0, n, size=m - n)
        return np.concatenate([base, pad])

    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = rng.integers(0, n)
    d = _sq_dists(pts, pts[chosen[0]][None, :])[:, 0]
    for i in range(1, m):
        idx = int(np.argmax(d))
        chosen[i] = idx
        d = np.minimum(d, _sq_dists(pts, pts[idx][None, :])[:, 0])
    return chosen


def knn(points, centers, k: int) -> np.ndarray:
    """Indices of the k nearest cloud points per center, sorted by distance.

    Ties break toward the lower index (stable sort on distance).
    """
    pts = validate_cloud(points)
    ctr = np.asarray(centers, dtype=np.float32).reshape(-1, 3)
    if k < 1 or k > pts.shape[0]:
        raise DataError(f"knn needs 1 <= k <= {pts.shape[0]}, got {k}")
    d = _sq_dists(ctr, pts)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k]


def group_normalize(points, centers, idx) -> PatchSet:
    """Gather neighborhoods and express them relative to their centers."""
    pts = validate_cloud(points)
    ctr = np.asarray(centers, dtype=np.float32).reshape(-1, 3)
    idx = np.asarray(idx)
    if idx.min() < 0 or idx.max() >= pts.shape[0]:
        raise DataError("neighborhood index out of range")
    if idx.shape[0] != ctr.shape[0]:
        raise DataError("one index row per center required")
    neigh = pts[idx] - ctr[:, None, :]
    return PatchSet(centers=ctr, neighborhoods=neigh.astype(np.float32))


def _plane_from_points(p0, p1, p2):
    """Unit normal + offset of the plane through three points, or None."""
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        return None
    n = n / norm
    return n, float(n @ p0)


def ransac_ground_removal(
    points,
    iterations: int = 100,
    inlier_threshold_m: float = 0.15,
    min_inlier_fraction: float = 0.3,
    seed: int = 0,
) -> np.ndarray:
    """Drop points close to the dominant plane found by RANSAC.

    Returns the points farther than the threshold from the best-consensus
    plane. If no plane gathers ``min_inlier_fraction`` of the cloud, or
    if removal would leave nothing, the input is returned unchanged.
    """
    pts = validate_cloud(points)
    n = pts.shape[0]
    if n < 3:
        raise DataError("ransac needs at least 3 points")
    rng = np.random.default_rng(seed)
    pts64 = pts.astype(np.float64)

    best_count = -1
    best_mask = None
    for _ in range(iterations):
        i, j, k = rng.choice(n, size=3, replace=False)
        plane = _plane_from_points(pts64[i], pts64[j], pts64[k])
        if plane is None:  # collinear draw, redraw next iteration
            continue
        normal, offset = plane
        dist = np.abs(pts64 @ normal - offset)
        mask = dist <= inlier_threshold_m
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask

    if best_mask is None or best_count < min_inlier_fraction * n:
        return pts
    survivors = pts[~best_mask]
    if survivors.shape[0] == 0:
        warnings.warn("ground removal would empty the cloud; keeping input")
        return pts
    return survivors


# -- file formats ------------------------------------------------------------


def write_cloud(path: str, points) -> None:
    pts = validate_cloud(points)
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<I", pts.shape[0]))
        fh.write(np.ascontiguousarray(pts, dtype="<f4").tobytes())


def read_cloud(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read cloud {path!r}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != CLOUD_MAGIC:
        raise DataError(f"{path!r} is not an I2PC cloud file")
    (count,) = struct.unpack("<I", raw[4:8])
    expected = 8 + count * 12
    if len(raw) != expected:
        raise DataError(f"{path!r} truncated: expected {expected} bytes, got {len(raw)}")
    pts = np.frombuffer(raw, dtype="<f4", count=count * 3, offset=8).reshape(count, 3)
    return validate_cloud(pts)


def read_xyz(path: str) -> np.ndarray:
    """Ingest a text cloud, one whitespace-separated ``x y z`` per line."""
    rows = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise DataError(f"{path!r} line {lineno}: expected 3 fields")
                try:
                    rows.append([float(v) for v in parts])
                except ValueError as exc:
                    raise DataError(f"{path!r} line {lineno}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"cannot read {path!r}: {exc}") from exc
    if not rows:
        raise DataError(f"{path!r} holds no points")
    return validate_cloud(np.array(rows, dtype=np.float32))
