"""Retrieval database and localization metrics.

A database stores (id, pose, unit-norm feature) triples and answers
cosine top-N queries with a deterministic tie-break (ascending id). The
metrics follow the localization convention: a retrieval is correct when
the candidate's pose lies within ``eta`` meters of the query's pose.
Recall@N checks the first N candidates; the max-F1 sweep classifies
top-1 retrievals at every observed similarity threshold.

On disk a database is a JSON manifest (ids, poses, dims, byte offsets,
blob checksum) next to a little-endian float32 feature blob.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .aggregation import GlobalFeature
from .errors import DataError

DB_FORMAT = "i2ploc-db-v1"
DEFAULT_ETA_M = 20.0
DEFAULT_TOPN = (1, 5, 10, 15, 20)
DEFAULT_QUERY_SPACING_M = 3.0


@dataclass(frozen=True)
class PoseRecord:
    """Ground-truth position of one sample, in meters."""

    id: int
    position: tuple[float, float, float]

    def __post_init__(self):
        if len(self.position) != 3 or not all(np.isfinite(self.position)):
            raise DataError(f"pose {self.id}: position must be 3 finite coordinates")

    def distance_to(self, other: "PoseRecord") -> float:
        a = np.asarray(self.position, dtype=np.float64)
        b = np.asarray(other.position, dtype=np.float64)
        return float(np.linalg.norm(a - b))


@dataclass
class RetrievalResult:
    """Ranked candidates for one query, similarities non-increasing."""

    query_id: int
    candidate_ids: np.ndarray
    similarities: np.ndarray


@dataclass
class RetrievalDatabase:
    """In-memory store of (id, pose, feature) triples plus a modality tag."""

    ids: np.ndarray  # (n,) int64
    poses: dict[int, PoseRecord]
    features: np.ndarray  # (n, dim) float32, unit rows
    modality: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1] if self.features.ndim == 2 else 0


def build_database(features: list[GlobalFeature], poses: list[PoseRecord], modality: str = "") -> RetrievalDatabase:
    """Assemble a queryable store; ids must be unique and match the poses."""
    feat_ids = [f.sample_id for f in features]
    if len(set(feat_ids)) != len(feat_ids):
        raise DataError("duplicate sample ids in features")
    pose_map = {p.id: p for p in poses}
    if len(pose_map) != len(poses):
        raise DataError("duplicate ids in poses")
    if set(feat_ids) != set(pose_map):
        raise DataError("feature ids and pose ids do not match")
    if features:
        dims = {f.vector.shape for f in features}
        if len(dims) != 1:
            raise DataError(f"inconsistent feature dims: {dims}")
        mods = {f.modality for f in features if f.modality}
        if modality and mods and mods != {modality}:
            raise DataError(f"feature modality {mods} clashes with database modality {modality!r}")
    order = np.argsort(feat_ids)
    ids = np.asarray(feat_ids, dtype=np.int64)[order]
    mat = (
        np.stack([features[i].vector for i in order]).astype(np.float32)
        if features
        else np.zeros((0, 0), dtype=np.float32)
    )
    return RetrievalDatabase(ids=ids, poses=pose_map, features=mat, modality=modality)


def save_database(db: RetrievalDatabase, base_path: str) -> None:
    blob = np.ascontiguousarray(db.features, dtype="<f4").tobytes()
    dim = db.feature_dim
    entries = []
    for row, sample_id in enumerate(db.ids):
        pose = db.poses[int(sample_id)]
        entries.append(
            {"id": int(sample_id), "pose": list(pose.position), "offset": row * dim * 4}
        )
    doc = {
        "format": DB_FORMAT,
        "modality": db.modality,
        "dtype": "<f4",
        "feature_dim": dim,
        "count": len(db),
        "checksum_sha256": hashlib.sha256(blob).hexdigest(),
        "entries": entries,
    }
    with open(base_path + ".json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(base_path + ".bin", "wb") as fh:
        fh.write(blob)


def load_database(base_path: str) -> RetrievalDatabase:
    try:
        with open(base_path + ".json") as fh:
            doc = json.load(fh)
        with open(base_path + ".bin", "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read database {base_path!r}: {exc}") from exc
    if doc.get("format") != DB_FORMAT:
        raise DataError(f"unrecognized database format in {base_path!r}")
    if hashlib.sha256(blob).hexdigest() != doc["checksum_sha256"]:
        raise DataError(f"checksum mismatch in {base_path!r}")
    dim = doc["feature_dim"]
    count = doc["count"]
    mat = np.zeros((count, dim), dtype=np.float32)
    ids = np.zeros(count, dtype=np.int64)
    poses = {}
    for row, entry in enumerate(doc["entries"]):
        ids[row] = entry["id"]
        mat[row] = np.frombuffer(blob, dtype="<f4", count=dim, offset=entry["offset"])
        poses[entry["id"]] = PoseRecord(id=entry["id"], position=tuple(entry["pose"]))
    return RetrievalDatabase(ids=ids, poses=poses, features=mat, modality=doc.get("modality", ""))


def query_topn(db: RetrievalDatabase, query, n: int) -> RetrievalResult:
    """Top-N cosine matches; similarity ties break toward the lower id."""
    if len(db) == 0:
        raise DataError("query against an empty database")
    if n < 1 or n > len(db):
        raise DataError(f"top-N needs 1 <= N <= {len(db)}, got {n}")
    if isinstance(query, GlobalFeature):
        vec, qid = query.vector, query.sample_id
    else:
        vec, qid = np.asarray(query, dtype=np.float32), -1
    if vec.shape != (db.feature_dim,):
        raise DataError(f"query dim {vec.shape} vs database dim {db.feature_dim}")
    sims = db.features.astype(np.float64) @ vec.astype(np.float64)
    order = np.lexsort((db.ids, -sims))[:n]
    return RetrievalResult(
        query_id=qid,
        candidate_ids=db.ids[order],
        similarities=sims[order],
    )


def _query_pose(result: RetrievalResult, poses: dict[int, PoseRecord]) -> PoseRecord:
    if result.query_id not in poses:
        raise DataError(f"missing pose for query {result.query_id}")
    return poses[result.query_id]


def _candidate_pose(cid: int, poses: dict[int, PoseRecord]) -> PoseRecord:
    if cid not in poses:
        raise DataError(f"missing pose for candidate {cid}")
    return poses[cid]


def recall_at_n(
    results: list[RetrievalResult],
    poses: dict[int, PoseRecord],
    eta_m: float = DEFAULT_ETA_M,
    n: int = 1,
) -> float:
    """Fraction of queries with any of the first N candidates within eta."""
    if not results:
        raise DataError("recall over an empty result set")
    hits = 0
    for res in results:
        qp = _query_pose(res, poses)
        for cid in res.candidate_ids[:n]:
            if _candidate_pose(int(cid), poses).distance_to(qp) <= eta_m:
                hits += 1
                break
    return hits / len(results)


def _top1_table(results, poses, eta_m):
    """Per query: (top-1 similarity, whether top-1 is within eta)."""
    sims = np.zeros(len(results))
    correct = np.zeros(len(results), dtype=bool)
    for i, res in enumerate(results):
        if len(res.candidate_ids) == 0:
            raise DataError(f"query {res.query_id} has no candidates")
        qp = _query_pose(res, poses)
        top = _candidate_pose(int(res.candidate_ids[0]), poses)
        sims[i] = res.similarities[0]
        correct[i] = top.distance_to(qp) <= eta_m
    return sims, correct


def _sweep(sims: np.ndarray, correct: np.ndarray):
    """Classify top-1 retrievals at each distinct similarity threshold.

    Yields (threshold, tp, fp, fn, tn) in descending threshold order.
    """
    for xi in sorted(set(sims.tolist()), reverse=True):
        accepted = sims >= xi
        tp = int(np.sum(accepted & correct))
        fp = int(np.sum(accepted & ~correct))
        fn = int(np.sum(~accepted & correct))
        tn = len(sims) - tp - fp - fn
        yield xi, tp, fp, fn, tn


def max_f1(
    results: list[RetrievalResult],
    poses: dict[int, PoseRecord],
    eta_m: float = DEFAULT_ETA_M,
) -> tuple[float, float]:
    """Best F1 over the top-1 similarity threshold sweep, with its threshold.

    A query counts as TP when its top-1 similarity clears the threshold
    and its top-1 candidate lies within eta; FP when it clears the
    threshold but lies farther; FN when it misses the threshold despite
    lying within eta. Ties on F1 keep the highest threshold.
    """
    if not results:
        raise DataError("max_f1 over an empty result set")
    sims, correct = _top1_table(results, poses, eta_m)
    best_f1, best_xi = 0.0, float(sims.max())
    for xi, tp, fp, fn, _ in _sweep(sims, correct):
        denom = 2 * tp + fp + fn
        f1 = (2 * tp / denom) if denom else 0.0
        if f1 > best_f1:
            best_f1, best_xi = f1, xi
    return best_f1, best_xi


def pr_curve(
    results: list[RetrievalResult],
    poses: dict[int, PoseRecord],
    eta_m: float = DEFAULT_ETA_M,
) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) per distinct threshold, descending."""
    if not results:
        raise DataError("pr_curve over an empty result set")
    sims, correct = _top1_table(results, poses, eta_m)
    points = []
    for xi, tp, fp, fn, _ in _sweep(sims, correct):
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        points.append((xi, precision, recall))
    return points


def split_query_database(
    poses: list[PoseRecord], spacing_m: float = DEFAULT_QUERY_SPACING_M
) -> tuple[list[int], list[int]]:
    """Greedy arc-length split along an ordered trajectory.

    The first pose anchors the walk as a query; afterwards a pose turns
    into a query whenever the accumulated arc distance since the last
    query reaches ``spacing_m``. Everything else lands in the database.
    """
    if len(poses) < 2:
        raise DataError("trajectory split needs at least 2 poses")
    if spacing_m <= 0:
        raise DataError(f"query spacing must be positive, got {spacing_m}")
    queries = [poses[0].id]
    database = []
    since_last = 0.0
    for prev, cur in zip(poses[:-1], poses[1:]):
        since_last += cur.distance_to(prev)
        if since_last >= spacing_m:
            queries.append(cur.id)
            since_last = 0.0
        else:
            database.append(cur.id)
    return queries, database


# -- CSV emission ------------------------------------------------------------------


def write_metrics_csv(path: str, recalls: dict[int, float], f1: float, threshold: float) -> None:
    """Rows of ``metric,N,value``: one per recall N, then max-F1 and its threshold."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "N", "value"])
        for n in sorted(recalls):
            writer.writerow(["recall", n, f"{recalls[n]:.6f}"])
        writer.writerow(["max_f1", "", f"{f1:.6f}"])
        writer.writerow(["max_f1_threshold", "", f"{threshold:.6f}"])


def write_pr_csv(path: str, points: list[tuple[float, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        for xi, precision, recall in points:
            writer.writerow([f"{xi:.6f}", f"{precision:.6f}", f"{recall:.6f}"])


def write_rankings_csv(path: str, results: list[RetrievalResult]) -> None:
    """Raw ranking dump: every (query, rank, candidate, similarity) row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "rank", "candidate_id", "similarity"])
        for res in results:
            for rank, (cid, sim) in enumerate(zip(res.candidate_ids, res.similarities), 1):
                writer.writerow([res.query_id, rank, int(cid), f"{sim:.8f}"])
