"""Descriptor indexing, exact nearest-neighbor search, recall protocols.

Search is exact linear scan (desk scale); the index is immutable after
build and query results are independent of insertion order because ties
resolve by lowest id. Protocols: plain recall@k / recall@1%, the pairwise
multi-run evaluation (every ordered pair of distinct runs, averaged), and
the revisit protocol (trajectory subsampling by traveled distance plus a
minimum time gap between query and database candidates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import constants
from .errors import (DimMismatch, Empty, InsufficientRuns, InvalidK,
                     MissingTimestamps, NoValidQueries)


@dataclass(frozen=True)
class EvalProtocol:
    success_radius_m: float = constants.EVAL_SUCCESS_RADIUS_M
    k_list: tuple[int, ...] = (1,)
    one_percent: bool = True
    revisit_min_gap_s: float = constants.REVISIT_MIN_GAP_S
    sampling_interval_m: float = constants.KITTI_SAMPLING_INTERVAL_M
    sampling_start_offset_m: float = constants.KITTI_SAMPLING_START_OFFSET_M

    def __post_init__(self):
        if self.success_radius_m <= 0:
            raise ValueError("success radius must be positive")
        if any(k < 1 for k in self.k_list):
            raise ValueError("k values must be >= 1")


@dataclass(frozen=True)
class RetrievalIndex:
    """Immutable descriptor database with ground-truth metadata."""

    descriptors: np.ndarray  # (N, D)
    ids: np.ndarray          # (N,) uint64
    positions: np.ndarray    # (N, 3) meters
    timestamps: np.ndarray | None = None  # (N,) seconds
    metric: str = "L2"

    @property
    def size(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass
class QuerySet:
    descriptors: np.ndarray
    positions: np.ndarray
    ids: np.ndarray | None = None
    timestamps: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.descriptors.shape[0]


def build_index(descriptors: np.ndarray, ids: np.ndarray, positions: np.ndarray,
                timestamps: np.ndarray | None = None, metric: str = "L2",
                ) -> RetrievalIndex:
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.ndim != 2 or descriptors.shape[0] == 0:
        raise Empty("index needs a non-empty (N, D) descriptor matrix")
    ids = np.asarray(ids, dtype=np.uint64)
    positions = np.asarray(positions, dtype=np.float64)
    if ids.shape[0] != descriptors.shape[0] or positions.shape[0] != descriptors.shape[0]:
        raise DimMismatch("ids/positions length must match descriptor count")
    if metric not in ("L2", "L1"):
        raise ValueError(f"unknown metric {metric!r}")
    if timestamps is not None:
        timestamps = np.asarray(timestamps, dtype=np.float64)
        timestamps.setflags(write=False)
    descriptors.setflags(write=False)
    ids.setflags(write=False)
    positions.setflags(write=False)
    return RetrievalIndex(descriptors=descriptors, ids=ids, positions=positions,
                          timestamps=timestamps, metric=metric)


def _distances(index_desc: np.ndarray, query: np.ndarray, metric: str) -> np.ndarray:
    diff = index_desc - query
    if metric == "L2":
        return np.sqrt((diff ** 2).sum(axis=1))
    return np.abs(diff).sum(axis=1)


def query_knn(index: RetrievalIndex, query: np.ndarray, k: int,
              subset: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact k smallest distances, ascending; ties resolve by lowest id.

    subset optionally restricts the search to given row indices.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != index.dim:
        raise DimMismatch(f"query dim {query.shape[0]} vs index dim {index.dim}")
    rows = np.arange(index.size) if subset is None else np.asarray(subset)
    n = rows.shape[0]
    if not 1 <= k <= n:
        raise InvalidK(f"k={k} outside [1, {n}]")
    dists = _distances(index.descriptors[rows], query, index.metric)
    ids = index.ids[rows]
    order = np.lexsort((ids, dists))[:k]
    return ids[order], dists[order]


def _ranked_rows(index: RetrievalIndex, query: np.ndarray,
                 subset: np.ndarray | None = None) -> np.ndarray:
    """All candidate rows ranked as query_knn would rank them."""
    rows = np.arange(index.size) if subset is None else np.asarray(subset)
    dists = _distances(index.descriptors[rows], query, index.metric)
    order = np.lexsort((index.ids[rows], dists))
    return rows[order]


def recall_at_k(queries: QuerySet, index: RetrievalIndex, protocol: EvalProtocol,
                k: int, subset_for_query: Callable[[int], np.ndarray] | None = None,
                ) -> float:
    """Fraction of queries whose top-k holds an entry within the success
    radius of the query position. Queries without any in-radius database
    entry are excluded from the denominator."""
    if k < 1:
        raise InvalidK(f"k={k}")
    hits = 0
    valid = 0
    for q in range(queries.size):
        rows = (np.arange(index.size) if subset_for_query is None
                else subset_for_query(q))
        if rows.shape[0] == 0:
            continue
        in_radius = (np.sqrt(((index.positions[rows] - queries.positions[q]) ** 2)
                             .sum(axis=1)) <= protocol.success_radius_m)
        if not in_radius.any():
            continue
        valid += 1
        ranked = _ranked_rows(index, queries.descriptors[q], rows)
        top = ranked[:min(k, rows.shape[0])]
        row_in_radius = dict(zip(rows.tolist(), in_radius.tolist()))
        if any(row_in_radius[int(r)] for r in top):
            hits += 1
    if valid == 0:
        raise NoValidQueries("no query has an in-radius database entry")
    return hits / valid


def one_percent_k(database_size: int) -> int:
    return max(1, math.ceil(database_size / 100))


def recall_at_one_percent(queries: QuerySet, index: RetrievalIndex,
                          protocol: EvalProtocol,
                          subset_for_query: Callable[[int], np.ndarray] | None = None,
                          ) -> float:
    return recall_at_k(queries, index, protocol, one_percent_k(index.size),
                       subset_for_query)


def recall_curve(queries: QuerySet, index: RetrievalIndex, protocol: EvalProtocol,
                 max_k: int = constants.RECALL_CURVE_MAX_K) -> list[tuple[int, float]]:
    """(k, recall) for k = 1..max_k; single ranking pass per query."""
    max_k = min(max_k, index.size)
    hits = np.zeros(max_k)
    valid = 0
    for q in range(queries.size):
        in_radius = (np.sqrt(((index.positions - queries.positions[q]) ** 2)
                             .sum(axis=1)) <= protocol.success_radius_m)
        if not in_radius.any():
            continue
        valid += 1
        ranked = _ranked_rows(index, queries.descriptors[q])
        good = in_radius[ranked[:max_k]]
        first = np.argmax(good) if good.any() else max_k
        if first < max_k:
            hits[first:] += 1
    if valid == 0:
        raise NoValidQueries("no query has an in-radius database entry")
    return [(k + 1, float(hits[k] / valid)) for k in range(max_k)]


def kitti_revisit_filter(query_timestamp: float, candidate_timestamps: np.ndarray,
                         min_gap_s: float = constants.REVISIT_MIN_GAP_S) -> np.ndarray:
    """Boolean mask keeping candidates strictly older than the gap."""
    if candidate_timestamps is None:
        raise MissingTimestamps("revisit filtering needs timestamps")
    ts = np.asarray(candidate_timestamps, dtype=np.float64)
    return (ts < query_timestamp) & (query_timestamp - ts > min_gap_s)


def sample_by_distance(positions: np.ndarray, timestamps: np.ndarray,
                       interval_m: float, start_offset_m: float = 0.0) -> np.ndarray:
    """Subsample a trajectory: walk in time order, keep a sample once the
    cumulative traveled distance passes start_offset, then every interval."""
    order = np.argsort(timestamps, kind="stable")
    pos = np.asarray(positions, dtype=np.float64)[order]
    steps = np.zeros(len(order))
    steps[1:] = np.sqrt(((pos[1:] - pos[:-1]) ** 2).sum(axis=1))
    traveled = np.cumsum(steps)
    kept = []
    next_at = start_offset_m
    for i in range(len(order)):
        if traveled[i] >= next_at:
            kept.append(order[i])
            next_at = traveled[i] + interval_m
    return np.asarray(kept, dtype=np.int64)


def kitti_revisit_eval(queries: QuerySet, index: RetrievalIndex,
                       protocol: EvalProtocol) -> dict[str, float]:
    """Revisit protocol: subsample query/database by traveled distance with
    offset start points, then only database entries older than the minimum
    gap count for each query."""
    if queries.timestamps is None or index.timestamps is None:
        raise MissingTimestamps("revisit protocol needs timestamps on both sides")
    q_rows = sample_by_distance(queries.positions, queries.timestamps,
                                protocol.sampling_interval_m, 0.0)
    db_rows = sample_by_distance(index.positions, index.timestamps,
                                 protocol.sampling_interval_m,
                                 protocol.sampling_start_offset_m)
    sub_queries = QuerySet(
        descriptors=queries.descriptors[q_rows],
        positions=queries.positions[q_rows],
        ids=None if queries.ids is None else queries.ids[q_rows],
        timestamps=queries.timestamps[q_rows])

    def subset(q: int) -> np.ndarray:
        keep = kitti_revisit_filter(float(sub_queries.timestamps[q]),
                                    index.timestamps[db_rows],
                                    protocol.revisit_min_gap_s)
        return db_rows[keep]

    results: dict[str, float] = {}
    for k in protocol.k_list:
        results[str(k)] = recall_at_k(sub_queries, index, protocol, k, subset)
    if protocol.one_percent:
        results["1pct"] = recall_at_k(sub_queries, index, protocol,
                                      one_percent_k(db_rows.shape[0]), subset)
    return results


def oxford_pairwise_eval(runs: Sequence[tuple[QuerySet, RetrievalIndex]],
                         protocol: EvalProtocol,
                         test_region_filter: Callable[[np.ndarray], bool] | None = None,
                         ) -> dict[str, float]:
    """Average recall over every ordered pair of distinct runs.

    Queries of run i (optionally restricted to test regions) are evaluated
    against the full database of run j, for all i != j; the unweighted mean
    over the pairs is returned per metric.
    """
    if len(runs) < 2:
        raise InsufficientRuns(f"need >= 2 runs, got {len(runs)}")
    metrics = [str(k) for k in protocol.k_list] + (["1pct"] if protocol.one_percent else [])
    sums = {m: 0.0 for m in metrics}
    pairs = 0
    for i, (qset, _) in enumerate(runs):
        if test_region_filter is not None:
            keep = np.asarray([test_region_filter(p) for p in qset.positions])
            qset = QuerySet(descriptors=qset.descriptors[keep],
                            positions=qset.positions[keep],
                            ids=None if qset.ids is None else qset.ids[keep],
                            timestamps=None if qset.timestamps is None
                            else qset.timestamps[keep])
        for j, (_, db) in enumerate(runs):
            if i == j:
                continue
            pairs += 1
            for k in protocol.k_list:
                sums[str(k)] += recall_at_k(qset, db, protocol, k)
            if protocol.one_percent:
                sums["1pct"] += recall_at_one_percent(qset, db, protocol)
    return {m: sums[m] / pairs for m in metrics}


def write_results_csv(path, rows: list[tuple[str, str, float]]) -> None:
    """`protocol,k,recall` rows."""
    lines = ["protocol,k,recall"]
    for protocol_name, k, recall in rows:
        lines.append(f"{protocol_name},{k},{recall!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_curve_csv(path, curve: list[tuple[int, float]]) -> None:
    """`k,recall` rows for the recall@K curve."""
    lines = ["k,recall"]
    for k, recall in curve:
        lines.append(f"{k},{recall!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
