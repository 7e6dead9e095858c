"""Directed road graph with Top-K neighbor lists and log-weight attention bias."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

EDGE_HEADER = ("src_id", "dst_id", "weight")
LOG_FLOOR = 1e-6


class GraphError(ValueError):
    pass


@dataclass(eq=False)
class RoadGraph:
    """Weighted directed graph over an ordered list of segments.

    ``adjacency[i, j]`` is the weight of edge ``i -> j``. Neighbor lists are
    built lazily per ``K`` and cached.
    """

    segment_ids: list[str]
    adjacency: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        n = len(self.segment_ids)
        if a.shape != (n, n):
            raise GraphError(f"adjacency shape {a.shape} does not match {n} segments")
        if (a < 0).any() or not np.isfinite(a).all():
            raise GraphError("adjacency weights must be finite and non-negative")
        if len(set(self.segment_ids)) != n:
            raise GraphError("duplicate segment ids")
        a.flags.writeable = False
        self.adjacency = a
        self.index = {s: i for i, s in enumerate(self.segment_ids)}

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[str, str, float]],
                   segment_ids: Sequence[str] | None = None) -> "RoadGraph":
        edges = list(edges)
        if segment_ids is None:
            seen: dict[str, None] = {}
            for s, d, _ in edges:
                seen.setdefault(s)
                seen.setdefault(d)
            segment_ids = sorted(seen)
        ids = list(segment_ids)
        index = {s: i for i, s in enumerate(ids)}
        a = np.zeros((len(ids), len(ids)))
        seen_pairs = set()
        for row, (s, d, w) in enumerate(edges, start=1):
            for sid in (s, d):
                if sid not in index:
                    raise GraphError(f"edge {row}: unknown segment id {sid!r}")
            if w < 0 or not math.isfinite(w):
                raise GraphError(f"edge {row}: invalid weight {w}")
            if (s, d) in seen_pairs:
                log.warning("duplicate edge %s -> %s: weights summed", s, d)
            seen_pairs.add((s, d))
            a[index[s], index[d]] += w
        return cls(ids, a)

    def top_k(self, segment: str, k: int = 5) -> list[tuple[str, float]]:
        return top_k_neighbors(self, segment, k)


def load_graph(path, segment_ids: Sequence[str] | None = None) -> RoadGraph:
    """Read an edge list ``src_id,dst_id,weight``.

    With ``segment_ids`` given, any edge naming another id is an error and
    the graph keeps that id order; otherwise ids are sorted.
    """
    edges = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != EDGE_HEADER:
            raise GraphError(f"{path}: header must be {','.join(EDGE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise GraphError(f"{path}:{lineno}: expected 3 fields")
            s, d, w = (c.strip() for c in row)
            try:
                wf = float(w)
            except ValueError:
                raise GraphError(f"{path}:{lineno}: bad weight {w!r}") from None
            if wf < 0:
                raise GraphError(f"{path}:{lineno}: negative weight {wf}")
            if segment_ids is not None:
                for sid in (s, d):
                    if sid not in segment_ids:
                        raise GraphError(f"{path}:{lineno}: segment {sid!r} not in speed data")
            edges.append((s, d, wf))
    return RoadGraph.from_edges(edges, segment_ids)


def write_edges(path, edges: Iterable[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EDGE_HEADER)
        w.writerows(edges)


def top_k_neighbors(graph: RoadGraph, segment: str, k: int = 5) -> list[tuple[str, float]]:
    """Up to ``k`` strongest out-neighbors, weights renormalized over the list.

    Order is weight descending, then id ascending. Self-loops and zero
    weights are not neighbors.
    """
    if k < 1:
        raise GraphError("K must be at least 1")
    if segment not in graph.index:
        raise GraphError(f"unknown segment {segment!r}")
    key = (segment, k)
    if key in graph._cache:
        return graph._cache[key]
    i = graph.index[segment]
    row = graph.adjacency[i]
    cand = [(graph.segment_ids[j], float(row[j])) for j in np.flatnonzero(row > 0) if j != i]
    cand.sort(key=lambda t: (-t[1], t[0]))
    cand = cand[:k]
    total = sum(w for _, w in cand)
    out = [(s, w / total) for s, w in cand] if cand else []
    graph._cache[key] = out
    return out


def log_bias(w):
    """``log(max(w, 1e-6))``, elementwise."""
    return np.log(np.maximum(np.asarray(w, dtype=np.float64), LOG_FLOOR))
