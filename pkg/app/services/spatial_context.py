"""
Spatial context: station categories from POI vectors.

POI counts are min-max normalized per feature, stations are linked to their
top-k most cosine-similar peers, and the connected components of that graph
become the station categories.
"""

from __future__ import annotations

import logging
from collections import deque
from pathlib import Path
from typing import Dict, Iterable, List, Set, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from app.core.exceptions import DataError, ShapeError

logger = logging.getLogger(__name__)


class StationTable(BaseModel):
    """
    Per-station POI vectors.

    Attributes:
        stations: Station identifiers; list position is the station index
        poi: Raw nonnegative counts, one row of M features per station
        normalized: Min-max normalized rows in [0, 1]
    """

    stations: List[str]
    poi: List[List[float]]
    normalized: List[List[float]] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_dimensions(self) -> "StationTable":
        if len(self.stations) != len(self.poi):
            raise ValueError("one POI row per station is required")
        if len({len(row) for row in self.poi}) > 1:
            raise ValueError("all stations must share the POI dimensionality")
        if any(v < 0 for row in self.poi for v in row):
            raise ValueError("POI counts must be nonnegative")
        return self

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.normalized if self.normalized else self.poi, dtype=np.float64)


class StationCategories(BaseModel):
    """Top-k similarity edges and the component label of every station."""

    edges: List[Tuple[int, int]]
    category_of: Dict[str, int]
    num_categories: int

    def sizes(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for label in self.category_of.values():
            counts[label] = counts.get(label, 0) + 1
        return counts

    def export(self) -> str:
        """``station_id,category_index`` rows."""
        return "".join(f"{s},{c}\n" for s, c in self.category_of.items())


def load_poi_table(lines: Iterable[str]) -> StationTable:
    """Parse ``station_id,x_1,...,x_M`` rows."""
    stations, rows = [], []
    for number, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        station, *values = [f.strip() for f in text.split(",")]
        try:
            rows.append([float(v) for v in values])
        except ValueError:
            raise DataError(f"POI table line {number}: non-numeric feature") from None
        stations.append(station)
    return StationTable(stations=stations, poi=rows)


def normalize_poi(table: StationTable) -> StationTable:
    """Feature-wise min-max scaling; constant features map to 0."""
    if not table.stations:
        raise DataError("POI table has no stations")
    raw = np.asarray(table.poi, dtype=np.float64)
    low, high = raw.min(axis=0), raw.max(axis=0)
    span = high - low
    scaled = np.zeros_like(raw)
    varying = span > 0
    scaled[:, varying] = (raw[:, varying] - low[varying]) / span[varying]
    return table.model_copy(update={"normalized": scaled.tolist()})


def cosine(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine similarity; 0 when either side is the zero vector."""
    if x.shape != y.shape:
        raise ShapeError("station_similarity", x.shape, y.shape)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.dot(x, y) / (nx * ny))


def station_similarity(table: StationTable, r: int, q: int) -> float:
    matrix = table.matrix
    return cosine(matrix[r], matrix[q])


def similarity_matrix(table: StationTable) -> np.ndarray:
    matrix = table.matrix
    norms = np.linalg.norm(matrix, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = matrix / safe[:, None]
    sims = unit @ unit.T
    sims[norms == 0, :] = 0.0
    sims[:, norms == 0] = 0.0
    return sims


def build_station_graph(table: StationTable, k_loc: int = 5) -> List[Tuple[int, int]]:
    """
    Link each station to its ``k_loc`` most similar peers (ties: smaller
    index first) and return the symmetric closure as sorted pairs (i < j).
    """
    count = len(table.stations)
    if count < 2:
        return []
    sims = similarity_matrix(table)
    edges: Set[Tuple[int, int]] = set()
    for r in range(count):
        peers = sorted((q for q in range(count) if q != r), key=lambda q: (-sims[r, q], q))
        for q in peers[:k_loc]:
            edges.add((min(r, q), max(r, q)))
    return sorted(edges)


def _label_components(groups: List[List[int]], stations: List[str], edges) -> StationCategories:
    groups = sorted((sorted(g) for g in groups), key=lambda g: g[0])
    category_of = {}
    for label, members in enumerate(groups, start=1):
        for i in members:
            category_of[stations[i]] = label
    ordered = {s: category_of[s] for s in stations}
    return StationCategories(edges=list(edges), category_of=ordered, num_categories=len(groups))


def components_to_categories(edges: Iterable[Tuple[int, int]], stations: List[str]) -> StationCategories:
    """
    Breadth-first connected components, labelled 1..F by smallest member index.
    """
    edges = list(edges)
    neighbours: Dict[int, Set[int]] = {i: set() for i in range(len(stations))}
    for u, v in edges:
        neighbours[u].add(v)
        neighbours[v].add(u)
    seen: Set[int] = set()
    groups: List[List[int]] = []
    for start in range(len(stations)):
        if start in seen:
            continue
        seen.add(start)
        queue, members = deque([start]), []
        while queue:
            node = queue.popleft()
            members.append(node)
            for nxt in sorted(neighbours[node]):
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        groups.append(members)
    return _label_components(groups, stations, edges)


class UnionFind:
    """
    Union-Find data structure with path compression and union by rank.
    """

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        if self.parent[x] != x:
            self.parent[x] = self.find(self.parent[x])
        return self.parent[x]

    def union(self, x: int, y: int) -> None:
        px, py = self.find(x), self.find(y)
        if px == py:
            return
        if self.rank[px] < self.rank[py]:
            px, py = py, px
        self.parent[py] = px
        if self.rank[px] == self.rank[py]:
            self.rank[px] += 1

    def groups(self) -> Dict[int, List[int]]:
        result: Dict[int, List[int]] = {}
        for i in range(len(self.parent)):
            result.setdefault(self.find(i), []).append(i)
        return result


def union_find_categories(edges: Iterable[Tuple[int, int]], stations: List[str]) -> StationCategories:
    """Same labelling as ``components_to_categories`` computed with union-find."""
    edges = list(edges)
    forest = UnionFind(len(stations))
    for u, v in edges:
        forest.union(u, v)
    return _label_components(list(forest.groups().values()), stations, edges)


def categorize_stations(table: StationTable, k_loc: int = 5) -> StationCategories:
    """normalize -> top-k similarity graph -> connected components."""
    normalized = normalize_poi(table)
    categories = components_to_categories(build_station_graph(normalized, k_loc), normalized.stations)
    logger.info("%d stations grouped into %d categories", len(table.stations), categories.num_categories)
    return categories


def read_poi_table(path: Path) -> StationTable:
    with open(path, encoding="utf-8") as handle:
        return load_poi_table(handle)
