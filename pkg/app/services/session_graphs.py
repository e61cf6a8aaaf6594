"""
Multi-hop session graphs.

Builds the directed 1-hop transition graph of a window, composes the 2-hop and
3-hop edge sets, and packs a batch of windows into the dense arrays the model
consumes (normalized adjacency per hop, node slots, selectors).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.core.exceptions import DataError
from app.schemas.events import PAD, PredictionInstance

Edge = Tuple[int, int]


class MultiHopGraphs(BaseModel):
    """
    Node set and directed 1/2/3-hop edge sets of one window.

    Attributes:
        nodes: Distinct real apps of the window
        e1, e2, e3: Directed edges per hop
        last_app: Most recent app a_T
    """

    model_config = ConfigDict(frozen=True)

    nodes: FrozenSet[int]
    e1: FrozenSet[Edge] = frozenset()
    e2: FrozenSet[Edge] = frozenset()
    e3: FrozenSet[Edge] = frozenset()
    last_app: int

    def edges(self, hop: int) -> FrozenSet[Edge]:
        return (self.e1, self.e2, self.e3)[hop - 1]

    def non_isolated(self, hop: int) -> Set[int]:
        """Nodes with at least one incident edge in the given hop."""
        return {v for edge in self.edges(hop) for v in edge}

    def dump(self) -> str:
        """Edge lists as ``hop<TAB>u<TAB>v`` lines."""
        lines = []
        for hop in (1, 2, 3):
            for u, v in sorted(self.edges(hop)):
                lines.append(f"{hop}\t{u}\t{v}")
        return "\n".join(lines)


def build_1hop(window: Sequence[int]) -> MultiHopGraphs:
    """
    Consecutive-transition graph over the non-PAD entries of ``window``;
    duplicates collapse and self-loops are dropped.
    """
    apps = [a for a in window if a != PAD]
    if not apps:
        raise DataError("window has no real apps")
    e1 = {(u, v) for u, v in zip(apps, apps[1:]) if u != v}
    return MultiHopGraphs(nodes=frozenset(apps), e1=frozenset(e1), last_app=apps[-1])


def compose_hops(e1: Iterable[Edge], nodes: Iterable[int] = ()) -> Tuple[FrozenSet[Edge], FrozenSet[Edge]]:
    """
    e2 = {(u, w): u != w, (u, v) in e1, (v, w) in e1}
    e3 = {(u, x): u != x, (u, w) in e2, (w, x) in e1}
    """
    e1 = set(e1)
    known = set(nodes)
    if known and any(u not in known or v not in known for u, v in e1):
        raise DataError("1-hop edge endpoint outside the node set")
    successors: dict = {}
    for u, v in e1:
        successors.setdefault(u, set()).add(v)
    e2 = {(u, w) for u, v in e1 for w in successors.get(v, ()) if u != w}
    e3 = {(u, x) for u, w in e2 for x in successors.get(w, ()) if u != x}
    return frozenset(e2), frozenset(e3)


def build_graphs(window: Sequence[int]) -> MultiHopGraphs:
    graphs = build_1hop(window)
    e2, e3 = compose_hops(graphs.e1, graphs.nodes)
    return graphs.model_copy(update={"e2": e2, "e3": e3})


def normalized_adjacency(edges: Iterable[Edge], order: Sequence[int], size: int) -> np.ndarray:
    """
    Symmetrically normalized adjacency D^-1/2 A D^-1/2 of the undirected
    closure of ``edges`` over the node slots ``order``; isolated rows stay zero.
    """
    slot = {app: i for i, app in enumerate(order)}
    adjacency = np.zeros((size, size))
    for u, v in edges:
        adjacency[slot[u], slot[v]] = 1.0
        adjacency[slot[v], slot[u]] = 1.0
    degree = adjacency.sum(axis=1)
    inv_sqrt = np.zeros(size)
    nonzero = degree > 0
    inv_sqrt[nonzero] = 1.0 / np.sqrt(degree[nonzero])
    return adjacency * inv_sqrt[:, None] * inv_sqrt[None, :]


@dataclass
class GraphBatch:
    """
    Dense encoding of a batch of windows.

    Attributes:
        node_ids: [B, T] app index per node slot (0 for empty slots)
        node_mask: [B, T] True for occupied slots
        adjacency: [B, H, T, T] normalized adjacency per hop
        last_selector: [B, 1, T] one-hot slot of a_T
        intent_selector: [B, K, T] one-hot slots of the last K window entries
            (all-zero rows where the window is shorter than K)
        hours, categories, targets: [B] context and labels (category 0 = absent)
        graphs: Per-instance graph objects
    """

    node_ids: np.ndarray
    node_mask: np.ndarray
    adjacency: np.ndarray
    last_selector: np.ndarray
    intent_selector: np.ndarray
    hours: np.ndarray
    categories: np.ndarray
    targets: np.ndarray
    graphs: List[MultiHopGraphs]

    def __len__(self) -> int:
        return len(self.graphs)

    def subset(self, rows: np.ndarray) -> "GraphBatch":
        return GraphBatch(
            node_ids=self.node_ids[rows],
            node_mask=self.node_mask[rows],
            adjacency=self.adjacency[rows],
            last_selector=self.last_selector[rows],
            intent_selector=self.intent_selector[rows],
            hours=self.hours[rows],
            categories=self.categories[rows],
            targets=self.targets[rows],
            graphs=[self.graphs[i] for i in rows],
        )


def encode_batch(
    instances: Sequence[PredictionInstance],
    window: int,
    intent_window: int,
    hops: int = 3,
    graphs: Optional[Sequence[MultiHopGraphs]] = None,
) -> GraphBatch:
    """
    Pack instances into a ``GraphBatch``. Node slots hold the distinct apps
    in ascending index order; ``hops`` is 3, or 1 for the 1-hop-only model.
    """
    size = len(instances)
    node_ids = np.zeros((size, window), dtype=np.int64)
    node_mask = np.zeros((size, window), dtype=bool)
    adjacency = np.zeros((size, hops, window, window))
    last_selector = np.zeros((size, 1, window))
    intent_selector = np.zeros((size, intent_window, window))
    hours = np.zeros(size, dtype=np.int64)
    categories = np.zeros(size, dtype=np.int64)
    targets = np.zeros(size, dtype=np.int64)
    built: List[MultiHopGraphs] = []

    for b, inst in enumerate(instances):
        g = graphs[b] if graphs is not None else build_graphs(inst.window)
        built.append(g)
        order = sorted(g.nodes)
        if len(order) > window:
            raise DataError(f"window has {len(order)} distinct apps but only {window} node slots")
        slot = {app: i for i, app in enumerate(order)}
        node_ids[b, : len(order)] = order
        node_mask[b, : len(order)] = True
        for h in range(hops):
            adjacency[b, h] = normalized_adjacency(g.edges(h + 1), order, window)
        last_selector[b, 0, slot[g.last_app]] = 1.0
        recent = inst.window[-intent_window:]
        for k, app in enumerate(recent):
            if app != PAD:
                intent_selector[b, k, slot[app]] = 1.0
        hours[b] = inst.tau
        categories[b] = inst.rho_category or 0
        targets[b] = inst.target

    return GraphBatch(
        node_ids, node_mask, adjacency, last_selector, intent_selector, hours, categories, targets, built
    )
