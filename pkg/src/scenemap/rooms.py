"""Room segmentation of the place graph.

Inflating obstacles by a distance delta removes every place with less
clearance than delta; for a good delta the surviving graph splits into one
connected component per room. The sweep runs over a list of deltas, takes
the median component count n_r for robustness, seeds room labels from the
components of the best dilation, and assigns the remaining places by
greedy modularity gain over the full graph. The room and building layers
are then rebuilt from scratch.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import BuildingAttrs, EdgeKind, Layer, NodeId, RoomAttrs, SceneGraph


@dataclass
class RoomParams:
    delta_min: float = 0.45
    delta_max: float = 1.2
    num_deltas: int = 10
    # components below this size neither count toward n_r nor seed a room;
    # 1 keeps the raw component count
    min_seed_component: int = 1

    def deltas(self) -> np.ndarray:
        if self.num_deltas < 1 or self.delta_min <= 0 or self.delta_max < self.delta_min:
            raise ValueError("bad dilation sweep parameters")
        return np.linspace(self.delta_min, self.delta_max, self.num_deltas)


@dataclass
class RoomAssignment:
    labels: dict[NodeId, int]
    n_r: int
    delta_star: float
    fallback: bool = False
    q_history: list[float] = field(default_factory=list)


def _place_adjacency(graph: SceneGraph) -> dict[NodeId, list[NodeId]]:
    adj: dict[NodeId, list[NodeId]] = {n: [] for n in graph.layer_nodes(Layer.PLACE)}
    for a, b in sorted(graph.intra_edges):
        if a.layer == Layer.PLACE:
            adj[a].append(b)
            adj[b].append(a)
    return adj


def components_at_dilation(
    graph: SceneGraph, delta: float, adjacency: Optional[dict] = None
) -> tuple[int, dict[NodeId, int]]:
    """Connected components of the subgraph of places with clearance >= delta.

    The dilated subgraph is never materialized: the breadth-first search
    simply skips nodes (and thus edges) below the threshold.
    """
    if delta <= 0:
        raise ValueError("dilation distance must be positive")
    adj = adjacency if adjacency is not None else _place_adjacency(graph)
    survives = {
        n for n in adj if graph.nodes[n].obstacle_distance >= delta
    }
    comp: dict[NodeId, int] = {}
    count = 0
    for start in sorted(survives):
        if start in comp:
            continue
        comp[start] = count
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            for nb in adj[cur]:
                if nb in survives and nb not in comp:
                    comp[nb] = count
                    queue.append(nb)
        count += 1
    return count, comp


def lower_median(values) -> int:
    ordered = sorted(values)
    if not ordered:
        raise ValueError("median of empty sweep")
    return ordered[(len(ordered) - 1) // 2]


def _select_from_sweep(deltas, counts, survivors):
    """(delta*, index, n_r, fallback) from precomputed sweep results."""
    n_r = lower_median(counts)
    candidates = [i for i, c in enumerate(counts) if c == n_r]
    fallback = False
    if not candidates:
        best_gap = min(abs(c - n_r) for c in counts)
        candidates = [i for i, c in enumerate(counts) if abs(c - n_r) == best_gap]
        fallback = True
    best = max(candidates, key=lambda i: (survivors[i], -deltas[i]))
    return float(deltas[best]), best, int(n_r), fallback


def select_dilation(
    graph: SceneGraph, params: RoomParams
) -> tuple[float, dict[NodeId, int], int, bool]:
    """Pick the dilation whose surviving graph is largest among those with
    the median component count; ties break toward the smallest delta."""
    adj = _place_adjacency(graph)
    deltas = params.deltas()
    counts = []
    survivors = []
    maps = []
    for d in deltas:
        count, comp = components_at_dilation(graph, float(d), adj)
        if params.min_seed_component > 1:
            comp = _filter_small_components(comp, params.min_seed_component)
            count = len(set(comp.values()))
        counts.append(count)
        survivors.append(len(comp))
        maps.append(comp)
    delta_star, idx, n_r, fallback = _select_from_sweep(deltas, counts, survivors)
    return delta_star, maps[idx], n_r, fallback


def _filter_small_components(comp: dict[NodeId, int], min_size: int) -> dict[NodeId, int]:
    sizes: dict[int, int] = {}
    for c in comp.values():
        sizes[c] = sizes.get(c, 0) + 1
    return {n: c for n, c in comp.items() if sizes[c] >= min_size}


def modularity(graph: SceneGraph, labels: dict[NodeId, int]) -> float:
    """Unweighted Newman modularity of a full place-graph partition."""
    adj = _place_adjacency(graph)
    edges = [
        (a, b) for a, b in graph.intra_edges if a.layer == Layer.PLACE
    ]
    m = len(edges)
    if m == 0:
        return 0.0
    degree = {n: len(adj[n]) for n in adj}
    q = 0.0
    for a, b in edges:
        if labels.get(a) is not None and labels.get(a) == labels.get(b):
            q += 1.0 / m
    sum_deg: dict[int, float] = {}
    for n, d in degree.items():
        lab = labels.get(n)
        if lab is not None:
            sum_deg[lab] = sum_deg.get(lab, 0.0) + d
    for total in sum_deg.values():
        q -= (total / (2.0 * m)) ** 2
    return q


def assign_remaining(graph: SceneGraph, seeds: dict[NodeId, int]) -> RoomAssignment:
    """Greedy modularity completion of a partially seeded room labeling.

    Unseeded nodes are visited in ascending id order and join the adjacent
    community with the largest modularity gain; passes repeat until no
    label changes. Seeded labels never move. Nodes whose component has no
    seed at all fall back to the nearest labeled node by Euclidean
    distance; with no seeds whatsoever everything becomes room 0.
    """
    adj = _place_adjacency(graph)
    places = sorted(adj)
    if not seeds:
        return RoomAssignment(labels={n: 0 for n in places}, n_r=1 if places else 0, delta_star=0.0)

    labels: dict[NodeId, int] = dict(seeds)
    m = sum(1 for a, b in graph.intra_edges if a.layer == Layer.PLACE)
    degree = {n: len(adj[n]) for n in places}
    sum_tot: dict[int, float] = {}
    for n, lab in labels.items():
        sum_tot[lab] = sum_tot.get(lab, 0.0) + degree[n]

    unseeded = [n for n in places if n not in seeds]
    q_history = [modularity(graph, labels)]

    def gain_of_joining(n: NodeId, community: int) -> float:
        if m == 0:
            return 0.0
        k_in = sum(1 for nb in adj[n] if labels.get(nb) == community)
        return k_in / m - (sum_tot.get(community, 0.0) * degree[n]) / (2.0 * m * m)

    for _ in range(100):
        moved = False
        for n in unseeded:
            neighbor_communities = sorted(
                {labels[nb] for nb in adj[n] if nb in labels}
            )
            if not neighbor_communities:
                continue
            current = labels.get(n)
            if current is not None:
                sum_tot[current] -= degree[n]
                if labels.get(n) is not None:
                    del labels[n]
            best_lab, best_gain = None, -np.inf
            for c in neighbor_communities:
                g = gain_of_joining(n, c)
                if g > best_gain + 1e-15:
                    best_gain, best_lab = g, c
            chosen = best_lab if best_lab is not None else current
            if current is not None and best_lab is not None:
                # keep the current community on exact ties
                if abs(gain_of_joining(n, current) - best_gain) <= 1e-15:
                    chosen = current
            labels[n] = chosen
            sum_tot[chosen] = sum_tot.get(chosen, 0.0) + degree[n]
            if chosen != current:
                moved = True
        q_history.append(modularity(graph, labels))
        if not moved:
            break

    # components without any seed: nearest labeled node wins
    for n in places:
        if n in labels:
            continue
        pos = graph.nodes[n].position
        best = min(
            (node for node in places if node in labels),
            key=lambda o: (float(np.linalg.norm(graph.nodes[o].position - pos)), o),
        )
        labels[n] = labels[best]

    return RoomAssignment(
        labels=labels,
        n_r=len(set(labels.values())),
        delta_star=0.0,
        q_history=q_history,
    )


def detect_rooms(graph: SceneGraph, params: RoomParams | None = None) -> RoomAssignment:
    """Rebuild the room and building layers from the current places."""
    params = params or RoomParams()
    places = graph.layer_nodes(Layer.PLACE)
    if not places:
        raise ValueError("cannot detect rooms on an empty places layer")

    delta_star, seeds, n_r, fallback = select_dilation(graph, params)
    assignment = assign_remaining(graph, seeds)
    assignment.delta_star = delta_star
    assignment.n_r = n_r
    assignment.fallback = fallback

    for room in graph.layer_nodes(Layer.ROOM):
        graph.remove_node(room)

    # room indices -> contiguous, ordered by smallest member place id
    by_room: dict[int, list[NodeId]] = {}
    for n, lab in assignment.labels.items():
        by_room.setdefault(lab, []).append(n)
    ordered = sorted(by_room.values(), key=lambda members: min(members))

    room_ids = []
    relabeled: dict[NodeId, int] = {}
    for idx, members in enumerate(ordered):
        centroid = np.mean([graph.nodes[p].position for p in members], axis=0)
        rid = graph.add_node(
            Layer.ROOM, RoomAttrs(centroid=centroid, member_places=set(members))
        )
        room_ids.append(rid)
        for p in members:
            relabeled[p] = idx
            graph.add_edge(p, rid, EdgeKind.INTER)
    assignment.labels = relabeled

    for a, b in sorted(graph.intra_edges):
        if a.layer != Layer.PLACE:
            continue
        ra, rb = relabeled.get(a), relabeled.get(b)
        if ra is None or rb is None or ra == rb:
            continue
        graph.add_edge(room_ids[ra], room_ids[rb], EdgeKind.INTRA)

    buildings = graph.layer_nodes(Layer.BUILDING)
    centroid = np.mean([graph.nodes[r].centroid for r in room_ids], axis=0)
    if buildings:
        building = buildings[0]
        graph.nodes[building].centroid = centroid
    else:
        building = graph.add_node(Layer.BUILDING, BuildingAttrs(centroid=centroid))
    for rid in room_ids:
        graph.add_edge(building, rid, EdgeKind.INTER)

    assignment.n_r = n_r
    return assignment
