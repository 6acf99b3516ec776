"""Scene-graph frontend: folds per-scan module outputs into the persistent
layered graph.

Keeps the mapping from live place-graph ids to scene-graph node ids,
appends agent poses as a chain, gives every new object and agent node an
inter-layer edge to its nearest active place (deferred when no place
exists yet), and absorbs archived mesh chunks into the persistent mesh.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import AgentAttrs, EdgeKind, Layer, NodeId, PlaceAttrs, SceneGraph
from .places import PlaceGraphDelta, SparsePlaceGraph
from .volumetric import ArchivedChunk


@dataclass
class FrontendReport:
    deferred_interlayer: list[NodeId] = field(default_factory=list)


class SceneGraphFrontend:
    def __init__(self, graph: Optional[SceneGraph] = None):
        self.graph = graph if graph is not None else SceneGraph()
        self.place_map: dict[int, NodeId] = {}  # live place id -> scene node
        self.active_places: set[NodeId] = set()
        self._deferred: list[NodeId] = []
        self._last_agent: Optional[NodeId] = None

    # --------------------------------------------------------------- agents

    def add_agent(self, pose: np.ndarray, timestamp: float) -> NodeId:
        if self._last_agent is not None:
            prev = self.graph.nodes[self._last_agent].timestamp
            if timestamp <= prev:
                raise ValueError(f"agent timestamps must increase ({timestamp} after {prev})")
        node = self.graph.add_node(Layer.AGENT, AgentAttrs(pose=np.asarray(pose, dtype=float), timestamp=timestamp))
        if self._last_agent is not None:
            self.graph.add_edge(self._last_agent, node, EdgeKind.INTRA)
        self._last_agent = node
        self._attach_to_nearest_place(node, self.graph.nodes[node].position())
        return node

    @property
    def last_agent(self) -> Optional[NodeId]:
        return self._last_agent

    # --------------------------------------------------------------- places

    def apply_place_delta(
        self, places: SparsePlaceGraph, delta: PlaceGraphDelta, window
    ) -> None:
        g = self.graph
        for pid in delta.added:
            if pid not in places.nodes:
                continue  # created then merged away within one update
            node = places.finalize_attrs(pid, window)
            scene_id = g.add_node(
                Layer.PLACE,
                PlaceAttrs(
                    position=node.position.copy(),
                    obstacle_distance=node.obstacle_distance,
                    num_basis=node.num_basis,
                    nearest_parent_vertex=node.nearest_parent_vertex,
                ),
            )
            self.place_map[pid] = scene_id
        for pid in delta.moved:
            if pid in self.place_map and pid in places.nodes:
                node = places.finalize_attrs(pid, window)
                attrs = g.nodes[self.place_map[pid]]
                attrs.position = node.position.copy()
                attrs.obstacle_distance = node.obstacle_distance
                attrs.num_basis = node.num_basis
                attrs.nearest_parent_vertex = node.nearest_parent_vertex
        for keep, drop in delta.merged:
            sk, sd = self.place_map.get(keep), self.place_map.get(drop)
            if sk is None or sd is None or sk == sd:
                continue
            g.merge_nodes(sk, sd)
            self.place_map[drop] = sk
        for pid in delta.removed:
            scene_id = self.place_map.pop(pid, None)
            if scene_id is not None and g.has_node(scene_id):
                g.remove_node(scene_id)
        for a, b in delta.added_edges:
            sa, sb = self.place_map.get(a), self.place_map.get(b)
            if sa is None or sb is None:
                continue
            sa, sb = g.resolve(sa), g.resolve(sb)
            if sa != sb and g.has_node(sa) and g.has_node(sb):
                g.add_edge(sa, sb, EdgeKind.INTRA)
        for a, b in delta.removed_edges:
            sa, sb = self.place_map.get(a), self.place_map.get(b)
            if sa is None or sb is None:
                continue
            sa, sb = g.resolve(sa), g.resolve(sb)
            if g.has_node(sa) and g.has_node(sb) and sa != sb:
                g.remove_edge(sa, sb)
        self.active_places = {
            self.graph.resolve(self.place_map[pid])
            for pid in places.nodes
            if pid in self.place_map
        }
        self._retry_deferred()

    def archive_places(self, place_ids) -> None:
        """Places leaving the window stay in the graph but stop being
        'active' for nearest-place attachment."""
        for pid in place_ids:
            scene_id = self.place_map.pop(pid, None)
            if scene_id is not None:
                self.active_places.discard(self.graph.resolve(scene_id))

    # -------------------------------------------------------------- objects

    def attach_new_objects(self, added: list[NodeId]) -> None:
        for node in added:
            self._attach_to_nearest_place(node, self.graph.nodes[node].centroid)

    # ----------------------------------------------------------------- mesh

    def apply_archived_chunk(self, chunk: ArchivedChunk) -> None:
        if len(chunk.vertex_ids) == 0:
            return
        self.graph.mesh.add_vertices(
            chunk.positions, chunk.labels, ids=[int(i) for i in chunk.vertex_ids]
        )
        self.graph.mesh.add_faces(chunk.faces)

    # -------------------------------------------------------------- helpers

    def nearest_active_place(self, position: np.ndarray) -> Optional[NodeId]:
        """Euclidean nearest active place; ties break on the lower node id."""
        best = None
        best_key = None
        for place in sorted(self.active_places):
            if not self.graph.has_node(place):
                continue
            d = float(np.linalg.norm(self.graph.nodes[place].position - position))
            key = (d, place)
            if best_key is None or key < best_key:
                best_key = key
                best = place
        return best

    def _attach_to_nearest_place(self, node: NodeId, position: np.ndarray) -> None:
        place = self.nearest_active_place(position)
        if place is None:
            self._deferred.append(node)
            return
        self.graph.add_edge(node, place, EdgeKind.INTER)

    def _retry_deferred(self) -> None:
        if not self._deferred or not self.active_places:
            return
        pending = self._deferred
        self._deferred = []
        for node in pending:
            if not self.graph.has_node(node):
                continue
            attrs = self.graph.nodes[node]
            position = attrs.position() if node.layer == Layer.AGENT else attrs.centroid
            self._attach_to_nearest_place(node, position)

    @property
    def deferred_nodes(self) -> list[NodeId]:
        return list(self._deferred)
