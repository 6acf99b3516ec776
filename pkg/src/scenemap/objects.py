"""Object nodes from semantically labeled mesh vertices.

Vertices of each semantic class are clustered by Euclidean proximity
(single linkage at a distance tolerance); clusters above a minimum size
become or merge into object nodes. Two same-label objects overlap when
either centroid lies inside the other's axis-aligned bounding box, and
overlapping objects merge until none are left.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .graph import Layer, NodeId, ObjectAttrs, SceneGraph


@dataclass
class ObjectsConfig:
    tolerance: float = 0.25  # meters between same-label vertices
    min_cluster_size: int = 20
    object_labels: Optional[tuple[int, ...]] = None  # allow-list; None accepts all


@dataclass
class VertexCluster:
    label: int
    vertex_indices: set[int]
    centroid: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray


@dataclass
class ObjectDelta:
    added: list[NodeId] = field(default_factory=list)
    updated: list[NodeId] = field(default_factory=list)
    merged: list[tuple[NodeId, NodeId]] = field(default_factory=list)


def cluster_by_label(
    vertex_ids: Sequence[int],
    positions: np.ndarray,
    labels: Sequence[int],
    tolerance: float,
    min_size: int,
    allow: Optional[Iterable[int]] = None,
) -> list[VertexCluster]:
    """Connected components of the per-label tolerance graph.

    Two same-label vertices land in one cluster exactly when a chain of
    same-label vertices with consecutive gaps <= tolerance connects them.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    vertex_ids = np.asarray(vertex_ids, dtype=np.int64)
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64)
    allowed = None if allow is None else set(int(a) for a in allow)

    clusters: list[VertexCluster] = []
    for label in sorted(set(labels.tolist())):
        if allowed is not None and label not in allowed:
            continue
        rows = np.nonzero(labels == label)[0]
        if rows.size == 0:
            continue
        pts = positions[rows]
        parent = list(range(len(rows)))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        if len(rows) > 1:
            tree = cKDTree(pts)
            for i, j in sorted(tree.query_pairs(tolerance)):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
        groups: dict[int, list[int]] = {}
        for i in range(len(rows)):
            groups.setdefault(find(i), []).append(i)
        for root in sorted(groups):
            members = groups[root]
            if len(members) < min_size:
                continue
            ids = {int(vertex_ids[rows[i]]) for i in members}
            member_pts = pts[members]
            clusters.append(
                VertexCluster(
                    label=int(label),
                    vertex_indices=ids,
                    centroid=member_pts.mean(axis=0),
                    bbox_min=member_pts.min(axis=0),
                    bbox_max=member_pts.max(axis=0),
                )
            )
    clusters.sort(key=lambda c: (c.label, min(c.vertex_indices)))
    return clusters


def _overlaps(c_a, bbox_a, c_b, bbox_b) -> bool:
    in_b = np.all(c_a >= bbox_b[0]) and np.all(c_a <= bbox_b[1])
    in_a = np.all(c_b >= bbox_a[0]) and np.all(c_b <= bbox_a[1])
    return bool(in_a or in_b)


def update_objects(
    graph: SceneGraph,
    clusters: Sequence[VertexCluster],
    positions_of: Callable[[Iterable[int]], tuple[list[int], np.ndarray]],
) -> ObjectDelta:
    """Fold fresh clusters into the object layer and merge to fixpoint.

    ``positions_of(ids) -> (known_ids, positions)`` resolves vertex ids to
    current positions (live window or persistent mesh); ids that no longer
    resolve are pruned from the touched objects.
    """
    delta = ObjectDelta()
    for cluster in clusters:
        target = None
        for node_id in graph.layer_nodes(Layer.OBJECT):
            attrs = graph.nodes[node_id]
            if attrs.semantic_label != cluster.label:
                continue
            if _overlaps(
                cluster.centroid,
                (cluster.bbox_min, cluster.bbox_max),
                attrs.centroid,
                (attrs.bbox_min, attrs.bbox_max),
            ):
                target = node_id
                break
        if target is None:
            attrs = ObjectAttrs(
                semantic_label=cluster.label,
                centroid=cluster.centroid,
                bbox_min=cluster.bbox_min,
                bbox_max=cluster.bbox_max,
                mesh_vertices=set(cluster.vertex_indices),
            )
            delta.added.append(graph.add_node(Layer.OBJECT, attrs))
        else:
            attrs = graph.nodes[target]
            attrs.mesh_vertices |= cluster.vertex_indices
            _recompute(attrs, positions_of)
            delta.updated.append(target)

    _merge_to_fixpoint(graph, positions_of, delta)
    return delta


def _recompute(attrs: ObjectAttrs, positions_of) -> None:
    known_ids, pts = positions_of(sorted(attrs.mesh_vertices))
    if len(known_ids) == 0:
        return  # nothing resolvable; leave the stored summary untouched
    attrs.mesh_vertices = set(int(i) for i in known_ids)
    attrs.centroid = pts.mean(axis=0)
    attrs.bbox_min = pts.min(axis=0)
    attrs.bbox_max = pts.max(axis=0)


def _merge_to_fixpoint(graph: SceneGraph, positions_of, delta: ObjectDelta) -> None:
    while True:
        merged_any = False
        objects = graph.layer_nodes(Layer.OBJECT)
        for i in range(len(objects)):
            if merged_any:
                break
            for j in range(i + 1, len(objects)):
                a, b = objects[i], objects[j]
                attrs_a, attrs_b = graph.nodes[a], graph.nodes[b]
                if attrs_a.semantic_label != attrs_b.semantic_label:
                    continue
                if _overlaps(
                    attrs_a.centroid,
                    (attrs_a.bbox_min, attrs_a.bbox_max),
                    attrs_b.centroid,
                    (attrs_b.bbox_min, attrs_b.bbox_max),
                ):
                    attrs_a.mesh_vertices |= attrs_b.mesh_vertices
                    graph.merge_nodes(a, b)
                    _recompute(attrs_a, positions_of)
                    delta.merged.append((a, b))
                    merged_any = True
                    break
        if not merged_any:
            return


def dict_resolver(position_by_id: dict[int, np.ndarray]):
    """Resolver over a plain id -> position mapping (tests, small tools)."""

    def resolve(ids):
        known = [int(i) for i in ids if int(i) in position_by_id]
        if not known:
            return [], np.zeros((0, 3))
        return known, np.array([position_by_id[i] for i in known], dtype=float)

    return resolve
