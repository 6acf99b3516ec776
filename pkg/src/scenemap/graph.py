"""Layered scene-graph data model.

Five layers (mesh-backed objects and the agent trajectory, topological
places, rooms, and a single building root), with layer-aware edge rules,
reversible node merging, per-layer spanning forests, and a versioned JSON
document format.

Node identity is a (layer, index) pair; indices are assigned monotonically
per layer and never recycled, so identities stay stable across merges,
undo, and serialization.
"""

from __future__ import annotations

import copy
import enum
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, NamedTuple, Optional

import numpy as np

DOCUMENT_VERSION = "1"


class Layer(enum.IntEnum):
    AGENT = 1
    OBJECT = 2
    PLACE = 3
    ROOM = 4
    BUILDING = 5


class EdgeKind(enum.Enum):
    INTRA = "INTRA"
    INTER = "INTER"


class NodeId(NamedTuple):
    layer: Layer
    index: int

    def __str__(self) -> str:
        return f"{self.layer.name}:{self.index}"


class SceneGraphError(Exception):
    """Base class for scene-graph contract violations."""


class LayerMismatchError(SceneGraphError):
    """Attribute type or edge kind inconsistent with the layers involved."""


class MissingNodeError(SceneGraphError):
    pass


class DocumentError(SceneGraphError):
    """Schema violation while reading a scene-graph document.

    ``location`` is a dotted/indexed path into the offending document field.
    """

    def __init__(self, location: str, message: str):
        self.location = location
        super().__init__(f"{location}: {message}")


class UnknownVersionError(DocumentError):
    pass


def _as_vec3(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,):
        raise SceneGraphError(f"{name} must be a 3-vector, got shape {arr.shape}")
    return arr


@dataclass(eq=False)
class ObjectAttrs:
    semantic_label: int
    centroid: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    mesh_vertices: set[int]

    def __post_init__(self):
        self.centroid = _as_vec3(self.centroid, "centroid")
        self.bbox_min = _as_vec3(self.bbox_min, "bbox_min")
        self.bbox_max = _as_vec3(self.bbox_max, "bbox_max")
        self.mesh_vertices = set(int(v) for v in self.mesh_vertices)
        if not self.mesh_vertices:
            raise SceneGraphError("object needs at least one mesh vertex")
        if np.any(self.bbox_min > self.bbox_max):
            raise SceneGraphError("bbox_min must be <= bbox_max componentwise")
        if np.any(self.centroid < self.bbox_min - 1e-9) or np.any(
            self.centroid > self.bbox_max + 1e-9
        ):
            raise SceneGraphError("centroid must lie inside the bounding box")

    def position(self) -> np.ndarray:
        return self.centroid

    def equals(self, other) -> bool:
        return (
            isinstance(other, ObjectAttrs)
            and self.semantic_label == other.semantic_label
            and np.array_equal(self.centroid, other.centroid)
            and np.array_equal(self.bbox_min, other.bbox_min)
            and np.array_equal(self.bbox_max, other.bbox_max)
            and self.mesh_vertices == other.mesh_vertices
        )


@dataclass(eq=False)
class PlaceAttrs:
    position: np.ndarray
    obstacle_distance: float
    num_basis: int = 2
    nearest_parent_vertex: Optional[int] = None

    def __post_init__(self):
        self.position = _as_vec3(self.position, "position")
        self.obstacle_distance = float(self.obstacle_distance)
        self.num_basis = int(self.num_basis)
        if self.obstacle_distance < 0:
            raise SceneGraphError("obstacle_distance must be >= 0")
        if self.num_basis < 2:
            raise SceneGraphError("a place needs at least 2 basis points")

    def equals(self, other) -> bool:
        return (
            isinstance(other, PlaceAttrs)
            and np.array_equal(self.position, other.position)
            and self.obstacle_distance == other.obstacle_distance
            and self.num_basis == other.num_basis
            and self.nearest_parent_vertex == other.nearest_parent_vertex
        )


@dataclass(eq=False)
class AgentAttrs:
    pose: np.ndarray  # 4x4, world <- body
    timestamp: float
    descriptor: Optional[Any] = None  # HierarchicalDescriptor, built lazily

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float)
        if self.pose.shape != (4, 4):
            raise SceneGraphError("agent pose must be a 4x4 transform")
        self.timestamp = float(self.timestamp)

    def position(self) -> np.ndarray:
        return self.pose[:3, 3]

    def equals(self, other) -> bool:
        if not isinstance(other, AgentAttrs):
            return False
        if not (np.array_equal(self.pose, other.pose) and self.timestamp == other.timestamp):
            return False
        if (self.descriptor is None) != (other.descriptor is None):
            return False
        if self.descriptor is not None and not self.descriptor.equals(other.descriptor):
            return False
        return True


@dataclass(eq=False)
class RoomAttrs:
    centroid: np.ndarray
    member_places: set[NodeId] = field(default_factory=set)

    def __post_init__(self):
        self.centroid = _as_vec3(self.centroid, "centroid")
        self.member_places = set(self.member_places)

    def position(self) -> np.ndarray:
        return self.centroid

    def equals(self, other) -> bool:
        return (
            isinstance(other, RoomAttrs)
            and np.array_equal(self.centroid, other.centroid)
            and self.member_places == other.member_places
        )


@dataclass(eq=False)
class BuildingAttrs:
    centroid: np.ndarray

    def __post_init__(self):
        self.centroid = _as_vec3(self.centroid, "centroid")

    def position(self) -> np.ndarray:
        return self.centroid

    def equals(self, other) -> bool:
        return isinstance(other, BuildingAttrs) and np.array_equal(self.centroid, other.centroid)


ATTR_TYPES = {
    Layer.AGENT: AgentAttrs,
    Layer.OBJECT: ObjectAttrs,
    Layer.PLACE: PlaceAttrs,
    Layer.ROOM: RoomAttrs,
    Layer.BUILDING: BuildingAttrs,
}


def node_position(attrs) -> np.ndarray:
    """World position used for distances/spanning trees, per layer type."""
    if isinstance(attrs, PlaceAttrs):
        return attrs.position
    return attrs.position()


class Mesh:
    """Vertex/face store with persistent integer vertex ids.

    Ids are never recycled; removing a vertex also removes its incident
    faces. Positions and labels are kept in dense arrays with an id -> row
    map so bulk geometry math stays vectorized.
    """

    def __init__(self):
        self._ids: list[int] = []
        self._row: dict[int, int] = {}
        self._positions = np.empty((0, 3), dtype=float)
        self._labels = np.empty((0,), dtype=np.int64)
        self._faces: list[tuple[int, int, int]] = []
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def num_faces(self) -> int:
        return len(self._faces)

    def vertex_ids(self) -> list[int]:
        return list(self._ids)

    def faces(self) -> list[tuple[int, int, int]]:
        return list(self._faces)

    def has_vertex(self, vid: int) -> bool:
        return vid in self._row

    def add_vertices(self, positions, labels, ids=None) -> list[int]:
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if positions.shape[0] != labels.shape[0]:
            raise SceneGraphError("positions and labels must have equal length")
        if ids is None:
            ids = list(range(self._next_id, self._next_id + positions.shape[0]))
        else:
            ids = [int(i) for i in ids]
            for vid in ids:
                if vid in self._row:
                    raise SceneGraphError(f"vertex id {vid} already present")
        start = len(self._ids)
        for k, vid in enumerate(ids):
            self._row[vid] = start + k
        self._ids.extend(ids)
        self._positions = np.vstack([self._positions, positions])
        self._labels = np.concatenate([self._labels, labels])
        if ids:
            self._next_id = max(self._next_id, max(ids) + 1)
        return ids

    def add_faces(self, faces: Iterable[tuple[int, int, int]]) -> None:
        for f in faces:
            a, b, c = (int(v) for v in f)
            if len({a, b, c}) != 3:
                raise SceneGraphError(f"degenerate face {f}")
            for v in (a, b, c):
                if v not in self._row:
                    raise SceneGraphError(f"face references unknown vertex {v}")
            self._faces.append((a, b, c))

    def position(self, vid: int) -> np.ndarray:
        return self._positions[self._row[vid]]

    def label(self, vid: int) -> int:
        return int(self._labels[self._row[vid]])

    def positions_of(self, vids) -> np.ndarray:
        rows = [self._row[int(v)] for v in vids]
        return self._positions[rows]

    def set_positions(self, vids, positions) -> None:
        rows = [self._row[int(v)] for v in vids]
        self._positions[rows] = np.asarray(positions, dtype=float)

    def all_positions(self) -> np.ndarray:
        return self._positions.copy()

    def all_labels(self) -> np.ndarray:
        return self._labels.copy()

    def edges(self) -> set[tuple[int, int]]:
        """Undirected vertex-id pairs appearing in any face."""
        out = set()
        for a, b, c in self._faces:
            for u, v in ((a, b), (b, c), (a, c)):
                out.add((u, v) if u < v else (v, u))
        return out

    def equals(self, other: "Mesh") -> bool:
        if sorted(self._ids) != sorted(other._ids):
            return False
        for vid in self._ids:
            if not np.array_equal(self.position(vid), other.position(vid)):
                return False
            if self.label(vid) != other.label(vid):
                return False
        return sorted(self._faces) == sorted(other._faces)


@dataclass
class MergeRecord:
    keep: NodeId
    drop: NodeId
    attrs: Any
    drop_edges: list[tuple[NodeId, EdgeKind]]
    added_edges: list[tuple[NodeId, NodeId, EdgeKind]]


def _canonical(a: NodeId, b: NodeId) -> tuple[NodeId, NodeId]:
    return (a, b) if (a.layer, a.index) <= (b.layer, b.index) else (b, a)


class SceneGraph:
    def __init__(self):
        self.nodes: dict[NodeId, Any] = {}
        self.intra_edges: set[tuple[NodeId, NodeId]] = set()
        self.inter_edges: set[tuple[NodeId, NodeId]] = set()
        self.mesh = Mesh()
        self.merge_log: list[MergeRecord] = []
        self._merged: dict[NodeId, NodeId] = {}  # drop -> keep
        self._next_index = {layer: 0 for layer in Layer}
        self._adjacency: dict[NodeId, set[NodeId]] = {}

    # ---------------------------------------------------------------- nodes

    def add_node(self, layer: Layer, attrs) -> NodeId:
        expected = ATTR_TYPES[layer]
        if not isinstance(attrs, expected):
            raise LayerMismatchError(
                f"layer {layer.name} expects {expected.__name__}, got {type(attrs).__name__}"
            )
        if layer == Layer.BUILDING and any(n.layer == Layer.BUILDING for n in self.nodes):
            raise SceneGraphError("graph already has a building node")
        node_id = NodeId(layer, self._next_index[layer])
        self._next_index[layer] += 1
        self.nodes[node_id] = attrs
        self._adjacency[node_id] = set()
        return node_id

    def has_node(self, node_id: NodeId) -> bool:
        return node_id in self.nodes

    def attrs(self, node_id: NodeId):
        try:
            return self.nodes[node_id]
        except KeyError:
            raise MissingNodeError(f"no node {node_id}") from None

    def layer_nodes(self, layer: Layer) -> list[NodeId]:
        return sorted(n for n in self.nodes if n.layer == layer)

    def remove_node(self, node_id: NodeId) -> None:
        self.attrs(node_id)
        for other in list(self._adjacency[node_id]):
            self._remove_edge(node_id, other)
        del self.nodes[node_id]
        del self._adjacency[node_id]

    def resolve(self, node_id: NodeId) -> NodeId:
        """Follow the merge chain of a (possibly merged-away) node id."""
        seen = set()
        while node_id in self._merged:
            if node_id in seen:
                raise SceneGraphError(f"merge cycle at {node_id}")
            seen.add(node_id)
            node_id = self._merged[node_id]
        return node_id

    # ---------------------------------------------------------------- edges

    def _edge_set(self, kind: EdgeKind) -> set[tuple[NodeId, NodeId]]:
        return self.intra_edges if kind == EdgeKind.INTRA else self.inter_edges

    def add_edge(self, a: NodeId, b: NodeId, kind: EdgeKind) -> None:
        if a not in self.nodes:
            raise MissingNodeError(f"no node {a}")
        if b not in self.nodes:
            raise MissingNodeError(f"no node {b}")
        if a == b:
            raise SceneGraphError(f"self-loop on {a}")
        same_layer = a.layer == b.layer
        if kind == EdgeKind.INTRA and not same_layer:
            raise LayerMismatchError(f"INTRA edge across layers {a} -- {b}")
        if kind == EdgeKind.INTER and same_layer:
            raise LayerMismatchError(f"INTER edge within layer {a} -- {b}")
        self._edge_set(kind).add(_canonical(a, b))
        self._adjacency[a].add(b)
        self._adjacency[b].add(a)

    def has_edge(self, a: NodeId, b: NodeId) -> bool:
        key = _canonical(a, b)
        return key in self.intra_edges or key in self.inter_edges

    def _remove_edge(self, a: NodeId, b: NodeId) -> None:
        key = _canonical(a, b)
        self.intra_edges.discard(key)
        self.inter_edges.discard(key)
        self._adjacency[a].discard(b)
        self._adjacency[b].discard(a)

    def remove_edge(self, a: NodeId, b: NodeId) -> None:
        if a not in self.nodes or b not in self.nodes:
            raise MissingNodeError(f"cannot remove edge {a} -- {b}")
        self._remove_edge(a, b)

    def neighbors(self, node_id: NodeId) -> set[NodeId]:
        return set(self._adjacency[node_id])

    def layer_neighbors(self, node_id: NodeId, layer: Layer) -> set[NodeId]:
        return {n for n in self._adjacency[node_id] if n.layer == layer}

    def edges_of(self, node_id: NodeId) -> list[tuple[NodeId, EdgeKind]]:
        out = []
        for other in sorted(self._adjacency[node_id]):
            kind = EdgeKind.INTRA if _canonical(node_id, other) in self.intra_edges else EdgeKind.INTER
            out.append((other, kind))
        return out

    # ---------------------------------------------------------------- merge

    def merge_nodes(self, keep: NodeId, drop: NodeId) -> None:
        """Rewire drop's edges onto keep and retire drop, reversibly."""
        if keep.layer != drop.layer:
            raise LayerMismatchError(f"cannot merge across layers: {keep} <- {drop}")
        if keep == drop:
            raise SceneGraphError("cannot merge a node into itself")
        attrs_keep = self.attrs(keep)
        attrs_drop = self.attrs(drop)
        del attrs_keep
        drop_edges = self.edges_of(drop)
        added = []
        for other, kind in drop_edges:
            self._remove_edge(drop, other)
            if other == keep:
                continue
            if not self.has_edge(keep, other):
                self.add_edge(keep, other, kind)
                added.append((*_canonical(keep, other), kind))
        del self.nodes[drop]
        del self._adjacency[drop]
        self._merged[drop] = keep
        self.merge_log.append(MergeRecord(keep, drop, attrs_drop, drop_edges, added))

    def merge_checkpoint(self) -> int:
        return len(self.merge_log)

    def unmerge(self, drop: NodeId) -> None:
        """Undo the most recent merge, which must have dropped ``drop``."""
        if not self.merge_log:
            raise SceneGraphError("merge log is empty")
        record = self.merge_log[-1]
        if record.drop != drop:
            raise SceneGraphError(
                f"merges undo in reverse order; most recent dropped {record.drop}, not {drop}"
            )
        self._undo_last_merge()

    def undo_merges_to(self, checkpoint: int) -> None:
        while len(self.merge_log) > checkpoint:
            self._undo_last_merge()

    def _undo_last_merge(self) -> None:
        record = self.merge_log.pop()
        for a, b, _kind in record.added_edges:
            self._remove_edge(a, b)
        self.nodes[record.drop] = record.attrs
        self._adjacency[record.drop] = set()
        del self._merged[record.drop]
        for other, kind in record.drop_edges:
            self.add_edge(record.drop, other, kind)

    # ------------------------------------------------------- spanning trees

    def layer_spanning_tree(self, layer: Layer) -> set[tuple[NodeId, NodeId]]:
        """Minimum spanning forest of a layer's intra-edges.

        Edges are weighted by Euclidean distance between node positions;
        ties break on the canonical edge key so the result is deterministic.
        """
        members = self.layer_nodes(layer)
        if not members:
            raise SceneGraphError(f"layer {layer.name} is empty")
        edges = []
        for a, b in sorted(self.intra_edges):
            if a.layer != layer:
                continue
            w = float(np.linalg.norm(node_position(self.nodes[a]) - node_position(self.nodes[b])))
            edges.append((w, a, b))
        edges.sort(key=lambda e: (e[0], e[1], e[2]))
        parent = {n: n for n in members}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        tree = set()
        for w, a, b in edges:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[ra] = rb
                tree.add((a, b))
        return tree

    # -------------------------------------------------------- serialization

    def snapshot(self) -> "SceneGraph":
        return copy.deepcopy(self)

    def equals(self, other: "SceneGraph") -> bool:
        if set(self.nodes) != set(other.nodes):
            return False
        for node_id, attrs in self.nodes.items():
            if not attrs.equals(other.nodes[node_id]):
                return False
        if self.intra_edges != other.intra_edges or self.inter_edges != other.inter_edges:
            return False
        if not self.mesh.equals(other.mesh):
            return False
        if len(self.merge_log) != len(other.merge_log):
            return False
        for mine, theirs in zip(self.merge_log, other.merge_log):
            if (mine.keep, mine.drop) != (theirs.keep, theirs.drop):
                return False
        return True

    def to_document(self) -> dict:
        return serialize(self)

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.to_document(), indent=indent)


# -------------------------------------------------------------------------
# Document encoding
# -------------------------------------------------------------------------


def _encode_attrs(attrs) -> dict:
    from .descriptors import HierarchicalDescriptor  # local: avoids module cycle

    if isinstance(attrs, ObjectAttrs):
        return {
            "semantic_label": attrs.semantic_label,
            "centroid": attrs.centroid.tolist(),
            "bbox_min": attrs.bbox_min.tolist(),
            "bbox_max": attrs.bbox_max.tolist(),
            "mesh_vertices": sorted(attrs.mesh_vertices),
        }
    if isinstance(attrs, PlaceAttrs):
        return {
            "position": attrs.position.tolist(),
            "obstacle_distance": attrs.obstacle_distance,
            "num_basis": attrs.num_basis,
            "nearest_parent_vertex": attrs.nearest_parent_vertex,
        }
    if isinstance(attrs, AgentAttrs):
        from .geometry import pose_to_quat_trans

        q, t = pose_to_quat_trans(attrs.pose)
        out = {"translation": t.tolist(), "quaternion": q.tolist(), "timestamp": attrs.timestamp}
        if attrs.descriptor is not None:
            assert isinstance(attrs.descriptor, HierarchicalDescriptor)
            out["descriptor"] = attrs.descriptor.to_dict()
        return out
    if isinstance(attrs, RoomAttrs):
        return {
            "centroid": attrs.centroid.tolist(),
            "member_places": [[n.layer.name, n.index] for n in sorted(attrs.member_places)],
        }
    if isinstance(attrs, BuildingAttrs):
        return {"centroid": attrs.centroid.tolist()}
    raise SceneGraphError(f"unknown attrs type {type(attrs).__name__}")


def _decode_attrs(layer: Layer, data: dict, where: str):
    from .descriptors import HierarchicalDescriptor
    from .geometry import quat_trans_to_pose

    try:
        if layer == Layer.OBJECT:
            return ObjectAttrs(
                semantic_label=int(data["semantic_label"]),
                centroid=data["centroid"],
                bbox_min=data["bbox_min"],
                bbox_max=data["bbox_max"],
                mesh_vertices=set(data["mesh_vertices"]),
            )
        if layer == Layer.PLACE:
            return PlaceAttrs(
                position=data["position"],
                obstacle_distance=data["obstacle_distance"],
                num_basis=data["num_basis"],
                nearest_parent_vertex=data["nearest_parent_vertex"],
            )
        if layer == Layer.AGENT:
            descriptor = None
            if "descriptor" in data:
                descriptor = HierarchicalDescriptor.from_dict(data["descriptor"])
            return AgentAttrs(
                pose=quat_trans_to_pose(data["quaternion"], data["translation"]),
                timestamp=data["timestamp"],
                descriptor=descriptor,
            )
        if layer == Layer.ROOM:
            return RoomAttrs(
                centroid=data["centroid"],
                member_places={NodeId(Layer[ln], int(i)) for ln, i in data["member_places"]},
            )
        if layer == Layer.BUILDING:
            return BuildingAttrs(centroid=data["centroid"])
    except DocumentError:
        raise
    except KeyError as exc:
        raise DocumentError(where, f"missing attribute field {exc}") from None
    except (TypeError, ValueError, SceneGraphError) as exc:
        raise DocumentError(where, str(exc)) from None
    raise DocumentError(where, f"unknown layer {layer}")


def _decode_node_id(data, where: str) -> NodeId:
    if not isinstance(data, dict) or "layer" not in data or "index" not in data:
        raise DocumentError(where, "node id must be {layer, index}")
    try:
        layer = Layer[data["layer"]]
    except KeyError:
        raise DocumentError(where, f"unknown layer name {data['layer']!r}") from None
    return NodeId(layer, int(data["index"]))


def serialize(graph: SceneGraph) -> dict:
    nodes = []
    for node_id in sorted(graph.nodes):
        nodes.append(
            {
                "id": {"layer": node_id.layer.name, "index": node_id.index},
                "attrs": _encode_attrs(graph.nodes[node_id]),
            }
        )
    edges = []
    for kind, edge_set in ((EdgeKind.INTRA, graph.intra_edges), (EdgeKind.INTER, graph.inter_edges)):
        for a, b in sorted(edge_set):
            edges.append(
                {
                    "a": {"layer": a.layer.name, "index": a.index},
                    "b": {"layer": b.layer.name, "index": b.index},
                    "kind": kind.value,
                }
            )
    mesh_vertices = [
        [vid, *graph.mesh.position(vid).tolist(), graph.mesh.label(vid)]
        for vid in sorted(graph.mesh.vertex_ids())
    ]
    merge_log = []
    for record in graph.merge_log:
        merge_log.append(
            {
                "keep": {"layer": record.keep.layer.name, "index": record.keep.index},
                "drop": {"layer": record.drop.layer.name, "index": record.drop.index},
                "attrs": _encode_attrs(record.attrs),
                "drop_edges": [
                    [{"layer": n.layer.name, "index": n.index}, kind.value]
                    for n, kind in record.drop_edges
                ],
                "added_edges": [
                    [
                        {"layer": a.layer.name, "index": a.index},
                        {"layer": b.layer.name, "index": b.index},
                        kind.value,
                    ]
                    for a, b, kind in record.added_edges
                ],
            }
        )
    return {
        "version": DOCUMENT_VERSION,
        "nodes": nodes,
        "edges": edges,
        "mesh": {"vertices": mesh_vertices, "faces": [list(f) for f in graph.mesh.faces()]},
        "merge_log": merge_log,
        "next_index": {layer.name: graph._next_index[layer] for layer in Layer},
    }


def deserialize(document: dict) -> SceneGraph:
    if not isinstance(document, dict):
        raise DocumentError("$", "document must be a mapping")
    version = document.get("version")
    if version != DOCUMENT_VERSION:
        raise UnknownVersionError("version", f"unknown document version {version!r}")
    for required in ("nodes", "edges", "mesh", "merge_log"):
        if required not in document:
            raise DocumentError(required, "missing required section")

    graph = SceneGraph()
    for i, entry in enumerate(document["nodes"]):
        where = f"nodes[{i}]"
        node_id = _decode_node_id(entry.get("id"), where + ".id")
        attrs = _decode_attrs(node_id.layer, entry.get("attrs", {}), where + ".attrs")
        if node_id in graph.nodes:
            raise DocumentError(where, f"duplicate node {node_id}")
        graph.nodes[node_id] = attrs
        graph._adjacency[node_id] = set()

    mesh_doc = document["mesh"]
    if not isinstance(mesh_doc, dict) or "vertices" not in mesh_doc or "faces" not in mesh_doc:
        raise DocumentError("mesh", "mesh must be {vertices, faces}")
    for i, entry in enumerate(mesh_doc["vertices"]):
        if len(entry) != 5:
            raise DocumentError(f"mesh.vertices[{i}]", "expected [id, x, y, z, label]")
        vid, x, y, z, label = entry
        graph.mesh.add_vertices([[x, y, z]], [label], ids=[vid])
    try:
        graph.mesh.add_faces(tuple(f) for f in mesh_doc["faces"])
    except SceneGraphError as exc:
        raise DocumentError("mesh.faces", str(exc)) from None

    for i, entry in enumerate(document["edges"]):
        where = f"edges[{i}]"
        a = _decode_node_id(entry.get("a"), where + ".a")
        b = _decode_node_id(entry.get("b"), where + ".b")
        kind_name = entry.get("kind")
        if kind_name not in (EdgeKind.INTRA.value, EdgeKind.INTER.value):
            raise DocumentError(where + ".kind", f"unknown edge kind {kind_name!r}")
        try:
            graph.add_edge(a, b, EdgeKind(kind_name))
        except SceneGraphError as exc:
            raise DocumentError(where, str(exc)) from None

    for i, entry in enumerate(document["merge_log"]):
        where = f"merge_log[{i}]"
        keep = _decode_node_id(entry.get("keep"), where + ".keep")
        drop = _decode_node_id(entry.get("drop"), where + ".drop")
        attrs = _decode_attrs(drop.layer, entry.get("attrs", {}), where + ".attrs")
        drop_edges = [
            (_decode_node_id(n, f"{where}.drop_edges[{j}]"), EdgeKind(kind))
            for j, (n, kind) in enumerate(entry.get("drop_edges", []))
        ]
        added_edges = [
            (
                _decode_node_id(a, f"{where}.added_edges[{j}]"),
                _decode_node_id(b, f"{where}.added_edges[{j}]"),
                EdgeKind(kind),
            )
            for j, (a, b, kind) in enumerate(entry.get("added_edges", []))
        ]
        graph.merge_log.append(MergeRecord(keep, drop, attrs, drop_edges, added_edges))
        graph._merged[drop] = keep

    counters = document.get("next_index", {})
    for layer in Layer:
        seen = [n.index for n in graph.nodes if n.layer == layer]
        seen += [r.drop.index for r in graph.merge_log if r.drop.layer == layer]
        floor = max(seen) + 1 if seen else 0
        graph._next_index[layer] = max(int(counters.get(layer.name, 0)), floor)
    return graph


def from_json(text: str) -> SceneGraph:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DocumentError("$", f"invalid JSON: {exc}") from None
    return deserialize(document)
