"""Per-agent-node summary descriptors used for loop-closure candidate search.

Each agent node carries a three-level descriptor of its surroundings:
an appearance vector from a pluggable source, a histogram of object
semantic labels, and a histogram of place clearance distances, plus the
raw ids of the contributing objects and places (kept for the geometric
verification stage).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Layer, NodeId, SceneGraph

PLACE_HIST_BINS = 20
PLACE_HIST_RANGE = (0.0, 5.0)  # meters of obstacle clearance


@dataclass(eq=False)
class HierarchicalDescriptor:
    appearance: np.ndarray
    objects: np.ndarray
    places: np.ndarray
    object_ids: set[NodeId] = field(default_factory=set)
    place_ids: set[NodeId] = field(default_factory=set)

    def __post_init__(self):
        self.appearance = np.asarray(self.appearance, dtype=float)
        self.objects = np.asarray(self.objects, dtype=float)
        self.places = np.asarray(self.places, dtype=float)
        if np.any(self.appearance < 0) or np.any(self.objects < 0) or np.any(self.places < 0):
            raise ValueError("descriptor histograms must be nonnegative")

    def equals(self, other: "HierarchicalDescriptor") -> bool:
        return (
            np.array_equal(self.appearance, other.appearance)
            and np.array_equal(self.objects, other.objects)
            and np.array_equal(self.places, other.places)
            and self.object_ids == other.object_ids
            and self.place_ids == other.place_ids
        )

    def to_dict(self) -> dict:
        return {
            "appearance": self.appearance.tolist(),
            "objects": self.objects.tolist(),
            "places": self.places.tolist(),
            "object_ids": [[n.layer.name, n.index] for n in sorted(self.object_ids)],
            "place_ids": [[n.layer.name, n.index] for n in sorted(self.place_ids)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HierarchicalDescriptor":
        return cls(
            appearance=np.asarray(data["appearance"], dtype=float),
            objects=np.asarray(data["objects"], dtype=float),
            places=np.asarray(data["places"], dtype=float),
            object_ids={NodeId(Layer[ln], int(i)) for ln, i in data["object_ids"]},
            place_ids={NodeId(Layer[ln], int(i)) for ln, i in data["place_ids"]},
        )


def normalized(h: np.ndarray) -> np.ndarray:
    """L1-normalize a histogram; zero vectors stay zero."""
    total = float(np.sum(h))
    if total <= 0:
        return np.zeros_like(h, dtype=float)
    return np.asarray(h, dtype=float) / total


def similarity(h1: np.ndarray, h2: np.ndarray) -> float:
    """L1 overlap score in [0, 1]: 1 - half the L1 distance of the
    normalized histograms. Two zero vectors score 1; zero against nonzero
    scores 0."""
    h1 = np.asarray(h1, dtype=float)
    h2 = np.asarray(h2, dtype=float)
    if h1.shape != h2.shape:
        raise ValueError(f"histogram dimensions differ: {h1.shape} vs {h2.shape}")
    z1 = np.sum(h1) <= 0
    z2 = np.sum(h2) <= 0
    if z1 and z2:
        return 1.0
    if z1 or z2:
        return 0.0
    return float(1.0 - 0.5 * np.sum(np.abs(normalized(h1) - normalized(h2))))


def build_descriptor(
    graph: SceneGraph,
    agent_id: NodeId,
    radius: float = 13.0,
    appearance: np.ndarray | None = None,
    num_labels: int = 32,
    object_filter=None,
) -> HierarchicalDescriptor:
    """Summarize the scene-graph surroundings of one agent node.

    Objects and places within ``radius`` of the agent position feed the
    label and clearance histograms; their ids are recorded for later
    registration. ``object_filter`` optionally narrows the object side to
    what the agent is actually seeing (e.g. recently observed nodes), so
    the descriptor reflects the view rather than stale map memory. The
    appearance vector comes from the caller (pluggable source); omitted
    means an empty appearance level.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    center = graph.attrs(agent_id).position()

    objects = np.zeros(num_labels, dtype=float)
    object_ids: set[NodeId] = set()
    for node_id in graph.layer_nodes(Layer.OBJECT):
        attrs = graph.nodes[node_id]
        if object_filter is not None and not object_filter(node_id):
            continue
        if np.linalg.norm(attrs.centroid - center) <= radius:
            label = int(attrs.semantic_label)
            if 0 <= label < num_labels:
                objects[label] += 1
            object_ids.add(node_id)

    places = np.zeros(PLACE_HIST_BINS, dtype=float)
    place_ids: set[NodeId] = set()
    lo, hi = PLACE_HIST_RANGE
    bin_width = (hi - lo) / PLACE_HIST_BINS
    for node_id in graph.layer_nodes(Layer.PLACE):
        attrs = graph.nodes[node_id]
        if np.linalg.norm(attrs.position - center) <= radius:
            b = int((attrs.obstacle_distance - lo) / bin_width)
            places[min(max(b, 0), PLACE_HIST_BINS - 1)] += 1
            place_ids.add(node_id)

    if appearance is None:
        appearance = np.zeros(0, dtype=float)
    return HierarchicalDescriptor(
        appearance=np.asarray(appearance, dtype=float),
        objects=objects,
        places=places,
        object_ids=object_ids,
        place_ids=place_ids,
    )
