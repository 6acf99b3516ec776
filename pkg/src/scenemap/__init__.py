"""Incremental layered 3D scene graphs from posed labeled depth scans.

The library splits into:

- ``graph``: the layered scene-graph store (agents+objects, places, rooms,
  building) with merge/undo bookkeeping and a versioned document format.
- ``volumetric``: spatially windowed TSDF integration, wavefront distance
  fields with parent tracking, skeleton (equidistant-surface) detection,
  and marching-cubes meshing.
- ``places``: sparsification of the volumetric skeleton into a topological
  graph of traversable places.
- ``objects``: per-class Euclidean clustering of labeled mesh vertices into
  object nodes.
- ``rooms``: room segmentation of the place graph by dilation sweeps plus
  partially seeded greedy modularity clustering.
- ``descriptors`` / ``loop_closure``: hierarchical descriptors, top-down
  candidate search, and bottom-up robust registration.
- ``deformation``: scene-graph frontend assembly and the deformation-graph
  backend (robust optimization, mesh interpolation, node reconciliation).
- ``worldgen`` / ``scanio`` / ``metrics`` / ``pipeline`` / ``cli``: the
  synthetic-world harness, scan stream format, evaluation metrics, the
  three-stage streaming pipeline, and its command line.
"""

from .graph import (
    AgentAttrs,
    BuildingAttrs,
    EdgeKind,
    Layer,
    Mesh,
    NodeId,
    ObjectAttrs,
    PlaceAttrs,
    RoomAttrs,
    SceneGraph,
    deserialize,
    serialize,
)

__all__ = [
    "AgentAttrs",
    "BuildingAttrs",
    "EdgeKind",
    "Layer",
    "Mesh",
    "NodeId",
    "ObjectAttrs",
    "PlaceAttrs",
    "RoomAttrs",
    "SceneGraph",
    "deserialize",
    "serialize",
]

__version__ = "0.1.0"
