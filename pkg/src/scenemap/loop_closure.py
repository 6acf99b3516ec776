"""Hierarchical loop-closure detection.

Top-down candidate search walks each history descriptor down the place /
object / appearance levels, keeping strictly nested threshold checks;
bottom-up geometric verification then tries appearance-feature
registration first and falls back to object-centroid registration. Both
registrations share one robust estimator: consensus-maximizing sampling of
3-point subsets with a closed-form rigid fit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .descriptors import HierarchicalDescriptor, build_descriptor, similarity
from .geometry import pose_inverse, rigid_fit, transform_points
from .graph import Layer, NodeId, SceneGraph


class MatchLevel(enum.Enum):
    OBJECT = "OBJECT"
    APPEARANCE = "APPEARANCE"


@dataclass
class LoopClosureConfig:
    descriptor_radius: float = 13.0
    places_threshold: float = 0.5
    objects_threshold: float = 0.3
    agent_threshold: float = 0.01
    min_ransac_correspondences: int = 15
    ransac_inlier_threshold: float = 0.1
    object_min_inliers: int = 5
    object_noise_bound: float = 0.1
    recency_exclusion_s: float = 30.0
    max_lc_per_query: int = 1
    max_candidates: int = 5  # deepest-ranked candidates tried per query
    ransac_iterations: int = 500
    num_labels: int = 32
    appearance_only: bool = False  # ablation: skip place/object levels entirely


@dataclass
class Candidate:
    node: NodeId
    level: MatchLevel
    places_score: float
    objects_score: float
    appearance_score: float

    def rank_key(self):
        depth = 1 if self.level == MatchLevel.APPEARANCE else 0
        score = self.appearance_score if depth else self.objects_score
        return (-depth, -score, self.node)


@dataclass
class LoopClosure:
    query: NodeId
    match: NodeId
    relative_pose: np.ndarray  # match <- query
    level: MatchLevel
    inliers: int


@dataclass
class RegistrationResult:
    pose: np.ndarray
    inliers: int
    inlier_rows: list[int]


def find_candidates(
    query: HierarchicalDescriptor,
    history: Sequence[tuple[NodeId, HierarchicalDescriptor]],
    config: LoopClosureConfig,
) -> list[Candidate]:
    """Strictly nested descriptor cascade over the agent history.

    A node must pass the places check to be compared at the object level,
    and the object check to be compared on appearance; the deepest level
    passed becomes the candidate level (OBJECT when only appearance fails).
    Nodes failing places or objects are not candidates at all.
    """
    out: list[Candidate] = []
    for node, desc in history:
        if config.appearance_only:
            s_a = similarity(query.appearance, desc.appearance)
            if s_a >= config.agent_threshold:
                out.append(Candidate(node, MatchLevel.APPEARANCE, 0.0, 0.0, s_a))
            continue
        s_p = similarity(query.places, desc.places)
        if s_p < config.places_threshold:
            continue
        s_o = similarity(query.objects, desc.objects)
        if s_o < config.objects_threshold:
            continue
        s_a = similarity(query.appearance, desc.appearance)
        level = MatchLevel.APPEARANCE if s_a >= config.agent_threshold else MatchLevel.OBJECT
        out.append(Candidate(node, level, s_p, s_o, s_a))
    out.sort(key=lambda c: c.rank_key())
    return out


def _consensus_fit(
    src: np.ndarray,
    dst: np.ndarray,
    inlier_threshold: float,
    min_inliers: int,
    iterations: int,
    rng: np.random.Generator,
    distinct_groups: Optional[tuple[Sequence[int], Sequence[int]]] = None,
) -> Optional[RegistrationResult]:
    """Sample 3-point subsets, fit rigidly, keep the largest consensus.

    ``distinct_groups`` optionally carries (query object ids, match object
    ids) per correspondence row so samples never reuse one object twice.
    """
    n = src.shape[0]
    if n < max(3, min_inliers):
        return None
    best_rows: list[int] = []
    since_improved = 0
    for _ in range(iterations):
        if len(best_rows) == n or since_improved > 150 and len(best_rows) >= min_inliers:
            break
        since_improved += 1
        rows = rng.choice(n, size=3, replace=False)
        if distinct_groups is not None:
            qs, ms = distinct_groups
            if len({qs[r] for r in rows}) < 3 or len({ms[r] for r in rows}) < 3:
                continue
        tri_src = src[rows]
        tri_dst = dst[rows]
        if np.linalg.matrix_rank(tri_src - tri_src.mean(axis=0)) < 2:
            continue  # collinear sample
        try:
            pose = rigid_fit(tri_src, tri_dst)
        except ValueError:
            continue
        err = np.linalg.norm(transform_points(pose, src) - dst, axis=1)
        rows_in = np.nonzero(err <= inlier_threshold)[0].tolist()
        if len(rows_in) > len(best_rows):
            best_rows = rows_in
            since_improved = 0
    if len(best_rows) < max(3, min_inliers):
        return None
    pose = rigid_fit(src[best_rows], dst[best_rows])
    err = np.linalg.norm(transform_points(pose, src) - dst, axis=1)
    final_rows = np.nonzero(err <= inlier_threshold)[0].tolist()
    if len(final_rows) < min_inliers:
        return None
    pose = rigid_fit(src[final_rows], dst[final_rows])
    return RegistrationResult(pose=pose, inliers=len(final_rows), inlier_rows=final_rows)


def register_appearance(
    src_points: np.ndarray,
    dst_points: np.ndarray,
    config: LoopClosureConfig,
    rng: np.random.Generator,
) -> Optional[RegistrationResult]:
    """Robust SE(3) fit of appearance-feature correspondences.

    ``src_points`` live in the query agent frame, ``dst_points`` in the
    match agent frame; success needs at least the configured consensus.
    """
    src_points = np.asarray(src_points, dtype=float).reshape(-1, 3)
    dst_points = np.asarray(dst_points, dtype=float).reshape(-1, 3)
    if src_points.shape != dst_points.shape:
        raise ValueError("correspondence arrays must match")
    if src_points.shape[0] < config.min_ransac_correspondences:
        return None
    return _consensus_fit(
        src_points,
        dst_points,
        config.ransac_inlier_threshold,
        config.min_ransac_correspondences,
        config.ransac_iterations,
        rng,
    )


def register_objects(
    graph: SceneGraph,
    query_ids,
    match_ids,
    query_pose: np.ndarray,
    match_pose: np.ndarray,
    config: LoopClosureConfig,
    rng: np.random.Generator,
) -> Optional[RegistrationResult]:
    """Object-centroid registration from label-consistent pairings.

    Centroids are expressed in each agent's frame; every same-label
    (query, match) pair is a putative correspondence and the consensus fit
    must reach the object inlier minimum within the noise bound.
    """
    def live_centroids(ids, pose):
        inv = pose_inverse(pose)
        out = []
        for node in sorted(set(ids)):
            live = graph.resolve(node)
            if not graph.has_node(live):
                continue
            attrs = graph.nodes[live]
            out.append((live, attrs.semantic_label, transform_points(inv, attrs.centroid)[0]))
        return out

    q = live_centroids(query_ids, query_pose)
    m = live_centroids(match_ids, match_pose)
    src, dst, q_of_row, m_of_row = [], [], [], []
    for qn, ql, qc in q:
        for mn, ml, mc in m:
            if qn == mn:
                # the same stored node on both sides is a degenerate
                # self-correspondence: it can only restate odometry
                continue
            if ql == ml:
                src.append(qc)
                dst.append(mc)
                q_of_row.append(qn)
                m_of_row.append(mn)
    if len(src) < 3:
        return None
    return _consensus_fit(
        np.asarray(src),
        np.asarray(dst),
        config.object_noise_bound,
        config.object_min_inliers,
        config.ransac_iterations,
        rng,
        distinct_groups=(q_of_row, m_of_row),
    )


CorrespondenceSource = Callable[[NodeId, NodeId], Optional[tuple[np.ndarray, np.ndarray]]]


def detect(
    graph: SceneGraph,
    query: NodeId,
    config: LoopClosureConfig,
    correspondence_source: Optional[CorrespondenceSource] = None,
    rng: Optional[np.random.Generator] = None,
) -> list[LoopClosure]:
    """Full per-query detection: cascade candidates, then bottom-up
    registration (appearance features first, object centroids on failure)."""
    rng = rng or np.random.default_rng(0)
    q_attrs = graph.attrs(query)
    if q_attrs.descriptor is None:
        raise ValueError(f"agent node {query} has no descriptor")
    history = []
    for node in graph.layer_nodes(Layer.AGENT):
        attrs = graph.nodes[node]
        if attrs.descriptor is None:
            continue
        if attrs.timestamp > q_attrs.timestamp - config.recency_exclusion_s:
            continue
        history.append((node, attrs.descriptor))
    candidates = find_candidates(q_attrs.descriptor, history, config)

    closures: list[LoopClosure] = []
    for cand in candidates[: config.max_candidates]:
        if len(closures) >= config.max_lc_per_query:
            break
        m_attrs = graph.nodes[cand.node]
        result = None
        level = None
        if correspondence_source is not None:
            pair = correspondence_source(query, cand.node)
            if pair is not None:
                result = register_appearance(pair[0], pair[1], config, rng)
                level = MatchLevel.APPEARANCE
        if result is None and not config.appearance_only:
            result = register_objects(
                graph,
                q_attrs.descriptor.object_ids,
                m_attrs.descriptor.object_ids,
                q_attrs.pose,
                m_attrs.pose,
                config,
                rng,
            )
            level = MatchLevel.OBJECT
        if result is None:
            continue
        closures.append(
            LoopClosure(
                query=query,
                match=cand.node,
                relative_pose=result.pose,
                level=level,
                inliers=result.inliers,
            )
        )
    return closures


def ensure_descriptor(
    graph: SceneGraph,
    agent_id: NodeId,
    config: LoopClosureConfig,
    appearance: Optional[np.ndarray] = None,
) -> HierarchicalDescriptor:
    """Build (once) and attach the agent node's descriptor."""
    attrs = graph.attrs(agent_id)
    if attrs.descriptor is None:
        attrs.descriptor = build_descriptor(
            graph,
            agent_id,
            radius=config.descriptor_radius,
            appearance=appearance,
            num_labels=config.num_labels,
        )
    return attrs.descriptor
