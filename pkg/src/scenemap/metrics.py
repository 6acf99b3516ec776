"""Evaluation metrics for estimated scene graphs against world ground truth.

Objects are scored by found/correct fractions under a matching radius,
places by mean distance to the nearest ground-truth skeleton voxel, rooms
by voxel-overlap precision/recall, and trajectories by mean positional
error. A latency-slope helper backs the real-time contract checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from .geometry import rigid_fit, transform_points
from .graph import Layer, SceneGraph


@dataclass
class RoomScore:
    precision: float
    recall: float
    flagged: bool = False


def eval_objects(
    graph: SceneGraph, gt_objects, radius: float
) -> tuple[float, float]:
    """(found, correct) fractions under a same-label matching radius.

    found: ground-truth objects with a same-label estimate within radius.
    correct: estimates with a same-label ground-truth object within radius.
    Empty estimate/ground-truth sides score 1.0 over the empty set by
    convention (flagged by the caller if needed).
    """
    if radius <= 0:
        raise ValueError("matching radius must be positive")
    estimates = [
        (graph.nodes[n].semantic_label, graph.nodes[n].centroid)
        for n in graph.layer_nodes(Layer.OBJECT)
    ]
    truths = [(o.label, o.centroid) for o in gt_objects]

    def frac_matched(queries, pool):
        if not queries:
            return 1.0
        hit = 0
        for label, pos in queries:
            for p_label, p_pos in pool:
                if p_label == label and np.linalg.norm(p_pos - pos) <= radius:
                    hit += 1
                    break
        return hit / len(queries)

    return frac_matched(truths, estimates), frac_matched(estimates, truths)


def eval_places(graph: SceneGraph, gt_gvd_positions: np.ndarray) -> float:
    """Mean distance from estimated places to the nearest ground-truth
    skeleton voxel center."""
    gt = np.asarray(gt_gvd_positions, dtype=float).reshape(-1, 3)
    if gt.shape[0] == 0:
        raise ValueError("ground-truth skeleton is empty")
    places = graph.layer_nodes(Layer.PLACE)
    if not places:
        return float("inf")
    positions = np.stack([graph.nodes[p].position for p in places])
    tree = cKDTree(gt)
    dists, _ = tree.query(positions)
    return float(np.mean(dists))


def eval_rooms(rooms_estimated: dict, rooms_truth: dict) -> RoomScore:
    """Voxel-overlap precision/recall of two room partitions.

    Precision averages, over estimated rooms, the best overlap fraction
    with any ground-truth room; recall mirrors it. Rooms are sets of
    free-space voxel coordinates.
    """
    if not rooms_estimated or not rooms_truth:
        return RoomScore(precision=0.0, recall=0.0, flagged=True)

    def score(side_a: dict, side_b: dict) -> float:
        total = 0.0
        for r_a in side_a.values():
            if not r_a:
                continue
            best = max((len(r_a & r_b) for r_b in side_b.values()), default=0)
            total += best / len(r_a)
        return total / len(side_a)

    return RoomScore(precision=score(rooms_estimated, rooms_truth),
                     recall=score(rooms_truth, rooms_estimated))


def estimated_room_voxels(graph: SceneGraph, world) -> dict[int, set]:
    """Derive estimated room voxel sets from the places of each room:
    every interior free voxel joins the room of its nearest member place."""
    rooms = graph.layer_nodes(Layer.ROOM)
    if not rooms:
        return {}
    member_positions = []
    member_room = []
    for idx, room in enumerate(rooms):
        for place in sorted(graph.nodes[room].member_places):
            live = graph.resolve(place)
            if graph.has_node(live):
                member_positions.append(graph.nodes[live].position)
                member_room.append(idx)
    if not member_positions:
        return {}
    tree = cKDTree(np.stack(member_positions))
    free = np.argwhere(world.interior_free_mask())
    centers = world.voxel_center(free)
    _, rows = tree.query(centers)
    out: dict[int, set] = {i: set() for i in range(len(rooms))}
    for c, row in zip(free, rows):
        out[member_room[int(row)]].add(tuple(int(x) for x in c))
    return {k: v for k, v in out.items() if v}


def ate(
    estimated: Sequence[np.ndarray], truth: Sequence[np.ndarray], align: bool = False
) -> float:
    """Mean positional error between trajectories (optionally after a rigid
    alignment of the estimate onto the truth)."""
    if len(estimated) != len(truth) or not len(estimated):
        raise ValueError("trajectories must be equal-length and nonempty")
    est = np.stack([np.asarray(p)[:3, 3] for p in estimated])
    ref = np.stack([np.asarray(p)[:3, 3] for p in truth])
    if align and len(est) >= 3:
        est = transform_points(rigid_fit(est, ref), est)
    return float(np.mean(np.linalg.norm(est - ref, axis=1)))


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float

    def contains_zero(self) -> bool:
        return self.ci_low <= 0.0 <= self.ci_high

    def significantly_positive(self) -> bool:
        return self.ci_low > 0.0


def latency_slope(latencies: Sequence[float], confidence: float = 0.95) -> SlopeFit:
    """Least-squares slope of per-scan latency versus scan index, with a
    t-based confidence interval."""
    y = np.asarray(latencies, dtype=float)
    x = np.arange(len(y), dtype=float)
    if len(y) < 3:
        raise ValueError("need at least 3 samples for a slope fit")
    fit = stats.linregress(x, y)
    t_crit = stats.t.ppf(0.5 + confidence / 2, len(y) - 2)
    half = t_crit * fit.stderr
    return SlopeFit(
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        ci_low=float(fit.slope - half),
        ci_high=float(fit.slope + half),
    )


@dataclass
class EvalReport:
    pct_found: float = 0.0
    pct_correct: float = 0.0
    place_position_error: float = float("nan")
    room_precision: float = 0.0
    room_recall: float = 0.0
    room_count: int = 0
    ate: float = float("nan")
    ate_before: float = float("nan")
    loop_closures: int = 0
    flags: list[str] = field(default_factory=list)
    timings: dict[str, list[float]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pct_found": self.pct_found,
            "pct_correct": self.pct_correct,
            "place_position_error": self.place_position_error,
            "room_precision": self.room_precision,
            "room_recall": self.room_recall,
            "room_count": self.room_count,
            "ate": self.ate,
            "ate_before": self.ate_before,
            "loop_closures": self.loop_closures,
            "flags": list(self.flags),
            "counts": dict(self.counts),
            "timings": {k: list(v) for k, v in self.timings.items()},
        }
