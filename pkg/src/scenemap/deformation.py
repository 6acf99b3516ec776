"""Deformation-graph backend.

The correction subgraph holds one rigid transform per agent pose, mesh
control point, and place node. Odometry and loop-closure edges constrain
relative poses between agents; regularization edges tie every connected
pair (i, j) through the rigid residual R_i (g_j0 - g_i0) + p_i - p_j in
both directions, which preserves local shape while letting the graph bend
at loop closures. Loop edges run through a graduated non-convexity
schedule with a truncated-least-squares surrogate, so wrong closures are
weighted out and classified as outliers. After optimization the full mesh
follows by distance-weighted blending of the k nearest control-point
transforms, and overlapping nodes are reconciled (merged with undo
support) before rooms are re-detected.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .geometry import (
    pose_inverse,
    reorthonormalize,
    so3_exp,
    so3_hat,
    so3_jr_inv,
    so3_log,
)
from .graph import EdgeKind, Layer, NodeId, SceneGraph
from .loop_closure import LoopClosure

NodeKey = tuple[str, int]


class DeformEdgeKind(enum.Enum):
    ODOM = "ODOM"
    LOOP = "LOOP"
    DEFORM = "DEFORM"


@dataclass
class BackendConfig:
    control_cell: float = 1.5
    interp_neighbors: int = 4
    sigma_rot: float = 0.05
    sigma_trans: float = 0.05
    deform_weight: float = 1.0
    prior_sigma: float = 1e-3
    gnc_threshold: float = 0.25
    gnc_mu_factor: float = 1.4
    max_outer_iterations: int = 100
    max_gn_iterations: int = 25
    rel_cost_tol: float = 1e-6
    place_merge_distance: float = 0.4


class DisconnectedGraphError(ValueError):
    def __init__(self, component: Sequence[NodeKey]):
        self.component = sorted(component)
        preview = ", ".join(f"{kind}:{idx}" for kind, idx in self.component[:6])
        more = "" if len(self.component) <= 6 else f" (+{len(self.component) - 6} more)"
        super().__init__(f"deformation graph is disconnected; separated component [{preview}{more}]")


@dataclass
class ControlPointSet:
    points: np.ndarray  # (n, 3) control positions (bucket centroids)
    origin_map: dict[int, set[int]]  # control row -> original vertex ids
    edges: set[tuple[int, int]]
    cell: float

    def control_of_vertex(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for control, vids in self.origin_map.items():
            for v in vids:
                out[v] = control
        return out


def simplify_mesh(vertex_ids, positions, faces, cell: float) -> ControlPointSet:
    """Grid (octree-cell) vertex clustering: vertices sharing a cell of side
    ``cell`` collapse to their centroid; control connectivity follows the
    original mesh edges."""
    if cell <= 0:
        raise ValueError("cell size must be positive")
    vertex_ids = [int(v) for v in vertex_ids]
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(vertex_ids) != positions.shape[0]:
        raise ValueError("vertex ids and positions disagree")
    cells = np.floor(positions / cell).astype(np.int64)
    cell_rows: dict[tuple[int, int, int], list[int]] = {}
    for row, c in enumerate(cells):
        cell_rows.setdefault(tuple(int(x) for x in c), []).append(row)
    control_points = []
    origin_map: dict[int, set[int]] = {}
    control_of_vertex: dict[int, int] = {}
    for idx, key in enumerate(sorted(cell_rows)):
        rows = cell_rows[key]
        control_points.append(positions[rows].mean(axis=0))
        origin_map[idx] = {vertex_ids[r] for r in rows}
        for r in rows:
            control_of_vertex[vertex_ids[r]] = idx
    edges: set[tuple[int, int]] = set()
    for f in faces:
        a, b, c = (int(v) for v in f)
        for u, v in ((a, b), (b, c), (a, c)):
            cu, cv = control_of_vertex.get(u), control_of_vertex.get(v)
            if cu is None or cv is None or cu == cv:
                continue
            edges.add((cu, cv) if cu < cv else (cv, cu))
    return ControlPointSet(
        points=np.asarray(control_points).reshape(-1, 3),
        origin_map=origin_map,
        edges=edges,
        cell=cell,
    )


@dataclass
class DeformEdge:
    kind: DeformEdgeKind
    i: NodeKey
    j: NodeKey
    measurement: Optional[np.ndarray] = None  # 4x4 Z with X_i^-1 X_j = Z


@dataclass
class DeformationGraph:
    keys: list[NodeKey]
    rotations: dict[NodeKey, np.ndarray]
    positions: dict[NodeKey, np.ndarray]
    initial_positions: dict[NodeKey, np.ndarray]
    edges: list[DeformEdge]
    anchor: NodeKey

    def loop_edges(self) -> list[int]:
        return [i for i, e in enumerate(self.edges) if e.kind == DeformEdgeKind.LOOP]


def build_deformation_graph(
    graph: SceneGraph,
    controls: ControlPointSet,
    closures: Sequence[LoopClosure] = (),
    bridge_disconnected: bool = False,
) -> DeformationGraph:
    """Assemble variables and edges from the scene graph snapshot.

    Variables: every agent pose, every mesh control point, every place.
    Edges: the agent chain (odometry from current estimates), accepted loop
    closures, and regularization over control connectivity, the place-layer
    spanning forest, agent-to-place attachments, and place-to-control
    bindings through each place's recorded surface vertex.
    """
    agents = graph.layer_nodes(Layer.AGENT)
    if not agents:
        raise ValueError("deformation graph needs at least one agent pose")
    places = graph.layer_nodes(Layer.PLACE)

    keys: list[NodeKey] = []
    rotations: dict[NodeKey, np.ndarray] = {}
    positions: dict[NodeKey, np.ndarray] = {}
    initial: dict[NodeKey, np.ndarray] = {}

    for node in agents:
        key = ("agent", node.index)
        keys.append(key)
        pose = graph.nodes[node].pose
        rotations[key] = pose[:3, :3].copy()
        positions[key] = pose[:3, 3].copy()
        initial[key] = pose[:3, 3].copy()
    for row in range(len(controls.points)):
        key = ("control", row)
        keys.append(key)
        rotations[key] = np.eye(3)
        positions[key] = controls.points[row].copy()
        initial[key] = controls.points[row].copy()
    for node in places:
        key = ("place", node.index)
        keys.append(key)
        rotations[key] = np.eye(3)
        positions[key] = graph.nodes[node].position.copy()
        initial[key] = graph.nodes[node].position.copy()

    edges: list[DeformEdge] = []
    for a, b in zip(agents, agents[1:]):
        Ta = graph.nodes[a].pose
        Tb = graph.nodes[b].pose
        edges.append(
            DeformEdge(
                DeformEdgeKind.ODOM,
                ("agent", a.index),
                ("agent", b.index),
                measurement=pose_inverse(Ta) @ Tb,
            )
        )
    for closure in closures:
        edges.append(
            DeformEdge(
                DeformEdgeKind.LOOP,
                ("agent", closure.match.index),
                ("agent", closure.query.index),
                measurement=np.asarray(closure.relative_pose, dtype=float),
            )
        )
    for cu, cv in sorted(controls.edges):
        edges.append(DeformEdge(DeformEdgeKind.DEFORM, ("control", cu), ("control", cv)))
    if places:
        for a, b in sorted(graph.layer_spanning_tree(Layer.PLACE)):
            edges.append(DeformEdge(DeformEdgeKind.DEFORM, ("place", a.index), ("place", b.index)))
    for a, b in sorted(graph.inter_edges):
        pair = {a.layer, b.layer}
        if pair == {Layer.AGENT, Layer.PLACE}:
            agent = a if a.layer == Layer.AGENT else b
            place = b if b.layer == Layer.PLACE else a
            edges.append(
                DeformEdge(DeformEdgeKind.DEFORM, ("agent", agent.index), ("place", place.index))
            )
    vertex_control = controls.control_of_vertex()
    for node in places:
        vid = graph.nodes[node].nearest_parent_vertex
        if vid is None:
            continue
        control = vertex_control.get(int(vid))
        if control is None:
            continue
        edges.append(DeformEdge(DeformEdgeKind.DEFORM, ("place", node.index), ("control", control)))

    dg = DeformationGraph(
        keys=keys,
        rotations=rotations,
        positions=positions,
        initial_positions=initial,
        edges=edges,
        anchor=("agent", agents[0].index),
    )
    _check_connectivity(dg, bridge_disconnected)
    return dg


def _check_connectivity(dg: DeformationGraph, bridge: bool) -> None:
    parent = {k: k for k in dg.keys}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    for e in dg.edges:
        union(e.i, e.j)
    comps: dict[NodeKey, list[NodeKey]] = {}
    for k in dg.keys:
        comps.setdefault(find(k), []).append(k)
    if len(comps) <= 1:
        return
    anchor_root = find(dg.anchor)
    if not bridge:
        stray = next(m for root, m in sorted(comps.items()) if root != anchor_root)
        raise DisconnectedGraphError(stray)
    # tie each stray component to the main one by the closest position pair
    for root in sorted(comps, key=lambda r: sorted(comps[r])[0]):
        if find(root) == find(dg.anchor):
            continue
        members = comps[root]
        main = [k for k in dg.keys if find(k) == find(dg.anchor)]
        best = None
        for a in members:
            pa = dg.positions[a]
            for b in main:
                d = float(np.linalg.norm(pa - dg.positions[b]))
                if best is None or (d, a, b) < best:
                    best = (d, a, b)
        _, a, b = best
        dg.edges.append(DeformEdge(DeformEdgeKind.DEFORM, a, b))
        union(a, b)


# ---------------------------------------------------------------- solver


@dataclass
class OptimizeResult:
    rotations: dict[NodeKey, np.ndarray]
    positions: dict[NodeKey, np.ndarray]
    loop_inliers: list[int] = field(default_factory=list)
    loop_outliers: list[int] = field(default_factory=list)
    cost_history: list[float] = field(default_factory=list)
    converged: bool = True
    outer_iterations: int = 0


class _State:
    def __init__(self, dg: DeformationGraph):
        self.index = {k: i for i, k in enumerate(dg.keys)}
        self.R = [dg.rotations[k].copy() for k in dg.keys]
        self.p = [dg.positions[k].copy() for k in dg.keys]
        self.g0 = [dg.initial_positions[k].copy() for k in dg.keys]
        # regularization acts on the rotation *deviation* from the build-time
        # orientation, so an undeformed graph has exactly zero deform cost
        self.R0T = [dg.rotations[k].T.copy() for k in dg.keys]

    def apply_step(self, delta: np.ndarray):
        for i in range(len(self.R)):
            dtheta = delta[6 * i : 6 * i + 3]
            dp = delta[6 * i + 3 : 6 * i + 6]
            self.R[i] = reorthonormalize(self.R[i] @ so3_exp(dtheta))
            self.p[i] = self.p[i] + dp


def _edge_residuals(dg, state, config, loop_weights):
    """Stack residuals and sparse Jacobian triplets for the current state."""
    rows_r, cols_r, vals_r = [], [], []
    residuals = []
    row0 = 0
    w_rot = 1.0 / config.sigma_rot
    w_tr = 1.0 / config.sigma_trans
    w_def = np.sqrt(config.deform_weight)
    w_prior = 1.0 / config.prior_sigma

    def add_block(row, col_key, mat):
        col = state.index[col_key] * 6
        mat = np.asarray(mat)
        for r in range(mat.shape[0]):
            for c in range(mat.shape[1]):
                v = mat[r, c]
                if v != 0.0:
                    rows_r.append(row + r)
                    cols_r.append(col + c)
                    vals_r.append(v)

    loop_counter = 0
    loop_rows = {}
    for edge_idx, e in enumerate(dg.edges):
        i = state.index[e.i]
        j = state.index[e.j]
        if e.kind in (DeformEdgeKind.ODOM, DeformEdgeKind.LOOP):
            w = 1.0
            if e.kind == DeformEdgeKind.LOOP:
                w = loop_weights.get(edge_idx, 1.0)
                loop_rows[edge_idx] = row0
                loop_counter += 1
            if w == 0.0:
                continue
            sw = np.sqrt(w)
            Rz = e.measurement[:3, :3]
            tz = e.measurement[:3, 3]
            Ri, Rj = state.R[i], state.R[j]
            pi, pj = state.p[i], state.p[j]
            M = Rz.T @ Ri.T @ Rj
            r_rot = so3_log(M)
            jr_inv = so3_jr_inv(r_rot)
            Q = Rj.T @ Ri
            r_tr = Ri.T @ (pj - pi) - tz
            residuals.append(sw * w_rot * r_rot)
            add_block(row0, e.i, -sw * w_rot * (jr_inv @ Q))  # d r_rot / d theta_i
            add_block(row0, e.j, sw * w_rot * jr_inv)  # d r_rot / d theta_j
            row0 += 3
            residuals.append(sw * w_tr * r_tr)
            a = Ri.T @ (pj - pi)
            add_block(row0, e.i, sw * w_tr * so3_hat(a))  # d r_tr / d theta_i
            block = np.zeros((3, 6))
            # translation parts live 3 columns further in the key's block
            col_i = state.index[e.i] * 6 + 3
            col_j = state.index[e.j] * 6 + 3
            RiT = sw * w_tr * Ri.T
            for r in range(3):
                for c in range(3):
                    v = -RiT[r, c]
                    if v != 0.0:
                        rows_r.append(row0 + r)
                        cols_r.append(col_i + c)
                        vals_r.append(v)
                    v = RiT[r, c]
                    if v != 0.0:
                        rows_r.append(row0 + r)
                        cols_r.append(col_j + c)
                        vals_r.append(v)
            row0 += 3
        else:  # DEFORM, both directions
            for (a_idx, b_idx, a_key, b_key) in ((i, j, e.i, e.j), (j, i, e.j, e.i)):
                Ra = state.R[a_idx]
                ga = state.g0[a_idx]
                gb = state.g0[b_idx]
                pa = state.p[a_idx]
                pb = state.p[b_idx]
                diff0 = state.R0T[a_idx] @ (gb - ga)
                r = Ra @ diff0 + pa - pb
                residuals.append(w_def * r)
                add_block(row0, a_key, -w_def * (Ra @ so3_hat(diff0)))
                col_a = state.index[a_key] * 6 + 3
                col_b = state.index[b_key] * 6 + 3
                for rr in range(3):
                    rows_r.append(row0 + rr)
                    cols_r.append(col_a + rr)
                    vals_r.append(w_def)
                    rows_r.append(row0 + rr)
                    cols_r.append(col_b + rr)
                    vals_r.append(-w_def)
                row0 += 3

    # gauge prior on the anchor
    ai = state.index[dg.anchor]
    R0 = dg.rotations[dg.anchor]
    p0 = dg.positions[dg.anchor]
    r_rot = so3_log(R0.T @ state.R[ai])
    residuals.append(w_prior * r_rot)
    add_block(row0, dg.anchor, w_prior * so3_jr_inv(r_rot))
    row0 += 3
    residuals.append(w_prior * (state.p[ai] - p0))
    col = ai * 6 + 3
    for rr in range(3):
        rows_r.append(row0 + rr)
        cols_r.append(col + rr)
        vals_r.append(w_prior)
    row0 += 3

    r = np.concatenate(residuals) if residuals else np.zeros(0)
    J = sparse.coo_matrix(
        (vals_r, (rows_r, cols_r)), shape=(row0, 6 * len(state.R))
    ).tocsr()
    return r, J


def _loop_residual_norm(dg, state, edge_idx) -> float:
    """Unweighted combined rotation+translation residual norm of one loop."""
    e = dg.edges[edge_idx]
    i = state.index[e.i]
    j = state.index[e.j]
    Rz = e.measurement[:3, :3]
    tz = e.measurement[:3, 3]
    r_rot = so3_log(Rz.T @ state.R[i].T @ state.R[j])
    r_tr = state.R[i].T @ (state.p[j] - state.p[i]) - tz
    return float(np.sqrt(r_rot @ r_rot + r_tr @ r_tr))


def _gauss_newton(dg, state, config, loop_weights, max_iters) -> list[float]:
    """Damped Gauss-Newton; accepted steps never increase the cost."""
    lam = 1e-6
    r, J = _edge_residuals(dg, state, config, loop_weights)
    cost = float(r @ r)
    history = [cost]
    for _ in range(max_iters):
        H = (J.T @ J).tocsc()
        g = J.T @ r
        accepted = False
        for _try in range(8):
            H_damped = H + lam * sparse.eye(H.shape[0], format="csc")
            delta = spsolve(H_damped, -g)
            trial = _State.__new__(_State)
            trial.index = state.index
            trial.R = [m.copy() for m in state.R]
            trial.p = [v.copy() for v in state.p]
            trial.g0 = state.g0
            trial.R0T = state.R0T
            trial.apply_step(np.asarray(delta).reshape(-1))
            r_new, J_new = _edge_residuals(dg, trial, config, loop_weights)
            cost_new = float(r_new @ r_new)
            if cost_new <= cost + 1e-15:
                state.R, state.p = trial.R, trial.p
                r, J = r_new, J_new
                improvement = cost - cost_new
                cost = cost_new
                history.append(cost)
                lam = max(lam / 2, 1e-9)
                accepted = True
                if improvement <= config.rel_cost_tol * max(cost, 1e-12):
                    return history
                break
            lam *= 4.0
        if not accepted:
            return history
    return history


def optimize(dg: DeformationGraph, config: BackendConfig | None = None) -> OptimizeResult:
    """Robust optimization with graduated non-convexity on loop edges.

    Loop residuals run through a truncated-least-squares surrogate whose
    convexity anneals over the outer iterations; after convergence each
    loop edge is classified inlier or outlier by its final weight.
    """
    config = config or BackendConfig()
    state = _State(dg)
    loops = dg.loop_edges()
    weights = {idx: 1.0 for idx in loops}
    history: list[float] = []

    if not loops:
        history = _gauss_newton(dg, state, config, weights, config.max_gn_iterations)
        return _pack_result(dg, state, weights, history, converged=True, outer=len(history))

    c_sq = config.gnc_threshold**2
    history.extend(_gauss_newton(dg, state, config, weights, config.max_gn_iterations))
    r_max_sq = max(_loop_residual_norm(dg, state, idx) ** 2 for idx in loops)
    mu = c_sq / max(2 * r_max_sq - c_sq, 1e-9) if r_max_sq > c_sq else 1e9
    converged = False
    outer = 0
    prev_cost = history[-1] if history else np.inf
    for outer in range(1, config.max_outer_iterations + 1):
        new_weights = {}
        for idx in loops:
            r_sq = _loop_residual_norm(dg, state, idx) ** 2
            upper = (mu + 1) / mu * c_sq
            lower = mu / (mu + 1) * c_sq
            if r_sq >= upper:
                new_weights[idx] = 0.0
            elif r_sq <= lower:
                new_weights[idx] = 1.0
            else:
                new_weights[idx] = float(
                    np.clip(np.sqrt(c_sq * mu * (mu + 1) / r_sq) - mu, 0.0, 1.0)
                )
        weights = new_weights
        history.extend(_gauss_newton(dg, state, config, weights, config.max_gn_iterations))
        cost = history[-1]
        binary = all(w in (0.0, 1.0) for w in weights.values())
        if binary and abs(prev_cost - cost) <= config.rel_cost_tol * max(cost, 1e-12):
            converged = True
            break
        prev_cost = cost
        mu *= config.gnc_mu_factor
    return _pack_result(dg, state, weights, history, converged, outer)


def _pack_result(dg, state, weights, history, converged, outer) -> OptimizeResult:
    rotations = {k: state.R[state.index[k]].copy() for k in dg.keys}
    positions = {k: state.p[state.index[k]].copy() for k in dg.keys}
    inliers = [idx for idx, w in weights.items() if w > 0.5]
    outliers = [idx for idx, w in weights.items() if w <= 0.5]
    return OptimizeResult(
        rotations=rotations,
        positions=positions,
        loop_inliers=sorted(inliers),
        loop_outliers=sorted(outliers),
        cost_history=history,
        converged=converged,
        outer_iterations=outer,
    )


# ----------------------------------------------------------- interpolation


def interpolate_mesh(
    positions: np.ndarray,
    controls: ControlPointSet,
    result: OptimizeResult,
    k: int = 4,
) -> np.ndarray:
    """Blend the k nearest control transforms per vertex.

    Weights follow (1 - d/d_max)^2 with d_max the distance to the
    (k+1)-th nearest control, normalized to sum one; a vertex with a single
    control in reach just follows it rigidly.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    n_controls = len(controls.points)
    if n_controls == 0 or positions.shape[0] == 0:
        return positions.copy()
    Rs = np.stack([result.rotations[("control", i)] for i in range(n_controls)])
    ps = np.stack([result.positions[("control", i)] for i in range(n_controls)])
    g0 = controls.points

    if n_controls == 1:
        return (positions - g0[0]) @ Rs[0].T + ps[0]

    tree = cKDTree(g0)
    if n_controls > k:
        dists, rows = tree.query(positions, k=k + 1)
    else:
        dists, rows = tree.query(positions, k=n_controls)
    dists = np.atleast_2d(dists)
    rows = np.atleast_2d(rows)
    out = np.zeros_like(positions)
    for v in range(positions.shape[0]):
        d = dists[v]
        c = rows[v]
        if n_controls > k:
            # the (k+1)-th nearest control sets the falloff radius
            d_max = d[-1]
            d = d[:k]
            c = c[:k]
        else:
            d_max = 2.0 * d[-1] if d[-1] > 0 else 1.0
        w = (1.0 - d / max(d_max, 1e-12)) ** 2
        if w.sum() <= 1e-12:
            w = np.ones_like(w)
        w = w / w.sum()
        acc = np.zeros(3)
        for weight, ctrl in zip(w, c):
            acc += weight * (Rs[ctrl] @ (positions[v] - g0[ctrl]) + ps[ctrl])
        out[v] = acc
    return out


# ------------------------------------------------------------ reconcile


@dataclass
class ReconcileReport:
    merged_places: list[tuple[NodeId, NodeId]] = field(default_factory=list)
    merged_objects: list[tuple[NodeId, NodeId]] = field(default_factory=list)
    merge_checkpoint: int = 0
    rooms_detected: int = 0


def apply_solution(graph: SceneGraph, controls: ControlPointSet, result: OptimizeResult,
                   interp_neighbors: int = 4) -> None:
    """Write optimized poses/positions back and interpolate the mesh."""
    for node in graph.layer_nodes(Layer.AGENT):
        key = ("agent", node.index)
        if key in result.positions:
            pose = np.eye(4)
            pose[:3, :3] = result.rotations[key]
            pose[:3, 3] = result.positions[key]
            graph.nodes[node].pose = pose
    for node in graph.layer_nodes(Layer.PLACE):
        key = ("place", node.index)
        if key in result.positions:
            graph.nodes[node].position = result.positions[key].copy()
    vids = graph.mesh.vertex_ids()
    if vids and len(controls.points):
        moved = interpolate_mesh(
            graph.mesh.positions_of(vids), controls, result, k=interp_neighbors
        )
        graph.mesh.set_positions(vids, moved)


def reconcile(
    graph: SceneGraph,
    config: BackendConfig | None = None,
    room_params=None,
) -> ReconcileReport:
    """Merge overlapping nodes after a correction and re-detect rooms.

    Places within the merge distance collapse; objects recompute their
    summaries from the deformed mesh and merge under the same-label,
    centroid-in-bbox rule. All merges go through the scene graph's merge
    log, so a later outlier verdict can undo them exactly.
    """
    from .objects import _merge_to_fixpoint, _recompute, ObjectDelta
    from .rooms import RoomParams, detect_rooms

    config = config or BackendConfig()
    report = ReconcileReport(merge_checkpoint=graph.merge_checkpoint())

    def scene_resolver(ids):
        known = [int(i) for i in ids if graph.mesh.has_vertex(int(i))]
        if not known:
            return [], np.zeros((0, 3))
        return known, graph.mesh.positions_of(known)

    for node in graph.layer_nodes(Layer.OBJECT):
        _recompute(graph.nodes[node], scene_resolver)

    # place merges to fixpoint; candidate pairs via a KD-tree, applied in
    # ascending id order so the outcome is deterministic
    while True:
        places = graph.layer_nodes(Layer.PLACE)
        if len(places) < 2:
            break
        positions = np.stack([graph.nodes[p].position for p in places])
        pairs = sorted(
            (places[i], places[j]) if places[i] < places[j] else (places[j], places[i])
            for i, j in cKDTree(positions).query_pairs(config.place_merge_distance)
        )
        if not pairs:
            break
        merged_away: set[NodeId] = set()
        for a, b in pairs:
            if a in merged_away or b in merged_away:
                continue  # re-examined on the next fixpoint round
            graph.merge_nodes(a, b)
            report.merged_places.append((a, b))
            merged_away.add(b)
        if not merged_away:
            break

    delta = ObjectDelta()
    _merge_to_fixpoint(graph, scene_resolver, delta)
    report.merged_objects = delta.merged

    if graph.layer_nodes(Layer.PLACE):
        assignment = detect_rooms(graph, room_params or RoomParams())
        report.rooms_detected = len(graph.layer_nodes(Layer.ROOM))
    return report


def undo_reconcile(graph: SceneGraph, report: ReconcileReport) -> None:
    """Roll the merge log back to the checkpoint taken by reconcile."""
    graph.undo_merges_to(report.merge_checkpoint)
