import numpy as np
import pytest

from scenemap.deformation import (
    BackendConfig,
    DeformEdgeKind,
    DisconnectedGraphError,
    _State,
    _edge_residuals,
    apply_solution,
    build_deformation_graph,
    interpolate_mesh,
    optimize,
    reconcile,
    simplify_mesh,
    undo_reconcile,
)
from scenemap.frontend import SceneGraphFrontend
from scenemap.geometry import make_pose, random_rigid_transform, transform_points
from scenemap.graph import (
    AgentAttrs,
    EdgeKind,
    Layer,
    ObjectAttrs,
    PlaceAttrs,
    SceneGraph,
)
from scenemap.loop_closure import LoopClosure, MatchLevel


def agent(graph, x, t, y=0.0):
    return graph.add_node(
        Layer.AGENT, AgentAttrs(pose=make_pose(t=np.array([x, y, 0.0])), timestamp=t)
    )


def place(graph, position, distance=1.0):
    return graph.add_node(
        Layer.PLACE,
        PlaceAttrs(position=np.asarray(position, dtype=float), obstacle_distance=distance),
    )


def empty_controls():
    return simplify_mesh([], np.zeros((0, 3)), [], cell=1.5)


# ------------------------------------------------------------ simplify_mesh


def test_all_vertices_in_one_cell_collapse_to_centroid():
    pts = np.array([[0.1, 0.1, 0.1], [0.2, 0.3, 0.2], [0.4, 0.2, 0.3]])
    cps = simplify_mesh([0, 1, 2], pts, [], cell=1.5)
    assert len(cps.points) == 1
    assert np.allclose(cps.points[0], pts.mean(axis=0))
    assert cps.origin_map[0] == {0, 1, 2}


def test_widely_spaced_vertices_stay_distinct():
    pts = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]])
    cps = simplify_mesh([5, 6, 7], pts, [(5, 6, 7)], cell=1.5)
    assert len(cps.points) == 3
    assert len(cps.edges) == 3  # triangle edges survive between cells


def test_uniform_grid_bucket_count_matches_oracle():
    cell = 1.0
    xs = np.arange(0, 4, 0.5)
    grid = np.array([[x, y, z] for x in xs for y in xs for z in xs])
    cps = simplify_mesh(range(len(grid)), grid, [], cell=cell)
    # oracle: direct cell-bucket count
    oracle = len({tuple(c) for c in np.floor(grid / cell).astype(int)})
    assert len(cps.points) == oracle


# ---------------------------------------------------- build_deformation_graph


def test_three_agents_make_two_odometry_edges():
    g = SceneGraph()
    agent(g, 0.0, 0.0)
    agent(g, 1.0, 1.0)
    agent(g, 2.0, 2.0)
    dg = build_deformation_graph(g, empty_controls())
    kinds = [e.kind for e in dg.edges]
    assert kinds.count(DeformEdgeKind.ODOM) == 2
    assert len(dg.keys) == 3


def test_place_triangle_contributes_spanning_tree_deform_edges():
    g = SceneGraph()
    a0 = agent(g, 0.0, 0.0)
    p0 = place(g, (0, 0, 0))
    p1 = place(g, (1, 0, 0))
    p2 = place(g, (2, 0, 0))
    g.add_edge(p0, p1, EdgeKind.INTRA)
    g.add_edge(p1, p2, EdgeKind.INTRA)
    g.add_edge(p0, p2, EdgeKind.INTRA)
    g.add_edge(a0, p0, EdgeKind.INTER)
    dg = build_deformation_graph(g, empty_controls())
    deform = [e for e in dg.edges if e.kind == DeformEdgeKind.DEFORM]
    place_edges = {frozenset((e.i, e.j))
                   for e in deform
                   if e.i[0] == "place" and e.j[0] == "place"}
    assert place_edges == {
        frozenset((("place", 0), ("place", 1))),
        frozenset((("place", 1), ("place", 2))),
    }
    assert len(dg.keys) == 1 + 3  # agents + places


def test_variable_count_is_agents_controls_places():
    g = SceneGraph()
    a0 = agent(g, 0.0, 0.0)
    p0 = place(g, (0, 0, 0))
    g.add_edge(a0, p0, EdgeKind.INTER)
    vids = g.mesh.add_vertices(
        np.array([[0.0, 0, 0], [4.0, 0, 0], [2.0, 1.0, 0]]), [1, 1, 1]
    )
    g.mesh.add_faces([tuple(vids)])
    cps = simplify_mesh(vids, g.mesh.positions_of(vids), g.mesh.faces(), cell=1.5)
    g.nodes[p0].nearest_parent_vertex = vids[0]
    dg = build_deformation_graph(g, cps)
    assert len(dg.keys) == 1 + len(cps.points) + 1


def test_disconnected_graph_error_names_component():
    g = SceneGraph()
    agent(g, 0.0, 0.0)
    place(g, (5, 5, 5))  # no inter-layer edge anywhere
    with pytest.raises(DisconnectedGraphError) as excinfo:
        build_deformation_graph(g, empty_controls())
    assert "place:0" in str(excinfo.value)


# ------------------------------------------------------------------ optimize


def test_zero_drift_no_loops_keeps_initialization():
    g = SceneGraph()
    agent(g, 0.0, 0.0)
    agent(g, 1.0, 1.0)
    agent(g, 2.0, 2.0)
    dg = build_deformation_graph(g, empty_controls())
    result = optimize(dg)
    assert result.cost_history[-1] == pytest.approx(0.0, abs=1e-18)
    for i, x in enumerate((0.0, 1.0, 2.0)):
        assert np.allclose(result.positions[("agent", i)], [x, 0, 0], atol=1e-12)


def three_pose_drift_graph():
    """Chain whose odometry says 1.15 m per hop but a loop pins the end at
    2.0 m from the start."""
    g = SceneGraph()
    agent(g, 0.0, 0.0)
    agent(g, 1.15, 1.0)
    agent(g, 2.30, 2.0)
    closure = LoopClosure(
        query=g.layer_nodes(Layer.AGENT)[2],
        match=g.layer_nodes(Layer.AGENT)[0],
        relative_pose=make_pose(t=np.array([2.0, 0.0, 0.0])),
        level=MatchLevel.APPEARANCE,
        inliers=20,
    )
    return g, closure


def test_translation_drift_toy_matches_linear_least_squares():
    g, closure = three_pose_drift_graph()
    dg = build_deformation_graph(g, empty_controls(), closures=[closure])
    result = optimize(dg)

    # closed-form weighted least squares on the translation-only system with
    # p0 anchored at zero: unknowns x1, x2
    # residuals: (x1 - 1.15), (x2 - x1 - 1.15), (x2 - 2.0), equal weights
    A = np.array([[1.0, 0.0], [-1.0, 1.0], [0.0, 1.0]])
    b = np.array([1.15, 1.15, 2.0])
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    assert result.positions[("agent", 0)][0] == pytest.approx(0.0, abs=1e-6)
    assert result.positions[("agent", 2)][0] == pytest.approx(x[1], abs=1e-4)
    assert abs(result.positions[("agent", 2)][0] - x[1]) < 1e-4


def chain_with_loops(n=6, drift=0.02):
    g = SceneGraph()
    for i in range(n):
        agent(g, i * (1.0 + drift), float(i))
    agents = g.layer_nodes(Layer.AGENT)
    closures = []
    for a, b in ((0, 3), (1, 4), (2, 5)):
        closures.append(
            LoopClosure(
                query=agents[b],
                match=agents[a],
                relative_pose=make_pose(t=np.array([(b - a) * 1.0, 0.0, 0.0])),
                level=MatchLevel.APPEARANCE,
                inliers=20,
            )
        )
    return g, agents, closures


def test_gnc_rejects_single_corrupted_loop():
    g, agents, closures = chain_with_loops()
    bad = LoopClosure(
        query=agents[5],
        match=agents[0],
        relative_pose=make_pose(t=np.array([10.0, 0.0, 0.0])),  # 5 m error
        level=MatchLevel.APPEARANCE,
        inliers=20,
    )
    dg = build_deformation_graph(g, empty_controls(), closures=closures + [bad])
    result = optimize(dg)
    loop_edges = dg.loop_edges()
    assert result.loop_outliers == [loop_edges[-1]]
    assert sorted(result.loop_inliers) == loop_edges[:-1]

    # oracle: optimize without the corrupted edge
    dg_clean = build_deformation_graph(g, empty_controls(), closures=closures)
    clean = optimize(dg_clean)
    for i in range(6):
        assert np.allclose(
            result.positions[("agent", i)], clean.positions[("agent", i)], atol=1e-3
        )


def test_accepted_cost_history_never_increases_without_gnc():
    g, closure = three_pose_drift_graph()
    dg = build_deformation_graph(g, empty_controls())
    result = optimize(dg)
    for earlier, later in zip(result.cost_history, result.cost_history[1:]):
        assert later <= earlier + 1e-12


def random_deform_graph(seed=0):
    rng = np.random.default_rng(seed)
    g = SceneGraph()
    a0 = agent(g, 0.0, 0.0)
    a1 = agent(g, 1.0, 1.0)
    ps = [place(g, rng.uniform(0, 3, 3)) for _ in range(4)]
    for i in range(3):
        g.add_edge(ps[i], ps[i + 1], EdgeKind.INTRA)
    g.add_edge(a0, ps[0], EdgeKind.INTER)
    g.add_edge(a1, ps[1], EdgeKind.INTER)
    vids = g.mesh.add_vertices(rng.uniform(0, 3, (9, 3)), [1] * 9)
    g.mesh.add_faces([(vids[0], vids[1], vids[2]), (vids[3], vids[4], vids[5])])
    cps = simplify_mesh(vids, g.mesh.positions_of(vids), g.mesh.faces(), cell=1.0)
    g.nodes[ps[0]].nearest_parent_vertex = vids[0]
    dg = build_deformation_graph(g, cps, bridge_disconnected=True)
    return g, dg, cps, rng


def test_jacobian_matches_central_finite_differences():
    g, dg, cps, rng = random_deform_graph(3)
    config = BackendConfig()
    state = _State(dg)
    # random perturbation away from the initial state
    delta0 = rng.normal(scale=0.05, size=6 * len(dg.keys))
    state.apply_step(delta0)
    r0, J = _edge_residuals(dg, state, config, {})
    eps = 1e-6
    n = 6 * len(dg.keys)
    rng_dirs = [rng.normal(size=n) for _ in range(5)]
    for direction in rng_dirs:
        direction = direction / np.linalg.norm(direction)
        plus = _State(dg)
        plus.R = [m.copy() for m in state.R]
        plus.p = [v.copy() for v in state.p]
        plus.apply_step(eps * direction)
        minus = _State(dg)
        minus.R = [m.copy() for m in state.R]
        minus.p = [v.copy() for v in state.p]
        minus.apply_step(-eps * direction)
        r_plus, _ = _edge_residuals(dg, plus, config, {})
        r_minus, _ = _edge_residuals(dg, minus, config, {})
        fd = (r_plus - r_minus) / (2 * eps)
        an = J @ direction
        denom = max(np.linalg.norm(fd), 1e-9)
        assert np.linalg.norm(an - fd) / denom < 1e-5


# ------------------------------------------------------------- interpolation


def identity_result(dg):
    return optimize(dg, BackendConfig(max_gn_iterations=0))


def test_identity_controls_leave_mesh_unchanged():
    g, dg, cps, rng = random_deform_graph(1)
    res = optimize(dg)
    # zero-cost problem: controls stay within numerical noise of identity
    vids = g.mesh.vertex_ids()
    before = g.mesh.positions_of(vids)
    moved = interpolate_mesh(before, cps, res, k=4)
    assert np.allclose(moved, before, atol=1e-6)


def test_shared_rigid_transform_moves_mesh_exactly():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 4, (20, 3))
    cps = simplify_mesh(range(20), pts, [], cell=1.0)
    T = random_rigid_transform(rng, max_translation=2.0)
    from scenemap.deformation import OptimizeResult

    res = OptimizeResult(
        rotations={("control", i): T[:3, :3].copy() for i in range(len(cps.points))},
        positions={
            ("control", i): transform_points(T, cps.points[i])[0]
            for i in range(len(cps.points))
        },
    )
    moved = interpolate_mesh(pts, cps, res, k=4)
    assert np.allclose(moved, transform_points(T, pts), atol=1e-9)


def test_two_controls_midpoint_averages_translations():
    from scenemap.deformation import OptimizeResult

    pts = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    cps = simplify_mesh([0, 1], pts, [], cell=1.0)
    t1 = np.array([0.3, 0.0, 0.0])
    t2 = np.array([0.0, 0.4, 0.0])
    shift = [t1 if cps.points[i][0] < 1 else t2 for i in range(2)]
    res = OptimizeResult(
        rotations={("control", i): np.eye(3) for i in range(2)},
        positions={("control", i): cps.points[i] + shift[i] for i in range(2)},
    )
    mid = np.array([[1.0, 0.0, 0.0]])
    moved = interpolate_mesh(mid, cps, res, k=4)
    assert np.allclose(moved[0] - mid[0], (t1 + t2) / 2, atol=1e-12)


# ----------------------------------------------------------------- reconcile


def test_place_merge_threshold_boundaries():
    g = SceneGraph()
    a = agent(g, 0.0, 0.0)
    p0 = place(g, (0, 0, 0))
    p1 = place(g, (0.39, 0, 0))
    p2 = place(g, (1.0, 0, 0))
    g.add_edge(p0, p1, EdgeKind.INTRA)
    g.add_edge(p1, p2, EdgeKind.INTRA)
    g.add_edge(a, p0, EdgeKind.INTER)
    report = reconcile(g)
    assert (p0, p1) in report.merged_places
    remaining = g.layer_nodes(Layer.PLACE)
    assert p2 in remaining and p0 in remaining and p1 not in remaining

    g2 = SceneGraph()
    a = agent(g2, 0.0, 0.0)
    q0 = place(g2, (0, 0, 0))
    q1 = place(g2, (0.41, 0, 0))
    g2.add_edge(q0, q1, EdgeKind.INTRA)
    g2.add_edge(a, q0, EdgeKind.INTER)
    report2 = reconcile(g2)
    assert report2.merged_places == []


def test_undo_restores_premerge_snapshot():
    g = SceneGraph()
    a = agent(g, 0.0, 0.0)
    ids = [place(g, (0.1 * i, 0, 0)) for i in range(10)]
    for u, v in zip(ids, ids[1:]):
        g.add_edge(u, v, EdgeKind.INTRA)
    g.add_edge(a, ids[0], EdgeKind.INTER)
    before = g.snapshot()
    report = reconcile(g)
    assert report.merged_places  # 0.1 m spacing merges heavily
    undo_reconcile(g, report)
    # rooms were rebuilt; compare the place layer and merge log only
    assert set(g.layer_nodes(Layer.PLACE)) == set(before.layer_nodes(Layer.PLACE))
    assert len(g.merge_log) == len(before.merge_log)
    for p in before.layer_nodes(Layer.PLACE):
        assert g.nodes[p].equals(before.nodes[p])


def test_object_recompute_follows_deformed_mesh():
    g = SceneGraph()
    a = agent(g, 0.0, 0.0)
    vids = g.mesh.add_vertices(
        np.array([[0.0, 0, 0], [0.2, 0, 0], [0.1, 0.2, 0]]), [4, 4, 4]
    )
    g.mesh.add_faces([tuple(vids)])
    centroid = g.mesh.positions_of(vids).mean(axis=0)
    obj = g.add_node(
        Layer.OBJECT,
        ObjectAttrs(
            semantic_label=4,
            centroid=centroid,
            bbox_min=centroid - 0.2,
            bbox_max=centroid + 0.2,
            mesh_vertices=set(vids),
        ),
    )
    p = place(g, (0, 0, 0))
    g.add_edge(a, p, EdgeKind.INTER)
    g.add_edge(obj, p, EdgeKind.INTER)
    # deform: move all vertices by +1 in z
    moved = g.mesh.positions_of(vids) + np.array([0, 0, 1.0])
    g.mesh.set_positions(vids, moved)
    reconcile(g)
    assert np.allclose(g.nodes[obj].centroid, moved.mean(axis=0), atol=1e-12)


# ------------------------------------------------------- rigid equivariance


def test_backend_rigid_equivariance():
    g, closure = three_pose_drift_graph()
    p0 = place(g, (0.5, 0.5, 0.0))
    p1 = place(g, (1.5, 0.5, 0.0))
    g.add_edge(p0, p1, EdgeKind.INTRA)
    agents = g.layer_nodes(Layer.AGENT)
    g.add_edge(agents[0], p0, EdgeKind.INTER)
    g.add_edge(agents[2], p1, EdgeKind.INTER)
    dg = build_deformation_graph(g, empty_controls(), closures=[closure])
    base = optimize(dg)

    rng = np.random.default_rng(17)
    T = random_rigid_transform(rng)
    g2 = SceneGraph()
    for node in agents:
        g2.add_node(
            Layer.AGENT,
            AgentAttrs(pose=T @ g.nodes[node].pose, timestamp=g.nodes[node].timestamp),
        )
    q0 = g2.add_node(Layer.PLACE, PlaceAttrs(position=transform_points(T, g.nodes[p0].position)[0], obstacle_distance=1.0))
    q1 = g2.add_node(Layer.PLACE, PlaceAttrs(position=transform_points(T, g.nodes[p1].position)[0], obstacle_distance=1.0))
    g2.add_edge(q0, q1, EdgeKind.INTRA)
    agents2 = g2.layer_nodes(Layer.AGENT)
    g2.add_edge(agents2[0], q0, EdgeKind.INTER)
    g2.add_edge(agents2[2], q1, EdgeKind.INTER)
    closure2 = LoopClosure(
        query=closure.query,
        match=closure.match,
        relative_pose=closure.relative_pose,  # relative measurements are frame-free
        level=closure.level,
        inliers=closure.inliers,
    )
    dg2 = build_deformation_graph(g2, empty_controls(), closures=[closure2])
    moved = optimize(dg2)
    for key in base.positions:
        expected = transform_points(T, base.positions[key])[0]
        assert np.allclose(moved.positions[key], expected, atol=1e-6)


# -------------------------------------------------------------- frontend


def test_frontend_nearest_place_matches_linear_scan():
    rng = np.random.default_rng(2)
    fe = SceneGraphFrontend()
    g = fe.graph
    positions = rng.uniform(0, 20, size=(1000, 3))
    ids = [place(g, p) for p in positions]
    fe.active_places = set(ids)
    for _ in range(50):
        q = rng.uniform(0, 20, size=3)
        got = fe.nearest_active_place(q)
        dists = np.linalg.norm(positions - q, axis=1)
        best = float(dists.min())
        ties = [ids[i] for i in range(1000) if dists[i] == best]
        assert got == min(ties)


def test_frontend_defers_interlayer_edges_until_places_exist():
    fe = SceneGraphFrontend()
    a = fe.add_agent(make_pose(t=np.zeros(3)), 0.0)
    assert fe.deferred_nodes == [a]
    p = place(fe.graph, (1.0, 0, 0))
    fe.active_places = {p}
    fe._retry_deferred()
    assert fe.graph.has_edge(a, p)
    assert fe.deferred_nodes == []


def test_frontend_agent_chain_and_timestamps():
    fe = SceneGraphFrontend()
    p = place(fe.graph, (0, 0, 0))
    fe.active_places = {p}
    a0 = fe.add_agent(make_pose(t=np.zeros(3)), 0.0)
    a1 = fe.add_agent(make_pose(t=np.array([1.0, 0, 0])), 1.0)
    assert fe.graph.has_edge(a0, a1)
    with pytest.raises(ValueError):
        fe.add_agent(make_pose(), 0.5)
