import itertools

import numpy as np
import pytest

from scenemap.descriptors import (
    HierarchicalDescriptor,
    build_descriptor,
    normalized,
    similarity,
)
from scenemap.geometry import (
    make_pose,
    pose_inverse,
    random_rigid_transform,
    rigid_fit,
    rotation_angle,
    transform_points,
)
from scenemap.graph import AgentAttrs, Layer, ObjectAttrs, PlaceAttrs, SceneGraph
from scenemap.loop_closure import (
    LoopClosureConfig,
    MatchLevel,
    find_candidates,
    register_appearance,
    register_objects,
)


# -------------------------------------------------------------- similarity


def test_similarity_identical_is_one():
    h = np.array([0.2, 0.5, 0.3])
    assert similarity(h, h) == pytest.approx(1.0)


def test_similarity_disjoint_is_zero():
    assert similarity(np.array([1.0, 0, 0]), np.array([0, 0, 2.0])) == pytest.approx(0.0)


def test_similarity_hand_value():
    # normalized (1,1,0) -> (.5,.5,0); (1,0,1) -> (.5,0,.5); L1 distance 1
    assert similarity(np.array([1.0, 1, 0]), np.array([1.0, 0, 1])) == pytest.approx(0.5)


def test_similarity_zero_vector_conventions():
    z = np.zeros(3)
    nz = np.array([1.0, 0, 0])
    assert similarity(z, nz) == 0.0
    assert similarity(z, z) == 1.0


def test_similarity_symmetric_and_unit_range():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.uniform(0, 1, 6) * (rng.random(6) > 0.3)
        b = rng.uniform(0, 1, 6) * (rng.random(6) > 0.3)
        s1, s2 = similarity(a, b), similarity(b, a)
        assert s1 == pytest.approx(s2)
        assert -1e-12 <= s1 <= 1 + 1e-12
        if similarity(a, b) == pytest.approx(1.0) and a.sum() > 0 and b.sum() > 0:
            assert np.allclose(normalized(a), normalized(b))


def test_similarity_dimension_mismatch():
    with pytest.raises(ValueError):
        similarity(np.ones(3), np.ones(4))


# --------------------------------------------------------- build_descriptor


def agent_graph():
    g = SceneGraph()
    agent = g.add_node(Layer.AGENT, AgentAttrs(pose=np.eye(4), timestamp=0.0))
    return g, agent


def add_object(g, label, centroid):
    c = np.asarray(centroid, dtype=float)
    vid = g.mesh.add_vertices([c], [label])[0]
    return g.add_node(
        Layer.OBJECT,
        ObjectAttrs(
            semantic_label=label,
            centroid=c,
            bbox_min=c - 0.2,
            bbox_max=c + 0.2,
            mesh_vertices={vid},
        ),
    )


def test_empty_surroundings_give_zero_histograms():
    g, agent = agent_graph()
    d = build_descriptor(g, agent, radius=13.0)
    assert d.objects.sum() == 0 and d.places.sum() == 0
    assert d.object_ids == set() and d.place_ids == set()


def test_histogram_counts_two_chairs_one_table():
    g, agent = agent_graph()
    chair, table = 3, 7
    add_object(g, chair, (1, 0, 0))
    add_object(g, chair, (0, 1, 0))
    add_object(g, table, (1, 1, 0))
    add_object(g, chair, (40, 0, 0))  # outside the radius
    d = build_descriptor(g, agent, radius=13.0)
    assert d.objects[chair] == 2 and d.objects[table] == 1
    n = normalized(d.objects)
    assert n[chair] == pytest.approx(2 / 3)
    assert n[table] == pytest.approx(1 / 3)
    assert len(d.object_ids) == 3


def test_radius_thirteen_is_the_default():
    assert LoopClosureConfig().descriptor_radius == 13.0


def test_table_defaults_match_reported_parameters():
    cfg = LoopClosureConfig()
    assert cfg.places_threshold == 0.5
    assert cfg.objects_threshold == 0.3
    assert cfg.agent_threshold == 0.01
    assert cfg.min_ransac_correspondences == 15
    assert cfg.object_min_inliers == 5
    assert cfg.object_noise_bound == 0.1


# ------------------------------------------------------------- candidates


def desc(appearance, objects, places):
    return HierarchicalDescriptor(
        appearance=np.asarray(appearance, dtype=float),
        objects=np.asarray(objects, dtype=float),
        places=np.asarray(places, dtype=float),
    )


def nid(i):
    from scenemap.graph import NodeId

    return NodeId(Layer.AGENT, i)


def test_empty_history_no_candidates():
    cfg = LoopClosureConfig()
    q = desc([1, 0], [1, 0], [1, 0])
    assert find_candidates(q, [], cfg) == []


def test_identical_descriptor_is_appearance_candidate():
    cfg = LoopClosureConfig()
    q = desc([1, 2], [3, 1], [2, 2])
    cands = find_candidates(q, [(nid(0), q)], cfg)
    assert len(cands) == 1
    assert cands[0].level == MatchLevel.APPEARANCE
    assert cands[0].places_score == pytest.approx(1.0)
    assert cands[0].objects_score == pytest.approx(1.0)
    assert cands[0].appearance_score == pytest.approx(1.0)


def test_failing_places_is_not_a_candidate():
    cfg = LoopClosureConfig()
    q = desc([1, 0], [1, 0], [1, 0])
    far = desc([1, 0], [1, 0], [0, 1])  # place histograms disjoint
    assert find_candidates(q, [(nid(0), far)], cfg) == []


def test_object_level_when_appearance_fails():
    cfg = LoopClosureConfig()
    q = desc([1, 0], [1, 0], [1, 0])
    h = desc([0, 1], [1, 0], [1, 0])  # appearance disjoint
    cands = find_candidates(q, [(nid(0), h)], cfg)
    assert len(cands) == 1 and cands[0].level == MatchLevel.OBJECT


def test_cascade_monotone_in_thresholds():
    rng = np.random.default_rng(4)
    q = desc(rng.uniform(0, 1, 8), rng.uniform(0, 1, 8), rng.uniform(0, 1, 8))
    history = [
        (nid(i), desc(rng.uniform(0, 1, 8), rng.uniform(0, 1, 8), rng.uniform(0, 1, 8)))
        for i in range(30)
    ]
    base_cfg = LoopClosureConfig(places_threshold=0.3, objects_threshold=0.2, agent_threshold=0.1)
    base = {c.node for c in find_candidates(q, history, base_cfg)}
    for field_name in ("places_threshold", "objects_threshold"):
        cfg = LoopClosureConfig(**{**base_cfg.__dict__, field_name: getattr(base_cfg, field_name) + 0.2})
        tightened = {c.node for c in find_candidates(q, history, cfg)}
        assert tightened <= base


# ------------------------------------------------------------ registration


def test_noiseless_translation_recovered_exactly():
    rng = np.random.default_rng(0)
    src = rng.uniform(-2, 2, size=(20, 3))
    t = np.array([1.0, 0.0, 0.0])
    dst = src + t
    cfg = LoopClosureConfig()
    result = register_appearance(src, dst, cfg, np.random.default_rng(1))
    assert result is not None
    assert result.inliers == 20
    assert np.allclose(result.pose[:3, 3], t, atol=1e-9)
    assert np.allclose(result.pose[:3, :3], np.eye(3), atol=1e-9)


def test_fourteen_correspondences_fail():
    rng = np.random.default_rng(0)
    src = rng.uniform(-2, 2, size=(14, 3))
    cfg = LoopClosureConfig()
    assert register_appearance(src, src, cfg, np.random.default_rng(1)) is None


def _exhaustive_oracle(src, dst, threshold):
    """Exhaustive 3-subset consensus search plus inlier refit."""
    best_rows = []
    for rows in itertools.combinations(range(len(src)), 3):
        tri = src[list(rows)]
        if np.linalg.matrix_rank(tri - tri.mean(axis=0)) < 2:
            continue
        pose = rigid_fit(src[list(rows)], dst[list(rows)])
        err = np.linalg.norm(transform_points(pose, src) - dst, axis=1)
        rows_in = np.nonzero(err <= threshold)[0].tolist()
        if len(rows_in) > len(best_rows):
            best_rows = rows_in
    pose = rigid_fit(src[best_rows], dst[best_rows])
    err = np.linalg.norm(transform_points(pose, src) - dst, axis=1)
    final = np.nonzero(err <= threshold)[0].tolist()
    return rigid_fit(src[final], dst[final]), final


def test_corrupted_correspondences_match_exhaustive_oracle():
    rng = np.random.default_rng(7)
    src = rng.uniform(-2, 2, size=(20, 3))
    T = random_rigid_transform(rng, max_translation=1.0)
    dst = transform_points(T, src)
    corrupt = rng.choice(20, size=8, replace=False)
    dst[corrupt] += rng.uniform(1.0, 2.0, size=(8, 3))
    cfg = LoopClosureConfig(min_ransac_correspondences=12)
    result = register_appearance(src, dst, cfg, np.random.default_rng(3))
    assert result is not None
    oracle_pose, oracle_rows = _exhaustive_oracle(src, dst, cfg.ransac_inlier_threshold)
    assert sorted(result.inlier_rows) == sorted(oracle_rows)
    assert np.allclose(result.pose, oracle_pose, atol=1e-6)


def test_registration_equivariance_noiseless():
    rng = np.random.default_rng(9)
    src = rng.uniform(-2, 2, size=(20, 3))
    P = random_rigid_transform(rng)
    dst = transform_points(P, src)
    cfg = LoopClosureConfig()
    base = register_appearance(src, dst, cfg, np.random.default_rng(5))
    T = random_rigid_transform(rng)
    moved = register_appearance(src, transform_points(T, dst), cfg, np.random.default_rng(5))
    assert base is not None and moved is not None
    assert np.allclose(moved.pose, T @ base.pose, atol=1e-8)


# --------------------------------------------------------- object registry


def object_world(rng, n=6, label_cycle=(2, 3, 4, 5, 6, 7)):
    g = SceneGraph()
    centers = rng.uniform(-3, 3, size=(n, 3))
    ids = []
    for i in range(n):
        ids.append(add_object(g, label_cycle[i % len(label_cycle)], centers[i]))
    return g, ids, centers


def test_object_registration_exact_rigid():
    rng = np.random.default_rng(1)
    g, ids, centers = object_world(rng, n=6)
    q_pose = make_pose(t=np.array([0.5, 0, 0]))
    m_pose = make_pose(t=np.array([-1.0, 2.0, 0]))
    cfg = LoopClosureConfig()
    result = register_objects(g, ids, ids, q_pose, m_pose, cfg, np.random.default_rng(2))
    assert result is not None and result.inliers == 6
    expected = pose_inverse(m_pose) @ q_pose
    assert np.allclose(result.pose, expected, atol=1e-9)


def test_four_objects_fail():
    rng = np.random.default_rng(1)
    g, ids, centers = object_world(rng, n=4)
    cfg = LoopClosureConfig()
    result = register_objects(g, ids, ids, np.eye(4), np.eye(4), cfg, np.random.default_rng(2))
    assert result is None


def test_object_registration_with_distractors():
    rng = np.random.default_rng(12)
    g = SceneGraph()
    label = 4
    true_centers = rng.uniform(-3, 3, size=(6, 3))
    T_true = random_rigid_transform(rng, max_translation=2.0)
    query_ids = [add_object(g, label, c) for c in true_centers]
    # the match side sees the same objects, but the graph stores them in a
    # drifted world frame: emulate by distinct nodes at transformed spots
    match_ids = [add_object(g, label, transform_points(T_true, c)[0]) for c in true_centers]
    # wrong-pair distractors arise automatically: every same-label pair is
    # a putative correspondence (6x6 = 36 pairs, 6 true)
    cfg = LoopClosureConfig(ransac_iterations=3000)
    result = register_objects(
        g, query_ids, match_ids, np.eye(4), np.eye(4), cfg, np.random.default_rng(5)
    )
    assert result is not None
    assert result.inliers >= 6
    # recovered pose maps query centroids onto match centroids
    err = np.linalg.norm(
        transform_points(result.pose, true_centers) - transform_points(T_true, true_centers),
        axis=1,
    )
    assert err.max() <= cfg.object_noise_bound


def test_merged_object_ids_resolve_to_live_nodes():
    rng = np.random.default_rng(3)
    g, ids, centers = object_world(rng, n=6)
    g.merge_nodes(ids[0], ids[1])
    cfg = LoopClosureConfig(object_min_inliers=4)
    result = register_objects(g, ids, ids, np.eye(4), np.eye(4), cfg, np.random.default_rng(2))
    assert result is not None
