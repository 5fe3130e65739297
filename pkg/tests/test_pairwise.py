import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtrack.core_model import Connection, GraphError, build_graph, iou
from flowtrack.pairwise import (
    PairwiseCostSet,
    build_cooccurrence_costs,
    build_overlap_costs,
    diagonal_shift,
    interpolate_box,
    normalize_objective,
    objective_value,
)
from flowtrack.scenarios import ScenarioSpec, generate

from conftest import det


def random_q(rng, n_vars, n_entries, scale=1.0):
    entries = []
    for _ in range(n_entries):
        i, j = rng.choice(n_vars, 2, replace=False)
        entries.append((i, j, rng.normal(0, scale)))
    return PairwiseCostSet.from_entries(entries, n_vars)


def dense_q(q):
    m = np.zeros((q.n_vars, q.n_vars))
    for i, j, v in q.entries():
        m[i, j] = m[j, i] = v
    return m


def test_canonicalization():
    q = PairwiseCostSet.from_entries([(3, 1, 0.5), (1, 3, 0.25), (0, 2, 1.0), (2, 0, -1.0)], 4)
    assert q.entries() == [(1, 3, 0.75)]
    with pytest.raises(ValueError):
        PairwiseCostSet.from_entries([(1, 1, 1.0)], 3)
    with pytest.raises(IndexError):
        PairwiseCostSet.from_entries([(0, 3, 1.0)], 3)


def test_value_is_symmetric_quadratic_form():
    rng = np.random.default_rng(0)
    q = random_q(rng, 9, 12)
    m = dense_q(q)
    for _ in range(10):
        z = rng.uniform(0, 1, 9)
        assert q.value(z) == pytest.approx(z @ m @ z, abs=1e-12)
        np.testing.assert_allclose(q.symmetric() @ z, (m + m.T) @ z, atol=1e-12)


def test_shift_single_entry():
    q = PairwiseCostSet.from_entries([(0, 1, 0.5)], 3)
    c = np.array([1.0, 2.0, 3.0])
    s = diagonal_shift(c, q)
    np.testing.assert_allclose(s.diag, [0.5, 0.5, 0.0])
    np.testing.assert_allclose(s.c_adjusted, [0.5, 1.5, 3.0])


def test_shift_empty_q():
    c = np.array([1.0, -2.0])
    s = diagonal_shift(c, PairwiseCostSet.empty(2))
    assert not s.diag.any()
    np.testing.assert_array_equal(s.c_adjusted, c)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 30), st.integers(0, 60))
def test_shift_binary_equivalence(seed, n, m):
    rng = np.random.default_rng(seed)
    q = random_q(rng, n, m)
    c = rng.normal(size=n)
    s = diagonal_shift(c, q)
    for _ in range(20):
        z = (rng.random(n) < 0.5).astype(float)
        assert s.value(z) == pytest.approx(objective_value(c, q, z), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 25), st.integers(1, 60))
def test_shifted_matrix_is_psd(seed, n, m):
    rng = np.random.default_rng(seed)
    q = random_q(rng, n, m)
    s = diagonal_shift(np.zeros(n), q)
    full = dense_q(q) + np.diag(s.diag)
    off = np.abs(full - np.diag(np.diag(full))).sum(axis=1)
    assert np.all(np.diag(full) >= off - 1e-12)  # Gershgorin
    for _ in range(200):
        v = rng.normal(size=n)
        assert s.curvature(v) >= -1e-9
        assert s.curvature(v) == pytest.approx(v @ full @ v, abs=1e-9)


def test_gradient_matches_finite_difference():
    rng = np.random.default_rng(2)
    q = random_q(rng, 8, 10)
    s = diagonal_shift(rng.normal(size=8), q)
    z = rng.uniform(0, 1, 8)
    eps = 1e-6
    fd = np.array([(s.value(z + eps * e) - s.value(z - eps * e)) / (2 * eps) for e in np.eye(8)])
    np.testing.assert_allclose(s.gradient(z), fd, atol=1e-6)


def test_normalize():
    c = np.array([10.0, -20.0, 5.0])
    q = PairwiseCostSet.from_entries([(0, 1, 7.5)], 3)
    cn, qn, scale = normalize_objective(c, q)
    # sum |c| + sum over the full symmetric matrix
    assert scale == 50.0
    np.testing.assert_allclose(cn, c / 50)
    assert qn.entries() == [(0, 1, 7.5 / 50)]
    c2, q2, s2 = normalize_objective(np.zeros(3), PairwiseCostSet.empty(3))
    assert s2 == 1.0 and not c2.any()


def test_normalized_objective_bounded_on_flows():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = 15
        c = rng.normal(size=n) * 10
        q = random_q(rng, n, 20, 5.0)
        cn, qn, _ = normalize_objective(c, q)
        for _ in range(50):
            z = rng.uniform(0, 1, n)
            assert abs(objective_value(cn, qn, z)) <= 1.0 + 1e-12


def test_renormalizing_is_near_noop():
    rng = np.random.default_rng(9)
    c = rng.normal(size=6)
    q = random_q(rng, 6, 4)
    cn, qn, _ = normalize_objective(c, q)
    _, _, s2 = normalize_objective(cn, qn)
    assert s2 == pytest.approx(1.0)


def test_overlap_four_boxes():
    # boxes 1, 2 overlap at iou 0.6; boxes 3, 4 disjoint from everything
    w = 10.0
    shift = w * (1 - 0.6) / (1 + 0.6)
    dets = [det(1, 0, 0.0), det(2, 0, shift), det(3, 0, 100.0), det(4, 0, 200.0)]
    assert iou(dets[0].box, dets[1].box) == pytest.approx(0.6)
    g = build_graph(dets, [], 1)
    q = build_overlap_costs(g, 0.0223, 0.5)
    assert q.entries() == [(g.det_var(1), g.det_var(2), 0.0223)]


def test_overlap_respects_threshold_frame_and_class():
    shift = 10.0 * (1 - 0.3) / (1 + 0.3)  # iou 0.3
    g = build_graph([det(0, 0, 0.0), det(1, 0, shift)], [], 1)
    assert len(build_overlap_costs(g, 0.0223, 0.5)) == 0
    g = build_graph([det(0, 0, 0.0), det(1, 1, 0.0)], [], 1)
    assert len(build_overlap_costs(g, 0.0223, 0.5)) == 0
    g = build_graph([det(0, 0, 0.0), det(1, 0, 0.0, label="head")], [], 1)
    assert len(build_overlap_costs(g, 0.0223, 0.5)) == 0
    with pytest.raises(ValueError):
        build_overlap_costs(g, 0.0, 0.5)
    with pytest.raises(ValueError):
        build_overlap_costs(g, 0.1, 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_overlap_monotone_in_threshold(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    rng = np.random.default_rng(seed)
    dets = [det(i, int(rng.integers(0, 3)), float(rng.uniform(0, 30)), y=float(rng.uniform(0, 10))) for i in range(15)]
    g = build_graph(dets, [], 1)
    a = {(i, j) for i, j, _ in build_overlap_costs(g, 0.1, lo).entries()}
    b = {(i, j) for i, j, _ in build_overlap_costs(g, 0.1, hi).entries()}
    assert b <= a


def test_overlap_density_on_duplicates():
    dets, conns, _ = generate(ScenarioSpec("duplicate_detections", n_frames=10, n_objects=3, duplicate_rate=1.0))
    g = build_graph(dets, conns, 3)
    q = build_overlap_costs(g)
    # exactly one duplicate pair per object per frame
    assert len(q) == 30


def head_body(head_dx=0.0):
    body = det(0, 5, 0.0, w=20, h=80, label="body")
    head = det(1, 5, head_dx, w=20, h=20, label="head")
    return body, head


def test_cooccurrence_rule_a():
    body, head = head_body()
    g = build_graph([body, head], [], 1)
    q = build_cooccurrence_costs(g, 0.0223, 0.5, 0.25)
    assert q.entries() == [(g.det_var(0), g.det_var(1), -0.0223)]


def test_cooccurrence_far_apart():
    body, head = head_body(head_dx=500.0)
    g = build_graph([body, head], [], 1)
    assert len(build_cooccurrence_costs(g, 0.0223, 0.5, 0.25)) == 0


def test_cooccurrence_rule_b_body_edge_over_head():
    # body moves 0 -> 8 px between frames 4 and 6; head at frame 5 sits at x=4
    b0 = det(0, 4, 0.0, w=20, h=80)
    b1 = det(1, 6, 8.0, w=20, h=80)
    h = det(2, 5, 4.0, w=20, h=20, label="head")
    mid = interpolate_box(b0.box.as_tuple(), b1.box.as_tuple(), 4, 6, 5)
    np.testing.assert_allclose(mid, [4.0, 0.0, 20.0, 80.0])
    g = build_graph([b0, b1, h], [Connection(0, 1, 1.0)], 1)
    q = build_cooccurrence_costs(g, 0.0223, 0.5, 0.25)
    assert (g.det_var(2), g.conn_var(0, 1), -0.0223) in q.entries()


def test_cooccurrence_rule_b_head_edge_over_body():
    h0 = det(0, 4, 0.0, w=20, h=20, label="head")
    h1 = det(1, 7, 9.0, w=20, h=20, label="head")
    b = det(2, 5, 3.0, w=20, h=80)
    g = build_graph([h0, h1, b], [Connection(0, 1, 1.0)], 1)
    q = build_cooccurrence_costs(g, 0.0223, 0.5, 0.25)
    pairs = {(i, j) for i, j, _ in q.entries()}
    assert (g.det_var(2), g.conn_var(0, 1)) in pairs


def test_cooccurrence_structural_errors():
    body, head = head_body()
    with pytest.raises(GraphError):
        build_cooccurrence_costs(build_graph([body], [], 1))
    late_head = det(1, 50, 0.0, w=20, h=20, label="head")
    with pytest.raises(GraphError, match="do not overlap"):
        build_cooccurrence_costs(build_graph([body, late_head], [], 1))
