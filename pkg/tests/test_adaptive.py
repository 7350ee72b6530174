from collections import Counter
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedclust import adaptive as ad
from fedclust.clusterweights import WeightState
from fedclust.models import ClusterHead, ClusterModel, FeatureExtractor


def identity_phi(d=2):
    return FeatureExtractor("linear", {"W": np.eye(d)})


def client(x, y):
    return SimpleNamespace(x_train=np.asarray(x, dtype=float), y_train=np.asarray(y))


def protos_from(rows, present=None, mean=None):
    rows = np.asarray(rows, dtype=float)
    present = np.ones(len(rows), bool) if present is None else np.asarray(present)
    protos = rows.copy()
    protos[~present] = np.nan
    mean = rows[present].mean(axis=0) if mean is None else np.asarray(mean, dtype=float)
    return ad.PrototypeSet(protos, present, present.astype(int), mean)


def test_prototypes_of_constant_features():
    p = ad.compute_prototypes(client([[1.5, -2.0]] * 4, [0, 0, 2, 2]), identity_phi(), 3)
    assert np.array_equal(p.present, [True, False, True])
    assert np.allclose(p.class_protos[[0, 2]], [1.5, -2.0])
    assert np.all(np.isnan(p.class_protos[1]))


def test_prototype_of_single_sample_and_hand_mean():
    p = ad.compute_prototypes(client([[3.0, 4.0], [1.0, 0.0], [0.0, 1.0]], [1, 0, 0]), identity_phi(), 2)
    assert np.allclose(p.class_protos[1], [3.0, 4.0])
    assert np.allclose(p.class_protos[0], [0.5, 0.5])


def test_cosine_distance_zero_vector_rules():
    assert ad.cosine_distance(np.zeros(2), np.zeros(2)) == 0.0
    assert ad.cosine_distance(np.zeros(2), np.ones(2)) == 1.0
    assert ad.cosine_distance(np.array([1.0, 0]), np.array([-1.0, 0])) == 2.0


def test_self_distance_and_zero_confidence():
    rng = np.random.default_rng(0)
    p = protos_from(rng.normal(size=(4, 3)))
    q = protos_from(rng.normal(size=(4, 3)))
    for metric in (ad.Metric("ascp"), ad.Metric("cscp")):
        assert ad.client_distance(p, [0.7, 0.3], p, [0.7, 0.3], 0, metric) == 0.0
        assert ad.client_distance(p, [0.0, 1.0], q, [1.0, 0.0], 0, metric) == 0.0


def test_max_versus_mean_over_classes():
    rows = np.tile([1.0, 1.0], (10, 1))
    a, b = rows.copy(), rows.copy()
    a[0], b[0] = [1.0, 0.0], [0.0, 1.0]
    pa, pb = protos_from(a), protos_from(b)
    w = [1.0]
    assert ad.client_distance(pa, w, pb, w, 0, ad.Metric("cscp")) == pytest.approx(1.0)
    assert ad.client_distance(pa, w, pb, w, 0, ad.Metric("cscp", {"mean"})) == pytest.approx(0.1)


def test_no_shared_class_is_counted():
    pa = protos_from([[1.0, 0.0], [0.0, 0.0]], present=[True, False])
    pb = protos_from([[0.0, 0.0], [0.0, 1.0]], present=[False, True])
    diag = Counter()
    assert ad.client_distance(pa, [1.0], pb, [1.0], 0, ad.Metric("cscp"), diag) == 0.0
    assert diag["no_shared_class"] == 1
    # the overall prototype still separates them under ASCP
    assert ad.client_distance(pa, [1.0], pb, [1.0], 0, ad.Metric("ascp"), diag) == pytest.approx(1.0)


def test_gradcos_uses_per_cluster_updates():
    pa, pb = protos_from([[1.0, 0.0]]), protos_from([[1.0, 0.0]])
    pa.update = [np.array([1.0, 0.0]), np.array([1.0, 0.0])]
    pb.update = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    m = ad.Metric("cscp", {"gradcos", "noconf"})
    assert ad.client_distance(pa, [0.5, 0.5], pb, [0.5, 0.5], 0, m) == 0.0
    assert ad.client_distance(pa, [0.5, 0.5], pb, [0.5, 0.5], 1, m) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ad.client_distance(protos_from([[1.0]]), [1.0], pa, [1.0], 0, m)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["ascp", "cscp"]),
       st.sets(st.sampled_from(["noconf", "mean"])))
def test_distance_symmetry(seed, base, abl):
    rng = np.random.default_rng(seed)
    present_a, present_b = rng.random(5) < 0.7, rng.random(5) < 0.7
    pa = protos_from(rng.normal(size=(5, 3)), present_a if present_a.any() else None)
    pb = protos_from(rng.normal(size=(5, 3)), present_b if present_b.any() else None)
    wa, wb = rng.dirichlet(np.ones(2)), rng.dirichlet(np.ones(2))
    m = ad.Metric(base, abl)
    dab = ad.client_distance(pa, wa, pb, wb, 1, m)
    assert dab == ad.client_distance(pb, wb, pa, wa, 1, m)
    assert 0.0 <= dab <= 2.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_cscp_never_exceeds_ascp(seed):
    rng = np.random.default_rng(seed)
    pa, pb = protos_from(rng.normal(size=(4, 3))), protos_from(rng.normal(size=(4, 3)))
    w = [0.9, 0.1]
    assert ad.client_distance(pa, w, pb, w, 0, ad.Metric("cscp")) <= ad.client_distance(pa, w, pb, w, 0, ad.Metric("ascp"))


def off_diag_matrix(vals):
    D = np.zeros((3, 3))
    (D[0, 1], D[0, 2], D[1, 2]) = vals
    return D + D.T


def test_split_condition_examples():
    assert not ad.split_condition(np.full((3, 3), 0.4) - 0.4 * np.eye(3), 0.01)
    D = off_diag_matrix((0.9, 0.1, 0.1))
    assert ad.split_gap(D) == pytest.approx(0.9 - 1.1 / 3)
    assert ad.split_condition(D, 0.3)
    assert ad.split_condition(off_diag_matrix((0.2, 0.1, 0.1)), 0.0)
    assert not ad.split_condition(np.zeros((1, 1)), 0.0)


def test_bipartition_examples():
    assert ad.bipartition(np.array([[0, 0.5], [0.5, 0]]), [7, 9]) == ([7], [9])
    D = off_diag_matrix((0.1, 0.9, 0.8))
    assert ad.bipartition(D, [1, 2, 3]) == ([1, 2], [3])
    equal = off_diag_matrix((0.5, 0.5, 0.5))
    assert ad.bipartition(equal, [4, 5, 6]) == ([4, 6], [5])
    assert ad.bipartition(equal, [4, 5, 6]) == ad.bipartition(equal.copy(), [4, 5, 6])


def make_state(rows, K_model=None):
    rows = np.asarray(rows, dtype=float)
    K = rows.shape[1]
    weights = [WeightState(rows.copy(), rows.mean(axis=0), rows.copy(), rows.copy(), 0.5)]
    heads = [ClusterHead(np.full((2, 3), float(k)), np.full(3, float(k))) for k in range(K_model or K)]
    model = ClusterModel(identity_phi(), heads)
    return ad.ClusterState(model, weights, [np.arange(3 * K, dtype=float).reshape(K, 3)])


def test_split_halves_parent_weight():
    state = make_state([[0.6, 0.4], [0.0, 1.0]])
    out = ad.apply_split(state, 1, [0], [1])
    assert np.array_equal(out.weights[0].omega, [[0.6, 0.2, 0.2], [0.0, 0.5, 0.5]])
    out0 = ad.apply_split(state, 0, [0], [1])
    assert np.array_equal(out0.weights[0].omega[0], [0.3, 0.4, 0.3])
    assert np.array_equal(out0.weights[0].omega[1], [0.0, 1.0, 0.0])
    out0.weights[0].check_simplex()
    assert np.array_equal(out.f_latest[0][2], state.f_latest[0][1])
    assert out.num_clusters == 3


def test_split_heads_from_local_heads_or_parent():
    state = make_state([[0.5, 0.5]])
    local = {0: [ClusterHead(np.full((2, 3), 4.0), np.zeros(3)), None],
             1: [ClusterHead(np.full((2, 3), 8.0), np.zeros(3)), None]}
    out = ad.apply_split(state, 0, [0, 1], [2], local, {0: 1, 1: 3})
    assert np.allclose(out.model.heads[0].weight, 7.0)
    assert np.array_equal(out.model.heads[2].weight, state.model.heads[0].weight)
    with pytest.raises(ValueError):
        ad.apply_split(state, 0, [], [1])


def test_removal_renormalises():
    state = make_state([[0.5, 0.3, 0.2], [0.2, 0.8, 0.0]])
    out = ad.remove_clusters(state, [2])
    assert np.allclose(out.weights[0].omega, [[0.625, 0.375], [0.2, 0.8]], atol=1e-15)
    assert np.array_equal(out.weights[0].omega[1], [0.2, 0.8])
    assert out.f_latest[0].shape == (2, 3)


def test_removal_by_votes():
    rows = np.array([[0.7, 0.2, 0.1]])
    state = make_state(rows)
    state.weights = [WeightState(rows.copy(), rows[0].copy(), rows.copy(), rows.copy(), 0.5) for _ in range(4)]
    state.f_latest = state.f_latest * 4
    out, removed = ad.detect_and_remove_empty(state)
    assert removed == [1, 2]
    assert out.num_clusters == 1
    assert np.allclose(out.weights[0].omega, 1.0)


def test_removal_of_dead_rows_falls_back_to_client_weight():
    state = make_state([[0.0, 0.0, 1.0], [0.5, 0.5, 0.0]])
    out = ad.remove_clusters(state, [2])
    out.weights[0].check_simplex()
    assert np.allclose(out.weights[0].omega[0], out.weights[0].omega_tilde)
    with pytest.raises(ValueError):
        ad.remove_clusters(state, [0, 1, 2])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5), st.data())
def test_split_and_remove_keep_simplex(seed, K, data):
    rng = np.random.default_rng(seed)
    state = make_state(rng.dirichlet(np.ones(K), 6))
    k = data.draw(st.integers(0, K - 1))
    state = ad.apply_split(state, k, [0], [1])
    state.weights[0].check_simplex()
    drop = data.draw(st.sets(st.integers(0, K), min_size=1, max_size=K))
    state = ad.remove_clusters(state, drop)
    state.weights[0].check_simplex()
    assert state.num_clusters == K + 1 - len(drop)


def test_plan_split_is_deterministic_and_picks_farthest_cluster():
    rng = np.random.default_rng(3)
    prototypes = {i: protos_from(rng.normal(size=(3, 2))) for i in range(6)}
    omega_t = [np.array([0.9, 0.1])] * 3 + [np.array([0.2, 0.8])] * 3
    r1 = ad.plan_split(prototypes, omega_t, 2, ad.Metric("cscp"), 0.0)
    r2 = ad.plan_split(prototypes, omega_t, 2, ad.Metric("cscp"), 0.0)
    assert r1.split == r2.split
    assert r1.members == {0: [0, 1, 2], 1: [3, 4, 5]}
    best = max(range(2), key=lambda k: (r1.matrices[k].max(), -k))
    assert r1.split[0] == best
    assert ad.plan_split(prototypes, omega_t, 2, ad.Metric("cscp"), np.inf).split is None
