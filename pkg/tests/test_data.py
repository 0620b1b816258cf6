import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from propdistill.data import (
    SplitSpec,
    edge_homophily,
    gen_chains,
    gen_homophily_regular,
    load_dataset,
    make_production_split,
    make_split,
)
from propdistill.graph import build_graph, save_bundle


def balanced_graph(k=2, per_class=100, edges=()):
    n = k * per_class
    return build_graph(n, list(edges), np.zeros((n, 1)), np.repeat(np.arange(k), per_class), k)


def hop_distance_to_base(n_per_chain, node):
    return node % n_per_chain


def test_make_split_counts():
    s = make_split(balanced_graph(), seed=0)
    assert (s.train_idx.size, s.val_idx.size, s.test_idx.size) == (40, 60, 100)


def test_make_split_per_class_and_disjoint():
    g = balanced_graph(k=3, per_class=60)
    s = make_split(g, seed=4)
    for c in range(3):
        assert np.sum(g.labels[s.train_idx] == c) == 20
        assert np.sum(g.labels[s.val_idx] == c) == 30
    allidx = np.concatenate([s.train_idx, s.val_idx, s.test_idx])
    assert np.unique(allidx).size == allidx.size == g.num_nodes


def test_make_split_reproducible():
    g = balanced_graph()
    assert make_split(g, seed=3) == make_split(g, seed=3)
    assert make_split(g, seed=3) != make_split(g, seed=4)


def test_make_split_small_class():
    g = build_graph(60, [], np.zeros((60, 1)), [0] * 50 + [1] * 10, 2)
    with pytest.raises(ValueError):
        make_split(g)


def test_split_overlap_rejected():
    with pytest.raises(ValueError):
        SplitSpec([0, 1], [1, 2], [3])


def test_split_json_roundtrip(tmp_path):
    s = SplitSpec([0], [1], [2, 3, 4], [2, 3], [4], extra={"far_idx": [3]})
    s.save(tmp_path / "s.json")
    back = SplitSpec.load(tmp_path / "s.json")
    assert back == s
    np.testing.assert_array_equal(back.extra["far_idx"], [3])


def test_production_split_sizes_and_partition():
    rng = np.random.default_rng(0)
    g0 = balanced_graph()
    edges = [tuple(e) for e in rng.integers(0, 200, size=(600, 2))]
    g = build_graph(200, edges, np.zeros((200, 1)), g0.labels, 2)
    s = make_split(g, seed=1)
    g2, ps = make_production_split(g, s, 0.2, seed=1)
    assert ps.ind_idx.size == 20
    assert set(ps.obs_idx.tolist()) | set(ps.ind_idx.tolist()) == set(s.test_idx.tolist())
    ind = set(ps.ind_idx.tolist())
    for u, v in g2.edges.tolist():
        assert (u in ind) == (v in ind)
    assert ps.production and not s.production


def test_production_split_without_cross_edges_keeps_graph():
    g = balanced_graph(edges=[(0, 1)])
    s = make_split(g, seed=0)
    s = SplitSpec(np.setdiff1d(s.train_idx, [0, 1]), s.val_idx, np.union1d(s.test_idx, [0, 1]))
    g2, ps = make_production_split(g, s, 0.2, seed=0)
    if {0, 1} <= set(ps.ind_idx.tolist()) or {0, 1} <= set(ps.obs_idx.tolist()):
        np.testing.assert_array_equal(g2.edges, g.edges)
    for u, v in g2.edges.tolist():
        assert (u in ps.ind_idx) == (v in ps.ind_idx)


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1e-6])
def test_production_split_bad_fraction(frac):
    g = balanced_graph()
    with pytest.raises(ValueError):
        make_production_split(g, make_split(g), frac)


def test_load_dataset(tmp_path):
    g = balanced_graph(edges=[(0, 1), (1, 2)])
    save_bundle(g, tmp_path)
    assert load_dataset(tmp_path).num_edges == 2


def test_chains_minimal():
    g, s = gen_chains(1, 3, 1)
    assert (g.num_nodes, g.num_edges) == (3, 2)
    np.testing.assert_array_equal(g.features[0], [1.0])
    np.testing.assert_array_equal(g.features[1:], 0.0)


def test_chains_default_shape():
    g, s = gen_chains(30, 8, 10, seed=0)
    assert (g.num_nodes, g.num_edges, g.feature_dim) == (240, 210, 10)
    assert s.extra["far_idx"].size == 150
    for chain in range(30):
        far = [v for v in s.extra["far_idx"] if v // 8 == chain]
        assert len(far) == 5 and all(hop_distance_to_base(8, v) >= 3 for v in far)
    assert s.train_idx.size == 30 and s.val_idx.size == 30


def test_chains_labels_and_features():
    g, s = gen_chains(30, 8, 10, seed=2)
    for chain in range(30):
        nodes = np.arange(chain * 8, chain * 8 + 8)
        assert np.unique(g.labels[nodes]).size == 1
        base = nodes[0]
        onehot = np.zeros(10)
        onehot[g.labels[base]] = 1.0
        np.testing.assert_array_equal(g.features[base], onehot)
        np.testing.assert_array_equal(g.features[nodes[1:]], 0.0)
    assert np.all(np.bincount(g.labels, minlength=10) == 24)


def test_chains_noise_keeps_base_exact():
    g, _ = gen_chains(30, 8, 10, seed=0, noise=0.1)
    base = np.arange(0, 240, 8)
    np.testing.assert_array_equal(g.features[base].sum(1), 1.0)
    rest = np.setdiff1d(np.arange(240), base)
    assert np.abs(g.features[rest]).max() <= 0.1
    assert np.abs(g.features[rest]).max() > 0


def test_chains_divisibility():
    with pytest.raises(ValueError):
        gen_chains(7, 8, 10)


def check_regular(g, d, h):
    deg = np.bincount(g.edges.ravel(), minlength=g.num_nodes)
    assert np.all(deg == d)
    same = np.zeros(g.num_nodes, int)
    for u, v in g.edges.tolist():
        if g.labels[u] == g.labels[v]:
            same[u] += 1
            same[v] += 1
    assert np.all(same == round(h * d))
    assert len({tuple(e) for e in g.edges.tolist()}) == g.num_edges
    assert np.all(g.edges[:, 0] != g.edges[:, 1])


def test_homophily_pure_blocks():
    g = gen_homophily_regular(60, 4, 1.0, 3, seed=0)
    check_regular(g, 4, 1.0)
    assert all(g.labels[u] == g.labels[v] for u, v in g.edges.tolist())


def test_homophily_exact_edge_homophily():
    g = gen_homophily_regular(1000, 10, 0.8, 5, seed=1)
    check_regular(g, 10, 0.8)
    assert edge_homophily(g) == pytest.approx(0.8, abs=1e-15)


def test_homophily_cross_edges_spread_evenly():
    # d - round(hd) = 4 is divisible by |Y| - 1 = 4: one edge to each other class per node
    g = gen_homophily_regular(500, 10, 0.6, 5, seed=2)
    counts = np.zeros((g.num_nodes, 5), int)
    for u, v in g.edges.tolist():
        counts[u, g.labels[v]] += 1
        counts[v, g.labels[u]] += 1
    for node in range(g.num_nodes):
        other = np.delete(counts[node], g.labels[node])
        assert np.all(other == 1)


@settings(max_examples=12, deadline=None)
@given(
    st.sampled_from([2, 3, 4]),
    st.sampled_from([4, 6, 8]),
    st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]),
    st.integers(0, 1000),
)
def test_homophily_invariants_property(k, d, h, seed):
    g = gen_homophily_regular(k * 40, d, h, k, seed=seed)
    check_regular(g, d, h)


def test_homophily_infeasible():
    with pytest.raises(ValueError):
        gen_homophily_regular(10, 12, 0.5, 2)
    with pytest.raises(ValueError):
        gen_homophily_regular(101, 4, 0.5, 2)


def test_homophily_features():
    g = gen_homophily_regular(200, 6, 0.5, 4, seed=0, feature_dim=16, signal=2.0)
    assert g.features.shape == (200, 16)
    means = np.stack([g.features[g.labels == c].mean(0) for c in range(4)])
    assert np.linalg.norm(means[0] - means[1]) > 1.0


def test_homophily_reproducible():
    a = gen_homophily_regular(200, 6, 0.5, 4, seed=3)
    b = gen_homophily_regular(200, 6, 0.5, 4, seed=3)
    np.testing.assert_array_equal(a.edges, b.edges)
