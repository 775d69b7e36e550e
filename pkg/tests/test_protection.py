import numpy as np
import pytest

from qgnn.errors import ConfigError
from qgnn.graphs import Graph, gen_synthetic, make_batch
from qgnn.protection import build_prob_mask, build_prob_mask_batch, sample_mask


def graph_with_degrees(degrees):
    """Build a graph whose in-degree vector equals `degrees`."""
    n = len(degrees)
    srcs, dsts = [], []
    hub = 0
    for node, d in enumerate(degrees):
        for k in range(d):
            srcs.append((node + 1 + k) % n)
            dsts.append(node)
    g = Graph(n, np.array([srcs, dsts], dtype=np.int64).reshape(2, -1),
              np.zeros((n, 1), dtype=np.float32), np.zeros(n, dtype=np.int64))
    np.testing.assert_array_equal(g.in_degree, degrees)
    return g


class TestProbMask:
    def test_hand_example(self):
        g = graph_with_degrees([0, 1, 1, 2])
        p = build_prob_mask(g, 0.0, 0.2)
        np.testing.assert_allclose(p, [0.05, 0.15, 0.15, 0.20], atol=1e-7)

    def test_degenerate_range(self):
        g = graph_with_degrees([0, 1, 1, 2])
        np.testing.assert_allclose(build_prob_mask(g, 0.1, 0.1), 0.1, atol=1e-7)

    def test_regular_graph_all_pmax(self):
        # every node has the same in-degree -> single bin -> everyone at p_max
        g = graph_with_degrees([2, 2, 2, 2, 2])
        np.testing.assert_allclose(build_prob_mask(g, 0.0, 0.2), 0.2, atol=1e-7)

    def test_monotone_in_degree(self):
        g = gen_synthetic("preferential_attachment", 200, 2, seed=3)
        p = build_prob_mask(g, 0.0, 0.3)
        order = np.argsort(g.in_degree)
        assert (np.diff(p[order]) >= -1e-7).all()

    def test_max_degree_class_hits_pmax(self):
        g = gen_synthetic("preferential_attachment", 300, 2, seed=5)
        p = build_prob_mask(g, 0.05, 0.25)
        top = g.in_degree == g.in_degree.max()
        np.testing.assert_allclose(p[top], 0.25, atol=1e-6)

    def test_equal_degrees_equal_probability(self):
        g = gen_synthetic("erdos_renyi", 100, 0.05, seed=1)
        p = build_prob_mask(g, 0.0, 0.2)
        for d in np.unique(g.in_degree):
            vals = p[g.in_degree == d]
            assert np.ptp(vals) == 0.0

    def test_invalid_range(self):
        g = graph_with_degrees([1, 1])
        with pytest.raises(ConfigError):
            build_prob_mask(g, 0.3, 0.1)

    def test_per_graph_in_batch(self):
        a = gen_synthetic("star", 10, None, seed=0)
        b = gen_synthetic("erdos_renyi", 20, 0.2, seed=1)
        batch = make_batch([a, b])
        p = build_prob_mask_batch(batch, 0.0, 0.2)
        np.testing.assert_allclose(p[:10], build_prob_mask(a, 0.0, 0.2))
        np.testing.assert_allclose(p[10:], build_prob_mask(b, 0.0, 0.2))


class TestSampling:
    def test_p_zero_all_false(self, rng):
        assert not sample_mask(np.zeros(100, dtype=np.float32), rng).any()

    def test_p_one_all_true(self, rng):
        assert sample_mask(np.ones(100, dtype=np.float32), rng).all()

    def test_binomial_concentration(self):
        rng = np.random.default_rng(77)
        m = sample_mask(np.full(10_000, 0.3, dtype=np.float32), rng)
        assert abs(m.mean() - 0.3) < 0.02

    def test_deterministic_given_seed(self):
        p = np.linspace(0, 1, 50).astype(np.float32)
        a = sample_mask(p, np.random.default_rng(9))
        b = sample_mask(p, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_per_node_frequency_within_3_sigma(self):
        rng = np.random.default_rng(123)
        p = np.array([0.05, 0.2, 0.5, 0.9], dtype=np.float32)
        draws = np.stack([sample_mask(p, rng) for _ in range(10_000)])
        freq = draws.mean(axis=0)
        sigma = np.sqrt(p * (1 - p) / 10_000)
        assert (np.abs(freq - p) <= 3 * sigma).all()
