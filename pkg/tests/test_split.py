import numpy as np
import pytest

from moe_lens.split import (ClusterConfig, ExpertPartition, split_layer,
                            split_model)


def brute_wcss(rows, assign, k):
    """Independent scorer: per-cluster sum of squared distances to the mean."""
    total = 0.0
    for c in range(k):
        members = rows[np.asarray(assign) == c]
        total += float(np.sum((members - members.mean(axis=0)) ** 2))
    return total


class TestSplitLayer:
    def test_separable_clouds(self):
        rng = np.random.default_rng(0)
        cloud_a = rng.normal(0.0, 0.05, size=(4, 3))
        cloud_b = rng.normal(10.0, 0.05, size=(4, 3))
        rows = np.concatenate([cloud_a, cloud_b])
        assign = split_layer(rows, ClusterConfig(n_experts=2, seed=1))
        assert len(set(assign[:4])) == 1
        assert len(set(assign[4:])) == 1
        assert assign[0] != assign[4]
        assert sorted(np.bincount(assign)) == [4, 4]

    def test_degenerate_k_equals_n(self):
        rows = np.random.default_rng(2).normal(size=(6, 4))
        assign = split_layer(rows, ClusterConfig(n_experts=6, seed=0))
        assert sorted(assign) == list(range(6))

    def test_beats_random_assignments(self):
        rng = np.random.default_rng(42)
        rows = rng.normal(size=(64, 16))
        assign = split_layer(rows, ClusterConfig(n_experts=4, seed=0))
        ours = brute_wcss(rows, assign, 4)
        best_random = min(
            brute_wcss(rows, rng.permutation(np.repeat(np.arange(4), 16)), 4)
            for _ in range(100))
        assert ours <= best_random

    def test_balance_exact(self):
        rows = np.random.default_rng(3).normal(size=(32, 5))
        assign = split_layer(rows, ClusterConfig(n_experts=8, seed=0))
        assert all(c == 4 for c in np.bincount(assign, minlength=8))

    def test_not_divisible(self):
        rows = np.zeros((10, 4))
        with pytest.raises(ValueError, match="divisible"):
            split_layer(rows, ClusterConfig(n_experts=3, seed=0))

    def test_nonfinite_rejected(self):
        rows = np.zeros((8, 4))
        rows[0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            split_layer(rows, ClusterConfig(n_experts=2, seed=0))

    def test_objective_monotone(self):
        rows = np.random.default_rng(11).normal(size=(48, 8))
        history = []
        split_layer(rows, ClusterConfig(n_experts=6, seed=2), objective_history=history)
        assert history == sorted(history, reverse=True)

    def test_random_init_also_balanced(self):
        rows = np.random.default_rng(4).normal(size=(24, 6))
        assign = split_layer(rows, ClusterConfig(n_experts=4, seed=0, init="random"))
        assert all(c == 6 for c in np.bincount(assign, minlength=4))


class TestSplitModel:
    def test_two_layer_partition(self, tiny_model):
        partition = split_model(tiny_model, ClusterConfig(n_experts=4, seed=0))
        assert partition.n_layers == 2
        for vec in partition.assignment:
            assert all(c == 8 for c in np.bincount(vec, minlength=4))

    def test_determinism(self, tiny_model):
        a = split_model(tiny_model, ClusterConfig(n_experts=4, seed=5))
        b = split_model(tiny_model, ClusterConfig(n_experts=4, seed=5))
        assert a == b

    def test_identical_layers_same_assignment(self, tiny_model):
        import copy
        model = copy.deepcopy(tiny_model)
        model.layers[1].up_proj = model.layers[0].up_proj.copy()
        partition = split_model(model, ClusterConfig(n_experts=4, seed=1))
        assert np.array_equal(partition.assignment[0], partition.assignment[1])

    def test_serialization_roundtrip(self, tiny_partition, tmp_path):
        path = tmp_path / "part.json"
        tiny_partition.save(path)
        assert ExpertPartition.load(path) == tiny_partition

    def test_unbalanced_rejected(self):
        with pytest.raises(ValueError, match="balanced"):
            ExpertPartition(n_layers=1, d_ff=4, n_experts=2,
                            assignment=[np.array([0, 0, 0, 1])], seed=0)
