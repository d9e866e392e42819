import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moe_lens.model import ActivationTap
from moe_lens.profiler import (FrequencyMatrix, ProfileConfig, default_top_k,
                               merge, profile_corpus, score_experts,
                               select_top_k, zscore_per_layer)
from moe_lens.split import ExpertPartition


def make_partition(n_layers, d_ff, n_experts, pattern=None):
    vec = pattern if pattern is not None else np.arange(d_ff) % n_experts
    return ExpertPartition(n_layers=n_layers, d_ff=d_ff, n_experts=n_experts,
                          assignment=[np.array(vec)] * n_layers, seed=0)


class TestScoreExperts:
    def test_direct_sum(self):
        part = make_partition(1, 4, 2, pattern=[0, 0, 1, 1])
        scores = score_experts(np.array([[1.0, 2.0, 3.0, 4.0]]), part)
        assert np.allclose(scores, [[3.0, 7.0]])

    def test_all_zero(self):
        part = make_partition(2, 4, 2)
        scores = score_experts(np.zeros((2, 4)), part)
        assert np.all(scores == 0)

    def test_partition_of_unity(self, rng):
        part = make_partition(3, 16, 4)
        taps = rng.normal(size=(3, 16))
        scores = score_experts(taps, part)
        assert np.allclose(scores.sum(axis=1), taps.sum(axis=1), atol=1e-6)

    def test_missing_layer_tap(self):
        part = make_partition(2, 4, 2)
        taps = [ActivationTap(layer=0, token_position=0, values=np.zeros(4))]
        with pytest.raises(ValueError, match="missing tap"):
            score_experts(taps, part)

    def test_tap_objects_accepted(self, rng):
        part = make_partition(2, 4, 2)
        mat = rng.normal(size=(2, 4))
        taps = [ActivationTap(layer=li, token_position=0, values=mat[li])
                for li in range(2)]
        assert np.allclose(score_experts(taps, part),
                           score_experts(mat.astype(np.float32), part))


class TestZscore:
    def test_known_row(self):
        z = zscore_per_layer(np.array([[1.0, 2.0, 3.0]]))
        assert np.allclose(z, [[-1.224745, 0.0, 1.224745]], atol=1e-6)

    def test_constant_row_maps_to_zero(self):
        z = zscore_per_layer(np.array([[5.0, 5.0, 5.0, 5.0]]))
        assert np.all(z == 0)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=12))
    def test_mean_zero_std_one(self, row):
        z = zscore_per_layer(np.array([row]))
        if np.std(row) > 1e-9:
            assert abs(z.mean()) < 1e-6
            assert abs(z.std() - 1.0) < 1e-6


class TestSelectTopK:
    def test_all_pairs(self):
        z = np.arange(6.0).reshape(2, 3)
        assert select_top_k(z, 6) == {(l, e) for l in range(2) for e in range(3)}

    def test_tie_breaking(self):
        z = np.array([[3.0, 1.0, 2.0], [2.0, 2.0, 0.0]])
        assert select_top_k(z, 3) == {(0, 0), (0, 2), (1, 0)}

    def test_unique_max(self):
        z = np.array([[0.0, 9.0], [1.0, 2.0]])
        assert select_top_k(z, 1) == {(0, 1)}

    def test_k_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            select_top_k(np.zeros((2, 2)), 5)

    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0),
           st.floats(-50.0, 50.0))
    @settings(max_examples=25, deadline=None)
    def test_affine_invariance_within_layer(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(3, 5))
        transformed = raw.copy()
        transformed[1] = raw[1] * scale + shift
        k = 4
        a = select_top_k(zscore_per_layer(raw), k)
        b = select_top_k(zscore_per_layer(transformed), k)
        assert a == b


class TestProfileCorpus:
    def cfg(self, top_k=2, **kw):
        return ProfileConfig(top_k=top_k, language_tag="a", **kw)

    def test_count_conservation(self, tiny_model, tiny_partition):
        corpus = ["abc def", "ghij", "kl"]
        fm = profile_corpus(tiny_model, tiny_partition, corpus,
                            self.cfg(max_tokens_per_sample=6))
        assert fm.counts.sum() == fm.top_k * fm.total_tokens
        assert np.all(fm.frequencies >= 0) and np.all(fm.frequencies <= 1)

    def test_truncation(self, tiny_model, tiny_partition):
        fm = profile_corpus(tiny_model, tiny_partition, ["abcdefghij"],
                            self.cfg(max_tokens_per_sample=4))
        assert fm.total_tokens == 4

    def test_shard_merge_equals_single_pass(self, tiny_model, tiny_partition):
        corpus = ["abc", "defg", "hi", "jklm"]
        single = profile_corpus(tiny_model, tiny_partition, corpus, self.cfg())
        parts = [profile_corpus(tiny_model, tiny_partition, [s], self.cfg())
                 for s in corpus]
        combined = parts[0]
        for p in parts[1:]:
            combined = merge(combined, p)
        assert np.array_equal(single.counts, combined.counts)
        assert single.total_tokens == combined.total_tokens

    def test_empty_corpus(self, tiny_model, tiny_partition):
        with pytest.raises(ValueError, match="empty corpus"):
            profile_corpus(tiny_model, tiny_partition, [], self.cfg())

    def test_frequency_fraction(self, tiny_model, tiny_partition):
        fm = profile_corpus(tiny_model, tiny_partition, ["abcdefghi"],
                            self.cfg(top_k=1, max_tokens_per_sample=10))
        # exactly one expert selected per token: frequencies sum to 1
        assert np.isclose(fm.frequencies.sum(), 1.0)


class TestMerge:
    def base(self, counts, tokens):
        return FrequencyMatrix(n_layers=2, n_experts=2,
                               counts=np.array(counts), total_tokens=tokens,
                               top_k=2, language_tag="a", model_id="m")

    def test_identity(self):
        m = self.base([[1, 2], [3, 4]], 5)
        zero = self.base([[0, 0], [0, 0]], 0)
        merged = merge(m, zero)
        assert np.array_equal(merged.counts, m.counts)
        assert merged.total_tokens == m.total_tokens

    def test_commutative(self):
        a = self.base([[1, 0], [2, 1]], 2)
        b = self.base([[0, 3], [1, 0]], 2)
        x, y = merge(a, b), merge(b, a)
        assert np.array_equal(x.counts, y.counts)
        assert x.total_tokens == y.total_tokens

    def test_metadata_mismatch(self):
        a = self.base([[1, 0], [2, 1]], 2)
        b = FrequencyMatrix(n_layers=2, n_experts=2, counts=np.zeros((2, 2), int),
                            total_tokens=0, top_k=2, language_tag="b", model_id="m")
        with pytest.raises(ValueError, match="cannot merge"):
            merge(a, b)


class TestFreqFile:
    def test_roundtrip(self, tmp_path):
        fm = FrequencyMatrix(n_layers=2, n_experts=3,
                             counts=np.array([[1, 2, 3], [4, 5, 6]]),
                             total_tokens=9, top_k=2, language_tag="en",
                             model_id="toy-1")
        path = tmp_path / "x.freq"
        fm.save(path)
        loaded = FrequencyMatrix.load(path)
        assert np.array_equal(loaded.counts, fm.counts)
        assert (loaded.total_tokens, loaded.top_k) == (9, 2)
        assert (loaded.language_tag, loaded.model_id) == ("en", "toy-1")
        header = path.read_text().splitlines()[0]
        assert header == "MOEFREQ v1 layers=2 experts=3 tokens=9 topk=2 lang=en model=toy-1"

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.freq"
        path.write_text("WRONG v1\n")
        with pytest.raises(ValueError, match="MOEFREQ"):
            FrequencyMatrix.load(path)


def test_default_top_k_is_ten_percent():
    assert default_top_k(32, 256) == 819
    assert default_top_k(2, 4) == 1
