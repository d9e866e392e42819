"""Acceptance suite: ten end-to-end criteria, one test each.

Each test prints a single "criterion N: PASS" line (visible with -s or on
failure) and asserts the stated tolerances. Criterion 6 trains the toy
model once (about a minute); everything else runs in seconds.
"""

import math
import os
import shutil
import subprocess
import sys
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from moe_lens.analysis import (diff_matrix, euclidean_distance, kl_rowwise,
                               pearson_rowwise, shared_expert_map)
from moe_lens.corpus import generate_bilingual_corpus
from moe_lens.evaluate import perplexity
from moe_lens.model import (ModelConfig, forward, forward_compacted,
                            forward_masked, random_model)
from moe_lens.profiler import (FrequencyMatrix, ProfileConfig, merge,
                               profile_corpus)
from moe_lens.pruning import (PruneMask, estimate_flops, full_mask,
                              mask_by_threshold, mask_random_like)
from moe_lens.render import HeatmapSpec, diverging_color, render_heatmap
from moe_lens.split import ClusterConfig, split_model
from moe_lens.training import TrainConfig, train_toy_model

TOY_CONFIG = ModelConfig(n_layers=4, d_model=64, d_ff=256, n_heads=4,
                         vocab_size=320, max_seq_len=256)


@pytest.fixture(scope="module")
def toy_model():
    return random_model(TOY_CONFIG, seed=11)


@pytest.fixture(scope="module")
def toy_partition(toy_model):
    return split_model(toy_model, ClusterConfig(n_experts=16, seed=2))


def test_criterion_1_dense_split_equivalence(toy_model, toy_partition):
    """Full mask is bitwise-identical to the dense pass; compaction agrees
    to 1e-5. Under 5 seconds."""
    start = time.monotonic()
    rng = np.random.default_rng(0)
    tokens = [int(t) for t in rng.integers(0, 320, size=48)]
    dense = forward(toy_model, tokens)
    masked = forward_masked(toy_model, tokens, toy_partition, full_mask(4, 16))
    assert np.array_equal(dense, masked)

    keep = rng.random((4, 16)) > 0.3
    mask = PruneMask(keep=keep, provenance={"kind": "threshold", "tau": 0.0})
    zeroed = forward_masked(toy_model, tokens, toy_partition, mask)
    compact = forward_compacted(toy_model, tokens, toy_partition, mask)
    max_abs = float(np.max(np.abs(zeroed - compact)))
    assert max_abs <= 1e-5
    elapsed = time.monotonic() - start
    assert elapsed < 5.0
    print(f"criterion 1: PASS (bitwise identity; compaction max-abs "
          f"{max_abs:.2e}; {elapsed:.2f}s)")


def test_criterion_2_balance_and_determinism(toy_model):
    a = split_model(toy_model, ClusterConfig(n_experts=16, seed=9))
    b = split_model(toy_model, ClusterConfig(n_experts=16, seed=9))
    per_expert = TOY_CONFIG.d_ff // 16
    for vec in a.assignment:
        counts = np.bincount(vec, minlength=16)
        assert all(c == per_expert for c in counts)
    assert a == b
    print(f"criterion 2: PASS (every expert holds {per_expert} neurons; "
          f"equal seeds give identical partitions)")


def test_criterion_3_selection_accounting(toy_model, toy_partition):
    corpus = generate_bilingual_corpus(3, n_samples=20)["a"]
    cfg = ProfileConfig(top_k=6, max_tokens_per_sample=100, language_tag="a")
    single = profile_corpus(toy_model, toy_partition, corpus, cfg)
    assert single.counts.sum() == single.top_k * single.total_tokens
    assert np.all(single.frequencies >= 0) and np.all(single.frequencies <= 1)

    shards = [corpus[:7], corpus[7:13], corpus[13:]]
    combined = None
    for shard in shards:
        fm = profile_corpus(toy_model, toy_partition, shard, cfg)
        combined = fm if combined is None else merge(combined, fm)
    assert np.array_equal(single.counts, combined.counts)
    assert single.total_tokens == combined.total_tokens
    print(f"criterion 3: PASS (sum counts = {single.counts.sum()} = "
          f"{single.top_k} x {single.total_tokens}; shard merge exact)")


def test_criterion_4_metric_oracles():
    def freq(counts, tokens, tag):
        return FrequencyMatrix(n_layers=5, n_experts=8, counts=counts,
                               total_tokens=tokens, top_k=1,
                               language_tag=tag, model_id="m")

    eps = 1e-10
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        tokens = int(rng.integers(10, 200))
        a = freq(rng.integers(0, tokens, size=(5, 8)), tokens, "a")
        b = freq(rng.integers(0, tokens, size=(5, 8)), tokens, "b")
        fa, fb = a.frequencies, b.frequencies

        euc = math.sqrt(sum((fa[i][j] - fb[i][j]) ** 2
                            for i in range(5) for j in range(8)))
        kl = 0.0
        for i in range(5):
            p = [v + eps for v in fa[i]]
            q = [v + eps for v in fb[i]]
            p = [v / sum(p) for v in p]
            q = [v / sum(q) for v in q]
            kl += sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
        pear_rows = []
        for i in range(5):
            ma, mb = sum(fa[i]) / 8, sum(fb[i]) / 8
            cov = sum((x - ma) * (y - mb) for x, y in zip(fa[i], fb[i]))
            va = math.sqrt(sum((x - ma) ** 2 for x in fa[i]))
            vb = math.sqrt(sum((y - mb) ** 2 for y in fb[i]))
            pear_rows.append(0.0 if va == 0 or vb == 0 else cov / (va * vb))
        pear = sum(pear_rows) / 5

        worst = max(worst,
                    abs(euclidean_distance(a, b) - euc),
                    abs(kl_rowwise(a, b) - kl),
                    abs(pearson_rowwise(a, b) - pear))
        assert worst < 1e-9
        assert euclidean_distance(a, a) == 0.0
        assert kl_rowwise(a, a) == 0.0
        assert abs(pearson_rowwise(a, a) - 1.0) < 1e-12
        assert kl_rowwise(a, b) >= 0.0
    print(f"criterion 4: PASS (100 random pairs; worst oracle gap {worst:.2e})")


def test_criterion_5_flops_anchors():
    start = time.monotonic()
    cfg_7b = ModelConfig(n_layers=32, d_model=4096, d_ff=11008, n_heads=32,
                         vocab_size=32000, max_seq_len=4096)
    keep = np.ones((32, 4), bool)
    keep[:, 3] = False  # uniform 25% FFN cut
    mask = PruneMask(keep=keep, provenance={"kind": "top_percent", "percent": 75})
    red_7b = estimate_flops(cfg_7b, mask).total_flops_reduction * 100
    assert abs(red_7b - 18.0) <= 3.0

    cfg_70b = ModelConfig(n_layers=80, d_model=8192, d_ff=28672, n_heads=64,
                          vocab_size=128256, max_seq_len=4096)
    keep = np.ones((80, 100), bool)
    keep[:, :13] = False  # 13% FFN cut
    mask = PruneMask(keep=keep, provenance={"kind": "top_percent", "percent": 87})
    red_70b = estimate_flops(cfg_70b, mask).total_flops_reduction * 100
    assert abs(red_70b - 9.0) <= 3.0
    elapsed = time.monotonic() - start
    assert elapsed < 1.0
    print(f"criterion 5: PASS (7B dims: {red_7b:.1f}% vs 18+-3; "
          f"70B dims: {red_70b:.1f}% vs 9+-3; {elapsed:.3f}s)")


def test_criterion_6_pruning_beats_random():
    """Frequency-threshold masks beat seed-matched random masks on held-out
    perplexity in >= 9 of 10 repetitions per language."""
    start = time.monotonic()
    texts = generate_bilingual_corpus(0, n_samples=300)
    mixed = [t for pair in zip(texts["a"], texts["b"]) for t in pair]
    model = train_toy_model(TOY_CONFIG, mixed,
                            TrainConfig(steps=800, batch_size=32, seed=0),
                            model_id="toy-trained")
    n_params = sum(t.size for t in model.tensors().values())
    assert n_params <= 5_000_000
    partition = split_model(model, ClusterConfig(n_experts=16, seed=0))
    profiles = {
        lang: profile_corpus(model, partition, texts[lang][:150],
                             ProfileConfig(top_k=6, language_tag=lang))
        for lang in "ab"}

    wins = {"a": 0, "b": 0}
    for rep in range(10):
        held_out = generate_bilingual_corpus(0, n_samples=30,
                                             sample_seed=100 + rep)
        for lang in "ab":
            freq = profiles[lang]
            tau = float(np.quantile(freq.frequencies, 0.3))
            mask = mask_by_threshold(freq, tau)
            assert 0.7 <= mask.kept_proportion <= 0.95
            ppl_freq = perplexity(model, partition, mask,
                                  held_out[lang]).value
            ppl_rand = np.mean([
                perplexity(model, partition,
                           mask_random_like(mask, 10 * rep + s),
                           held_out[lang]).value
                for s in (1, 2, 3)])
            if ppl_freq <= ppl_rand:
                wins[lang] += 1
    elapsed = time.monotonic() - start
    assert elapsed < 600.0
    assert wins["a"] >= 9 and wins["b"] >= 9
    print(f"criterion 6: PASS (wins a={wins['a']}/10 b={wins['b']}/10; "
          f"{n_params} params; {elapsed:.0f}s)")


def test_criterion_7_threshold_semantics():
    fm = FrequencyMatrix(n_layers=2, n_experts=2,
                         counts=np.array([[5, 4], [20, 0]]),
                         total_tokens=100, top_k=1, language_tag="a",
                         model_id="m")
    mask = mask_by_threshold(fm, 0.05)
    assert mask.keep.tolist() == [[True, False], [True, False]]  # 0.05 kept

    rng = np.random.default_rng(5)
    for _ in range(50):
        tokens = int(rng.integers(10, 200))
        fm = FrequencyMatrix(n_layers=4, n_experts=8,
                             counts=rng.integers(0, tokens, size=(4, 8)),
                             total_tokens=tokens, top_k=1,
                             language_tag="a", model_id="m")
        lo, hi = sorted(rng.random(2))
        assert np.all(mask_by_threshold(fm, hi).keep
                      <= mask_by_threshold(fm, lo).keep)
    print("criterion 7: PASS (inclusive boundary; monotone over 50 random "
          "matrices)")


def test_criterion_8_shared_and_diff_bounds():
    rng = np.random.default_rng(6)

    def freq(tag, model="m"):
        return FrequencyMatrix(n_layers=4, n_experts=8,
                               counts=rng.integers(0, 100, size=(4, 8)),
                               total_tokens=100, top_k=2,
                               language_tag=tag, model_id=model)

    mats = [freq(t) for t in ("a", "b", "c")]
    shared = shared_expert_map(mats, 0.05)
    assert np.all(shared.counts >= 0) and np.all(shared.counts <= 3)
    for lo, hi in ((0.0, 0.1), (0.1, 0.3), (0.3, 0.9)):
        assert np.all(shared_expert_map(mats, hi).counts
                      <= shared_expert_map(mats, lo).counts)

    base = freq("a")
    tuned = freq("a", model="m2")
    assert np.all(diff_matrix(base, base).values == 0)
    assert np.array_equal(diff_matrix(base, tuned).values,
                          -diff_matrix(tuned, base).values)
    print("criterion 8: PASS (shared counts in [0, 3], tau-monotone; diff "
          "zero/antisymmetric)")


def test_criterion_9_render_validity(tmp_path):
    rng = np.random.default_rng(8)
    grid = rng.random((32, 256))
    path = tmp_path / "big.svg"
    render_heatmap(HeatmapSpec(grid=grid), path)
    root = ET.parse(path).getroot()
    cells = [el for el in root.iter("{http://www.w3.org/2000/svg}rect")
             if el.get("class") == "cell"]
    assert len(cells) == 32 * 256

    assert diverging_color(0.0, 1.0) == "#ffffff"
    div_path = tmp_path / "div.svg"
    render_heatmap(HeatmapSpec(grid=np.array([[-1.0, 0.0, 1.0]]),
                               scale="diverging"), div_path)
    fills = [el.get("fill")
             for el in ET.parse(div_path).getroot().iter(
                 "{http://www.w3.org/2000/svg}rect")
             if el.get("class") == "cell"]
    assert fills[1] == "#ffffff"
    print("criterion 9: PASS (8192 cells; diverging zero is the neutral "
          "color)")


def test_criterion_10_end_to_end_repro(tmp_path):
    """Two repro runs with the same seed into the same path give identical
    digests for every artifact."""
    start = time.monotonic()
    outdir = tmp_path / "repro"

    def run_and_digest():
        if outdir.exists():
            shutil.rmtree(outdir)
        res = subprocess.run(
            [sys.executable, "-m", "moe_lens.cli", "repro",
             "--fixture", "toy-bilingual", "--outdir", str(outdir),
             "--seed", "4"],
            capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        digests = {}
        for root, _, files in os.walk(outdir):
            for name in files:
                full = os.path.join(root, name)
                rel = os.path.relpath(full, outdir)
                with open(full, "rb") as fh:
                    import hashlib
                    digests[rel] = hashlib.sha256(fh.read()).hexdigest()
        return digests

    first = run_and_digest()
    second = run_and_digest()
    # every artifact format defined in External Interfaces is present
    expected = ["model.mltb", "part.json", "a.freq", "report.json",
                "shared.grid", "diff.grid", "a_threshold.mask", "flops.json",
                "ppl_masked.json", "mcq.json", "gen.json", "a.svg",
                "corpus_a.jsonl", "model.mltb.manifest.json"]
    for name in expected:
        assert name in first, f"missing artifact {name}"
    assert first == second
    elapsed = time.monotonic() - start
    assert elapsed < 900.0
    print(f"criterion 10: PASS ({len(first)} files, identical digests "
          f"across runs; {elapsed:.1f}s)")
