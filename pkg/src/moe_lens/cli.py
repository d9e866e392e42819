"""moe-lens command-line entry point.

Subcommands: split, profile, analyze {similarity,shared,diff}, prune
{threshold,top,random,flops}, eval {ppl,mcq,gen}, render
{heatmap,diff,shared,similarity}, gen-toy, repro. Every output file gets a
sidecar run manifest; exit codes: 0 ok, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, corpus, evaluate, profiler, pruning, render
from .manifest import write_manifests
from .model import (ModelConfig, ModelFormatError, load_model, perturb_model,
                    random_model, save_model)
from .profiler import FrequencyMatrix, ProfileConfig, default_top_k
from .pruning import PruneMask
from .split import ClusterConfig, ExpertPartition, split_model


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _manifest(args: argparse.Namespace, argv: list[str], inputs: list[str],
              outputs: list[str], seeds: dict | None = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    write_manifests(["moe-lens"] + list(argv), cfg, inputs, outputs, seeds or {})


# ---------------------------------------------------------------------------
# split / profile
# ---------------------------------------------------------------------------

def cmd_split(args, argv):
    model = load_model(args.model)
    cfg = ClusterConfig(n_experts=args.experts, max_iterations=args.max_iters,
                        seed=args.seed, init=args.init)
    partition = split_model(model, cfg)
    partition.save(args.out)
    _manifest(args, argv, [args.model], [args.out], {"cluster_seed": args.seed})


def cmd_profile(args, argv):
    model = load_model(args.model)
    partition = ExpertPartition.load(args.partition)
    top_k = args.topk if args.topk is not None else default_top_k(
        partition.n_layers, partition.n_experts)
    cfg = ProfileConfig(top_k=top_k, max_tokens_per_sample=args.max_tokens,
                        max_samples=args.max_samples, language_tag=args.lang)
    freq = profiler.profile_corpus(model, partition,
                                   corpus.read_corpus(args.corpus), cfg)
    freq.save(args.out)
    _manifest(args, argv, [args.model, args.partition, args.corpus], [args.out])


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze_similarity(args, argv):
    matrices = [FrequencyMatrix.load(p) for p in args.freqs]
    report = analysis.similarity_report(matrices)
    report.save(args.out)
    _manifest(args, argv, list(args.freqs), [args.out])


def cmd_analyze_shared(args, argv):
    matrices = [FrequencyMatrix.load(p) for p in args.freqs]
    shared = analysis.shared_expert_map(matrices, args.tau)
    analysis.save_shared_grid(shared, args.out)
    _manifest(args, argv, list(args.freqs), [args.out])


def cmd_analyze_diff(args, argv):
    base = FrequencyMatrix.load(args.base)
    tuned = FrequencyMatrix.load(args.tuned)
    diff = analysis.diff_matrix(base, tuned)
    analysis.save_diff_grid(diff, args.out)
    _manifest(args, argv, [args.base, args.tuned], [args.out])


# ---------------------------------------------------------------------------
# prune
# ---------------------------------------------------------------------------

def cmd_prune_threshold(args, argv):
    freq = FrequencyMatrix.load(args.freq)
    mask = pruning.mask_by_threshold(freq, args.tau)
    mask.save(args.out)
    _manifest(args, argv, [args.freq], [args.out])


def cmd_prune_top(args, argv):
    freq = FrequencyMatrix.load(args.freq)
    mask = pruning.mask_by_top_percent(freq, args.percent)
    mask.save(args.out)
    _manifest(args, argv, [args.freq], [args.out])


def cmd_prune_random(args, argv):
    reference = PruneMask.load(args.like)
    mask = pruning.mask_random_like(reference, args.seed)
    mask.save(args.out)
    _manifest(args, argv, [args.like], [args.out], {"mask_seed": args.seed})


def cmd_prune_flops(args, argv):
    model = load_model(args.model)
    mask = PruneMask.load(args.mask)
    est = pruning.estimate_flops(model.config, mask, seq_len=args.seq_len)
    doc = {
        "dense_flops_per_token": est.dense_flops_per_token,
        "pruned_flops_per_token": est.pruned_flops_per_token,
        "ffn_param_reduction": est.ffn_param_reduction,
        "total_flops_reduction": est.total_flops_reduction,
    }
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        _manifest(args, argv, [args.model, args.mask], [args.out])
    else:
        json.dump(doc, sys.stdout, indent=2)
        print()


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_eval_common(args):
    model = load_model(args.model)
    partition = ExpertPartition.load(args.partition) if args.partition else None
    mask = PruneMask.load(args.mask) if args.mask else None
    return model, partition, mask


def cmd_eval_ppl(args, argv):
    model, partition, mask = _load_eval_common(args)
    result = evaluate.perplexity(model, partition, mask,
                                 corpus.read_corpus(args.data),
                                 max_tokens=args.max_tokens,
                                 language_tag=args.lang)
    result.save(args.out)
    inputs = [args.model, args.data] + [p for p in (args.partition, args.mask) if p]
    _manifest(args, argv, inputs, [args.out])


def cmd_eval_mcq(args, argv):
    model, partition, mask = _load_eval_common(args)
    items = evaluate.read_mcq_items(args.data)
    result = evaluate.mcq_accuracy(model, partition, mask, items,
                                   normalize=not args.no_length_norm,
                                   language_tag=args.lang)
    result.save(args.out)
    inputs = [args.model, args.data] + [p for p in (args.partition, args.mask) if p]
    _manifest(args, argv, inputs, [args.out])


def cmd_eval_gen(args, argv):
    model, partition, mask = _load_eval_common(args)
    items = evaluate.read_generation_items(args.data)
    result = evaluate.exact_match(model, partition, mask, items,
                                  max_new_tokens=args.max_new_tokens,
                                  language_tag=args.lang)
    result.save(args.out)
    inputs = [args.model, args.data] + [p for p in (args.partition, args.mask) if p]
    _manifest(args, argv, inputs, [args.out])


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def cmd_render_heatmap(args, argv):
    freq = FrequencyMatrix.load(getattr(args, "in"))
    spec = render.HeatmapSpec(grid=freq.frequencies, scale="sequential",
                              title=f"activation frequency "
                                    f"{freq.model_id}/{freq.language_tag}")
    render.render_heatmap(spec, args.out)
    _manifest(args, argv, [getattr(args, "in")], [args.out])


def cmd_render_diff(args, argv):
    diff = analysis.load_diff_grid(getattr(args, "in"))
    spec = render.HeatmapSpec(grid=diff.values, scale="diverging",
                              title=f"frequency diff {diff.tuned_model_id} - "
                                    f"{diff.base_model_id} ({diff.language_tag})")
    render.render_heatmap(spec, args.out)
    _manifest(args, argv, [getattr(args, "in")], [args.out])


def cmd_render_shared(args, argv):
    shared = analysis.load_shared_grid(getattr(args, "in"))
    spec = render.HeatmapSpec(grid=shared.counts.astype(float), scale="sequential",
                              title=f"shared experts (tau={shared.threshold}, "
                                    f"{shared.n_languages} languages)")
    render.render_heatmap(spec, args.out)
    _manifest(args, argv, [getattr(args, "in")], [args.out])


def cmd_render_similarity(args, argv):
    report = analysis.SimilarityReport.load(getattr(args, "in"))
    written = render.render_similarity(report, args.outdir)
    _manifest(args, argv, [getattr(args, "in")], written)


# ---------------------------------------------------------------------------
# gen-toy
# ---------------------------------------------------------------------------

def cmd_gen_toy(args, argv):
    cfg = ModelConfig(n_layers=args.layers, d_model=args.d_model, d_ff=args.d_ff,
                      n_heads=args.heads, vocab_size=args.vocab,
                      max_seq_len=args.max_seq)
    outputs = [args.out]
    if args.perturb:
        base = load_model(args.perturb)
        bundle = perturb_model(base, seed=args.seed)
        inputs = [args.perturb]
    else:
        inputs = []
        if args.train:
            from .training import TrainConfig, train_toy_model
            texts_by_lang = corpus.generate_bilingual_corpus(
                args.seed, n_samples=args.samples)
            mixed = [t for pair in zip(texts_by_lang["a"], texts_by_lang["b"])
                     for t in pair]
            bundle = train_toy_model(
                cfg, mixed,
                TrainConfig(steps=args.train_steps, seed=args.seed),
                model_id=f"toy-trained-{args.seed}", progress=True)
        else:
            bundle = random_model(cfg, seed=args.seed, model_id=f"toy-{args.seed}")
    save_model(bundle, args.out)
    if args.corpus_out:
        texts_by_lang = corpus.generate_bilingual_corpus(
            args.seed, n_samples=args.samples)
        for lang, texts in texts_by_lang.items():
            path = f"{args.corpus_out}_{lang}.jsonl"
            corpus.write_corpus(path, texts)
            outputs.append(path)
    _manifest(args, argv, inputs, outputs, {"seed": args.seed})


# ---------------------------------------------------------------------------
# repro: end-to-end pipeline on the toy bilingual fixture
# ---------------------------------------------------------------------------

def _write_eval_fixtures(outdir: str, texts_by_lang: dict, seed: int) -> tuple[str, str]:
    """Tiny synthetic MCQ and generation files in the eval input formats."""
    rng = np.random.default_rng(seed)
    words = sorted({w for t in texts_by_lang["a"][:40] for w in t.split()})
    mcq_path = os.path.join(outdir, "mcq.jsonl")
    with open(mcq_path, "w", encoding="utf-8") as fh:
        for _ in range(6):
            opts = [words[i] for i in rng.choice(len(words), size=5, replace=False)]
            fh.write(json.dumps({"question": " ".join(opts[:2]),
                                 "options": opts, "answer": 0}) + "\n")
    gen_path = os.path.join(outdir, "gen.jsonl")
    with open(gen_path, "w", encoding="utf-8") as fh:
        for i in range(6):
            fh.write(json.dumps({"prompt": words[int(rng.integers(len(words)))],
                                 "answer": str(int(rng.integers(100)))}) + "\n")
    return mcq_path, gen_path


def cmd_repro(args, argv):
    if args.fixture != "toy-bilingual":
        raise ValueError(f"unknown fixture {args.fixture!r}")
    outdir = args.outdir
    os.makedirs(outdir, exist_ok=True)
    seed = args.seed
    p = lambda name: os.path.join(outdir, name)

    def run(sub_argv):
        code = dispatch(sub_argv)
        if code != 0:
            raise RuntimeError(f"repro step failed ({code}): {' '.join(sub_argv)}")

    run(["gen-toy", "--out", p("model.mltb"), "--seed", str(seed),
         "--layers", "2", "--d-model", "32", "--d-ff", "64", "--heads", "4",
         "--vocab", "320", "--max-seq", "256",
         "--corpus-out", p("corpus"), "--samples", "60"])
    run(["gen-toy", "--out", p("variant.mltb"), "--seed", str(seed + 1),
         "--layers", "2", "--d-model", "32", "--d-ff", "64", "--heads", "4",
         "--vocab", "320", "--max-seq", "256", "--perturb", p("model.mltb")])
    run(["split", "--model", p("model.mltb"), "--experts", "8",
         "--seed", str(seed), "--out", p("part.json")])
    for model_file, lang, out in (
            ("model.mltb", "a", "a.freq"),
            ("model.mltb", "b", "b.freq"),
            ("variant.mltb", "a", "variant_a.freq")):
        run(["profile", "--model", p(model_file), "--partition", p("part.json"),
             "--corpus", p(f"corpus_{lang}.jsonl"), "--lang", lang,
             "--max-tokens", "120", "--out", p(out)])
    run(["analyze", "similarity", p("a.freq"), p("b.freq"),
         "--out", p("report.json")])
    run(["analyze", "shared", "--tau", "0.05", p("a.freq"), p("b.freq"),
         "--out", p("shared.grid")])
    run(["analyze", "diff", p("a.freq"), p("variant_a.freq"),
         "--out", p("diff.grid")])
    run(["prune", "threshold", "--freq", p("a.freq"), "--tau", "0.05",
         "--out", p("a_threshold.mask")])
    run(["prune", "top", "--freq", p("a.freq"), "--percent", "80",
         "--out", p("a_top.mask")])
    run(["prune", "random", "--like", p("a_threshold.mask"),
         "--seed", str(seed + 2), "--out", p("a_random.mask")])
    run(["prune", "flops", "--model", p("model.mltb"),
         "--mask", p("a_threshold.mask"), "--out", p("flops.json")])
    run(["eval", "ppl", "--model", p("model.mltb"), "--partition", p("part.json"),
         "--mask", p("a_threshold.mask"), "--data", p("corpus_a.jsonl"),
         "--lang", "a", "--out", p("ppl_masked.json")])
    run(["eval", "ppl", "--model", p("model.mltb"),
         "--data", p("corpus_a.jsonl"), "--lang", "a", "--out", p("ppl_origin.json")])
    texts_by_lang = corpus.generate_bilingual_corpus(seed, n_samples=60)
    mcq_path, gen_path = _write_eval_fixtures(outdir, texts_by_lang, seed)
    run(["eval", "mcq", "--model", p("model.mltb"), "--partition", p("part.json"),
         "--data", mcq_path, "--lang", "a", "--out", p("mcq.json")])
    run(["eval", "gen", "--model", p("model.mltb"), "--partition", p("part.json"),
         "--data", gen_path, "--lang", "a", "--max-new-tokens", "8",
         "--out", p("gen.json")])
    run(["render", "heatmap", "--in", p("a.freq"), "--out", p("a.svg")])
    run(["render", "diff", "--in", p("diff.grid"), "--out", p("diff.svg")])
    run(["render", "shared", "--in", p("shared.grid"), "--out", p("shared.svg")])
    run(["render", "similarity", "--in", p("report.json"),
         "--outdir", os.path.join(outdir, "figs")])
    print(f"repro artifacts written to {outdir}")


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> Parser:
    parser = Parser(prog="moe-lens", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("split", help="balanced K-Means expert split")
    sp.add_argument("--model", required=True)
    sp.add_argument("--experts", type=int, default=256)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--max-iters", type=int, default=100)
    sp.add_argument("--init", choices=["kmeans++", "random"], default="kmeans++")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("profile", help="activation-frequency profiling")
    sp.add_argument("--model", required=True)
    sp.add_argument("--partition", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--lang", required=True)
    sp.add_argument("--topk", type=int, default=None)
    sp.add_argument("--max-tokens", type=int, default=200)
    sp.add_argument("--max-samples", type=int, default=10000)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_profile)

    ap = sub.add_parser("analyze", help="compare frequency matrices")
    asub = ap.add_subparsers(dest="analyze_command", required=True)
    sp = asub.add_parser("similarity")
    sp.add_argument("freqs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_analyze_similarity)
    sp = asub.add_parser("shared")
    sp.add_argument("freqs", nargs="+")
    sp.add_argument("--tau", type=float, default=0.05)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_analyze_shared)
    sp = asub.add_parser("diff")
    sp.add_argument("base")
    sp.add_argument("tuned")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_analyze_diff)

    pp = sub.add_parser("prune", help="derive expert keep-masks")
    psub = pp.add_subparsers(dest="prune_command", required=True)
    sp = psub.add_parser("threshold")
    sp.add_argument("--freq", required=True)
    sp.add_argument("--tau", type=float, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_prune_threshold)
    sp = psub.add_parser("top")
    sp.add_argument("--freq", required=True)
    sp.add_argument("--percent", type=float, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_prune_top)
    sp = psub.add_parser("random")
    sp.add_argument("--like", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_prune_random)
    sp = psub.add_parser("flops")
    sp.add_argument("--model", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--seq-len", type=int, default=200)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_prune_flops)

    ep = sub.add_parser("eval", help="quality metrics before/after pruning")
    esub = ep.add_subparsers(dest="eval_command", required=True)
    for name, func in (("ppl", cmd_eval_ppl), ("mcq", cmd_eval_mcq),
                       ("gen", cmd_eval_gen)):
        sp = esub.add_parser(name)
        sp.add_argument("--model", required=True)
        sp.add_argument("--partition", default=None)
        sp.add_argument("--mask", default=None)
        sp.add_argument("--data", required=True)
        sp.add_argument("--lang", required=True)
        sp.add_argument("--out", required=True)
        if name == "ppl":
            sp.add_argument("--max-tokens", type=int, default=200)
        if name == "mcq":
            sp.add_argument("--no-length-norm", action="store_true")
        if name == "gen":
            sp.add_argument("--max-new-tokens", type=int, default=32)
        sp.set_defaults(func=func)

    rp = sub.add_parser("render", help="emit SVG figures")
    rsub = rp.add_subparsers(dest="render_command", required=True)
    for name, func in (("heatmap", cmd_render_heatmap), ("diff", cmd_render_diff),
                       ("shared", cmd_render_shared)):
        sp = rsub.add_parser(name)
        sp.add_argument("--in", required=True)
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=func)
    sp = rsub.add_parser("similarity")
    sp.add_argument("--in", required=True)
    sp.add_argument("--outdir", required=True)
    sp.set_defaults(func=cmd_render_similarity)

    sp = sub.add_parser("gen-toy", help="seeded toy model and synthetic corpora")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--layers", type=int, default=4)
    sp.add_argument("--d-model", type=int, default=64)
    sp.add_argument("--d-ff", type=int, default=256)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--vocab", type=int, default=320)
    sp.add_argument("--max-seq", type=int, default=256)
    sp.add_argument("--train", action="store_true",
                    help="train on the synthetic bilingual corpus instead of "
                         "using random weights")
    sp.add_argument("--train-steps", type=int, default=600)
    sp.add_argument("--perturb", default=None,
                    help="perturb an existing MLTB file instead (tuning stand-in)")
    sp.add_argument("--corpus-out", default=None,
                    help="prefix for synthetic corpora (<prefix>_a.jsonl, _b.jsonl)")
    sp.add_argument("--samples", type=int, default=400)
    sp.set_defaults(func=cmd_gen_toy)

    sp = sub.add_parser("repro", help="end-to-end pipeline on a toy fixture")
    sp.add_argument("--fixture", default="toy-bilingual")
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.set_defaults(func=cmd_repro)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"moe-lens: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        args.func(args, argv)
    except (ValueError, OSError, ModelFormatError, RuntimeError) as exc:
        print(f"moe-lens: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
