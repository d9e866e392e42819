"""Quality metrics before/after pruning: teacher-forced corpus perplexity,
multiple-choice accuracy by option log-likelihood, and greedy-generation
exact match on extracted numeric answers."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .model import ModelBundle, forward, forward_masked
from .pruning import PruneMask
from .split import ExpertPartition
from .tokenizer import ByteTokenizer

_NUMBER_RE = re.compile(r"[-+]?\d+(?:\.\d+)?")


@dataclass(frozen=True)
class EvalResult:
    metric: str  # "perplexity" | "mcq_accuracy" | "exact_match"
    value: float
    n_samples: int
    mask_provenance: dict | str
    language_tag: str

    def save(self, path) -> None:
        doc = {
            "metric": self.metric,
            "value": self.value,
            "n_samples": self.n_samples,
            "mask_provenance": self.mask_provenance,
            "language_tag": self.language_tag,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


@dataclass(frozen=True)
class McqItem:
    question: str
    options: tuple[str, ...]
    answer: int

    def __post_init__(self):
        if len(self.options) < 2:
            raise ValueError("MCQ item needs at least 2 options")
        if not 0 <= self.answer < len(self.options):
            raise ValueError(
                f"answer index {self.answer} out of range for "
                f"{len(self.options)} options")


def read_mcq_items(path) -> list[McqItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                items.append(McqItem(question=doc["question"],
                                     options=tuple(doc["options"]),
                                     answer=int(doc["answer"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad MCQ line: {exc}") from exc
    return items


def read_generation_items(path) -> list[tuple[str, str]]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                items.append((doc["prompt"], str(doc["answer"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad generation line: {exc}") from exc
    return items


def _logits_fn(model: ModelBundle, partition: Optional[ExpertPartition],
               mask: Optional[PruneMask]):
    if mask is None:
        return lambda ids: forward(model, ids)
    if partition is None:
        raise ValueError("a mask requires the matching expert partition")
    return lambda ids: forward_masked(model, ids, partition, mask)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _mask_provenance(mask: Optional[PruneMask]):
    return mask.provenance if mask is not None else "origin"


def perplexity(model: ModelBundle, partition: Optional[ExpertPartition],
               mask: Optional[PruneMask], corpus: Iterable[str],
               max_tokens: int = 200,
               tokenizer: Optional[ByteTokenizer] = None,
               language_tag: str = "und") -> EvalResult:
    """exp of the token-weighted mean next-token NLL over the whole corpus,
    teacher-forced; samples truncated at max_tokens."""
    tokenizer = tokenizer or ByteTokenizer()
    run = _logits_fn(model, partition, mask)
    nll_sum = 0.0
    n_predicted = 0
    n_samples = 0
    for text in corpus:
        ids = tokenizer.encode(text)[:max_tokens]
        if len(ids) < 2:
            continue
        n_samples += 1
        logp = _log_softmax(run(ids))
        targets = np.asarray(ids[1:])
        nll_sum -= float(logp[np.arange(len(ids) - 1), targets].sum())
        n_predicted += len(ids) - 1
    if n_predicted == 0:
        raise ValueError("empty corpus: no sample long enough to score")
    return EvalResult(metric="perplexity", value=float(np.exp(nll_sum / n_predicted)),
                      n_samples=n_samples, mask_provenance=_mask_provenance(mask),
                      language_tag=language_tag)


def mcq_accuracy(model: ModelBundle, partition: Optional[ExpertPartition],
                 mask: Optional[PruneMask], items: list[McqItem],
                 normalize: bool = True,
                 tokenizer: Optional[ByteTokenizer] = None,
                 language_tag: str = "und") -> EvalResult:
    """Each option scored by the log-likelihood of its tokens conditioned on
    the question prompt, divided by option token count when normalize is on.
    Prediction is the argmax; score ties break to the lowest option index.
    """
    if not items:
        raise ValueError("need at least 1 MCQ item")
    tokenizer = tokenizer or ByteTokenizer()
    run = _logits_fn(model, partition, mask)
    correct = 0
    for item in items:
        prompt_ids = tokenizer.encode(item.question)
        best_idx, best_score = 0, -np.inf
        for oi, option in enumerate(item.options):
            opt_ids = tokenizer.encode(" " + option, add_bos=False)
            ids = prompt_ids + opt_ids
            logp = _log_softmax(run(ids))
            # option token at position p is predicted from position p-1
            positions = np.arange(len(prompt_ids) - 1, len(ids) - 1)
            targets = np.asarray(ids[len(prompt_ids):])
            score = float(logp[positions, targets].sum())
            if normalize:
                score /= len(opt_ids)
            if score > best_score:
                best_idx, best_score = oi, score
        if best_idx == item.answer:
            correct += 1
    return EvalResult(metric="mcq_accuracy", value=correct / len(items),
                      n_samples=len(items), mask_provenance=_mask_provenance(mask),
                      language_tag=language_tag)


def extract_answer(text: str) -> Optional[str]:
    """Last contiguous number (optional sign / decimal point) in the text."""
    matches = _NUMBER_RE.findall(text)
    return matches[-1] if matches else None


def normalize_answer(text: str) -> str:
    extracted = extract_answer(text)
    return extracted if extracted is not None else text.strip()


def greedy_decode(model: ModelBundle, partition: Optional[ExpertPartition],
                  mask: Optional[PruneMask], prompt_ids: list[int],
                  max_new_tokens: int) -> list[int]:
    """Greedy continuation; stops at EOS or max_new_tokens. Argmax ties
    break to the lowest token id."""
    run = _logits_fn(model, partition, mask)
    ids = list(prompt_ids)
    generated: list[int] = []
    limit = model.config.max_seq_len
    for _ in range(max_new_tokens):
        if len(ids) >= limit:
            break
        logits = run(ids)
        nxt = int(np.argmax(logits[-1]))
        generated.append(nxt)
        ids.append(nxt)
        if nxt == ByteTokenizer.eos_id:
            break
    return generated


def exact_match(model: ModelBundle, partition: Optional[ExpertPartition],
                mask: Optional[PruneMask], items: list[tuple[str, str]],
                max_new_tokens: int = 32,
                tokenizer: Optional[ByteTokenizer] = None,
                language_tag: str = "und") -> EvalResult:
    """Greedy decode each prompt and compare the last number in the output
    against the normalized reference answer."""
    if not items:
        raise ValueError("need at least 1 generation item")
    tokenizer = tokenizer or ByteTokenizer()
    correct = 0
    for prompt, answer in items:
        prompt_ids = tokenizer.encode(prompt)
        gen_ids = greedy_decode(model, partition, mask, prompt_ids, max_new_tokens)
        prediction = extract_answer(tokenizer.decode(gen_ids))
        if prediction is not None and prediction == normalize_answer(answer):
            correct += 1
    return EvalResult(metric="exact_match", value=correct / len(items),
                      n_samples=len(items), mask_provenance=_mask_provenance(mask),
                      language_tag=language_tag)
