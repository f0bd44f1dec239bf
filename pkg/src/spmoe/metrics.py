"""N-gram diversity metrics for sets of generated outputs.

Implements the clipped n-gram diversity / brevity-penalty pattern-diversity
score (PD), sentence BLEU with clipped precision, Pairwise-BLEU over the
outputs of one input, and corpus-level Distinct-1.

Metric tokenization is lowercase whitespace splitting with trailing
punctuation stripped (a bare punctuation token disappears); this is what makes
the golden ratios in the tests come out exact.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

# Floor for zero diversities inside the geometric mean; only applied when at
# least one order is nonzero (identical sentences must score exactly 0).
GEO_MEAN_EPS = 1e-9

Tokens = Sequence[str]


def metric_tokens(text: str) -> list[str]:
    """Tokenize text for metrics: lowercase, split, strip trailing punctuation."""
    out = []
    for raw in text.lower().split():
        word = raw.rstrip(string.punctuation)
        if word:
            out.append(word)
    return out


def _as_tokens(value: str | Tokens) -> list[str]:
    if isinstance(value, str):
        return metric_tokens(value)
    return list(value)


@dataclass(frozen=True)
class NGramMultiset:
    """Counts of the n-token windows of one sequence."""

    order: int
    counts: Counter
    total: int

    @classmethod
    def from_tokens(cls, tokens: Tokens, order: int) -> "NGramMultiset":
        if order < 1:
            raise ValueError(f"n-gram order must be >= 1, got {order}")
        tokens = list(tokens)
        grams = [tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1)]
        return cls(order=order, counts=Counter(grams), total=len(grams))


def clipped_overlap(candidate: NGramMultiset, reference: NGramMultiset) -> int:
    """Sum over candidate n-grams of min(candidate count, reference count)."""
    return sum(
        min(count, reference.counts[gram]) for gram, count in candidate.counts.items()
    )


@dataclass(frozen=True)
class GenerationSet:
    """The decoded outputs for one input; the unit of pattern-level diversity."""

    source: str
    outputs: tuple[str, ...]
    truncated: tuple[bool, ...] | None = None

    def __post_init__(self):
        if len(self.outputs) == 0:
            raise ValueError("generation set must contain at least one output")
        if self.truncated is not None and len(self.truncated) != len(self.outputs):
            raise ValueError("truncation flags must match the number of outputs")


@dataclass(frozen=True)
class PDConfig:
    """Maximum n-gram order and per-order weights for pattern diversity."""

    max_order: int = 4
    weights: tuple[float, ...] | None = None  # uniform when None

    def __post_init__(self):
        if self.max_order < 1:
            raise ValueError("max_order must be >= 1")
        if self.weights is not None:
            if len(self.weights) != self.max_order:
                raise ValueError("need one weight per order")
            if any(w <= 0 for w in self.weights):
                raise ValueError("weights must be positive")
            if abs(sum(self.weights) - 1.0) > 1e-9:
                raise ValueError("weights must sum to 1")

    def order_weights(self) -> tuple[float, ...]:
        if self.weights is not None:
            return self.weights
        return tuple(1.0 / self.max_order for _ in range(self.max_order))


def ngram_diversity(
    candidate: str | Tokens, reference: str | Tokens, order: int, clip: bool = True
) -> float:
    """Fraction of candidate n-grams not covered by the reference.

    (total candidate n-grams - clipped overlap) / total candidate n-grams.
    With ``clip`` off, any n-gram that occurs in the reference removes its full
    candidate count instead of min(candidate count, reference count).
    """
    cand = _as_tokens(candidate)
    ref = _as_tokens(reference)
    if len(cand) < order:
        raise ValueError(
            f"candidate has {len(cand)} tokens, too short for order {order}"
        )
    c_grams = NGramMultiset.from_tokens(cand, order)
    r_grams = NGramMultiset.from_tokens(ref, order)
    if clip:
        overlap = clipped_overlap(c_grams, r_grams)
    else:
        overlap = sum(
            count for gram, count in c_grams.counts.items() if gram in r_grams.counts
        )
    return (c_grams.total - overlap) / c_grams.total


def brevity_penalty(c: int, r: int) -> float:
    """1 when the candidate is longer than the reference, else exp(1 - r/c)."""
    if c < 1 or r < 1:
        raise ValueError(f"lengths must be >= 1, got candidate {c}, reference {r}")
    if c > r:
        return 1.0
    return math.exp(1.0 - r / c)


def pattern_diversity(
    candidate: str | Tokens, reference: str | Tokens, cfg: PDConfig = PDConfig()
) -> float:
    """Brevity-penalized geometric mean of the clipped n-gram diversities.

    Orders the candidate is too short for are skipped and the weights are
    renormalized over the remaining orders.  If every available order has zero
    diversity the score is exactly 0; otherwise zero orders enter the
    geometric mean through the ``GEO_MEAN_EPS`` floor.  An empty candidate
    scores 0 (fully length-penalized); an empty reference leaves every order
    fully diverse with no length penalty.
    """
    cand = _as_tokens(candidate)
    ref = _as_tokens(reference)
    if not cand:
        return 0.0
    weights = cfg.order_weights()
    available = [n for n in range(1, cfg.max_order + 1) if len(cand) >= n]
    w_sum = sum(weights[n - 1] for n in available)
    divers = [ngram_diversity(cand, ref, n) for n in available]
    if all(d == 0.0 for d in divers):
        return 0.0
    log_mean = sum(
        (weights[n - 1] / w_sum) * math.log(max(d, GEO_MEAN_EPS))
        for n, d in zip(available, divers)
    )
    bp = 1.0 if not ref else brevity_penalty(len(cand), len(ref))
    return min(1.0, bp * math.exp(log_mean))


def bleu(
    candidate: str | Tokens, references: Sequence[str | Tokens], max_order: int = 4
) -> float:
    """Sentence BLEU with clipped n-gram precision and brevity penalty.

    The candidate is scored against the closest-length reference (ties prefer
    the shorter one).  Zero precision at any order yields 0; no smoothing.
    """
    cand = _as_tokens(candidate)
    if not cand:
        raise ValueError("BLEU candidate must be non-empty")
    if not references:
        raise ValueError("BLEU needs at least one reference")
    refs = [_as_tokens(r) for r in references]
    ref = min(refs, key=lambda t: (abs(len(t) - len(cand)), len(t)))
    log_precisions = []
    for order in range(1, max_order + 1):
        total = len(cand) - order + 1
        if total <= 0:
            return 0.0
        overlap = clipped_overlap(
            NGramMultiset.from_tokens(cand, order),
            NGramMultiset.from_tokens(ref, order),
        )
        if overlap == 0:
            return 0.0
        log_precisions.append(math.log(overlap / total))
    bp = 1.0 if not ref else brevity_penalty(len(cand), len(ref))
    return min(1.0, bp * math.exp(sum(log_precisions) / max_order))


def _ordered_pairs(n: int):
    for i in range(n):
        for j in range(n):
            if i != j:
                yield i, j


def pairwise_bleu(gen_set: GenerationSet, max_order: int = 4) -> float:
    """Mean BLEU over ordered output pairs; lower means more diverse."""
    if len(gen_set.outputs) < 2:
        raise ValueError("pairwise BLEU needs at least 2 outputs")
    token_lists = [metric_tokens(o) for o in gen_set.outputs]
    scores = []
    for i, j in _ordered_pairs(len(token_lists)):
        if not token_lists[i]:
            scores.append(0.0)  # empty candidate matches nothing
        else:
            scores.append(bleu(token_lists[i], [token_lists[j]], max_order))
    return sum(scores) / len(scores)


def pd_over_set(gen_set: GenerationSet, cfg: PDConfig = PDConfig()) -> float:
    """Mean pattern diversity over ordered output pairs of one input."""
    if len(gen_set.outputs) < 2:
        raise ValueError("pattern diversity over a set needs at least 2 outputs")
    token_lists = [metric_tokens(o) for o in gen_set.outputs]
    scores = [
        pattern_diversity(token_lists[i], token_lists[j], cfg)
        for i, j in _ordered_pairs(len(token_lists))
    ]
    return sum(scores) / len(scores)


def distinct_1(outputs: Sequence[str | Tokens]) -> float:
    """Unique unigrams over total unigrams across all outputs."""
    if len(outputs) == 0:
        raise ValueError("distinct-1 needs at least one output")
    token_lists = [_as_tokens(o) for o in outputs]
    total = sum(len(t) for t in token_lists)
    if total == 0:
        raise ValueError("distinct-1 needs at least one token")
    unique = len({tok for tokens in token_lists for tok in tokens})
    return unique / total


@dataclass(frozen=True)
class MetricReport:
    """Corpus-level metric summary over a list of generation sets."""

    n_sets: int
    pd: tuple[float, ...]  # PD-1..PD-N
    p_bleu: tuple[float, ...]  # Pairwise-BLEU-1..N
    bleu: tuple[float, ...] | None  # BLEU-1..N vs references, when given
    distinct_1: float

    def to_dict(self) -> dict:
        out: dict = {"n_sets": self.n_sets}
        for n, value in enumerate(self.pd, start=1):
            out[f"pd_{n}"] = value
        for n, value in enumerate(self.p_bleu, start=1):
            out[f"p_bleu_{n}"] = value
        if self.bleu is not None:
            for n, value in enumerate(self.bleu, start=1):
                out[f"bleu_{n}"] = value
        out["distinct_1"] = self.distinct_1
        return out

    def format(self) -> str:
        lines = [f"records evaluated: {self.n_sets}"]
        if self.bleu is not None:
            lines.append(
                "BLEU      " + "  ".join(f"{n}: {v:.4f}" for n, v in enumerate(self.bleu, 1))
            )
        lines.append(
            "P-BLEU    " + "  ".join(f"{n}: {v:.4f}" for n, v in enumerate(self.p_bleu, 1))
        )
        lines.append(
            "PD        " + "  ".join(f"{n}: {v:.4f}" for n, v in enumerate(self.pd, 1))
        )
        lines.append(f"DISTINCT-1   {self.distinct_1:.4f}")
        return "\n".join(lines)


def evaluate_generation_sets(
    sets: Sequence[GenerationSet],
    references: Sequence[Sequence[str]] | None = None,
    max_order: int = 4,
) -> MetricReport:
    """Aggregate metrics over generation sets (mean of per-set scores).

    BLEU-n for a set is the mean sentence BLEU of its outputs against the
    set's references; the corpus value averages over sets.  Distinct-1 pools
    every output token across the corpus.
    """
    if len(sets) == 0:
        raise ValueError("no generation sets to evaluate")
    if references is not None and len(references) != len(sets):
        raise ValueError(
            f"have {len(sets)} generation records but {len(references)} reference rows"
        )
    pd_totals = [0.0] * max_order
    pb_totals = [0.0] * max_order
    bleu_totals = [0.0] * max_order if references is not None else None
    for idx, gen_set in enumerate(sets):
        for n in range(1, max_order + 1):
            pd_totals[n - 1] += pd_over_set(gen_set, PDConfig(max_order=n))
            pb_totals[n - 1] += pairwise_bleu(gen_set, max_order=n)
            if bleu_totals is not None:
                refs = references[idx]
                if not refs:
                    raise ValueError(f"record {idx + 1} has an empty reference list")
                per_output = [
                    bleu(out, refs, max_order=n) if metric_tokens(out) else 0.0
                    for out in gen_set.outputs
                ]
                bleu_totals[n - 1] += sum(per_output) / len(per_output)
    count = len(sets)
    all_outputs = [out for gen_set in sets for out in gen_set.outputs]
    return MetricReport(
        n_sets=count,
        pd=tuple(v / count for v in pd_totals),
        p_bleu=tuple(v / count for v in pb_totals),
        bleu=tuple(v / count for v in bleu_totals) if bleu_totals is not None else None,
        distinct_1=distinct_1(all_outputs),
    )
