"""Synthetic one-to-many pattern corpus and line-delimited corpus files.

A corpus is a list of (source, target) token sequences, optionally labeled
with the id of the deterministic transformation ("pattern") that produced the
target from the source.  The synthetic generator applies every configured
pattern rule to each random source sentence, so each source appears once per
pattern with a known label.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

DEFAULT_WORDS = (
    "bird", "blue", "cloud", "fire", "fish", "gold", "green", "light",
    "moon", "night", "rain", "red", "river", "snow", "star", "stone",
    "sun", "tree", "wind", "wolf",
)

PREFIX_TOKEN = "pfx"


class CorpusFormatError(ValueError):
    """Raised for malformed or empty corpus files."""


def corpus_tokens(text: str) -> list[str]:
    """Lowercased whitespace tokenization used for model corpora."""
    return text.lower().split()


class Vocabulary:
    """Token <-> id map with fixed reserved ids pad=0, bos=1, eos=2, unk=3."""

    def __init__(self, words: Iterable[str]):
        content = sorted(set(words) - set(RESERVED_TOKENS))
        self.id_to_token: tuple[str, ...] = RESERVED_TOKENS + tuple(content)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}

    @classmethod
    def from_id_list(cls, id_to_token: Sequence[str]) -> "Vocabulary":
        """Rebuild a vocabulary with ids exactly as listed (checkpoint loading)."""
        if tuple(id_to_token[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        vocab = cls.__new__(cls)
        vocab.id_to_token = tuple(id_to_token)
        vocab.token_to_id = {t: i for i, t in enumerate(vocab.id_to_token)}
        return vocab

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def encode_word(self, word: str) -> int:
        return self.token_to_id.get(word, UNK_ID)

    def encode(self, text: str) -> list[int]:
        return [self.encode_word(w) for w in corpus_tokens(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.id_to_token[i] for i in ids)

    def sequence(self, text: str) -> "TokenSequence":
        return TokenSequence(tokens=tuple(self.encode(text)), text=text)


@dataclass(frozen=True)
class TokenSequence:
    """Content tokens of one sentence: ids plus the original text.

    Special tokens (bos/eos/pad) are not stored; the model inserts them.
    """

    tokens: tuple[int, ...]
    text: str

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValueError("token sequence must be non-empty")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class CorpusPair:
    source: TokenSequence
    target: TokenSequence
    pattern: int | None = None


@dataclass
class PatternCorpus:
    pairs: list[CorpusPair]
    vocab: Vocabulary

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def labeled(self) -> bool:
        return bool(self.pairs) and all(p.pattern is not None for p in self.pairs)

    @property
    def max_source_len(self) -> int:
        return max(len(p.source) for p in self.pairs)

    @property
    def max_target_len(self) -> int:
        return max(len(p.target) for p in self.pairs)

    def source_texts(self) -> list[str]:
        """Distinct source sentences in first-appearance order."""
        seen: dict[str, None] = {}
        for p in self.pairs:
            seen.setdefault(p.source.text, None)
        return list(seen)

    def split_sources(self, n_holdout: int) -> tuple["PatternCorpus", "PatternCorpus"]:
        """Split off the last ``n_holdout`` distinct sources (shared vocabulary)."""
        sources = self.source_texts()
        if not 0 <= n_holdout < len(sources):
            raise ValueError(
                f"cannot hold out {n_holdout} of {len(sources)} distinct sources"
            )
        held = set(sources[len(sources) - n_holdout :])
        train = [p for p in self.pairs if p.source.text not in held]
        hold = [p for p in self.pairs if p.source.text in held]
        return PatternCorpus(train, self.vocab), PatternCorpus(hold, self.vocab)


def _rule_prefix(tokens: list[str]) -> list[str]:
    return [PREFIX_TOKEN] + tokens


def _rule_reverse(tokens: list[str]) -> list[str]:
    return tokens[::-1]


def _rule_duplicate(tokens: list[str]) -> list[str]:
    return [t for t in tokens for _ in range(2)]


def _rule_rotate(tokens: list[str]) -> list[str]:
    return tokens[1:] + tokens[:1]


def _make_synonym_rule(words: Sequence[str]) -> Callable[[list[str]], list[str]]:
    ordered = sorted(set(words))
    table = {w: ordered[(i + 1) % len(ordered)] for i, w in enumerate(ordered)}

    def rule(tokens: list[str]) -> list[str]:
        return [table.get(t, t) for t in tokens]

    return rule


RULE_NAMES = ("prefix", "reverse", "duplicate", "rotate", "synonym")


def build_rules(
    names: Sequence[str], words: Sequence[str]
) -> list[tuple[str, Callable[[list[str]], list[str]]]]:
    """Resolve rule names to callables; the synonym table is built from ``words``."""
    fixed = {
        "prefix": _rule_prefix,
        "reverse": _rule_reverse,
        "duplicate": _rule_duplicate,
        "rotate": _rule_rotate,
    }
    rules = []
    for name in names:
        if name in fixed:
            rules.append((name, fixed[name]))
        elif name == "synonym":
            rules.append((name, _make_synonym_rule(words)))
        else:
            raise ValueError(f"unknown pattern rule {name!r}; known: {RULE_NAMES}")
    return rules


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic corpus with known ground-truth patterns."""

    n_patterns: int = 3
    n_sources: int = 500
    seed: int = 0
    rules: tuple[str, ...] = ("prefix", "reverse", "duplicate")
    words: tuple[str, ...] = DEFAULT_WORDS
    min_len: int = 3
    max_len: int = 6

    def __post_init__(self):
        if self.n_patterns < 2:
            raise ValueError("need at least 2 patterns")
        if len(self.rules) != self.n_patterns:
            raise ValueError(
                f"{self.n_patterns} patterns but {len(self.rules)} rules configured"
            )
        if self.n_sources < 1:
            raise ValueError("need at least one source sentence")
        if not 2 <= self.min_len <= self.max_len:
            raise ValueError("need 2 <= min_len <= max_len")
        if self.max_len > len(self.words):
            raise ValueError("max_len exceeds the content vocabulary size")


def generate_synthetic(spec: SyntheticSpec) -> PatternCorpus:
    """Build a corpus by applying every pattern rule to random source sentences.

    Sources are random sentences over ``spec.words`` with per-sentence distinct
    tokens (sampled without replacement), deduplicated, deterministic under
    ``spec.seed``.  Each source yields one labeled pair per rule, source-major.
    """
    rules = build_rules(spec.rules, spec.words)

    # Rules must be pairwise distinguishable on a probe sentence.
    probe = list(sorted(set(spec.words))[: max(3, spec.min_len)])
    outputs = [(name, tuple(fn(probe))) for name, fn in rules]
    for i in range(len(outputs)):
        for j in range(i + 1, len(outputs)):
            if outputs[i][1] == outputs[j][1]:
                raise ValueError(
                    f"pattern rules {outputs[i][0]!r} and {outputs[j][0]!r} "
                    f"collide on probe sentence {' '.join(probe)!r}"
                )

    rng = np.random.default_rng(spec.seed)
    words = np.array(spec.words)
    sources: list[list[str]] = []
    seen: set[tuple[str, ...]] = set()
    attempts = 0
    while len(sources) < spec.n_sources:
        attempts += 1
        if attempts > 100 * spec.n_sources:
            raise ValueError("could not sample enough distinct source sentences")
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        sent = [str(w) for w in rng.choice(words, size=length, replace=False)]
        key = tuple(sent)
        if key in seen:
            continue
        seen.add(key)
        sources.append(sent)

    observed: set[str] = set()
    raw: list[tuple[list[str], list[str], int]] = []
    for sent in sources:
        observed.update(sent)
        for label, (_, fn) in enumerate(rules):
            target = fn(list(sent))
            observed.update(target)
            raw.append((sent, target, label))

    vocab = Vocabulary(observed)
    pairs = [
        CorpusPair(
            source=vocab.sequence(" ".join(src)),
            target=vocab.sequence(" ".join(tgt)),
            pattern=label,
        )
        for src, tgt, label in raw
    ]
    return PatternCorpus(pairs, vocab)


def save_corpus(corpus: PatternCorpus, path) -> None:
    """Write one JSON record per line: source, target, optional pattern."""
    with open(path, "w", encoding="utf-8") as fh:
        for pair in corpus.pairs:
            record: dict = {"source": pair.source.text, "target": pair.target.text}
            if pair.pattern is not None:
                record["pattern"] = pair.pattern
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_corpus(path) -> PatternCorpus:
    """Parse a line-delimited corpus file; vocabulary is built from observed tokens."""
    path = Path(path)
    raw: list[tuple[str, str, int | None]] = []
    observed: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise CorpusFormatError(f"{path}:{lineno}: expected a JSON object")
            for key in ("source", "target"):
                if key not in record or not isinstance(record[key], str):
                    raise CorpusFormatError(f"{path}:{lineno}: missing string field {key!r}")
                if not corpus_tokens(record[key]):
                    raise CorpusFormatError(f"{path}:{lineno}: field {key!r} has no tokens")
            pattern = record.get("pattern")
            if pattern is not None and not isinstance(pattern, int):
                raise CorpusFormatError(f"{path}:{lineno}: field 'pattern' must be an integer")
            observed.update(corpus_tokens(record["source"]))
            observed.update(corpus_tokens(record["target"]))
            raw.append((record["source"], record["target"], pattern))
    if not raw:
        raise CorpusFormatError(f"{path}: corpus file contains no records")
    vocab = Vocabulary(observed)
    pairs = [
        CorpusPair(vocab.sequence(src), vocab.sequence(tgt), pattern)
        for src, tgt, pattern in raw
    ]
    return PatternCorpus(pairs, vocab)


def pattern_purity(
    assignments: Iterable[tuple[int, int]], corpus: PatternCorpus
) -> float:
    """Cluster purity of expert assignments against ground-truth pattern labels.

    ``assignments`` holds (sample index, argmax expert) for every labeled
    sample; purity is the size-weighted fraction of each expert's samples that
    share the expert's majority label.  Invariant under expert renaming.
    """
    labels = [p.pattern for p in corpus.pairs]
    if not labels or any(l is None for l in labels):
        raise ValueError("corpus has no ground-truth pattern labels")
    assignments = list(assignments)
    covered = {idx for idx, _ in assignments}
    if covered != set(range(len(labels))):
        raise ValueError("assignments must cover every labeled sample exactly")
    clusters: dict[int, Counter] = {}
    for idx, expert in assignments:
        clusters.setdefault(expert, Counter())[labels[idx]] += 1
    majority = sum(max(counter.values()) for counter in clusters.values())
    return majority / len(labels)
