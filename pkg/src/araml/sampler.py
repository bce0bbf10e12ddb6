"""Stationary perturbation sampling around real sentences.

A perturbed copy of a sentence is drawn in three stages: an edit distance d
(substitution count, weighted by how many sentences sit at each distance and
damped exponentially by a temperature), a uniform d-subset of positions, and
replacement words drawn left to right, each conditioned on the partially
substituted sentence.  Replacements always differ from the word they replace
and never touch special tokens, so the Hamming distance of the result is
exactly d.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import lgamma, log
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .corpus import N_RESERVED, Vocabulary
from .errors import ContractError, InputError
from .ngram import NGramLanguageModel
from .validation import check_positive, check_random_state, check_sentences

STRATEGIES = ("random", "constrained")


@dataclass
class SamplerConfig:
    tau: float = 0.85
    strategy: str = "random"
    samples_per_datum: int = 5
    max_edit_cap: int | None = None

    def __post_init__(self):
        check_positive(self.tau, "tau")
        if self.strategy not in STRATEGIES:
            raise InputError(f"strategy must be one of {STRATEGIES}")
        if self.samples_per_datum < 1:
            raise ContractError("samples_per_datum must be >= 1")


@dataclass
class AugmentedSample:
    original: tuple[int, ...]
    perturbed: tuple[int, ...]
    distance: int
    positions: tuple[int, ...]
    strategy: str


def count_sentences(e: int, m: int, vocab_size: int) -> float:
    """log of the number of length-m sentences at substitution distance e.

    That count is C(m, e) * (V - 1)^e; returned in log space so large m and
    vocabularies stay finite.
    """
    if not 0 <= e <= m:
        raise ContractError(f"edit distance {e} outside 0..{m}")
    if vocab_size < 2:
        raise InputError("vocab_size must be at least 2")
    log_binom = lgamma(m + 1) - lgamma(e + 1) - lgamma(m - e + 1)
    return log_binom + e * log(vocab_size - 1)


@dataclass
class EditDistanceDistribution:
    """P(d = e) over e = 0..cap for sentences of length m."""

    m: int
    vocab_size: int
    tau: float
    probs: np.ndarray

    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.probs)), self.probs))

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.probs)


def edit_distance_distribution(m: int, vocab_size: int, tau: float,
                               cap: int | None = None) -> EditDistanceDistribution:
    """Counts re-scaled by exp(-e/tau), normalized in log space."""
    if m < 1:
        raise ContractError(f"sentence length must be >= 1, got {m}")
    check_positive(tau, "tau")
    top = m if cap is None else min(m, cap)
    log_w = np.array(
        [-e / tau + count_sentences(e, m, vocab_size) for e in range(top + 1)]
    )
    log_w -= log_w.max()
    w = np.exp(log_w)
    return EditDistanceDistribution(m=m, vocab_size=vocab_size, tau=tau,
                                    probs=w / w.sum())


def sample_positions(m: int, d: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform d-subset of {0..m-1}; marginal inclusion probability d/m."""
    if not 0 <= d <= m:
        raise ContractError(f"cannot pick {d} positions from {m}")
    pool = list(range(m))
    for i in range(d):
        j = int(rng.integers(i, m))
        pool[i], pool[j] = pool[j], pool[i]
    return tuple(sorted(pool[:d]))


def _draw_random_word(current: int, vocab_size: int, rng) -> int:
    # uniform over content tokens minus the current word
    n_content = vocab_size - N_RESERVED
    r = int(rng.integers(n_content - 1)) + N_RESERVED
    return r + 1 if r >= current else r


def _draw_constrained_word(working: list[int], pos: int, current: int,
                           vocab_size: int, lm: NGramLanguageModel, rng) -> int:
    scores = lm.word_distribution(working[:pos], working[pos + 1:]).copy()
    scores[:N_RESERVED] = 0.0
    scores[current] = 0.0
    total = scores.sum()
    if not total > 0:
        return _draw_random_word(current, vocab_size, rng)
    cum = np.cumsum(scores / total)
    idx = min(int(np.searchsorted(cum, rng.random(), side="right")), len(cum) - 1)
    while scores[idx] == 0.0:
        # float cumsum can land on an excluded entry; step back to real mass
        idx -= 1
    return idx


def substitute_words(sentence, positions, strategy: str, lm: NGramLanguageModel | None,
                     rng: np.random.Generator, vocab_size: int) -> tuple[int, ...]:
    """Replace the listed positions left to right.

    Each replacement is drawn conditioned on the partially substituted
    sentence and never equals the word it replaces.
    """
    if strategy not in STRATEGIES:
        raise InputError(f"strategy must be one of {STRATEGIES}")
    if strategy == "constrained" and lm is None:
        raise ContractError("constrained strategy requires a language model")
    if vocab_size - N_RESERVED < 2:
        raise InputError("need at least two content tokens to substitute")
    working = list(sentence)
    m = len(working)
    for pos in sorted(positions):
        if not 0 <= pos < m:
            raise ContractError(f"position {pos} outside sentence of length {m}")
        current = working[pos]
        if strategy == "random":
            working[pos] = _draw_random_word(current, vocab_size, rng)
        else:
            working[pos] = _draw_constrained_word(working, pos, current, vocab_size, lm, rng)
    return tuple(working)


def perturb_sentence(sentence, dist: EditDistanceDistribution, cum: np.ndarray,
                     strategy: str, lm, rng, vocab_size: int) -> AugmentedSample:
    """One full draw: distance, positions, words."""
    d = min(int(np.searchsorted(cum, rng.random(), side="right")), len(cum) - 1)
    positions = sample_positions(len(sentence), d, rng)
    perturbed = substitute_words(sentence, positions, strategy, lm, rng, vocab_size)
    return AugmentedSample(
        original=tuple(sentence),
        perturbed=perturbed,
        distance=d,
        positions=positions,
        strategy=strategy,
    )


def augment_corpus(sentences, config: SamplerConfig, vocab_size: int,
                   rng: np.random.Generator, lm: NGramLanguageModel | None = None
                   ) -> list[AugmentedSample]:
    """samples_per_datum independent perturbations of every sentence."""
    check_sentences(sentences, vocab_size)
    if config.strategy == "constrained" and lm is None:
        raise ContractError("constrained strategy requires a language model")
    for sent in sentences:
        if any(tok < N_RESERVED for tok in sent):
            raise InputError("sentences must contain content tokens only")
    dists: dict[int, tuple[EditDistanceDistribution, np.ndarray]] = {}
    content = vocab_size - N_RESERVED
    out: list[AugmentedSample] = []
    for sent in sentences:
        m = len(sent)
        if m not in dists:
            dist = edit_distance_distribution(m, content, config.tau, config.max_edit_cap)
            dists[m] = (dist, dist.cumulative())
        dist, cum = dists[m]
        for _ in range(config.samples_per_datum):
            out.append(
                perturb_sentence(sent, dist, cum, config.strategy, lm, rng, vocab_size)
            )
    return out


class SentenceAugmenter(BaseEstimator, TransformerMixin):
    """Stateless transformer wrapping :func:`augment_corpus`.

    fit() is a no-op; transform() maps token-id sentences to a list of
    AugmentedSample drawn fresh on every call from `random_state`.
    """

    def __init__(self, vocab_size: int, tau: float = 0.85, strategy: str = "random",
                 samples_per_datum: int = 5, max_edit_cap: int | None = None,
                 lm: NGramLanguageModel | None = None, random_state=None):
        self.vocab_size = vocab_size
        self.tau = tau
        self.strategy = strategy
        self.samples_per_datum = samples_per_datum
        self.max_edit_cap = max_edit_cap
        self.lm = lm
        self.random_state = random_state

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> list[AugmentedSample]:
        config = SamplerConfig(
            tau=self.tau,
            strategy=self.strategy,
            samples_per_datum=self.samples_per_datum,
            max_edit_cap=self.max_edit_cap,
        )
        rng = check_random_state(self.random_state)
        return augment_corpus(X, config, self.vocab_size, rng, lm=self.lm)


def write_augmented(samples, vocab: Vocabulary, path) -> None:
    """One sample per line: original, perturbed, d, comma-joined positions."""
    lines = []
    for s in samples:
        lines.append(
            "\t".join(
                (
                    " ".join(vocab.decode(s.original)),
                    " ".join(vocab.decode(s.perturbed)),
                    str(s.distance),
                    ",".join(str(p) for p in s.positions),
                )
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_augmented(path, vocab: Vocabulary, strategy: str = "random") -> list[AugmentedSample]:
    samples = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        orig_text, pert_text, d_text, pos_text = line.split("\t")
        samples.append(
            AugmentedSample(
                original=tuple(vocab.encode(orig_text.split())),
                perturbed=tuple(vocab.encode(pert_text.split())),
                distance=int(d_text),
                positions=tuple(int(p) for p in pos_text.split(",") if p != ""),
                strategy=strategy,
            )
        )
    return samples
