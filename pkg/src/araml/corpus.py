"""Tokenized corpora: loading, vocabulary building, splits, synthetic data.

The synthetic corpus comes from a small hidden Markov model whose exact
sentence log-probability is computable with the forward algorithm, so
generator quality can be judged against ground truth.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .validation import check_count, check_fraction, check_random_state

PAD, BOS, EOS, SEP = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<s>", "</s>", "<sep>")
N_RESERVED = len(RESERVED_TOKENS)


@dataclass
class Vocabulary:
    """Closed token inventory; ids 0..3 are reserved for special tokens."""

    tokens: list[str]
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[:N_RESERVED]) != RESERVED_TOKENS:
            raise InputError("vocabulary must start with the reserved special tokens")
        if not self.index:
            self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise InputError("vocabulary contains duplicate tokens")

    @classmethod
    def from_content_tokens(cls, content: list[str]) -> "Vocabulary":
        return cls(list(RESERVED_TOKENS) + list(content))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def n_content(self) -> int:
        return len(self.tokens) - N_RESERVED

    def encode(self, words: list[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise InputError(f"token {exc.args[0]!r} not in vocabulary")

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def digest(self) -> str:
        payload = "\n".join(self.tokens).encode()
        return hashlib.sha256(payload).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines])


@dataclass
class Corpus:
    """Sentences as token-id lists, with an optional paired context side."""

    sentences: list[list[int]]
    vocab: Vocabulary
    split: str = "train"
    contexts: list[list[int]] | None = None

    def __post_init__(self):
        if self.contexts is not None and len(self.contexts) != len(self.sentences):
            raise InputError("paired corpus needs one context per sentence")

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def paired(self) -> bool:
        return self.contexts is not None

    def save(self, path) -> None:
        lines = []
        for i, sent in enumerate(self.sentences):
            text = " ".join(self.vocab.decode(sent))
            if self.paired:
                text = " ".join(self.vocab.decode(self.contexts[i])) + "\t" + text
            lines.append(text)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_lines(path) -> list[str]:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read corpus file {path}: {exc}")
    return [line for line in raw.splitlines() if line.strip()]


def load_corpus(path, min_token_frequency: int = 1, max_vocab: int | None = None,
                paired: bool = False, split: str = "train",
                vocab: Vocabulary | None = None) -> Corpus:
    """Load a space-tokenized corpus, building the vocabulary by frequency.

    Sentences containing a token that fell below `min_token_frequency` or
    outside the `max_vocab` cut are dropped.  Ties in frequency break
    lexicographically so id assignment is stable across runs.
    """
    rows: list[tuple[list[str], list[str] | None]] = []
    for line in _read_lines(path):
        if paired:
            parts = line.split("\t")
            if len(parts) != 2:
                raise InputError(f"paired corpus line lacks a tab separator: {line!r}")
            rows.append((parts[1].split(), parts[0].split()))
        else:
            rows.append((line.split(), None))
    if not rows:
        raise InputError(f"corpus file {path} is empty")

    if vocab is None:
        counts = Counter()
        for sent, ctx in rows:
            counts.update(sent)
            if ctx:
                counts.update(ctx)
        kept = [tok for tok, c in counts.items() if c >= min_token_frequency]
        kept.sort(key=lambda tok: (-counts[tok], tok))
        if max_vocab is not None:
            kept = kept[: max(0, max_vocab - N_RESERVED)]
        vocab = Vocabulary.from_content_tokens(kept)

    sentences, contexts = [], []
    known = vocab.index
    for sent, ctx in rows:
        if any(w not in known for w in sent):
            continue
        if ctx is not None and any(w not in known for w in ctx):
            continue
        sentences.append(vocab.encode(sent))
        contexts.append(vocab.encode(ctx) if ctx is not None else None)
    if not sentences:
        raise InputError("no sentences survived vocabulary filtering")
    return Corpus(
        sentences=sentences,
        vocab=vocab,
        split=split,
        contexts=contexts if paired else None,
    )


def train_test_split(corpus: Corpus, test_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Disjoint, exhaustive, seed-deterministic split."""
    check_fraction(test_fraction, "test_fraction")
    rng = check_random_state(seed)
    n = len(corpus)
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx = set(order[:n_test].tolist())

    def take(indices, split):
        return Corpus(
            sentences=[corpus.sentences[i] for i in indices],
            vocab=corpus.vocab,
            split=split,
            contexts=[corpus.contexts[i] for i in indices] if corpus.paired else None,
        )

    train_indices = [i for i in range(n) if i not in test_idx]
    test_indices = [i for i in range(n) if i in test_idx]
    return take(train_indices, "train"), take(test_indices, "test")


@dataclass
class HmmOracle:
    """Hidden Markov sentence source with exact log-probabilities.

    Emission symbols are content-token offsets: symbol s maps to vocabulary
    id s + N_RESERVED.  After each emission the chain stops with probability
    `stop_prob` (always at `max_length`).
    """

    start_probs: np.ndarray
    transitions: np.ndarray
    emissions: np.ndarray
    stop_prob: float = 0.25

    def __post_init__(self):
        self.start_probs = np.asarray(self.start_probs, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.emissions = np.asarray(self.emissions, dtype=np.float64)
        for name, arr in (
            ("start_probs", self.start_probs[None, :]),
            ("transitions", self.transitions),
            ("emissions", self.emissions),
        ):
            if np.any(arr < 0) or not np.allclose(arr.sum(axis=1), 1.0, atol=1e-9):
                raise InputError(f"HMM {name} rows must be stochastic")
        if not 0.0 < self.stop_prob < 1.0:
            raise InputError("stop_prob must lie strictly between 0 and 1")

    @property
    def n_states(self) -> int:
        return len(self.start_probs)

    @property
    def n_symbols(self) -> int:
        return self.emissions.shape[1]

    @classmethod
    def random(cls, n_states: int, n_symbols: int, seed: int,
               stop_prob: float = 0.25, concentration: float = 0.5) -> "HmmOracle":
        """Draw a smooth random oracle (Dirichlet rows)."""
        rng = check_random_state(seed)
        return cls(
            start_probs=rng.dirichlet(np.full(n_states, 5.0)),
            transitions=rng.dirichlet(np.full(n_states, concentration), size=n_states),
            emissions=rng.dirichlet(np.full(n_symbols, concentration), size=n_states),
            stop_prob=stop_prob,
        )

    def _cumulatives(self):
        if not hasattr(self, "_cum"):
            self._cum = (
                np.cumsum(self.start_probs),
                np.cumsum(self.transitions, axis=1),
                np.cumsum(self.emissions, axis=1),
            )
        return self._cum

    def sample_symbols(self, rng: np.random.Generator, max_length: int) -> list[int]:
        cum_start, cum_trans, cum_emit = self._cumulatives()

        def draw(cum):
            return min(int(np.searchsorted(cum, rng.random(), side="right")),
                       len(cum) - 1)

        state = draw(cum_start)
        symbols = [draw(cum_emit[state])]
        while len(symbols) < max_length:
            if rng.random() < self.stop_prob:
                break
            state = draw(cum_trans[state])
            symbols.append(draw(cum_emit[state]))
        return symbols

    def sentence_log_prob(self, symbols: list[int], max_length: int) -> float:
        """Exact log P(sentence) via the forward algorithm, length included."""
        m = len(symbols)
        if m == 0 or m > max_length:
            raise InputError(f"sentence length {m} outside 1..{max_length}")
        alpha = self.start_probs * self.emissions[:, symbols[0]]
        for sym in symbols[1:]:
            alpha = (alpha @ self.transitions) * self.emissions[:, sym]
        log_path = np.log(alpha.sum())
        continue_terms = (m - 1) * np.log1p(-self.stop_prob)
        stop_term = np.log(self.stop_prob) if m < max_length else 0.0
        return float(log_path + continue_terms + stop_term)

    def corpus_nll(self, corpus: Corpus, max_length: int) -> float:
        """Mean per-sentence negative log-likelihood under the oracle."""
        offsets = [[t - N_RESERVED for t in sent] for sent in corpus.sentences]
        return -float(
            np.mean([self.sentence_log_prob(s, max_length) for s in offsets])
        )


def generate_hmm_corpus(oracle: HmmOracle, count: int, max_length: int,
                        seed: int) -> Corpus:
    check_count(count, "count")
    check_count(max_length, "max_length")
    rng = check_random_state(seed)
    width = len(str(oracle.n_symbols - 1))
    vocab = Vocabulary.from_content_tokens(
        [f"w{sym:0{width}d}" for sym in range(oracle.n_symbols)]
    )
    sentences = [
        [sym + N_RESERVED for sym in oracle.sample_symbols(rng, max_length)]
        for _ in range(count)
    ]
    return Corpus(sentences=sentences, vocab=vocab, split="train")
