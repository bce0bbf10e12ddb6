"""Count-based n-gram language model with interpolated add-k smoothing.

Used in two roles: scoring replacement candidates during constrained
sampling, and measuring forward/reverse perplexity.  Conditionals interpolate each order
with the one below, so unseen contexts back off smoothly and every token
keeps positive probability:

    P_1(w)        = (c(w) + k) / (c(.) + k*V)
    P_o(w | ctx)  = (c(ctx,w) + k*V * P_{o-1}(w | ctx[1:])) / (c(ctx) + k*V)

Sentence events are the content tokens followed by the end token; contexts
are padded on the left with the start token.
"""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .corpus import BOS, EOS
from .errors import ContractError, InputError
from .validation import check_sentences

_SUPPORTED_ORDERS = (2, 3)


class NGramLanguageModel(BaseEstimator):
    """Smoothed n-gram model over a fixed-size vocabulary.

    Parameters
    ----------
    vocab_size : total number of token ids (special tokens included).
    order : n-gram order, 2 or 3.
    k : add-k smoothing constant, > 0.
    """

    def __init__(self, vocab_size: int, order: int = 2, k: float = 0.01):
        self.vocab_size = vocab_size
        self.order = order
        self.k = k

    def _validate_params(self):
        if self.order not in _SUPPORTED_ORDERS:
            raise InputError(f"order must be one of {_SUPPORTED_ORDERS}, got {self.order}")
        if not self.k > 0:
            raise ContractError(f"smoothing constant k must be positive, got {self.k}")
        if self.vocab_size < 2:
            raise InputError("vocab_size must be at least 2")

    def fit(self, X, y=None):
        """Count n-grams of all orders <= n over token-id sentences."""
        self._validate_params()
        check_sentences(X, self.vocab_size)
        counts = [defaultdict(lambda: defaultdict(int)) for _ in range(self.order)]
        totals = [defaultdict(int) for _ in range(self.order)]
        for sent in X:
            events = list(sent) + [EOS]
            padded = [BOS] * (self.order - 1) + list(sent)
            for j, event in enumerate(events):
                for o in range(1, self.order + 1):
                    ctx = tuple(padded[j + self.order - o : j + self.order - 1])
                    counts[o - 1][ctx][event] += 1
                    totals[o - 1][ctx] += 1
        self.counts_ = [dict(by_ctx) for by_ctx in counts]
        self.totals_ = [dict(by_ctx) for by_ctx in totals]
        self._cond_cache = {}
        return self

    @classmethod
    def uniform(cls, vocab_size: int, order: int = 2, k: float = 1.0) -> "NGramLanguageModel":
        """A fitted model with no observations: every conditional is 1/V."""
        model = cls(vocab_size=vocab_size, order=order, k=k)
        model._validate_params()
        model.counts_ = [{} for _ in range(order)]
        model.totals_ = [{} for _ in range(order)]
        model._cond_cache = {}
        return model

    def _check_fitted(self):
        if not hasattr(self, "counts_"):
            raise NotFittedError("call fit() before using the language model")

    def _count_vector(self, order_idx: int, ctx: tuple) -> tuple[np.ndarray | None, int]:
        by_token = self.counts_[order_idx].get(ctx)
        total = self.totals_[order_idx].get(ctx, 0)
        if by_token is None:
            return None, 0
        vec = np.zeros(self.vocab_size)
        for token, count in by_token.items():
            vec[token] = count
        return vec, total

    def _conditional(self, ctx: tuple) -> np.ndarray:
        # cached; callers must treat the returned vector as read-only
        hit = self._cond_cache.get(ctx)
        if hit is not None:
            return hit
        if len(ctx) == 0:
            vec, total = self._count_vector(0, ())
            if vec is None:
                vec = np.zeros(self.vocab_size)
            out = (vec + self.k) / (total + self.k * self.vocab_size)
        else:
            lower = self._conditional(ctx[1:])
            vec, total = self._count_vector(len(ctx), ctx)
            if vec is None:
                out = lower
            else:
                kv = self.k * self.vocab_size
                out = (vec + kv * lower) / (total + kv)
        self._cond_cache[ctx] = out
        return out

    def conditional_distribution(self, context) -> np.ndarray:
        """P(. | context); shorter contexts use the matching lower order."""
        self._check_fitted()
        ctx = tuple(context)
        if len(ctx) > self.order - 1:
            ctx = ctx[-(self.order - 1):]
        return self._conditional(ctx)

    def word_distribution(self, left_context, right_context) -> np.ndarray:
        """Two-sided local score for filling one slot.

        Proportional to P(w | left) * P(first right token | ..., w); an
        empty left context falls back to the unigram distribution and an
        empty right context drops the second factor.
        """
        self._check_fitted()
        left = tuple(left_context)
        scores = self._conditional(left[-(self.order - 1):] if left else ())
        right = tuple(right_context)
        if right:
            follow = np.empty(self.vocab_size)
            for w in range(self.vocab_size):
                ctx = (left + (w,))[-(self.order - 1):]
                follow[w] = self._conditional(ctx)[right[0]]
            scores = scores * follow
        total = scores.sum()
        if not total > 0:
            raise ContractError("word distribution collapsed to zero mass")
        return scores / total

    def sentence_log_prob(self, sentence) -> float:
        self._check_fitted()
        events = list(sentence) + [EOS]
        padded = [BOS] * (self.order - 1) + list(sentence)
        log_p = 0.0
        for j, event in enumerate(events):
            ctx = tuple(padded[j : j + self.order - 1])
            log_p += float(np.log(self._conditional(ctx)[event]))
        return log_p

    def perplexity(self, X) -> float:
        """exp of mean negative log-probability per token, end token counted."""
        check_sentences(X, self.vocab_size)
        total_log = sum(self.sentence_log_prob(sent) for sent in X)
        total_tokens = sum(len(sent) + 1 for sent in X)
        return float(np.exp(-total_log / total_tokens))

    def save(self, path) -> None:
        self._check_fitted()
        lines = [f"order {self.order}", f"k {self.k!r}", f"vocab_size {self.vocab_size}"]
        for order_idx in range(self.order):
            for ctx in sorted(self.counts_[order_idx]):
                for token in sorted(self.counts_[order_idx][ctx]):
                    count = self.counts_[order_idx][ctx][token]
                    head = " ".join(str(c) for c in ctx)
                    lines.append((head + " " if head else "") + f"{token} {count}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NGramLanguageModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if len(lines) < 3:
            raise InputError(f"{path} is not a language model file")
        order = int(lines[0].split()[1])
        k = float(lines[1].split()[1])
        vocab_size = int(lines[2].split()[1])
        model = cls.uniform(vocab_size=vocab_size, order=order, k=k)
        counts = [defaultdict(lambda: defaultdict(int)) for _ in range(order)]
        totals = [defaultdict(int) for _ in range(order)]
        for line in lines[3:]:
            fields = [int(f) for f in line.split()]
            ctx, token, count = tuple(fields[:-2]), fields[-2], fields[-1]
            counts[len(ctx)][ctx][token] = count
            totals[len(ctx)][ctx] += count
        model.counts_ = [dict(by_ctx) for by_ctx in counts]
        model.totals_ = [dict(by_ctx) for by_ctx in totals]
        model._cond_cache = {}
        return model


def lm_train(sentences, vocab_size: int, order: int = 2, k: float = 0.01) -> NGramLanguageModel:
    return NGramLanguageModel(vocab_size=vocab_size, order=order, k=k).fit(sentences)


def lm_word_distribution(lm: NGramLanguageModel, left_context, right_context) -> np.ndarray:
    return lm.word_distribution(left_context, right_context)


def lm_perplexity(lm: NGramLanguageModel, sentences) -> float:
    return lm.perplexity(sentences)
