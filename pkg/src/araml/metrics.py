"""Quality, diversity and cross-seed stability metrics.

Forward perplexity scores generated text with a model fit on real data
(fluency); reverse perplexity fits on the generated text and scores real
test data, which punishes mode collapse; Self-BLEU scores each sentence
against all others in its own collection (higher = less diverse).
"""
from __future__ import annotations

from bisect import bisect_left, bisect_right
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, InputError
from .ngram import NGramLanguageModel

BLEU_EPS = 1e-9
FINAL_WINDOW = 10
STABILITY_METRICS = ("g_loss", "d_loss", "ppl_f", "ppl_r", "sbleu2", "sbleu3", "sbleu4")
MIN_REVERSE_CORPUS = 100


@dataclass
class MetricReport:
    ppl_f: float
    ppl_r: float
    sbleu2: float
    sbleu3: float
    sbleu4: float
    sample_count: int
    seed: int
    iteration: int

    def __post_init__(self):
        if self.ppl_f < 1.0 or self.ppl_r < 1.0:
            raise ContractError("perplexities are bounded below by 1")
        for v in (self.sbleu2, self.sbleu3, self.sbleu4):
            if not 0.0 <= v <= 1.0:
                raise ContractError("Self-BLEU values live in [0, 1]")


def forward_perplexity(real_train, generated, vocab_size: int, order: int = 2,
                       k: float = 0.01, lm: NGramLanguageModel | None = None) -> float:
    """Perplexity of generated text under a model fit on real training data."""
    if len(generated) == 0:
        raise InputError("generated corpus is empty")
    if lm is None:
        if len(real_train) == 0:
            raise InputError("real training corpus is empty")
        lm = NGramLanguageModel(vocab_size=vocab_size, order=order, k=k).fit(real_train)
    return lm.perplexity(generated)


def reverse_perplexity(real_test, generated, vocab_size: int, order: int = 2,
                       k: float = 0.01, min_generated: int = MIN_REVERSE_CORPUS) -> float:
    """Perplexity of real test data under a model fit on generated text."""
    if len(real_test) == 0:
        raise InputError("real test corpus is empty")
    if len(generated) < min_generated:
        raise InputError(
            f"need >= {min_generated} generated sentences to fit the reverse model, "
            f"got {len(generated)}"
        )
    lm = NGramLanguageModel(vocab_size=vocab_size, order=order, k=k).fit(generated)
    return lm.perplexity(real_test)


def _grams(sent, n: int) -> Counter:
    return Counter(tuple(sent[i : i + n]) for i in range(len(sent) - n + 1))


def _closest_ref_length(sorted_lengths, length_counts, own: int) -> int:
    # references exclude the hypothesis itself; ties prefer the shorter length
    if length_counts[own] >= 2:
        return own
    candidates = []
    left = bisect_left(sorted_lengths, own) - 1
    if left >= 0:
        candidates.append(sorted_lengths[left])
    right = bisect_right(sorted_lengths, own)
    if right < len(sorted_lengths):
        candidates.append(sorted_lengths[right])
    return min(candidates, key=lambda r: (abs(r - own), r))


def self_bleu(sentences, max_n: int = 4) -> dict[int, float]:
    """Mean BLEU-n of each sentence against all the others, n = 2..max_n.

    Modified n-gram precision clips counts against the most generous other
    sentence; zero clipped counts are floored at a tiny epsilon so short or
    disjoint corpora stay finite.
    """
    if len(sentences) < 2:
        raise InputError("Self-BLEU needs at least two sentences")
    if max_n not in (2, 3, 4):
        raise InputError("max_n must be 2, 3 or 4")
    counts = [[_grams(sent, n) for n in range(1, max_n + 1)] for sent in sentences]

    # For each n-gram keep the two largest per-sentence counts so "max over
    # all other sentences" is a lookup instead of a scan.
    top2: list[dict] = [{} for _ in range(max_n)]
    for i, per_n in enumerate(counts):
        for n_idx, grams in enumerate(per_n):
            table = top2[n_idx]
            for gram, c in grams.items():
                best = table.get(gram)
                if best is None:
                    table[gram] = (c, i, 0)
                elif c > best[0]:
                    table[gram] = (c, i, best[0])
                elif c > best[2]:
                    table[gram] = (best[0], best[1], c)

    lengths = sorted(len(s) for s in sentences)
    length_counts = Counter(lengths)

    totals = {n: 0.0 for n in range(2, max_n + 1)}
    for i, sent in enumerate(sentences):
        log_precisions = []
        for n_idx in range(max_n):
            clipped = 0
            total = 0
            for gram, c in counts[i][n_idx].items():
                best, owner, second = top2[n_idx][gram]
                limit = second if owner == i else best
                clipped += min(c, limit)
                total += c
            numerator = clipped if clipped > 0 else BLEU_EPS
            denominator = total if total > 0 else BLEU_EPS
            log_precisions.append(np.log(numerator / denominator))
        own = len(sent)
        ref = _closest_ref_length(lengths, length_counts, own)
        if own == 0:
            bp = 0.0 if ref > 0 else 1.0
        else:
            bp = 1.0 if own > ref else float(np.exp(1.0 - ref / own))
        for n in range(2, max_n + 1):
            totals[n] += bp * float(np.exp(np.mean(log_precisions[:n])))
    return {n: totals[n] / len(sentences) for n in totals}


@dataclass
class StabilityReport:
    """Across-seed spread of every metric for one trainer."""

    trainer: str
    n_seeds: int
    iterations: np.ndarray
    per_iteration: dict[str, dict[str, np.ndarray]]
    final_window: dict[str, tuple[float, float]]

    def to_csv_rows(self) -> list[str]:
        rows = []
        for metric in STABILITY_METRICS:
            mean, std = self.final_window[metric]
            rows.append(f"{self.trainer},{metric},{mean:.6g},{std:.6g},{self.n_seeds}")
        return rows


def stability_stats(runs, window: int = FINAL_WINDOW) -> StabilityReport:
    """Population mean/std per metric per iteration across matched seeds.

    Runs must share every config field except the seed.  The final-window
    figure averages each run's last `window` eval points first, then takes
    the across-run spread.
    """
    if len(runs) < 2:
        raise ContractError("stability needs at least two runs")
    reference = replace(runs[0].config, seed=0)
    for run in runs[1:]:
        if replace(run.config, seed=0) != reference:
            raise ContractError("runs differ in more than the seed")
    grids = [tuple(r.iteration for r in run.records) for run in runs]
    if len(set(grids)) != 1:
        raise ContractError("runs recorded metrics on different iteration grids")

    iterations = np.array(grids[0])
    per_iteration: dict[str, dict[str, np.ndarray]] = {}
    final_window: dict[str, tuple[float, float]] = {}
    for metric in STABILITY_METRICS:
        values = np.array(
            [[getattr(rec, metric) for rec in run.records] for run in runs]
        )
        per_iteration[metric] = {
            "mean": values.mean(axis=0),
            "std": values.std(axis=0),
        }
        tail = values[:, -window:].mean(axis=1)
        final_window[metric] = (float(tail.mean()), float(tail.std()))
    return StabilityReport(
        trainer=runs[0].config.trainer,
        n_seeds=len(runs),
        iterations=iterations,
        per_iteration=per_iteration,
        final_window=final_window,
    )


def hamming_audit(samples) -> int:
    """Count samples whose perturbed/original Hamming distance is not d."""
    violations = 0
    for s in samples:
        if len(s.original) != len(s.perturbed):
            violations += 1
            continue
        distance = sum(a != b for a, b in zip(s.original, s.perturbed))
        if distance != s.distance:
            violations += 1
    return violations
