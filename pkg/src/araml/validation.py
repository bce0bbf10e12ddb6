"""Input validation helpers and seeded rng plumbing."""
from __future__ import annotations

import zlib

import numpy as np

from .errors import ContractError, InputError


def check_random_state(seed) -> np.random.Generator:
    """Accept a seed, a Generator, or None and return a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def named_stream(seed: int, name: str) -> np.random.Generator:
    """A generator for sub-purpose `name`, independent across names.

    Deriving streams from (seed, crc32(name)) keeps components decoupled:
    consuming extra draws in one stream never shifts another.
    """
    key = zlib.crc32(name.encode())
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


def check_positive(value, name: str):
    if not value > 0:
        raise ContractError(f"{name} must be positive, got {value!r}")
    return value


def check_count(value, name: str, minimum: int = 1) -> int:
    value = int(value)
    if value < minimum:
        raise ContractError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_sentences(sentences, vocab_size: int | None = None, allow_empty_corpus: bool = False):
    """Validate a list of token-id sequences; returns it unchanged."""
    if not allow_empty_corpus and len(sentences) == 0:
        raise InputError("corpus must be non-empty")
    if vocab_size is not None:
        for sent in sentences:
            for tok in sent:
                if not 0 <= tok < vocab_size:
                    raise InputError(
                        f"token id {tok} out of range for vocabulary of {vocab_size}"
                    )
    return sentences


def check_weights(weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0:
        raise ContractError("weights must be non-empty")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ContractError("weights must be finite and non-negative")
    if not np.any(weights > 0):
        raise ContractError("weights must not all be zero")
    return weights


def check_fraction(value, name: str) -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise InputError(f"{name} must lie strictly between 0 and 1, got {value}")
    return value
