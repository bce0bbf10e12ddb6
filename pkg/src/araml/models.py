"""Recurrent sequence models: the generator, the discriminator, their losses.

Both models are gated recurrent (GRU) stacks over a shared token-id space.
The generator is an autoregressive language model (optionally seeded from an
encoder over a context sentence); the discriminator encodes a sequence and
squashes a small MLP head through a sigmoid, so scores live strictly in
(0, 1).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, PAD, SEP
from .errors import ContractError, InputError, ShapeError
from .tensor import Tensor
from .validation import check_random_state, check_weights

INIT_SCALE = 0.08
_ONE = Tensor(1.0)


@dataclass
class SentenceBatch:
    """Padded token matrix plus per-sentence lengths and optional extras."""

    tokens: np.ndarray
    lengths: np.ndarray
    weights: np.ndarray | None = None
    context_tokens: np.ndarray | None = None
    context_lengths: np.ndarray | None = None

    @classmethod
    def from_sentences(cls, sentences, contexts=None, weights=None) -> "SentenceBatch":
        tokens, lengths = _pad(sentences)
        ctx_tokens = ctx_lengths = None
        if contexts is not None:
            if len(contexts) != len(sentences):
                raise InputError("one context per sentence required")
            ctx_tokens, ctx_lengths = _pad(contexts)
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != (len(sentences),):
                raise ShapeError("weights must align with sentences")
            if np.any(weights < 0) or not np.all(np.isfinite(weights)):
                raise InputError("weights must be finite and non-negative")
        return cls(tokens, lengths, weights, ctx_tokens, ctx_lengths)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def paired(self) -> bool:
        return self.context_tokens is not None


def _pad(sentences) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in sentences], dtype=np.int64)
    width = int(lengths.max()) if len(lengths) else 0
    tokens = np.full((len(sentences), width), PAD, dtype=np.int64)
    for i, sent in enumerate(sentences):
        tokens[i, : len(sent)] = sent
    return tokens, lengths


def _param(rng, shape, name: str) -> Tensor:
    return Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape),
                  requires_grad=True, name=name)


class GruCell:
    """Single gated recurrent cell; parameters are plain named tensors."""

    def __init__(self, rng, in_dim: int, hidden_dim: int, prefix: str):
        self.hidden_dim = hidden_dim
        self.w_xz = _param(rng, (in_dim, hidden_dim), f"{prefix}.w_xz")
        self.w_hz = _param(rng, (hidden_dim, hidden_dim), f"{prefix}.w_hz")
        self.b_z = _param(rng, (hidden_dim,), f"{prefix}.b_z")
        self.w_xr = _param(rng, (in_dim, hidden_dim), f"{prefix}.w_xr")
        self.w_hr = _param(rng, (hidden_dim, hidden_dim), f"{prefix}.w_hr")
        self.b_r = _param(rng, (hidden_dim,), f"{prefix}.b_r")
        self.w_xc = _param(rng, (in_dim, hidden_dim), f"{prefix}.w_xc")
        self.w_hc = _param(rng, (hidden_dim, hidden_dim), f"{prefix}.w_hc")
        self.b_c = _param(rng, (hidden_dim,), f"{prefix}.b_c")

    def parameters(self) -> list[Tensor]:
        return [self.w_xz, self.w_hz, self.b_z, self.w_xr, self.w_hr, self.b_r,
                self.w_xc, self.w_hc, self.b_c]

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        z = T.sigmoid(T.add(T.add(T.matmul(x, self.w_xz), T.matmul(h, self.w_hz)), self.b_z))
        r = T.sigmoid(T.add(T.add(T.matmul(x, self.w_xr), T.matmul(h, self.w_hr)), self.b_r))
        c = T.tanh(
            T.add(T.add(T.matmul(x, self.w_xc), T.matmul(T.multiply(r, h), self.w_hc)), self.b_c)
        )
        keep = T.add(T.scalar_multiply(z, -1.0), _ONE)
        return T.add(T.multiply(keep, h), T.multiply(z, c))


def _masked_update(new: Tensor, old: Tensor, mask_col: np.ndarray) -> Tensor:
    active = Tensor(mask_col[:, None])
    inactive = Tensor(1.0 - mask_col[:, None])
    return T.add(T.multiply(active, new), T.multiply(inactive, old))


class _RecurrentStack:
    """Shared plumbing for running stacked GRU layers over token columns."""

    def __init__(self, rng, vocab_size: int, embed_dim: int, hidden_dim: int,
                 n_layers: int, prefix: str):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.embedding = _param(rng, (vocab_size, embed_dim), f"{prefix}.embedding")
        self.cells = [
            GruCell(rng, embed_dim if i == 0 else hidden_dim, hidden_dim, f"{prefix}.gru{i}")
            for i in range(n_layers)
        ]

    def initial_states(self, batch_size: int) -> list[Tensor]:
        return [Tensor(np.zeros((batch_size, self.hidden_dim))) for _ in self.cells]

    def step_layers(self, token_col: np.ndarray, states: list[Tensor]) -> list[Tensor]:
        inp = T.embedding_lookup(self.embedding, token_col)
        new_states = []
        for cell, h in zip(self.cells, states):
            h_new = cell.step(inp, h)
            new_states.append(h_new)
            inp = h_new
        return new_states

    def encode(self, tokens: np.ndarray, lengths: np.ndarray) -> list[Tensor]:
        """Final hidden state per layer, respecting per-row lengths."""
        states = self.initial_states(tokens.shape[0])
        for t in range(tokens.shape[1]):
            new_states = self.step_layers(tokens[:, t], states)
            mask = (lengths > t).astype(np.float64)
            states = [_masked_update(n, o, mask) for n, o in zip(new_states, states)]
        return states


def _check_token_ids(tokens: np.ndarray, vocab_size: int) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise InputError(f"token id outside vocabulary of size {vocab_size}")


class GeneratorModel:
    """Autoregressive GRU language model, optionally context-conditioned."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden_dim: int,
                 mode: str = "unconditional", n_layers: int | None = None, rng=None):
        if mode not in ("unconditional", "conditional"):
            raise InputError(f"unknown generator mode {mode!r}")
        rng = check_random_state(rng)
        if n_layers is None:
            n_layers = 1 if mode == "unconditional" else 2
        self.mode = mode
        self.n_layers = n_layers
        self.decoder = _RecurrentStack(rng, vocab_size, embed_dim, hidden_dim,
                                       n_layers, "dec")
        self.encoder = None
        if mode == "conditional":
            self.encoder = _RecurrentStack(rng, vocab_size, embed_dim, hidden_dim,
                                           n_layers, "enc")
        self.w_out = _param(rng, (hidden_dim, vocab_size), "w_out")
        self.b_out = _param(rng, (vocab_size,), "b_out")
        self.sample_calls = 0

    @property
    def vocab_size(self) -> int:
        return self.decoder.vocab_size

    def parameters(self) -> dict[str, Tensor]:
        params = [self.decoder.embedding, self.w_out, self.b_out]
        for cell in self.decoder.cells:
            params.extend(cell.parameters())
        if self.encoder is not None:
            params.append(self.encoder.embedding)
            for cell in self.encoder.cells:
                params.extend(cell.parameters())
        return {p.name: p for p in params}

    def _initial_states(self, batch: SentenceBatch) -> list[Tensor]:
        if self.mode == "conditional":
            if not batch.paired:
                raise InputError("conditional generator needs context sentences")
            _check_token_ids(batch.context_tokens, self.vocab_size)
            return self.encoder.encode(batch.context_tokens, batch.context_lengths)
        return self.decoder.initial_states(batch.size)

    def _step_logits(self, token_col: np.ndarray, states: list[Tensor]
                     ) -> tuple[Tensor, list[Tensor]]:
        new_states = self.decoder.step_layers(token_col, states)
        logits = T.add(T.matmul(new_states[-1], self.w_out), self.b_out)
        return logits, new_states

    def log_prob(self, batch: SentenceBatch, include_end=True) -> Tensor:
        """Sum of per-step log-probabilities for each sentence.

        With include_end, the probability of stopping (the end token) is
        part of the sum; pass False to score the written tokens only, or a
        boolean row vector to mix (e.g. model samples cut off at the length
        limit carry no stop event).
        """
        _check_token_ids(batch.tokens, self.vocab_size)
        n, width = batch.tokens.shape
        if isinstance(include_end, np.ndarray):
            ends = include_end.astype(bool)
            if ends.shape != (n,):
                raise ShapeError("include_end row vector must match the batch")
        else:
            ends = np.full(n, bool(include_end))
        steps = int((batch.lengths + ends).max()) if n else 0
        if steps == 0:
            return Tensor(np.zeros(n))
        inputs = np.full((n, steps), PAD, dtype=np.int64)
        inputs[:, 0] = BOS
        inputs[:, 1 : width + 1] = batch.tokens[:, : steps - 1]
        targets = np.full((n, steps), PAD, dtype=np.int64)
        targets[:, :width] = batch.tokens[:, :steps]
        rows = np.arange(n)
        end_rows = rows[ends & (batch.lengths < steps)]
        targets[end_rows, batch.lengths[end_rows]] = EOS
        mask = np.arange(steps)[None, :] < (batch.lengths + ends)[:, None]

        states = self._initial_states(batch)
        total = None
        for t in range(steps):
            logits, states = self._step_logits(inputs[:, t], states)
            picked = T.gather_rows(T.log_softmax(logits), targets[:, t])
            term = T.multiply(picked, Tensor(mask[:, t].astype(np.float64)))
            total = term if total is None else T.add(total, term)
        return total

    def step_distributions(self, batch: SentenceBatch) -> np.ndarray:
        """Per-step next-token distributions (no gradients, for inspection)."""
        with T.no_grad():
            n, width = batch.tokens.shape
            inputs = np.full((n, width + 1), PAD, dtype=np.int64)
            inputs[:, 0] = BOS
            inputs[:, 1:] = batch.tokens
            states = self._initial_states(batch)
            out = np.empty((n, width + 1, self.vocab_size))
            for t in range(width + 1):
                logits, states = self._step_logits(inputs[:, t], states)
                out[:, t, :] = T.softmax(logits).data
        return out

    def sample(self, count: int, max_length: int, rng, contexts=None,
               return_terminated: bool = False):
        """Ancestral sampling; stops each row at the end token or max_length.

        With return_terminated, also returns which rows stopped by drawing
        the end token rather than hitting the length limit.
        """
        if count < 1 or max_length < 1:
            raise ContractError("count and max_length must be >= 1")
        rng = check_random_state(rng)
        self.sample_calls += 1
        with T.no_grad():
            if self.mode == "conditional":
                if contexts is None:
                    raise InputError("conditional generator needs contexts to sample")
                if len(contexts) != count:
                    raise InputError("need exactly one context per requested sample")
                ctx_tokens, ctx_lengths = _pad(contexts)
                _check_token_ids(ctx_tokens, self.vocab_size)
                states = self.encoder.encode(ctx_tokens, ctx_lengths)
            else:
                states = self.decoder.initial_states(count)
            current = np.full(count, BOS, dtype=np.int64)
            done = np.zeros(count, dtype=bool)
            rows: list[list[int]] = [[] for _ in range(count)]
            for _ in range(max_length):
                logits, states = self._step_logits(current, states)
                probs = T.softmax(logits).data
                draws = rng.random(count)
                nxt = np.minimum(
                    (probs.cumsum(axis=1) < draws[:, None]).sum(axis=1),
                    self.vocab_size - 1,
                )
                for i in range(count):
                    if done[i]:
                        continue
                    if nxt[i] == EOS:
                        done[i] = True
                    else:
                        rows[i].append(int(nxt[i]))
                if done.all():
                    break
                current = np.where(done, PAD, nxt)
        if return_terminated:
            return rows, done.copy()
        return rows

    def clone(self) -> "GeneratorModel":
        dup = GeneratorModel(self.vocab_size, self.decoder.embed_dim,
                             self.decoder.hidden_dim, self.mode, self.n_layers,
                             rng=np.random.default_rng(0))
        own = self.parameters()
        for name, p in dup.parameters().items():
            p.data = own[name].data.copy()
        return dup

    def params_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.parameters()):
            h.update(self.parameters()[name].data.tobytes())
        return h.hexdigest()


class DiscriminatorModel:
    """GRU encoder with a small tanh MLP head squashed by a sigmoid."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden_dim: int,
                 mode: str = "unconditional", rng=None):
        rng = check_random_state(rng)
        self.mode = mode
        self.encoder = _RecurrentStack(rng, vocab_size, embed_dim, hidden_dim, 1, "dis")
        self.w_mlp = _param(rng, (hidden_dim, hidden_dim), "dis.w_mlp")
        self.b_mlp = _param(rng, (hidden_dim,), "dis.b_mlp")
        self.w_score = _param(rng, (hidden_dim, 1), "dis.w_score")
        self.b_score = _param(rng, (1,), "dis.b_score")

    @property
    def vocab_size(self) -> int:
        return self.encoder.vocab_size

    def parameters(self) -> dict[str, Tensor]:
        params = [self.encoder.embedding, self.w_mlp, self.b_mlp,
                  self.w_score, self.b_score]
        for cell in self.encoder.cells:
            params.extend(cell.parameters())
        return {p.name: p for p in params}

    def _sequence(self, batch: SentenceBatch) -> tuple[np.ndarray, np.ndarray]:
        if self.mode != "conditional" or not batch.paired:
            return batch.tokens, batch.lengths
        # conditional pairs are scored as one sequence: context <sep> response
        rows = []
        for i in range(batch.size):
            ctx = batch.context_tokens[i, : batch.context_lengths[i]]
            sent = batch.tokens[i, : batch.lengths[i]]
            rows.append(np.concatenate([ctx, [SEP], sent]).astype(np.int64))
        return _pad(rows)

    def score(self, batch: SentenceBatch) -> Tensor:
        tokens, lengths = self._sequence(batch)
        _check_token_ids(tokens, self.vocab_size)
        final = self.encoder.encode(tokens, lengths)[-1]
        hidden = T.tanh(T.add(T.matmul(final, self.w_mlp), self.b_mlp))
        squashed = T.sigmoid(T.add(T.matmul(hidden, self.w_score), self.b_score))
        return T.tensor_sum(squashed, axis=1)

    def params_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.parameters()):
            h.update(self.parameters()[name].data.tobytes())
        return h.hexdigest()


class ConstantDiscriminator:
    """Stand-in discriminator that scores every input the same."""

    def __init__(self, value: float = 0.5):
        if not 0.0 < value < 1.0:
            raise ContractError("constant score must lie in (0, 1)")
        self.value = value

    def score(self, batch: SentenceBatch) -> Tensor:
        return Tensor(np.full(batch.size, self.value))

    def parameters(self) -> dict[str, Tensor]:
        return {}


def save_generator(path, model: GeneratorModel, metadata: dict | None = None) -> None:
    meta = {
        "kind": "generator",
        "mode": model.mode,
        "vocab_size": model.vocab_size,
        "embed_dim": model.decoder.embed_dim,
        "hidden_dim": model.decoder.hidden_dim,
        "n_layers": model.n_layers,
    }
    meta.update(metadata or {})
    from .tensor import save_checkpoint

    save_checkpoint(path, model.parameters(), meta)


def load_generator(path) -> tuple[GeneratorModel, dict]:
    from .tensor import load_checkpoint

    params, meta = load_checkpoint(path)
    if meta.get("kind") != "generator":
        raise InputError(f"{path} does not hold a generator checkpoint")
    model = GeneratorModel(
        meta["vocab_size"], meta["embed_dim"], meta["hidden_dim"], meta["mode"],
        meta["n_layers"], rng=np.random.default_rng(0),
    )
    own = model.parameters()
    if set(own) != set(params):
        raise InputError("checkpoint parameters do not match the model layout")
    for name, tensor in own.items():
        if tensor.data.shape != params[name].shape:
            raise InputError(f"checkpoint parameter {name} has the wrong shape")
        tensor.data = params[name].copy()
    return model, meta


def generator_log_prob(model: GeneratorModel, batch: SentenceBatch,
                       include_end: bool = True) -> Tensor:
    return model.log_prob(batch, include_end=include_end)


def generator_sample(model: GeneratorModel, count: int, max_length: int, rng,
                     contexts=None) -> list[list[int]]:
    return model.sample(count, max_length, rng, contexts=contexts)


def discriminator_score(model, batch: SentenceBatch) -> Tensor:
    return model.score(batch)


def discriminator_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """Least-squares objective: 0.5*mean((real-1)^2) + 0.5*mean(fake^2)."""
    if real_scores.size == 0 or fake_scores.size == 0:
        raise ContractError("discriminator loss needs non-empty score vectors")
    real_gap = T.add(real_scores, Tensor(-1.0))
    real_term = T.scalar_multiply(T.tensor_mean(T.multiply(real_gap, real_gap)), 0.5)
    fake_term = T.scalar_multiply(T.tensor_mean(T.multiply(fake_scores, fake_scores)), 0.5)
    return T.add(real_term, fake_term)


def weighted_mle_loss(log_probs: Tensor, weights) -> Tensor:
    """Self-normalized weighted negative log-likelihood.

    Weights are normalized through a softmax over their logs, which is the
    plain w / sum(w) up to rounding but makes any constant weight vector
    reduce to exactly uniform 1/n.
    """
    w = check_weights(weights)
    if w.shape != log_probs.shape:
        raise ShapeError(f"weights {w.shape} do not match log-probs {log_probs.shape}")
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    log_w -= log_w.max()
    normalized = np.exp(log_w)
    normalized /= normalized.sum()
    return T.scalar_multiply(T.tensor_sum(T.multiply(log_probs, Tensor(normalized))), -1.0)
