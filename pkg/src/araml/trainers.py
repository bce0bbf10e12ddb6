"""Training loops: MLE pretraining plus the adversarial trainers.

All trainers share one loop skeleton so their degeneracies are exact: with a
constant-score discriminator the reward-weighted trainer reproduces the
static-weight trainer bit for bit, and with the temperature driven to zero
the static-weight trainer reproduces plain MLE.  Randomness flows from the
run seed through named sub-streams (model init, sampler, shuffling, model
sampling, evaluation), so consuming extra draws in one component never
shifts another.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .corpus import Corpus
from .errors import ContractError, InputError, NumericError
from .metrics import reverse_perplexity, self_bleu
from .models import (
    ConstantDiscriminator,
    DiscriminatorModel,
    GeneratorModel,
    SentenceBatch,
    discriminator_loss,
    weighted_mle_loss,
)
from .ngram import NGramLanguageModel
from .sampler import SamplerConfig, augment_corpus
from .tensor import (
    Adam,
    Tape,
    Tensor,
    backward,
    multiply,
    no_grad,
    scalar_multiply,
    tensor_sum,
)
from .validation import check_random_state, named_stream

logger = logging.getLogger(__name__)

TRAINER_KINDS = ("mle", "raml", "araml", "maligan", "seqgan-pg")
TRAIN_CSV_HEADER = "iter,g_loss,d_loss,ppl_f,ppl_r,sbleu2,sbleu3,sbleu4,seed,trainer"

_POOLED = ("mle", "raml", "araml")
_ADVERSARIAL = ("araml", "maligan", "seqgan-pg")


@dataclass
class TrainingConfig:
    """Knobs for one training run; defaults follow the small-corpus setup."""

    trainer: str = "araml"
    n_iters: int = 200
    g_steps: int = 1
    d_steps: int = 1
    batch_size: int = 100
    lr_g: float = 0.001
    lr_d: float = 0.0001
    tau: float = 0.85
    sampling_size: int = 5
    strategy: str = "random"
    max_edit_cap: int | None = None
    embed_dim: int = 128
    hidden_dim: int = 128
    gen_layers: int | None = None
    mode: str = "unconditional"
    seed: int = 0
    pretrain_epochs_g: int | None = None
    pretrain_epochs_d: int | None = None
    pretrain_epochs_lm: int | None = None
    lm_order: int = 2
    lm_k: float = 0.01
    eval_every: int | None = None
    eval_samples: int = 200
    max_sample_length: int | None = None
    freeze_discriminator: bool = False
    freeze_augmentation: bool = False
    pg_baseline: str = "batch-mean"
    record_protocol: bool = False

    def __post_init__(self):
        if self.trainer not in TRAINER_KINDS:
            raise InputError(f"trainer must be one of {TRAINER_KINDS}")
        if self.n_iters < 0 or self.g_steps < 1 or self.d_steps < 0:
            raise ContractError("n_iters >= 0, g_steps >= 1, d_steps >= 0 required")
        if self.batch_size < 1 or self.sampling_size < 1 or self.eval_samples < 2:
            raise ContractError("batch_size, sampling_size, eval_samples too small")
        if self.lr_g <= 0 or self.lr_d <= 0 or self.tau <= 0:
            raise ContractError("learning rates and tau must be positive")
        if self.mode not in ("unconditional", "conditional"):
            raise InputError(f"unknown mode {self.mode!r}")
        if self.pg_baseline not in ("batch-mean", "none"):
            raise InputError("pg_baseline must be 'batch-mean' or 'none'")

    def resolved_eval_every(self) -> int:
        if self.eval_every is not None:
            return max(1, self.eval_every)
        return max(1, self.n_iters // 50)


@dataclass
class MetricRecord:
    iteration: int
    g_loss: float
    d_loss: float
    ppl_f: float
    ppl_r: float
    sbleu2: float
    sbleu3: float
    sbleu4: float
    wall_clock: float


@dataclass
class TrainRun:
    """Everything one (config, seed) training produced."""

    config: TrainingConfig
    records: list[MetricRecord]
    generator: GeneratorModel
    discriminator: DiscriminatorModel | None
    pretrain_perplexities: list[float]
    g_phase_sample_calls: int = 0
    aborted: bool = False
    diagnostic: str | None = None
    protocol_log: list = field(default_factory=list)

    def to_csv(self) -> str:
        rows = [TRAIN_CSV_HEADER]
        for r in self.records:
            rows.append(
                f"{r.iteration},{r.g_loss:.6g},{r.d_loss:.6g},{r.ppl_f:.6g},"
                f"{r.ppl_r:.6g},{r.sbleu2:.6g},{r.sbleu3:.6g},{r.sbleu4:.6g},"
                f"{self.config.seed},{self.config.trainer}"
            )
        return "\n".join(rows) + "\n"


def default_pretrain_epochs(corpus: Corpus) -> tuple[int, int, int]:
    """Table-style defaults (50/15/50) scaled down for very small corpora."""
    n_bytes = sum(
        len(" ".join(corpus.vocab.decode(s))) + 1 for s in corpus.sentences
    )
    cap = max(1, int(10 * n_bytes / 1024))
    return min(50, cap), min(15, cap), min(50, cap)


def maligan_weight(scores, eps: float = 1e-6) -> np.ndarray:
    """Odds-ratio weights D/(1-D), clamped then normalized to sum 1."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ContractError("cannot weight an empty batch")
    clamped = np.clip(scores, eps, 1.0 - eps)
    odds = clamped / (1.0 - clamped)
    return odds / odds.sum()


class _Cycler:
    """Shuffled cycling over pool indices; runs a hook at each epoch wrap."""

    def __init__(self, size: int, rng: np.random.Generator, on_epoch=None):
        self.size = size
        self.rng = rng
        self.on_epoch = on_epoch
        self._order: np.ndarray | None = None
        self._pos = 0

    def next(self, count: int) -> list[int]:
        out: list[int] = []
        while len(out) < count:
            if self._order is None or self._pos >= self.size:
                if self._order is not None and self.on_epoch is not None:
                    self.on_epoch()
                self._order = self.rng.permutation(self.size)
                self._pos = 0
            take = min(count - len(out), self.size - self._pos)
            out.extend(self._order[self._pos : self._pos + take].tolist())
            self._pos += take
        return out


def _uniform_weights(n: int) -> np.ndarray:
    return np.ones(n)


def pretrain_generator(model: GeneratorModel, sentences, epochs: int, lr: float,
                       batch_size: int, rng, contexts=None) -> list[float]:
    """MLE epochs; returns the per-epoch training perplexity trace."""
    if epochs < 0:
        raise ContractError("epochs must be >= 0")
    if len(sentences) == 0:
        raise InputError("cannot pretrain on an empty corpus")
    rng = check_random_state(rng)
    adam = Adam(list(model.parameters().values()), lr)
    history: list[float] = []
    n = len(sentences)
    for _ in range(epochs):
        order = rng.permutation(n)
        total_nll = 0.0
        total_tokens = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = SentenceBatch.from_sentences(
                [sentences[i] for i in idx],
                contexts=[contexts[i] for i in idx] if contexts is not None else None,
            )
            with Tape() as tape:
                log_probs = model.log_prob(batch)
                loss = weighted_mle_loss(log_probs, _uniform_weights(len(idx)))
                backward(tape, loss)
            adam.step()
            total_nll -= float(log_probs.data.sum())
            total_tokens += int((batch.lengths + 1).sum())
        history.append(float(np.exp(total_nll / total_tokens)))
    return history


def pretrain_discriminator(d_model, g_model: GeneratorModel, sentences, epochs: int,
                           lr: float, batch_size: int, max_length: int,
                           shuffle_rng, sample_rng, contexts=None) -> list[float]:
    """Least-squares epochs on real data versus fresh generator samples."""
    if epochs < 0:
        raise ContractError("epochs must be >= 0")
    if isinstance(d_model, ConstantDiscriminator) or epochs == 0:
        return []
    adam = Adam(list(d_model.parameters().values()), lr)
    history: list[float] = []
    n = len(sentences)
    for _ in range(epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch_contexts = (
                [contexts[i] for i in idx] if contexts is not None else None
            )
            real = SentenceBatch.from_sentences(
                [sentences[i] for i in idx], contexts=batch_contexts
            )
            fake_rows = g_model.sample(len(idx), max_length, sample_rng,
                                       contexts=batch_contexts)
            fake = SentenceBatch.from_sentences(fake_rows, contexts=batch_contexts)
            with Tape() as tape:
                loss = discriminator_loss(d_model.score(real), d_model.score(fake))
                backward(tape, loss)
            adam.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return history


class _Loop:
    """One full training run for any trainer kind."""

    def __init__(self, config: TrainingConfig, corpus: Corpus,
                 eval_corpus: Corpus | None = None, on_eval=None):
        if len(corpus) == 0:
            raise InputError("training corpus is empty")
        if (config.mode == "conditional") != corpus.paired:
            raise InputError("corpus pairing does not match the configured mode")
        if eval_corpus is not None and eval_corpus.paired != corpus.paired:
            raise InputError("eval corpus pairing does not match the training corpus")
        self.config = config
        self.corpus = corpus
        self.eval_corpus = eval_corpus
        self.on_eval = on_eval
        self.vocab_size = corpus.vocab.size
        self.max_length = config.max_sample_length or max(
            1, max(len(s) for s in corpus.sentences)
        )
        self.streams = {
            name: named_stream(config.seed, name)
            for name in ("model-init-g", "model-init-d", "sampler", "g-shuffle",
                         "d-shuffle", "gen-sample", "g-context", "eval")
        }
        self.run: TrainRun | None = None

    # -- setup ---------------------------------------------------------

    def _build_models(self):
        cfg = self.config
        self.generator = GeneratorModel(
            self.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.mode,
            cfg.gen_layers, rng=self.streams["model-init-g"],
        )
        self.discriminator = None
        if cfg.trainer in _ADVERSARIAL:
            if cfg.freeze_discriminator:
                self.discriminator = ConstantDiscriminator(0.5)
                if cfg.trainer == "maligan":
                    logger.warning(
                        "maligan with a constant-score discriminator degenerates "
                        "to MLE on the generator's own samples"
                    )
            else:
                self.discriminator = DiscriminatorModel(
                    self.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.mode,
                    rng=self.streams["model-init-d"],
                )

    def _pretrain(self):
        cfg = self.config
        g_def, d_def, _ = default_pretrain_epochs(self.corpus)
        g_epochs = g_def if cfg.pretrain_epochs_g is None else cfg.pretrain_epochs_g
        d_epochs = d_def if cfg.pretrain_epochs_d is None else cfg.pretrain_epochs_d
        self.pretrain_perplexities = pretrain_generator(
            self.generator, self.corpus.sentences, g_epochs, cfg.lr_g,
            cfg.batch_size, self.streams["g-shuffle"], contexts=self.corpus.contexts,
        )
        self.last_g_loss = (
            float(np.log(self.pretrain_perplexities[-1]))
            if self.pretrain_perplexities else 0.0
        )
        self.last_d_loss = 0.0
        if isinstance(self.discriminator, DiscriminatorModel):
            d_history = pretrain_discriminator(
                self.discriminator, self.generator, self.corpus.sentences, d_epochs,
                cfg.lr_d, cfg.batch_size, self.max_length,
                self.streams["d-shuffle"], self.streams["gen-sample"],
                contexts=self.corpus.contexts,
            )
            if d_history:
                self.last_d_loss = d_history[-1]

    def _build_language_model(self):
        # one count model serves both constrained sampling and PPL-F
        cfg = self.config
        self.lm = NGramLanguageModel(
            vocab_size=self.vocab_size, order=cfg.lm_order, k=cfg.lm_k
        ).fit(self.corpus.sentences)

    def _rebuild_pool(self):
        cfg = self.config
        if cfg.trainer == "mle":
            self.pool = [
                (tuple(s), i) for i, s in enumerate(self.corpus.sentences)
            ]
            return
        samples = augment_corpus(
            self.corpus.sentences,
            SamplerConfig(tau=cfg.tau, strategy=cfg.strategy,
                          samples_per_datum=cfg.sampling_size,
                          max_edit_cap=cfg.max_edit_cap),
            self.vocab_size,
            self.streams["sampler"],
            lm=self.lm if cfg.strategy == "constrained" else None,
        )
        self.pool = [
            (s.perturbed, idx // cfg.sampling_size) for idx, s in enumerate(samples)
        ]

    def _setup(self):
        cfg = self.config
        self._build_models()
        self._build_language_model()
        self._pretrain()
        self.pool = []
        if cfg.trainer in _POOLED:
            self._rebuild_pool()
            on_epoch = None
            if cfg.trainer != "mle" and not cfg.freeze_augmentation:
                on_epoch = self._rebuild_pool
            self.g_cycler = _Cycler(len(self.pool), self.streams["g-shuffle"], on_epoch)
        self.d_cycler = _Cycler(len(self.corpus), self.streams["d-shuffle"])
        self.ctx_cycler = _Cycler(len(self.corpus), self.streams["g-context"])
        self.adam_g = Adam(list(self.generator.parameters().values()), cfg.lr_g)
        self.adam_d = None
        if isinstance(self.discriminator, DiscriminatorModel):
            self.adam_d = Adam(list(self.discriminator.parameters().values()), cfg.lr_d)
        self.eval_lm = self.lm
        eval_source = self.eval_corpus if self.eval_corpus is not None else self.corpus
        self.eval_sentences = eval_source.sentences
        self.eval_contexts = eval_source.contexts
        self.g_phase_sample_calls = 0
        self.protocol_log: list = []

    # -- steps ---------------------------------------------------------

    def _pool_batch(self) -> tuple[SentenceBatch, list[int]]:
        idx = self.g_cycler.next(self.config.batch_size)
        entries = [self.pool[i] for i in idx]
        contexts = None
        if self.corpus.paired:
            contexts = [self.corpus.contexts[src] for _, src in entries]
        batch = SentenceBatch.from_sentences(
            [list(sent) for sent, _ in entries], contexts=contexts
        )
        return batch, idx

    def _sampled_batch(self, model: GeneratorModel) -> tuple[SentenceBatch, np.ndarray]:
        contexts = None
        if self.corpus.paired:
            ctx_idx = self.ctx_cycler.next(self.config.batch_size)
            contexts = [self.corpus.contexts[i] for i in ctx_idx]
        rows, terminated = model.sample(self.config.batch_size, self.max_length,
                                        self.streams["gen-sample"],
                                        contexts=contexts, return_terminated=True)
        return SentenceBatch.from_sentences(rows, contexts=contexts), terminated

    def _scores(self, batch: SentenceBatch) -> np.ndarray:
        with no_grad():
            return self.discriminator.score(batch).data.copy()

    def _generator_step(self, iteration: int, frozen: GeneratorModel | None) -> float:
        cfg = self.config
        kind = cfg.trainer
        if kind in _POOLED:
            batch, _ = self._pool_batch()
            if kind == "araml":
                weights = np.exp(self._scores(batch))
            else:
                weights = _uniform_weights(batch.size)
            with Tape() as tape:
                loss = weighted_mle_loss(self.generator.log_prob(batch), weights)
                backward(tape, loss)
            self.adam_g.step()
            return loss.item()

        if kind == "maligan":
            if cfg.record_protocol:
                self.protocol_log.append((iteration, frozen.params_digest()))
            batch, terminated = self._sampled_batch(frozen)
            weights = maligan_weight(self._scores(batch))
            with Tape() as tape:
                loss = weighted_mle_loss(
                    self.generator.log_prob(batch, include_end=terminated), weights
                )
                backward(tape, loss)
            self.adam_g.step()
            return loss.item()

        # seqgan-pg: sentence-level REINFORCE with a batch-mean baseline
        batch, terminated = self._sampled_batch(self.generator)
        rewards = self._scores(batch)
        advantage = rewards.copy()
        if cfg.pg_baseline == "batch-mean":
            advantage -= rewards.mean()
        with Tape() as tape:
            log_probs = self.generator.log_prob(batch, include_end=terminated)
            scaled = multiply(log_probs, Tensor(advantage / batch.size))
            loss = scalar_multiply(tensor_sum(scaled), -1.0)
            backward(tape, loss)
        self.adam_g.step()
        return loss.item()

    def _discriminator_step(self) -> float:
        idx = self.d_cycler.next(self.config.batch_size)
        contexts = (
            [self.corpus.contexts[i] for i in idx] if self.corpus.paired else None
        )
        real = SentenceBatch.from_sentences(
            [self.corpus.sentences[i] for i in idx], contexts=contexts
        )
        fake_rows = self.generator.sample(len(idx), self.max_length,
                                          self.streams["gen-sample"],
                                          contexts=contexts)
        fake = SentenceBatch.from_sentences(fake_rows, contexts=contexts)
        with Tape() as tape:
            loss = discriminator_loss(self.discriminator.score(real),
                                      self.discriminator.score(fake))
            backward(tape, loss)
        self.adam_d.step()
        return loss.item()

    # -- evaluation ----------------------------------------------------

    def _eval_record(self, iteration: int, started: float) -> MetricRecord:
        cfg = self.config
        contexts = None
        if self.corpus.paired:
            source = self.eval_contexts
            contexts = [source[i % len(source)] for i in range(cfg.eval_samples)]
        generated = self.generator.sample(cfg.eval_samples, self.max_length,
                                          self.streams["eval"], contexts=contexts)
        ppl_f = self.eval_lm.perplexity(generated)
        ppl_r = reverse_perplexity(
            self.eval_sentences, generated, self.vocab_size,
            order=cfg.lm_order, k=cfg.lm_k,
            min_generated=min(100, cfg.eval_samples),
        )
        sbleu = self_bleu(generated, max_n=4)
        record = MetricRecord(
            iteration=iteration,
            g_loss=self.last_g_loss,
            d_loss=self.last_d_loss,
            ppl_f=ppl_f,
            ppl_r=ppl_r,
            sbleu2=sbleu[2],
            sbleu3=sbleu[3],
            sbleu4=sbleu[4],
            wall_clock=time.perf_counter() - started,
        )
        for name, value in vars(record).items():
            if name != "iteration" and not np.isfinite(value):
                raise NumericError(f"metric {name} is not finite at iteration {iteration}")
        if self.on_eval is not None:
            self.on_eval(iteration, self.generator, self.discriminator, record)
        return record

    # -- driver --------------------------------------------------------

    def train(self) -> TrainRun:
        cfg = self.config
        started = time.perf_counter()
        records: list[MetricRecord] = []
        cadence = cfg.resolved_eval_every()
        aborted = False
        diagnostic = None
        self.generator = None
        self.pretrain_perplexities = []
        self.g_phase_sample_calls = 0
        self.protocol_log = []
        self.discriminator = None
        try:
            self._setup()
            records.append(self._eval_record(0, started))
            for iteration in range(1, cfg.n_iters + 1):
                frozen = None
                if cfg.trainer == "maligan":
                    frozen = self.generator.clone()
                before = self.generator.sample_calls
                for _ in range(cfg.g_steps):
                    self.last_g_loss = self._generator_step(iteration, frozen)
                self.g_phase_sample_calls += self.generator.sample_calls - before
                if self.adam_d is not None:
                    for _ in range(cfg.d_steps):
                        self.last_d_loss = self._discriminator_step()
                if iteration % cadence == 0 or iteration == cfg.n_iters:
                    records.append(self._eval_record(iteration, started))
        except NumericError as exc:
            aborted = True
            diagnostic = str(exc)
            logger.error("training aborted: %s", exc)
        return TrainRun(
            config=cfg,
            records=records,
            generator=self.generator,
            discriminator=(
                self.discriminator
                if isinstance(self.discriminator, DiscriminatorModel) else None
            ),
            pretrain_perplexities=self.pretrain_perplexities,
            g_phase_sample_calls=self.g_phase_sample_calls,
            aborted=aborted,
            diagnostic=diagnostic,
            protocol_log=self.protocol_log,
        )


def train(config: TrainingConfig, corpus: Corpus, eval_corpus: Corpus | None = None,
          on_eval=None) -> TrainRun:
    return _Loop(config, corpus, eval_corpus, on_eval).train()


def _with_kind(config: TrainingConfig, kind: str) -> TrainingConfig:
    return config if config.trainer == kind else replace(config, trainer=kind)


def mle_train(config, corpus, eval_corpus=None, on_eval=None) -> TrainRun:
    return train(_with_kind(config, "mle"), corpus, eval_corpus, on_eval)


def raml_static_train(config, corpus, eval_corpus=None, on_eval=None) -> TrainRun:
    return train(_with_kind(config, "raml"), corpus, eval_corpus, on_eval)


def araml_train(config, corpus, eval_corpus=None, on_eval=None) -> TrainRun:
    return train(_with_kind(config, "araml"), corpus, eval_corpus, on_eval)


def maligan_train(config, corpus, eval_corpus=None, on_eval=None) -> TrainRun:
    return train(_with_kind(config, "maligan"), corpus, eval_corpus, on_eval)


def policy_gradient_train(config, corpus, eval_corpus=None, on_eval=None) -> TrainRun:
    return train(_with_kind(config, "seqgan-pg"), corpus, eval_corpus, on_eval)


class _TrainerEstimator(BaseEstimator):
    """sklearn-style front end: configure in __init__, fit on a Corpus."""

    _kind = "mle"

    def __init__(self, n_iters=200, g_steps=1, d_steps=1, batch_size=100,
                 lr_g=0.001, lr_d=0.0001, tau=0.85, sampling_size=5,
                 strategy="random", max_edit_cap=None, embed_dim=128,
                 hidden_dim=128, gen_layers=None, mode="unconditional", seed=0,
                 pretrain_epochs_g=None, pretrain_epochs_d=None,
                 pretrain_epochs_lm=None, lm_order=2, lm_k=0.01, eval_every=None,
                 eval_samples=200, max_sample_length=None,
                 freeze_discriminator=False, freeze_augmentation=False,
                 pg_baseline="batch-mean", record_protocol=False):
        self.n_iters = n_iters
        self.g_steps = g_steps
        self.d_steps = d_steps
        self.batch_size = batch_size
        self.lr_g = lr_g
        self.lr_d = lr_d
        self.tau = tau
        self.sampling_size = sampling_size
        self.strategy = strategy
        self.max_edit_cap = max_edit_cap
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.gen_layers = gen_layers
        self.mode = mode
        self.seed = seed
        self.pretrain_epochs_g = pretrain_epochs_g
        self.pretrain_epochs_d = pretrain_epochs_d
        self.pretrain_epochs_lm = pretrain_epochs_lm
        self.lm_order = lm_order
        self.lm_k = lm_k
        self.eval_every = eval_every
        self.eval_samples = eval_samples
        self.max_sample_length = max_sample_length
        self.freeze_discriminator = freeze_discriminator
        self.freeze_augmentation = freeze_augmentation
        self.pg_baseline = pg_baseline
        self.record_protocol = record_protocol

    def fit(self, X: Corpus, eval_corpus: Corpus | None = None):
        config = TrainingConfig(trainer=self._kind, **self.get_params())
        self.run_ = train(config, X, eval_corpus)
        self.generator_ = self.run_.generator
        self.discriminator_ = self.run_.discriminator
        return self

    def sample(self, count: int, max_length: int = 32, seed=0, contexts=None):
        if not hasattr(self, "generator_"):
            raise ContractError("fit the trainer before sampling")
        rng = check_random_state(seed)
        return self.generator_.sample(count, max_length, rng, contexts=contexts)


class MleTrainer(_TrainerEstimator):
    _kind = "mle"


class RamlTrainer(_TrainerEstimator):
    _kind = "raml"


class AramlTrainer(_TrainerEstimator):
    _kind = "araml"


class MaliganTrainer(_TrainerEstimator):
    _kind = "maligan"


class PolicyGradientTrainer(_TrainerEstimator):
    _kind = "seqgan-pg"
