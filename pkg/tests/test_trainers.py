import logging
from dataclasses import replace

import numpy as np
import pytest
from sklearn.base import clone

from araml import tensor as T
from araml.corpus import BOS, EOS, Corpus, HmmOracle, Vocabulary, generate_hmm_corpus
from araml.errors import ContractError, InputError
from araml.models import (
    DiscriminatorModel,
    GeneratorModel,
    SentenceBatch,
    weighted_mle_loss,
)
from araml.tensor import Tape, backward
from araml.validation import named_stream
from araml.trainers import (
    TRAIN_CSV_HEADER,
    AramlTrainer,
    MleTrainer,
    TrainingConfig,
    araml_train,
    default_pretrain_epochs,
    maligan_train,
    maligan_weight,
    mle_train,
    policy_gradient_train,
    pretrain_discriminator,
    pretrain_generator,
    raml_static_train,
    train,
)


@pytest.fixture(scope="module")
def small_corpus():
    oracle = HmmOracle.random(3, 8, seed=1, stop_prob=0.25)
    return generate_hmm_corpus(oracle, 120, 8, seed=2)


def tiny_config(**overrides):
    base = dict(trainer="araml", n_iters=2, g_steps=1, d_steps=1, batch_size=16,
                embed_dim=8, hidden_dim=8, eval_samples=20, pretrain_epochs_g=1,
                pretrain_epochs_d=1, eval_every=1, seed=5)
    base.update(overrides)
    return TrainingConfig(**base)


class TestPretrainGenerator:
    def test_overfits_single_sentence_corpus(self):
        vocab = Vocabulary.from_content_tokens(["a", "b", "c"])
        sentence = [4, 5, 6]
        gen = GeneratorModel(vocab.size, 8, 8, rng=np.random.default_rng(0))
        pretrain_generator(gen, [sentence], 200, 0.01, 1, np.random.default_rng(1))
        rows = gen.sample(200, 6, np.random.default_rng(2))
        frequency = np.mean([row == sentence for row in rows])
        assert frequency > 0.9

    def test_training_perplexity_nonincreasing_within_tolerance(self, small_corpus):
        gen = GeneratorModel(small_corpus.vocab.size, 12, 12,
                             rng=np.random.default_rng(3))
        history = pretrain_generator(gen, small_corpus.sentences, 8, 0.003, 20,
                                     np.random.default_rng(4))
        for earlier, later in zip(history, history[1:]):
            assert later <= earlier * 1.02

    def test_first_epoch_beats_initialization(self, small_corpus):
        gen = GeneratorModel(small_corpus.vocab.size, 8, 8,
                             rng=np.random.default_rng(5))
        batch = SentenceBatch.from_sentences(small_corpus.sentences)
        with T.no_grad():
            init_loss = weighted_mle_loss(
                gen.log_prob(batch), np.ones(len(small_corpus))
            ).item()
        pretrain_generator(gen, small_corpus.sentences, 1, 0.003, 20,
                           np.random.default_rng(6))
        with T.no_grad():
            after = weighted_mle_loss(
                gen.log_prob(batch), np.ones(len(small_corpus))
            ).item()
        assert after < init_loss

    def test_zero_epochs_leave_model_unchanged(self, small_corpus):
        gen = GeneratorModel(small_corpus.vocab.size, 8, 8,
                             rng=np.random.default_rng(7))
        digest = gen.params_digest()
        history = pretrain_generator(gen, small_corpus.sentences, 0, 0.01, 16,
                                     np.random.default_rng(8))
        assert history == [] and gen.params_digest() == digest

    def test_empty_corpus_rejected(self):
        gen = GeneratorModel(6, 4, 4, rng=np.random.default_rng(0))
        with pytest.raises(InputError):
            pretrain_generator(gen, [], 1, 0.01, 4, np.random.default_rng(0))


class TestPretrainDiscriminator:
    def test_separable_data_reaches_low_loss(self):
        vocab_size = 8
        real = [[4] * 5 for _ in range(40)]
        gen = GeneratorModel(vocab_size, 6, 6, rng=np.random.default_rng(1))
        for p in gen.parameters().values():
            p.data[...] = 0.0
        gen.b_out.data[:] = -40.0
        gen.b_out.data[5] = 40.0  # fake data is token 5 repeated
        dis = DiscriminatorModel(vocab_size, 6, 6, rng=np.random.default_rng(2))
        history = pretrain_discriminator(
            dis, gen, real, 10, 0.02, 20, 5,
            np.random.default_rng(3), np.random.default_rng(4),
        )
        assert history[-1] < 0.05
        real_scores = dis.score(SentenceBatch.from_sentences(real[:10])).data
        fake_scores = dis.score(SentenceBatch.from_sentences([[5] * 5] * 10)).data
        assert real_scores.mean() > fake_scores.mean()

    def test_indistinguishable_data_hovers_near_quarter_loss(self, small_corpus):
        # generator pretrained on the same corpus: close-to-matched fakes
        gen = GeneratorModel(small_corpus.vocab.size, 12, 12,
                             rng=np.random.default_rng(5))
        pretrain_generator(gen, small_corpus.sentences, 6, 0.003, 20,
                           np.random.default_rng(6))
        dis = DiscriminatorModel(small_corpus.vocab.size, 8, 8,
                                 rng=np.random.default_rng(7))
        history = pretrain_discriminator(
            dis, gen, small_corpus.sentences, 3, 0.0005, 20, 8,
            np.random.default_rng(8), np.random.default_rng(9),
        )
        assert 0.15 < history[-1] < 0.35
        scores = dis.score(SentenceBatch.from_sentences(small_corpus.sentences)).data
        assert 0.3 < scores.mean() < 0.7

    def test_zero_epochs_unchanged(self, small_corpus):
        gen = GeneratorModel(small_corpus.vocab.size, 6, 6,
                             rng=np.random.default_rng(0))
        dis = DiscriminatorModel(small_corpus.vocab.size, 6, 6,
                                 rng=np.random.default_rng(1))
        digest = dis.params_digest()
        pretrain_discriminator(dis, gen, small_corpus.sentences, 0, 0.01, 16, 8,
                               np.random.default_rng(2), np.random.default_rng(3))
        assert dis.params_digest() == digest


class TestMaliganWeight:
    def test_uninformed_scores_give_uniform_weights(self):
        assert np.allclose(maligan_weight(np.full(4, 0.5)), 0.25)

    def test_odds_ratio_direct_case(self):
        weights = maligan_weight(np.array([0.5, 2.0 / 3.0]))
        assert weights == pytest.approx([1.0 / 3.0, 2.0 / 3.0], rel=1e-9)

    def test_extreme_scores_clamp_instead_of_overflowing(self):
        weights = maligan_weight(np.array([1.0 - 1e-12, 0.5]))
        assert np.all(np.isfinite(weights))
        assert weights.sum() == pytest.approx(1.0)

    def test_empty_batch_is_contract_error(self):
        with pytest.raises(ContractError):
            maligan_weight(np.array([]))


class TestDegeneracies:
    def test_constant_discriminator_araml_equals_static_raml(self, small_corpus):
        config = tiny_config(trainer="raml", n_iters=50, eval_every=50,
                             pretrain_epochs_d=0, sampling_size=3)
        run_raml = raml_static_train(config, small_corpus)
        run_araml = araml_train(
            replace(config, trainer="araml", freeze_discriminator=True),
            small_corpus,
        )
        pa = run_raml.generator.parameters()
        pb = run_araml.generator.parameters()
        worst = max(float(np.abs(pa[n].data - pb[n].data).max()) for n in pa)
        assert worst <= 1e-12

    def test_vanishing_temperature_raml_equals_mle(self, small_corpus):
        config = tiny_config(trainer="mle", n_iters=50, eval_every=50,
                             pretrain_epochs_d=0, sampling_size=1)
        run_mle = mle_train(config, small_corpus)
        run_raml = raml_static_train(replace(config, trainer="raml", tau=1e-3),
                                     small_corpus)
        pa = run_mle.generator.parameters()
        pb = run_raml.generator.parameters()
        worst = max(float(np.abs(pa[n].data - pb[n].data).max()) for n in pa)
        assert worst <= 1e-12

    def test_raml_constructs_no_discriminator(self, small_corpus):
        run = raml_static_train(tiny_config(trainer="raml"), small_corpus)
        assert run.discriminator is None

    def test_zero_iterations_return_pretraining_result(self, small_corpus):
        config = tiny_config(trainer="araml", n_iters=0, eval_every=1)
        run = train(config, small_corpus)
        gen = GeneratorModel(small_corpus.vocab.size, config.embed_dim,
                             config.hidden_dim,
                             rng=named_stream(config.seed, "model-init-g"))
        pretrain_generator(gen, small_corpus.sentences, 1, config.lr_g,
                           config.batch_size, named_stream(config.seed, "g-shuffle"))
        assert run.generator.params_digest() == gen.params_digest()


class TestTrainerProtocols:
    def test_araml_generator_updates_never_sample_generator(self, small_corpus):
        run = araml_train(tiny_config(n_iters=4), small_corpus)
        assert run.g_phase_sample_calls == 0

    def test_policy_gradient_samples_in_generator_phase(self, small_corpus):
        run = policy_gradient_train(tiny_config(trainer="seqgan-pg", n_iters=2),
                                    small_corpus)
        assert run.g_phase_sample_calls > 0

    def test_maligan_samples_from_frozen_snapshot(self, small_corpus):
        run = maligan_train(
            tiny_config(trainer="maligan", n_iters=3, g_steps=3,
                        record_protocol=True),
            small_corpus,
        )
        by_iteration = {}
        for iteration, digest in run.protocol_log:
            by_iteration.setdefault(iteration, set()).add(digest)
        assert set(by_iteration) == {1, 2, 3}
        # frozen digest constant within an iteration, refreshed across them
        assert all(len(digests) == 1 for digests in by_iteration.values())
        assert len({next(iter(d)) for d in by_iteration.values()}) == 3
        # and the trained generator moved away from the final snapshot
        final_frozen = next(iter(by_iteration[3]))
        assert run.generator.params_digest() != final_frozen

    def test_maligan_constant_discriminator_warns(self, small_corpus, caplog):
        with caplog.at_level(logging.WARNING, logger="araml.trainers"):
            maligan_train(
                tiny_config(trainer="maligan", n_iters=1,
                            freeze_discriminator=True),
                small_corpus,
            )
        assert any("constant-score" in message for message in caplog.messages)

    def test_pg_identical_rewards_leave_generator_unchanged(self, small_corpus):
        config = tiny_config(trainer="seqgan-pg", n_iters=1,
                             freeze_discriminator=True, pretrain_epochs_d=0)
        baseline = train(replace(config, n_iters=0), small_corpus)
        run = train(config, small_corpus)
        assert run.generator.params_digest() == baseline.generator.params_digest()

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_numeric_failure_aborts_with_diagnostic(self, small_corpus):
        config = tiny_config(lr_g=1e200, pretrain_epochs_g=2)
        run = train(config, small_corpus)
        assert run.aborted
        assert "non-finite" in run.diagnostic


def test_pg_estimator_is_unbiased_by_enumeration():
    # length-1 toy outcome space: either stop immediately or emit one token;
    # expected REINFORCE gradient (constant baseline) must equal the exact
    # gradient of the expected reward
    vocab_size = 6
    gen = GeneratorModel(vocab_size, 4, 4, rng=np.random.default_rng(10))
    dis = DiscriminatorModel(vocab_size, 4, 4, rng=np.random.default_rng(11))
    params = gen.parameters()

    def rewards_by_token():
        # column EOS holds the reward of the empty sequence
        r = np.zeros(vocab_size)
        for tok in range(vocab_size):
            row = [] if tok == EOS else [[tok]]
            batch = SentenceBatch.from_sentences([row[0]] if row else [[]])
            with T.no_grad():
                r[tok] = dis.score(batch).item()
        return r

    rewards = rewards_by_token()

    # exact gradient of E[r] through the first-step softmax
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        states = gen.decoder.initial_states(1)
        logits, _ = gen._step_logits(np.array([BOS]), states)
        probs = T.softmax(logits)
        expected_reward = T.tensor_sum(T.multiply(probs, T.Tensor(rewards[None, :])))
        backward(tape, expected_reward)
    exact = {name: p.grad.copy() for name, p in params.items()}

    # sum over outcomes of P(X) * r(X) * grad log P(X)
    accum = {name: np.zeros_like(p.data) for name, p in params.items()}
    for tok in range(vocab_size):
        sent = [] if tok == EOS else [tok]
        include_end = np.array([tok == EOS])
        batch = SentenceBatch.from_sentences([sent])
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            log_prob = gen.log_prob(batch, include_end=include_end)
            scalar = T.tensor_sum(log_prob)
            backward(tape, scalar)
        prob = float(np.exp(scalar.item()))
        for name, p in params.items():
            if p.grad is not None:
                accum[name] += prob * rewards[tok] * p.grad

    for name in params:
        assert np.allclose(accum[name], exact[name], atol=1e-10), name


class TestRunArtifacts:
    def test_csv_header_and_rows(self, small_corpus):
        run = araml_train(tiny_config(n_iters=2), small_corpus)
        lines = run.to_csv().splitlines()
        assert lines[0] == TRAIN_CSV_HEADER
        assert len(lines) == 1 + len(run.records)
        cells = lines[1].split(",")
        assert cells[-1] == "araml" and cells[-2] == "5"

    def test_records_are_finite_and_ordered(self, small_corpus):
        run = araml_train(tiny_config(n_iters=3), small_corpus)
        iterations = [r.iteration for r in run.records]
        assert iterations == sorted(iterations)
        for record in run.records:
            for field in ("g_loss", "d_loss", "ppl_f", "ppl_r",
                          "sbleu2", "sbleu3", "sbleu4"):
                assert np.isfinite(getattr(record, field))

    def test_determinism_same_config_same_records(self, small_corpus):
        a = araml_train(tiny_config(n_iters=3), small_corpus)
        b = araml_train(tiny_config(n_iters=3), small_corpus)
        for ra, rb in zip(a.records, b.records):
            assert (ra.ppl_f, ra.ppl_r, ra.sbleu2) == (rb.ppl_f, rb.ppl_r, rb.sbleu2)
        assert a.generator.params_digest() == b.generator.params_digest()

    def test_conditional_mode_end_to_end(self):
        rng = np.random.default_rng(1)
        vocab = Vocabulary.from_content_tokens([f"t{i}" for i in range(6)])
        contexts = [rng.integers(4, 10, size=3).tolist() for _ in range(60)]
        responses = [[c[0], c[1]] for c in contexts]
        corpus = Corpus(responses, vocab, contexts=contexts)
        config = tiny_config(mode="conditional", n_iters=2, batch_size=10,
                             eval_samples=12)
        run = araml_train(config, corpus)
        assert not run.aborted and len(run.records) == 3
        assert run.generator.mode == "conditional"


class TestConfigValidation:
    def test_table_defaults(self):
        config = TrainingConfig()
        assert config.batch_size == 100
        assert config.lr_g == 0.001 and config.lr_d == 0.0001
        assert config.sampling_size == 5 and config.tau == 0.85

    def test_eval_cadence_default(self):
        assert TrainingConfig(n_iters=200).resolved_eval_every() == 4
        assert TrainingConfig(n_iters=10).resolved_eval_every() == 1

    def test_invalid_values(self):
        with pytest.raises(InputError):
            TrainingConfig(trainer="gan")
        with pytest.raises(ContractError):
            TrainingConfig(tau=0.0)
        with pytest.raises(ContractError):
            TrainingConfig(g_steps=0)

    def test_mode_and_corpus_pairing_must_agree(self, small_corpus):
        with pytest.raises(InputError):
            train(tiny_config(mode="conditional"), small_corpus)


def test_default_pretrain_epochs_heuristic(small_corpus):
    g, d, lm = default_pretrain_epochs(small_corpus)
    assert 1 <= d <= g <= 50
    big = Corpus([[4, 5, 6, 7]] * 20000, small_corpus.vocab)
    assert default_pretrain_epochs(big) == (50, 15, 50)


def test_estimator_wrappers(small_corpus):
    est = AramlTrainer(n_iters=1, batch_size=16, embed_dim=8, hidden_dim=8,
                       eval_samples=16, pretrain_epochs_g=1, pretrain_epochs_d=0,
                       freeze_discriminator=True, seed=3)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(ContractError):
        est.sample(4)
    est.fit(small_corpus)
    assert est.run_.config.trainer == "araml"
    rows = est.sample(4, max_length=6, seed=1)
    assert len(rows) == 4
    mle = MleTrainer(n_iters=0, batch_size=16, embed_dim=8, hidden_dim=8,
                     eval_samples=16, pretrain_epochs_g=1, seed=3)
    mle.fit(small_corpus)
    assert mle.discriminator_ is None
