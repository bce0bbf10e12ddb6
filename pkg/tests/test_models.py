import numpy as np
import pytest

from araml import tensor as T
from araml.corpus import EOS
from araml.errors import ContractError, InputError, ShapeError
from araml.models import (
    ConstantDiscriminator,
    DiscriminatorModel,
    GeneratorModel,
    SentenceBatch,
    discriminator_loss,
    generator_log_prob,
    load_generator,
    save_generator,
    weighted_mle_loss,
)
from araml.tensor import Adam, Tape, Tensor, backward

from helpers import analytic_gradients, max_relative_error, numeric_gradients

V, E, H = 8, 5, 6


def _zeroed(model):
    for p in model.parameters().values():
        p.data[...] = 0.0
    return model


def make_generator(seed=0, **kwargs):
    return GeneratorModel(V, E, H, rng=np.random.default_rng(seed), **kwargs)


class TestGeneratorLogProb:
    def test_zero_parameters_give_uniform_softmax_log_prob(self):
        gen = _zeroed(make_generator())
        batch = SentenceBatch.from_sentences([[4, 5, 6], [7, 4]])
        written_only = gen.log_prob(batch, include_end=False)
        assert np.allclose(written_only.data, [-3 * np.log(V), -2 * np.log(V)])
        with_end = gen.log_prob(batch)
        assert np.allclose(with_end.data, [-4 * np.log(V), -3 * np.log(V)])

    def test_log_prob_is_nonpositive(self):
        gen = make_generator(3)
        batch = SentenceBatch.from_sentences([[4], [5, 6, 7, 4], [6, 6]])
        assert np.all(gen.log_prob(batch).data <= 0)

    def test_out_of_vocabulary_id_is_input_error(self):
        gen = make_generator()
        batch = SentenceBatch.from_sentences([[4, V]])
        with pytest.raises(InputError):
            gen.log_prob(batch)

    def test_per_step_distributions_normalize(self):
        gen = make_generator(5)
        batch = SentenceBatch.from_sentences([[4, 5, 6, 7]])
        dists = gen.step_distributions(batch)
        assert np.allclose(dists.sum(axis=-1), 1.0, atol=1e-9)

    def test_mixed_end_inclusion_row_vector(self):
        gen = make_generator(9)
        batch = SentenceBatch.from_sentences([[4, 5], [4, 5]])
        mixed = gen.log_prob(batch, include_end=np.array([True, False]))
        full = gen.log_prob(batch, include_end=True)
        bare = gen.log_prob(batch, include_end=False)
        assert mixed.data[0] == pytest.approx(full.data[0])
        assert mixed.data[1] == pytest.approx(bare.data[1])

    def test_gradient_matches_finite_differences(self):
        gen = make_generator(11)
        batch = SentenceBatch.from_sentences([[4, 5, 6], [7, 4]])
        params = gen.parameters()

        def build():
            return T.scalar_multiply(T.tensor_sum(gen.log_prob(batch)), -1.0)

        def value():
            with T.no_grad():
                return build().item()

        assert max_relative_error(analytic_gradients(build, params),
                                  numeric_gradients(value, params)) < 1e-4


class TestGeneratorSample:
    def test_forced_logits_repeat_one_token(self):
        gen = _zeroed(make_generator())
        gen.b_out.data[:] = -50.0
        gen.b_out.data[6] = 50.0
        rows = gen.sample(8, 5, np.random.default_rng(0))
        assert all(row == [6] * 5 for row in rows)

    def test_equal_seeds_equal_samples(self):
        gen = make_generator(2)
        a = gen.sample(32, 7, np.random.default_rng(123))
        b = gen.sample(32, 7, np.random.default_rng(123))
        assert a == b

    def test_terminated_flags(self):
        gen = _zeroed(make_generator())
        gen.b_out.data[:] = -50.0
        gen.b_out.data[EOS] = 50.0
        rows, terminated = gen.sample(4, 3, np.random.default_rng(0),
                                      return_terminated=True)
        assert rows == [[], [], [], []]
        assert terminated.all()

    def test_empirical_unigram_matches_enumerated_marginals(self):
        # enumerate every sequence of length <= 3 and accumulate exact
        # expected token counts, then compare with 1e5 ancestral samples
        gen = make_generator(7)
        max_len = 3

        def next_dist(prefix):
            batch = SentenceBatch.from_sentences([list(prefix)])
            return gen.step_distributions(batch)[0, len(prefix)]

        expected_counts = np.zeros(V)
        total_mass = 0.0

        def recurse(prefix, prob):
            nonlocal total_mass
            if len(prefix) == max_len:
                for t in prefix:
                    expected_counts[t] += prob
                total_mass += prob * len(prefix)
                return
            dist = next_dist(prefix)
            stop = prob * dist[EOS]
            for t in prefix:
                expected_counts[t] += stop
            total_mass += stop * len(prefix)
            for tok in range(V):
                if tok == EOS:
                    continue
                recurse(prefix + (tok,), prob * dist[tok])

        recurse((), 1.0)
        expected = expected_counts / total_mass

        rows = gen.sample(100_000, max_len, np.random.default_rng(17))
        counts = np.zeros(V)
        for row in rows:
            for t in row:
                counts[t] += 1
        empirical = counts / counts.sum()
        assert 0.5 * np.abs(empirical - expected).sum() < 0.02

    def test_sample_count_contract(self):
        gen = make_generator()
        with pytest.raises(ContractError):
            gen.sample(0, 5, np.random.default_rng(0))


class TestConditionalGenerator:
    def test_requires_contexts(self):
        gen = GeneratorModel(V, E, H, mode="conditional",
                             rng=np.random.default_rng(0))
        batch = SentenceBatch.from_sentences([[4, 5]])
        with pytest.raises(InputError):
            gen.log_prob(batch)
        with pytest.raises(InputError):
            gen.sample(2, 4, np.random.default_rng(0))

    def test_default_layer_counts(self):
        assert make_generator().n_layers == 1
        cond = GeneratorModel(V, E, H, mode="conditional",
                              rng=np.random.default_rng(0))
        assert cond.n_layers == 2

    def test_empty_context_reduces_to_unconditional(self):
        # same decoder parameters + zero-length context = plain LM
        uncond = make_generator(21)
        cond = GeneratorModel(V, E, H, mode="conditional", n_layers=1,
                              rng=np.random.default_rng(22))
        uncond_params = uncond.parameters()
        for name, p in cond.parameters().items():
            if name in uncond_params:
                p.data = uncond_params[name].data.copy()
        sentences = [[4, 5, 6], [7]]
        plain = uncond.log_prob(SentenceBatch.from_sentences(sentences))
        contextual = cond.log_prob(
            SentenceBatch.from_sentences(sentences, contexts=[[], []])
        )
        assert np.array_equal(plain.data, contextual.data)

    def test_context_changes_scores(self):
        cond = GeneratorModel(V, E, H, mode="conditional",
                              rng=np.random.default_rng(23))
        sentences = [[4, 5]]
        a = cond.log_prob(SentenceBatch.from_sentences(sentences, contexts=[[6, 7]]))
        b = cond.log_prob(SentenceBatch.from_sentences(sentences, contexts=[[7]]))
        assert a.data[0] != b.data[0]

    def test_conditional_gradients(self):
        cond = GeneratorModel(V, E, 4, mode="conditional",
                              rng=np.random.default_rng(24))
        batch = SentenceBatch.from_sentences([[4, 5], [6]], contexts=[[7, 6], [4]])
        params = cond.parameters()

        def build():
            return T.scalar_multiply(T.tensor_sum(cond.log_prob(batch)), -1.0)

        def value():
            with T.no_grad():
                return build().item()

        assert max_relative_error(analytic_gradients(build, params),
                                  numeric_gradients(value, params)) < 1e-4


class TestDiscriminator:
    def test_zero_parameters_score_half(self):
        dis = _zeroed(DiscriminatorModel(V, E, H, rng=np.random.default_rng(0)))
        batch = SentenceBatch.from_sentences([[4, 5, 6], [7]])
        assert np.array_equal(dis.score(batch).data, [0.5, 0.5])

    def test_scores_strictly_inside_unit_interval(self):
        dis = DiscriminatorModel(V, E, H, rng=np.random.default_rng(1))
        batch = SentenceBatch.from_sentences([[4] * 9, [5, 6], []])
        scores = dis.score(batch).data
        assert np.all(scores > 0) and np.all(scores < 1)

    def test_learns_separable_toy_data(self):
        dis = DiscriminatorModel(V, E, H, rng=np.random.default_rng(2))
        real = SentenceBatch.from_sentences([[4] * 5] * 8)
        fake = SentenceBatch.from_sentences([[5] * 5] * 8)
        adam = Adam(list(dis.parameters().values()), 0.05)
        for _ in range(60):
            with Tape() as tape:
                loss = discriminator_loss(dis.score(real), dis.score(fake))
                backward(tape, loss)
            adam.step()
        assert np.all(dis.score(real).data > 0.9)
        assert np.all(dis.score(fake).data < 0.1)

    def test_conditional_mode_encodes_pair_with_separator(self):
        dis = DiscriminatorModel(V, E, H, mode="conditional",
                                 rng=np.random.default_rng(3))
        with_ctx = SentenceBatch.from_sentences([[4, 5]], contexts=[[6]])
        swapped = SentenceBatch.from_sentences([[4, 5]], contexts=[[7]])
        assert dis.score(with_ctx).data[0] != dis.score(swapped).data[0]

    def test_out_of_vocabulary_id(self):
        dis = DiscriminatorModel(V, E, H, rng=np.random.default_rng(0))
        with pytest.raises(InputError):
            dis.score(SentenceBatch.from_sentences([[V]]))

    def test_constant_discriminator(self):
        const = ConstantDiscriminator(0.5)
        batch = SentenceBatch.from_sentences([[4], [5, 6]])
        assert np.array_equal(const.score(batch).data, [0.5, 0.5])
        assert const.parameters() == {}
        with pytest.raises(ContractError):
            ConstantDiscriminator(1.0)


class TestDiscriminatorLoss:
    def test_perfect_discriminator_scores_zero_loss(self):
        loss = discriminator_loss(Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
        assert loss.item() == 0.0

    def test_uninformed_scores_give_quarter(self):
        loss = discriminator_loss(Tensor([0.5, 0.5]), Tensor([0.5, 0.5]))
        assert loss.item() == pytest.approx(0.25)

    def test_inverted_discriminator_scores_one(self):
        loss = discriminator_loss(Tensor([0.0]), Tensor([1.0, 1.0, 1.0]))
        assert loss.item() == pytest.approx(1.0)

    def test_empty_scores_rejected(self):
        with pytest.raises(ContractError):
            discriminator_loss(Tensor(np.zeros(0)), Tensor([0.5]))

    def test_minimized_only_at_targets(self):
        base = discriminator_loss(Tensor([1.0]), Tensor([0.0])).item()
        for r, f in ((0.9, 0.0), (1.0, 0.1), (0.7, 0.3)):
            assert discriminator_loss(Tensor([r]), Tensor([f])).item() > base


class TestWeightedMleLoss:
    def test_uniform_weights_equal_plain_mean(self):
        log_probs = Tensor([-1.0, -2.0, -4.0])
        for c in (1.0, 0.25, 7.0):
            loss = weighted_mle_loss(log_probs, np.full(3, c))
            assert loss.item() == pytest.approx(7.0 / 3.0, rel=1e-15)

    def test_any_constant_weight_is_bitwise_uniform(self):
        log_probs = Tensor([-1.3, -0.2, -5.0, -2.2])
        a = weighted_mle_loss(log_probs, np.full(4, np.exp(0.5)))
        b = weighted_mle_loss(log_probs, np.ones(4))
        assert a.item() == b.item()

    def test_zero_weight_excludes_sentence(self):
        lp = Tensor([-100.0, -3.0])
        loss = weighted_mle_loss(lp, np.array([0.0, 2.5]))
        assert loss.item() == pytest.approx(3.0)

    def test_all_zero_weights_is_contract_error(self):
        with pytest.raises(ContractError):
            weighted_mle_loss(Tensor([-1.0]), np.array([0.0]))

    def test_mismatched_shapes(self):
        with pytest.raises(ShapeError):
            weighted_mle_loss(Tensor([-1.0, -2.0]), np.array([1.0]))

    def test_gradient_matches_finite_differences(self):
        gen = make_generator(31)
        batch = SentenceBatch.from_sentences([[4, 5], [6, 7, 4]])
        weights = np.array([0.2, 1.7])
        params = gen.parameters()

        def build():
            return weighted_mle_loss(gen.log_prob(batch), weights)

        def value():
            with T.no_grad():
                return build().item()

        assert max_relative_error(analytic_gradients(build, params),
                                  numeric_gradients(value, params)) < 1e-4


def test_generator_checkpoint_round_trip(tmp_path):
    gen = make_generator(41)
    save_generator(tmp_path / "g.ckpt", gen, {"vocab_digest": "x" * 8})
    again, meta = load_generator(tmp_path / "g.ckpt")
    assert meta["vocab_digest"] == "x" * 8
    batch = SentenceBatch.from_sentences([[4, 5, 6]])
    assert np.array_equal(gen.log_prob(batch).data, again.log_prob(batch).data)


def test_clone_is_independent():
    gen = make_generator(42)
    dup = gen.clone()
    assert gen.params_digest() == dup.params_digest()
    gen.w_out.data[0, 0] += 1.0
    assert gen.params_digest() != dup.params_digest()


def test_module_level_wrappers():
    gen = _zeroed(make_generator())
    batch = SentenceBatch.from_sentences([[4]])
    assert generator_log_prob(gen, batch, include_end=False).data[0] == pytest.approx(
        -np.log(V)
    )
