"""Adversarial reward-augmented maximum likelihood training at desk scale.

A generator is pretrained with MLE, then refined on perturbed copies of
real sentences whose training weight comes from a co-trained discriminator.
Comparison trainers (plain MLE, static-weight sampling, generator-resampled
weighting, sentence-level policy gradient) share the same loop so stability
differences are attributable to the objective.
"""
from .corpus import (
    BOS,
    EOS,
    N_RESERVED,
    PAD,
    SEP,
    Corpus,
    HmmOracle,
    Vocabulary,
    generate_hmm_corpus,
    load_corpus,
    train_test_split,
)
from .errors import ContractError, InputError, NumericError, ShapeError
from .metrics import (
    MetricReport,
    StabilityReport,
    forward_perplexity,
    hamming_audit,
    reverse_perplexity,
    self_bleu,
    stability_stats,
)
from .models import (
    ConstantDiscriminator,
    DiscriminatorModel,
    GeneratorModel,
    SentenceBatch,
    discriminator_loss,
    discriminator_score,
    generator_log_prob,
    generator_sample,
    weighted_mle_loss,
)
from .ngram import NGramLanguageModel, lm_perplexity, lm_train, lm_word_distribution
from .sampler import (
    AugmentedSample,
    EditDistanceDistribution,
    SamplerConfig,
    SentenceAugmenter,
    augment_corpus,
    count_sentences,
    edit_distance_distribution,
    sample_positions,
    substitute_words,
)
from .tensor import (
    Adam,
    AdamState,
    Tape,
    Tensor,
    backward,
    forward_op,
    load_checkpoint,
    save_checkpoint,
    sgd_adam_step,
)
from .trainers import (
    AramlTrainer,
    MaliganTrainer,
    MetricRecord,
    MleTrainer,
    PolicyGradientTrainer,
    RamlTrainer,
    TrainingConfig,
    TrainRun,
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
from .validation import check_random_state, named_stream

__version__ = "0.1.0"
