"""Command line driver: prepare / augment / train / eval.

Exit codes are a stable contract for scripting: 0 success, 2 usage or
configuration problems, 3 I/O failures, 4 numeric failures during training.
Every run directory gets a manifest (resolved config, seed list, input
digests, tool version) written before any work starts.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import Corpus, HmmOracle, Vocabulary, generate_hmm_corpus, load_corpus, train_test_split
from .errors import ContractError, InputError, NumericError
from .metrics import (
    MIN_REVERSE_CORPUS,
    STABILITY_METRICS,
    MetricReport,
    reverse_perplexity,
    self_bleu,
    stability_stats,
)
from .models import load_generator, save_generator
from .ngram import NGramLanguageModel
from .sampler import SamplerConfig, augment_corpus, write_augmented
from .trainers import TRAIN_CSV_HEADER, TRAINER_KINDS, TrainingConfig, train
from .validation import check_random_state

PREPARED_FILES = ("train.txt", "test.txt", "vocab.txt", "manifest.json")


class IOFailure(Exception):
    """Filesystem-level problem mapped to exit code 3."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _default_out_dir() -> str:
    return os.environ.get("ARAML_OUT_DIR", "araml_out")


def _write_manifest(out_dir: Path, command: str, config: dict, seeds, inputs) -> Path:
    manifest = {
        "tool_version": __version__,
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "input_digests": {str(p): _sha256(Path(p)) for p in inputs},
        "out_dir": str(out_dir),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _parse_scalar(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config_file(path) -> dict:
    """Flat `key = value` lines; '#' starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}")
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = body.split("=", 1)
        values[key.strip().replace("-", "_")] = _parse_scalar(raw)
    return values


def _resolve_training_config(args) -> TrainingConfig:
    """Defaults < config file < explicit CLI flags."""
    values = {f.name: getattr(TrainingConfig, "__dataclass_fields__")[f.name].default
              for f in fields(TrainingConfig)}
    if args.config is not None:
        for key, value in read_config_file(args.config).items():
            if key in values:
                values[key] = value
            elif key not in ("seeds",):
                raise InputError(f"unknown config key {key!r}")
    for name in values:
        if name in ("freeze_discriminator", "freeze_augmentation"):
            continue  # store-true flags: absent means "keep file value"
        cli_value = getattr(args, name, None)
        if cli_value is not None:
            values[name] = cli_value
    if getattr(args, "freeze_discriminator", False):
        values["freeze_discriminator"] = True
    if getattr(args, "freeze_augmentation", False):
        values["freeze_augmentation"] = True
    values["seed"] = 0
    return TrainingConfig(**values)


def _prepared_dir(args) -> Path:
    data = Path(args.data)
    for name in PREPARED_FILES:
        if not (data / name).exists():
            raise InputError(
                f"{data} is not a prepared data directory (missing {name}); "
                "run `araml prepare` first"
            )
    return data


def _load_prepared(data: Path, paired: bool = False) -> tuple[Corpus, Corpus]:
    vocab = Vocabulary.load(data / "vocab.txt")
    train_corpus = load_corpus(data / "train.txt", vocab=vocab, paired=paired)
    test_corpus = load_corpus(data / "test.txt", vocab=vocab, paired=paired,
                              split="test")
    return train_corpus, test_corpus


def _is_paired(data: Path) -> bool:
    manifest = json.loads((data / "manifest.json").read_text(encoding="utf-8"))
    return bool(manifest["config"].get("paired", False))


def _ensure_out_dir(out_dir: Path, force: bool, markers) -> None:
    existing = [name for name in markers if (out_dir / name).exists()]
    if existing and not force:
        raise IOFailure(
            f"output directory {out_dir} already holds {existing[0]}; "
            "pass --force to overwrite"
        )
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out_dir}: {exc}")


def _parse_kv(pairs, defaults: dict) -> dict:
    values = dict(defaults)
    for pair in pairs or ():
        if "=" not in pair:
            raise InputError(f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in values:
            raise InputError(f"unknown synthetic-hmm key {key!r}")
        values[key] = _parse_scalar(raw)
    return values


def cmd_prepare(args) -> int:
    out_dir = Path(args.out_dir)
    _ensure_out_dir(out_dir, args.force, PREPARED_FILES)
    inputs = []
    hmm_settings = None
    if args.synthetic_hmm is not None:
        hmm_settings = _parse_kv(
            args.synthetic_hmm,
            {"states": 5, "vocab": 20, "count": 10000, "max_length": 12,
             "seed": 0, "stop": 0.1},
        )
        oracle = HmmOracle.random(hmm_settings["states"], hmm_settings["vocab"],
                                  seed=hmm_settings["seed"],
                                  stop_prob=hmm_settings["stop"])
        corpus = generate_hmm_corpus(oracle, hmm_settings["count"],
                                     hmm_settings["max_length"],
                                     seed=hmm_settings["seed"] + 1)
    else:
        if args.corpus is None:
            raise InputError("either --corpus PATH or --synthetic-hmm is required")
        corpus = load_corpus(args.corpus, min_token_frequency=args.min_freq,
                             max_vocab=args.max_vocab, paired=args.paired)
        inputs.append(args.corpus)

    train_corpus, test_corpus = train_test_split(corpus, args.test_fraction,
                                                 seed=args.seed)
    train_corpus.save(out_dir / "train.txt")
    test_corpus.save(out_dir / "test.txt")
    corpus.vocab.save(out_dir / "vocab.txt")
    if args.train_lm:
        lm = NGramLanguageModel(vocab_size=corpus.vocab.size, order=args.lm_order,
                                k=args.lm_k).fit(train_corpus.sentences)
        lm.save(out_dir / "lm.txt")
    config = {
        "paired": bool(args.paired),
        "test_fraction": args.test_fraction,
        "min_freq": args.min_freq,
        "max_vocab": args.max_vocab,
        "seed": args.seed,
        "synthetic_hmm": hmm_settings,
        "train_lm": bool(args.train_lm),
        "lm_order": args.lm_order,
        "lm_k": args.lm_k,
        "vocab_digest": corpus.vocab.digest(),
    }
    _write_manifest(out_dir, "prepare", config, [args.seed], inputs)
    print(f"prepared {len(train_corpus)} train / {len(test_corpus)} test sentences, "
          f"vocabulary {corpus.vocab.size} -> {out_dir}")
    return 0


def cmd_augment(args) -> int:
    data = _prepared_dir(args)
    if not args.tau or args.tau <= 0:
        raise InputError("--tau must be positive")
    paired = _is_paired(data)
    train_corpus, _ = _load_prepared(data, paired)
    lm = None
    if args.strategy == "constrained":
        lm_path = Path(args.lm) if args.lm else data / "lm.txt"
        if not lm_path.exists():
            raise InputError(
                "constrained sampling needs a pretrained language model; "
                "run `araml prepare --train-lm` or pass --lm PATH"
            )
        lm = NGramLanguageModel.load(lm_path)
    config = SamplerConfig(tau=args.tau, strategy=args.strategy,
                           samples_per_datum=args.k, max_edit_cap=args.cap)
    rng = check_random_state(args.seed)
    samples = augment_corpus(train_corpus.sentences, config,
                             train_corpus.vocab.size, rng, lm=lm)
    out_path = Path(args.out) if args.out else data / "augmented.tsv"
    try:
        write_augmented(samples, train_corpus.vocab, out_path)
    except OSError as exc:
        raise IOFailure(f"cannot write {out_path}: {exc}")
    mean_d = float(np.mean([s.distance for s in samples]))
    print(f"wrote {len(samples)} samples to {out_path} "
          f"(strategy={args.strategy}, tau={args.tau}, mean d*={mean_d:.3f})")
    return 0


def _write_csv(path: Path, header: str, rows) -> None:
    try:
        path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}")


def cmd_train(args) -> int:
    data = _prepared_dir(args)
    paired = _is_paired(data)
    train_corpus, test_corpus = _load_prepared(data, paired)
    config = _resolve_training_config(args)
    if paired and config.mode != "conditional":
        config = TrainingConfig(**{**asdict(config), "mode": "conditional"})
    if args.trainer not in TRAINER_KINDS:
        raise InputError(f"--trainer must be one of {TRAINER_KINDS}")
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise InputError("--seeds must list at least one integer")

    out_dir = Path(args.out_dir)
    _ensure_out_dir(out_dir, args.force, ("manifest.json",))
    (out_dir / "runs").mkdir(exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    resolved = asdict(config)
    resolved["trainer"] = args.trainer
    _write_manifest(out_dir, "train", resolved, seeds,
                    [data / name for name in ("train.txt", "test.txt", "vocab.txt")])

    runs = []
    for seed in seeds:
        run_config = TrainingConfig(**{**asdict(config),
                                       "trainer": args.trainer, "seed": seed})

        def checkpointer(iteration, generator, discriminator, record,
                         _seed=seed):
            path = out_dir / "checkpoints" / f"{args.trainer}_seed{_seed}_iter{iteration}.ckpt"
            save_generator(path, generator, {
                "vocab_digest": train_corpus.vocab.digest(),
                "iteration": iteration, "seed": _seed, "trainer": args.trainer,
            })

        run = train(run_config, train_corpus, test_corpus,
                    on_eval=checkpointer if args.checkpoint_every_eval else None)
        csv_path = out_dir / "runs" / f"{args.trainer}_seed{seed}.csv"
        try:
            csv_path.write_text(run.to_csv(), encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot write {csv_path}: {exc}")
        if run.aborted:
            diag_path = out_dir / f"diagnostic_seed{seed}.json"
            diag_path.write_text(json.dumps({
                "seed": seed, "trainer": args.trainer, "error": run.diagnostic,
                "last_iteration": run.records[-1].iteration if run.records else None,
            }, indent=2) + "\n", encoding="utf-8")
            print(f"numeric failure (seed {seed}); diagnostic at {diag_path}",
                  file=sys.stderr)
            return 4
        final_ckpt = out_dir / "checkpoints" / f"{args.trainer}_seed{seed}_final.ckpt"
        save_generator(final_ckpt, run.generator, {
            "vocab_digest": train_corpus.vocab.digest(),
            "iteration": run.records[-1].iteration, "seed": seed,
            "trainer": args.trainer,
        })
        runs.append(run)
        print(f"trainer={args.trainer} seed={seed} "
              f"final ppl_f={run.records[-1].ppl_f:.3f} "
              f"ppl_r={run.records[-1].ppl_r:.3f} -> {csv_path}")

    if len(runs) >= 2:
        report = stability_stats(runs)
        _write_csv(out_dir / f"stability_{args.trainer}.csv",
                   "trainer,metric,mean,std,n_seeds", report.to_csv_rows())
    return 0


def _metric_row(iteration, ppl_f, ppl_r, sbleu, seed, trainer,
                g_loss=0.0, d_loss=0.0) -> str:
    return (f"{iteration},{g_loss:.6g},{d_loss:.6g},{ppl_f:.6g},{ppl_r:.6g},"
            f"{sbleu[2]:.6g},{sbleu[3]:.6g},{sbleu[4]:.6g},{seed},{trainer}")


def _final_window_stats(csv_path: Path, window: int = 10) -> dict:
    lines = csv_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != TRAIN_CSV_HEADER:
        raise InputError(f"{csv_path} is not a training run CSV")
    by_seed: dict[str, list[list[str]]] = {}
    for line in lines[1:]:
        cells = line.split(",")
        by_seed.setdefault(cells[8], []).append(cells)
    stats = {}
    columns = {"g_loss": 1, "d_loss": 2, "ppl_f": 3, "ppl_r": 4,
               "sbleu2": 5, "sbleu3": 6, "sbleu4": 7}
    for metric, col in columns.items():
        tails = [
            float(np.mean([float(row[col]) for row in rows[-window:]]))
            for rows in by_seed.values()
        ]
        stats[metric] = (float(np.mean(tails)), float(np.std(tails)), len(tails))
    return stats


def cmd_eval(args) -> int:
    data = _prepared_dir(args)
    if args.compare:
        stats_a = _final_window_stats(Path(args.compare[0]))
        stats_b = _final_window_stats(Path(args.compare[1]))
        print("metric,mean_a,std_a,mean_b,std_b,mean_diff")
        for metric in STABILITY_METRICS:
            ma, sa, _ = stats_a[metric]
            mb, sb, _ = stats_b[metric]
            print(f"{metric},{ma:.6g},{sa:.6g},{mb:.6g},{sb:.6g},{ma - mb:.6g}")
        return 0

    paired = _is_paired(data)
    train_corpus, test_corpus = _load_prepared(data, paired)
    vocab = train_corpus.vocab
    iteration, seed, trainer = 0, args.seed, "external"

    if args.checkpoint:
        generator, meta = load_generator(args.checkpoint)
        if meta.get("vocab_digest") != vocab.digest():
            raise InputError(
                "checkpoint was trained against a different vocabulary "
                "(digest mismatch)"
            )
        iteration = int(meta.get("iteration", 0))
        trainer = meta.get("trainer", "external")
        contexts = None
        if paired:
            source = test_corpus.contexts
            contexts = [source[i % len(source)] for i in range(args.eval_samples)]
        generated = generator.sample(args.eval_samples, args.max_length,
                                     check_random_state(args.seed),
                                     contexts=contexts)
    elif args.samples:
        sample_corpus = load_corpus(args.samples, vocab=vocab)
        generated = sample_corpus.sentences
    else:
        raise InputError("pass --checkpoint, --samples or --compare")

    lm = NGramLanguageModel(vocab_size=vocab.size, order=args.lm_order,
                            k=args.lm_k).fit(train_corpus.sentences)
    sbleu = self_bleu(generated, max_n=4)
    report = MetricReport(
        ppl_f=lm.perplexity(generated),
        ppl_r=reverse_perplexity(test_corpus.sentences, generated, vocab.size,
                                 order=args.lm_order, k=args.lm_k,
                                 min_generated=min(MIN_REVERSE_CORPUS,
                                                   len(generated))),
        sbleu2=sbleu[2], sbleu3=sbleu[3], sbleu4=sbleu[4],
        sample_count=len(generated), seed=seed, iteration=iteration,
    )
    row = _metric_row(report.iteration, report.ppl_f, report.ppl_r, sbleu,
                      report.seed, trainer)

    out_path = Path(args.out) if args.out else Path(args.out_dir) / "eval.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        if out_path.exists():
            with open(out_path, "a", encoding="utf-8") as fh:
                fh.write(row + "\n")
        else:
            out_path.write_text(TRAIN_CSV_HEADER + "\n" + row + "\n",
                                encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write {out_path}: {exc}")
    print(TRAIN_CSV_HEADER)
    print(row)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="araml",
        description="Train and evaluate small discrete sequence generators "
                    "with reward-weighted maximum likelihood.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    prepare = sub.add_parser("prepare", help="build corpus splits and vocabulary")
    prepare.add_argument("--corpus", help="space-tokenized corpus, one sentence per line")
    prepare.add_argument("--paired", action="store_true",
                         help="treat lines as context<TAB>response pairs")
    prepare.add_argument("--synthetic-hmm", nargs="*", metavar="KEY=VALUE",
                         help="generate from a random hidden Markov source "
                              "(states= vocab= count= max_length= seed= stop=)")
    prepare.add_argument("--min-freq", type=int, default=1)
    prepare.add_argument("--max-vocab", type=int, default=None)
    prepare.add_argument("--test-fraction", type=float, default=0.05)
    prepare.add_argument("--seed", type=int, default=0)
    prepare.add_argument("--train-lm", action="store_true",
                         help="also fit and store the smoothing language model")
    prepare.add_argument("--lm-order", type=int, default=2)
    prepare.add_argument("--lm-k", type=float, default=0.01)
    prepare.add_argument("--out-dir", default=_default_out_dir())
    prepare.add_argument("--force", action="store_true")
    prepare.set_defaults(func=cmd_prepare)

    augment = sub.add_parser("augment", help="write a perturbed copy of the training split")
    augment.add_argument("--data", required=True, help="prepared data directory")
    augment.add_argument("--tau", type=float, default=0.85)
    augment.add_argument("--strategy", choices=("random", "constrained"),
                         default="random")
    augment.add_argument("--k", type=int, default=5, help="samples per sentence")
    augment.add_argument("--cap", type=int, default=None,
                         help="upper bound on the sampled edit distance")
    augment.add_argument("--lm", default=None, help="language model file")
    augment.add_argument("--seed", type=int, default=0)
    augment.add_argument("--out", default=None)
    augment.set_defaults(func=cmd_augment)

    train_cmd = sub.add_parser("train", help="run a trainer over one or more seeds")
    train_cmd.add_argument("--data", required=True)
    train_cmd.add_argument("--trainer", default="araml", choices=TRAINER_KINDS)
    train_cmd.add_argument("--seeds", default="0")
    train_cmd.add_argument("--config", default=None, help="flat key = value file")
    train_cmd.add_argument("--out-dir", default=_default_out_dir())
    train_cmd.add_argument("--force", action="store_true")
    train_cmd.add_argument("--checkpoint-every-eval", action="store_true",
                           help="write a checkpoint at every eval point")
    for name, kind in (
        ("--n-iters", int), ("--g-steps", int), ("--d-steps", int),
        ("--batch-size", int), ("--lr-g", float), ("--lr-d", float),
        ("--tau", float), ("--sampling-size", int),
        ("--max-edit-cap", int), ("--embed-dim", int), ("--hidden-dim", int),
        ("--gen-layers", int), ("--pretrain-epochs-g", int),
        ("--pretrain-epochs-d", int), ("--pretrain-epochs-lm", int),
        ("--lm-order", int), ("--lm-k", float), ("--eval-every", int),
        ("--eval-samples", int), ("--max-sample-length", int),
    ):
        train_cmd.add_argument(name, type=kind, default=None)
    train_cmd.add_argument("--strategy", choices=("random", "constrained"),
                           default=None)
    train_cmd.add_argument("--mode", choices=("unconditional", "conditional"),
                           default=None)
    train_cmd.add_argument("--pg-baseline", choices=("batch-mean", "none"),
                           default=None)
    train_cmd.add_argument("--freeze-discriminator", action="store_true")
    train_cmd.add_argument("--freeze-augmentation", action="store_true")
    train_cmd.set_defaults(func=cmd_train)

    eval_cmd = sub.add_parser("eval", help="score a checkpoint or sample file")
    eval_cmd.add_argument("--data", required=True)
    eval_cmd.add_argument("--checkpoint", default=None)
    eval_cmd.add_argument("--samples", default=None,
                          help="file of generated sentences, one per line")
    eval_cmd.add_argument("--compare", nargs=2, metavar=("RUN_A", "RUN_B"),
                          default=None, help="two training CSVs to diff")
    eval_cmd.add_argument("--eval-samples", type=int, default=200)
    eval_cmd.add_argument("--max-length", type=int, default=32)
    eval_cmd.add_argument("--lm-order", type=int, default=2)
    eval_cmd.add_argument("--lm-k", type=float, default=0.01)
    eval_cmd.add_argument("--seed", type=int, default=0)
    eval_cmd.add_argument("--out", default=None)
    eval_cmd.add_argument("--out-dir", default=_default_out_dir())
    eval_cmd.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"usage hint: araml {args.command} --help", file=sys.stderr)
        return 2
    except IOFailure as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
