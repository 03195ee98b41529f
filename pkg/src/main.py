#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
mvp_rerank - Main entry point and CLI handler.

This module provides the command-line interface: corpus generation,
training, ranking, evaluation, audits, ablations and cost reports.
Command results go to stdout, diagnostics and errors to stderr.
"""

from __future__ import print_function

import argparse
import logging
import os
import sys

from typing import List, Tuple

from . import __version__
from .ablation import (
    aggregation_sweep, orthogonal_ablation, training_strategy_ablation,
    view_count_sweep, view_token_design_sweep
)
from .audit import (
    anchor_similarity_stats, candidate_permutation_audit, identifier_audit,
    similarity_report
)
from .config import TrainConfig
from .data import CorpusSpec, RecordParseError, generate_corpus, read_records, split, write_records
from .decoder import Reranker
from .encoder import PromptLayout, Vocab
from .model import AggregationStrategy, WindowConfig
from .pipeline_bench import CostModel, cost_report, parse_grid
from .report import FORMATS, Report, render, render_many
from .trainer import (
    Checkpoint, evaluate, load_checkpoint, random_permutation_baseline,
    save_checkpoint, train
)
from .utils import ConfigError, MvpError, PathError, require_input_path, require_output_path


# Exit codes
EXIT_SUCCESS = 0
EXIT_DOMAIN_ERROR = 1
EXIT_USAGE_ERROR = 2

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"

DEFAULT_SPLIT = (0.8, 0.1, 0.1)

logger = logging.getLogger(__name__)


def _common_options():
    # type: () -> argparse.ArgumentParser
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-v", "--verbose",
        action="count",
        default=0,
        help="Log progress to stderr (-v info, -vv debug)"
    )
    common.add_argument(
        "--format",
        choices=FORMATS,
        default="table",
        help="Report format (default: table)"
    )
    return common


def create_argument_parser():
    # type: () -> argparse.ArgumentParser
    """
    Create and configure the argument parser.

    Returns:
        Configured ArgumentParser instance.
    """
    parser = argparse.ArgumentParser(
        prog="mvp-rerank",
        description="Train, run and audit a multi-view single-pass listwise passage reranker.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  mvp-rerank gen --out corpus.jsonl
  mvp-rerank train --data corpus.jsonl --out model.mvpc
  mvp-rerank rank --ckpt model.mvpc --query "w12 w30" --candidates cands.tsv
  mvp-rerank eval --ckpt model.mvpc --data corpus.jsonl --k 8 --baseline
  mvp-rerank audit --ckpt model.mvpc --data corpus.jsonl --mode candidates
  mvp-rerank ablate --data corpus.jsonl --views 1..4
  mvp-rerank cost --n 100 --w 20 --s 10

Environment:
  MVP_THREADS  Maximum number of worker threads (default: 1)

Exit codes:
  0  Success
  1  Domain error (one line on stderr: "error: <ErrorClass>: <message>")
  2  Usage error
"""
    )
    parser.add_argument(
        "--version",
        action="version",
        version="%(prog)s {}".format(__version__)
    )
    common = _common_options()
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    gen = commands.add_parser("gen", parents=[common], help="Generate a synthetic ranking corpus")
    gen.add_argument("--spec", help="Corpus spec key=value file (default: built-in defaults)")
    gen.add_argument("--out", required=True, help="Output records file")
    gen.add_argument("--seed", type=int, help="Override the spec seed")
    gen.add_argument("--records", type=int, help="Override the record count")

    train_cmd = commands.add_parser("train", parents=[common], help="Train a reranker")
    train_cmd.add_argument("--config", help="Training config key=value file (default: built-in defaults)")
    train_cmd.add_argument("--data", required=True, help="Training records file")
    train_cmd.add_argument("--validation", help="Records scored after every epoch")
    train_cmd.add_argument("--out", required=True, help="Output checkpoint file")
    train_cmd.add_argument("--seed", type=int, help="Override the config seed")
    train_cmd.add_argument("--epochs", type=int, help="Override the config epochs")

    rank_cmd = commands.add_parser("rank", parents=[common], help="Rerank candidates for one query")
    rank_cmd.add_argument("--ckpt", required=True, help="Checkpoint file")
    rank_cmd.add_argument("--query", required=True, help="Query words, or a file holding them")
    rank_cmd.add_argument("--candidates", required=True,
                          help="File with one 'pid<TAB>words' candidate per line")
    rank_cmd.add_argument("--top-k", type=int, help="Print only the best K candidates")
    rank_cmd.add_argument("--agg", default="mean", help="Aggregation: mean, max or view:k (default: mean)")

    eval_cmd = commands.add_parser("eval", parents=[common], help="Mean nDCG@k of a checkpoint")
    eval_cmd.add_argument("--ckpt", required=True, help="Checkpoint file")
    eval_cmd.add_argument("--data", required=True, help="Records file")
    eval_cmd.add_argument("--k", type=int, default=10, help="nDCG cutoff (default: 10)")
    eval_cmd.add_argument("--agg", default="mean", help="Aggregation: mean, max or view:k (default: mean)")
    eval_cmd.add_argument("--baseline", action="store_true",
                          help="Also report the Monte-Carlo random-permutation baseline")
    eval_cmd.add_argument("--samples", type=int, default=100000,
                          help="Random permutations per record for --baseline (default: 100000)")
    eval_cmd.add_argument("--seed", type=int, default=0, help="Baseline sampling seed (default: 0)")

    audit_cmd = commands.add_parser("audit", parents=[common], help="Run a bias audit")
    audit_cmd.add_argument("--ckpt", required=True, help="Checkpoint file")
    audit_cmd.add_argument("--data", help="Records file (not needed for identifiers)")
    audit_cmd.add_argument("--mode", required=True, choices=("candidates", "identifiers", "anchors"))
    audit_cmd.add_argument("--seeds", type=int, default=3, help="Shuffle seeds 0..N-1 (default: 3)")
    audit_cmd.add_argument("--k", type=int, default=10, help="nDCG cutoff (default: 10)")

    ablate = commands.add_parser("ablate", parents=[common], help="Train variants and compare them")
    ablate.add_argument("--data", required=True, help="Records file, split into train/validation/test")
    ablate.add_argument("--config", help="Base training config file")
    ablate.add_argument("--views", help="View counts to sweep, e.g. 1..4")
    ablate.add_argument("--no-orthogonal", action="store_true",
                        help="Compare training with and without the orthogonal loss")
    ablate.add_argument("--agg-sweep", action="store_true", help="Compare aggregation strategies")
    ablate.add_argument("--ckpt", help="Model for --agg-sweep (default: train the base config)")
    ablate.add_argument("--view-tokens", action="store_true", help="Compare view-token designs")
    ablate.add_argument("--strategies", action="store_true",
                        help="Compare full training against single-component removals")
    ablate.add_argument("--k", type=int, default=10, help="nDCG cutoff (default: 10)")
    ablate.add_argument("--seed", type=int, default=0, help="Split seed (default: 0)")

    cost = commands.add_parser("cost", parents=[common], help="Model reranking pipeline costs")
    cost.add_argument("--n", default="100", help="List sizes, e.g. 100 or 5,50,500 or 10..30")
    cost.add_argument("--w", type=int, default=20, help="Sliding window size (default: 20)")
    cost.add_argument("--s", type=int, default=10, help="Sliding window stride (default: 10)")
    cost.add_argument("--mt", type=int, default=5, help="Tournament block size (default: 5)")
    cost.add_argument("--r", type=int, default=2, help="Tournament promotions per block (default: 2)")
    cost.add_argument("--top-k", type=int, default=10, help="Positions the tournament resolves (default: 10)")
    cost.add_argument("--multiplier", type=int, default=1,
                      help="Decode steps per generated identifier (default: 1)")
    cost.add_argument("--config", help="Training config whose shapes feed the FLOP model")

    return parser


def configure_logging(verbosity):
    # type: (int) -> None
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(stream=sys.stderr, level=level, format=LOG_FORMAT)


def _load_model(path):
    # type: (str) -> Checkpoint
    return load_checkpoint(require_input_path(path))


def _read_text_argument(value):
    # type: (str) -> str
    if os.path.isfile(value):
        with open(value, "r", encoding="utf-8") as f:
            return f.read()
    return value


def read_candidates(path, vocab):
    # type: (str, Vocab) -> List[Tuple[str, List[int]]]
    """
    Parse a candidates file: "pid<TAB>words" per line, blank and # lines skipped.

    Raises:
        RecordParseError: On a malformed line, naming its 1-based number.
    """
    candidates = []
    with open(require_input_path(path), "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            pid, sep, words = text.partition("\t")
            if not sep or not pid.strip():
                raise RecordParseError(number, "expected 'pid<TAB>words' in {}".format(path))
            candidates.append((pid.strip(), vocab.encode_text(words)))
    return candidates


def run_gen(parsed):
    # type: (argparse.Namespace) -> str
    spec = CorpusSpec.from_file(require_input_path(parsed.spec)) if parsed.spec else CorpusSpec()
    overrides = {}
    if parsed.seed is not None:
        overrides["seed"] = parsed.seed
    if parsed.records is not None:
        overrides["record_count"] = parsed.records
    if overrides:
        spec = spec.replace(**overrides)
    out = require_output_path(parsed.out)
    records = generate_corpus(spec)
    write_records(out, records)
    report = Report("generated corpus", ("records", "path", "seed"))
    report.add_row(records=len(records), path=out, seed=spec.seed)
    return render(report, parsed.format)


def run_train(parsed):
    # type: (argparse.Namespace) -> str
    config = TrainConfig.from_file(require_input_path(parsed.config)) if parsed.config else TrainConfig()
    overrides = {}
    if parsed.seed is not None:
        overrides["seed"] = parsed.seed
    if parsed.epochs is not None:
        overrides["epochs"] = parsed.epochs
    if overrides:
        config = config.replace(**overrides)
    out = require_output_path(parsed.out)
    records = read_records(require_input_path(parsed.data), config.vocab_size)
    validation = None
    if parsed.validation:
        validation = read_records(require_input_path(parsed.validation), config.vocab_size)
    result = train(config, records, validation)
    save_checkpoint(out, Checkpoint.from_result(result))
    report = Report("training history", ("epoch", "rank_loss", "orthogonal_loss", "validation_ndcg", "steps"))
    for stats in result.history:
        report.add_row(stats.to_dict())
    report.add_note("checkpoint written to {}".format(out))
    return render(report, parsed.format)


def run_rank(parsed):
    # type: (argparse.Namespace) -> str
    checkpoint = _load_model(parsed.ckpt)
    vocab = Vocab(checkpoint.config.vocab_size)
    query = vocab.encode_text(_read_text_argument(parsed.query))
    candidates = read_candidates(parsed.candidates, vocab)
    strategy = AggregationStrategy.parse(parsed.agg)
    reranker = Reranker(checkpoint.params, strategy=strategy)
    scores, ranking = reranker.rerank(query, [tokens for _, tokens in candidates])
    shown = ranking[:parsed.top_k] if parsed.top_k is not None else ranking
    report = Report("ranking", ("pid", "score", "rank"))
    for place, index in enumerate(shown, start=1):
        report.add_row(pid=candidates[index - 1][0], score=float(scores.scores[index - 1]), rank=place)
    if parsed.format == "json":
        return render(report, "json")
    return "".join("{}\t{!r}\t{}\n".format(row["pid"], row["score"], row["rank"]) for row in report.rows)


def run_eval(parsed):
    # type: (argparse.Namespace) -> str
    checkpoint = _load_model(parsed.ckpt)
    records = read_records(require_input_path(parsed.data), checkpoint.config.vocab_size)
    strategy = AggregationStrategy.parse(parsed.agg)
    report = Report("evaluation (nDCG@{})".format(parsed.k), ("scorer", "ndcg", "records"))
    report.add_row(scorer="model ({})".format(strategy), records=len(records),
                   ndcg=evaluate(checkpoint.params, records, parsed.k, strategy))
    if parsed.baseline:
        report.add_row(scorer="random permutation", records=len(records),
                       ndcg=random_permutation_baseline(records, parsed.k, parsed.samples, parsed.seed))
    return render(report, parsed.format)


def run_audit(parsed):
    # type: (argparse.Namespace) -> str
    checkpoint = _load_model(parsed.ckpt)
    if parsed.mode == "identifiers":
        return render(identifier_audit(PromptLayout.from_config(checkpoint.params.encoder_config)), parsed.format)
    if not parsed.data:
        raise PathError("--data is required for --mode {}".format(parsed.mode))
    records = read_records(require_input_path(parsed.data), checkpoint.config.vocab_size)
    if parsed.mode == "candidates":
        report = candidate_permutation_audit(Reranker(checkpoint.params, threads=1), records,
                                             seeds=list(range(parsed.seeds)), k=parsed.k)
        return render(report, parsed.format)
    label = "with orthogonal loss" if checkpoint.config.orthogonal_weight > 0 else "without orthogonal loss"
    stats = anchor_similarity_stats(checkpoint.params, records)
    return render(similarity_report({label: stats}), parsed.format)


def run_ablate(parsed):
    # type: (argparse.Namespace) -> str
    config = TrainConfig.from_file(require_input_path(parsed.config)) if parsed.config else TrainConfig()
    records = read_records(require_input_path(parsed.data), config.vocab_size)
    train_records, _, test_records = split(records, DEFAULT_SPLIT, parsed.seed)
    reports = []
    if parsed.views:
        reports.append(view_count_sweep(config, train_records, test_records, parse_grid(parsed.views), parsed.k))
    if parsed.no_orthogonal:
        reports.append(orthogonal_ablation(config, train_records, test_records, parsed.k))
    if parsed.agg_sweep:
        if parsed.ckpt:
            params = _load_model(parsed.ckpt).params
        else:
            params = train(config, train_records).params
        reports.append(aggregation_sweep(params, test_records, parsed.k))
    if parsed.view_tokens:
        reports.append(view_token_design_sweep(config, train_records, test_records, k=parsed.k))
    if parsed.strategies:
        reports.append(training_strategy_ablation(config, train_records, test_records, parsed.k))
    if not reports:
        raise ConfigError("nothing to ablate: give --views, --no-orthogonal, --agg-sweep, "
                          "--view-tokens or --strategies")
    return render_many(reports, parsed.format)


def run_cost(parsed):
    # type: (argparse.Namespace) -> str
    model = CostModel()
    if parsed.config:
        model = CostModel.from_train_config(TrainConfig.from_file(require_input_path(parsed.config)))
    report = cost_report(parse_grid(parsed.n), WindowConfig(parsed.w, parsed.s), parsed.mt, parsed.r,
                         parsed.top_k, parsed.multiplier, model)
    return render(report, parsed.format)


COMMANDS = {
    "gen": run_gen,
    "train": run_train,
    "rank": run_rank,
    "eval": run_eval,
    "audit": run_audit,
    "ablate": run_ablate,
    "cost": run_cost,
}


def main(args=None):
    # type: (list) -> int
    """
    Main entry point for the application.

    Args:
        args: Command line arguments (for testing). If None, uses sys.argv.

    Returns:
        Exit code.
    """
    parser = create_argument_parser()
    try:
        parsed_args = parser.parse_args(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE_ERROR

    configure_logging(parsed_args.verbose)
    try:
        output = COMMANDS[parsed_args.command](parsed_args)
    except MvpError as e:
        print("error: {}".format(e.reason), file=sys.stderr)
        logger.debug("details: %s", e.details)
        return EXIT_DOMAIN_ERROR
    except (IOError, OSError) as e:
        print("error: IOError: {}".format(" ".join(str(e).split())), file=sys.stderr)
        return EXIT_DOMAIN_ERROR

    sys.stdout.write(output)
    return EXIT_SUCCESS


if __name__ == "__main__":
    sys.exit(main())
