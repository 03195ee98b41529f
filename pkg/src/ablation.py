"""
Ablations.

Each sweep trains or reuses models that differ in one setting and
tabulates test nDCG per variant.
"""

import logging

import numpy as np

from typing import List, Optional, Sequence, Tuple

from .audit import REFERENCE_COSINES, anchor_similarity_stats
from .config import VIEW_TOKEN_MODES, TrainConfig
from .decoder import forward, rank
from .metrics import UndefinedMetricError, ndcg_at_k
from .model import AggregationStrategy, RankingRecord
from .numerics import no_grad
from .params import ModelParams
from .report import Report
from .trainer import TrainResult, evaluate, train
from .utils import map_ordered

logger = logging.getLogger(__name__)

VARIANT_COLUMNS = ("variant", "views", "view_token_mode", "orthogonal_weight", "ndcg",
                   "rank_loss", "orthogonal_loss")


def _train_variant(config, train_records, test_records, k):
    # type: (TrainConfig, Sequence[RankingRecord], Sequence[RankingRecord], int) -> Tuple[TrainResult, float]
    result = train(config, train_records)
    ndcg = evaluate(result.params, test_records, k)
    logger.info("variant views=%d mode=%s orthogonal_weight=%g: nDCG@%d=%.4f",
                config.views, config.view_token_mode, config.orthogonal_weight, k, ndcg)
    return result, ndcg


def _train_variants(variants, train_records, test_records, k, threads):
    # type: (List[Tuple[str, TrainConfig]], Sequence[RankingRecord], Sequence[RankingRecord], int, Optional[int]) -> List[Tuple[str, TrainConfig, TrainResult, float]]
    runs = map_ordered(lambda v: _train_variant(v[1], train_records, test_records, k), variants, threads=threads)
    return [(label, config, result, ndcg) for (label, config), (result, ndcg) in zip(variants, runs)]


def _variant_report(title, runs):
    # type: (str, List[Tuple[str, TrainConfig, TrainResult, float]]) -> Report
    report = Report(title, VARIANT_COLUMNS)
    for label, config, result, ndcg in runs:
        last = result.history[-1] if result.history else None
        report.add_row(
            variant=label,
            views=config.views,
            view_token_mode=config.view_token_mode,
            orthogonal_weight=config.orthogonal_weight,
            ndcg=ndcg,
            rank_loss=last.rank_loss if last else None,
            orthogonal_loss=last.orthogonal_loss if last else None,
        )
    return report


def view_count_sweep(config, train_records, test_records, views=(1, 2, 3, 4), k=10, threads=None):
    # type: (TrainConfig, Sequence[RankingRecord], Sequence[RankingRecord], Sequence[int], int, Optional[int]) -> Report
    """Train one model per view count m and report test nDCG@k for each."""
    variants = [("m={}".format(m), config.replace(views=m)) for m in views]
    runs = _train_variants(variants, train_records, test_records, k, threads)
    return _variant_report("view count sweep (nDCG@{})".format(k), runs)


def orthogonal_ablation(config, train_records, test_records, k=10, threads=None):
    # type: (TrainConfig, Sequence[RankingRecord], Sequence[RankingRecord], int, Optional[int]) -> Report
    """
    Train the same configuration with and without the orthogonal loss.

    Reports test nDCG@k together with the pairwise cosine statistics of the
    anchors and relevance vectors of each model on the test records.
    """
    weight = config.orthogonal_weight if config.orthogonal_weight > 0 else 1.0
    variants = [
        ("with orthogonal loss", config.replace(orthogonal_weight=weight)),
        ("without orthogonal loss", config.replace(orthogonal_weight=0.0)),
    ]
    runs = _train_variants(variants, train_records, test_records, k, threads)
    report = Report("orthogonal loss ablation (nDCG@{})".format(k), (
        "variant", "orthogonal_weight", "ndcg", "vectors", "cosine_mean", "cosine_std",
        "cosine_mean_abs", "reference_mean"
    ))
    for label, variant, result, ndcg in runs:
        stats = anchor_similarity_stats(result.params, test_records)
        for vectors, s in stats.items():
            report.add_row(variant=label, orthogonal_weight=variant.orthogonal_weight, ndcg=ndcg,
                           vectors=vectors, cosine_mean=s.mean, cosine_std=s.std, cosine_mean_abs=s.mean_abs,
                           reference_mean=REFERENCE_COSINES[label][vectors])
    report.add_note("reference_mean is a full-scale value, for direction only")
    return report


def per_view_grids(params, records, threads=None):
    # type: (ModelParams, Sequence[RankingRecord], Optional[int]) -> List[np.ndarray]
    """[n, m] per-view score grid of every record, one forward pass each."""
    def one(record):
        with no_grad():
            return forward(record.query, record.passages(), params, threads=1).scores.per_view.numpy()
    return map_ordered(one, list(records), threads=threads)


def aggregate_grid(grid, strategy):
    # type: (np.ndarray, AggregationStrategy) -> np.ndarray
    """numpy counterpart of decoder.aggregate for a stored grid."""
    if strategy == AggregationStrategy.mean():
        return grid.mean(axis=1)
    if strategy == AggregationStrategy.max():
        return grid.max(axis=1)
    return grid[:, strategy.view - 1]


def aggregation_sweep(params, records, k=10, threads=None):
    # type: (ModelParams, Sequence[RankingRecord], int, Optional[int]) -> Report
    """
    nDCG@k of Mean, Max and every SingleView aggregation of one model.

    All strategies share one forward pass per record.
    """
    m = params.encoder_config.views
    strategies = [AggregationStrategy.mean(), AggregationStrategy.max()]
    strategies += [AggregationStrategy.single_view(v) for v in range(1, m + 1)]
    grids = per_view_grids(params, records, threads)
    report = Report("aggregation sweep (nDCG@{})".format(k), ("strategy", "ndcg", "records"))
    for strategy in strategies:
        values = []
        for record, grid in zip(records, grids):
            try:
                values.append(ndcg_at_k(rank(aggregate_grid(grid, strategy)), record.gains(), k))
            except UndefinedMetricError:
                continue
        report.add_row(strategy=str(strategy), ndcg=float(np.mean(values)) if values else None,
                       records=len(values))
    return report


def view_token_design_sweep(config, train_records, test_records, modes=VIEW_TOKEN_MODES, k=10, threads=None):
    # type: (TrainConfig, Sequence[RankingRecord], Sequence[RankingRecord], Sequence[str], int, Optional[int]) -> Report
    """Train one model per view-token design and report test nDCG@k."""
    variants = [(mode, config.replace(view_token_mode=mode)) for mode in modes]
    runs = _train_variants(variants, train_records, test_records, k, threads)
    return _variant_report("view token design sweep (nDCG@{})".format(k), runs)


def training_strategy_ablation(config, train_records, test_records, k=10, threads=None):
    # type: (TrainConfig, Sequence[RankingRecord], Sequence[RankingRecord], int, Optional[int]) -> Report
    """Full model against no orthogonal loss and against a single view."""
    variants = [
        ("full", config),
        ("w/o orthogonal loss", config.replace(orthogonal_weight=0.0)),
        ("w/o multi-view", config.replace(views=1)),
    ]
    runs = _train_variants(variants, train_records, test_records, k, threads)
    return _variant_report("training strategy ablation (nDCG@{})".format(k), runs)

