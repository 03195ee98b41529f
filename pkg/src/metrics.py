"""
Ranking quality measures: DCG, nDCG and Kendall's tau.

Rankings are 1-based candidate indices in ranked order, as returned by
decoder.rank; relevance lists are indexed by candidate.
"""

import math

import numpy as np

from typing import Hashable, Sequence

from .numerics import ParameterError
from .utils import MvpError


class UndefinedMetricError(MvpError):
    """Exception raised when nDCG has no positive relevance to normalize by."""


class MismatchedRankingError(MvpError):
    """Exception raised when two rankings do not cover the same items."""


def _check_k(k):
    # type: (int) -> None
    if isinstance(k, bool) or k < 1:
        raise ParameterError("cutoff k must be >= 1, got {}".format(k))


def _gains_in_order(ranking, rel):
    # type: (Sequence[int], Sequence[float]) -> np.ndarray
    rel = np.asarray(rel, dtype=np.float64)
    if len(ranking) != len(rel) or sorted(ranking) != list(range(1, len(rel) + 1)):
        raise MismatchedRankingError("ranking {} is not a permutation of 1..{}".format(
            list(ranking), len(rel)
        ))
    return rel[np.asarray(ranking, dtype=np.int64) - 1]


def _dcg(ordered, k):
    # type: (np.ndarray, int) -> float
    top = ordered[:k]
    discounts = np.log2(np.arange(2, top.size + 2))
    return float(((np.power(2.0, top) - 1.0) / discounts).sum())


def dcg_at_k(ranking, rel, k):
    # type: (Sequence[int], Sequence[float], int) -> float
    """
    Discounted cumulative gain with exponential gain and log2 discount.

    Args:
        ranking: 1-based candidate indices, best first.
        rel: Graded relevance per candidate.
        k: Cutoff; values above n act as n.
    """
    _check_k(k)
    return _dcg(_gains_in_order(ranking, rel), k)


def ideal_dcg_at_k(rel, k):
    # type: (Sequence[float], int) -> float
    _check_k(k)
    ideal = -np.sort(-np.asarray(rel, dtype=np.float64), kind="stable")
    return _dcg(ideal, k)


def ndcg_at_k(ranking, rel, k):
    # type: (Sequence[int], Sequence[float], int) -> float
    """
    DCG normalized by the DCG of the ideal ordering.

    Raises:
        UndefinedMetricError: If no candidate has positive relevance.
    """
    ideal = ideal_dcg_at_k(rel, k)
    if ideal <= 0.0:
        raise UndefinedMetricError("nDCG is undefined without positive relevance")
    return min(dcg_at_k(ranking, rel, k) / ideal, 1.0)


def kendall_tau(rank_a, rank_b):
    # type: (Sequence[Hashable], Sequence[Hashable]) -> float
    """
    Kendall's tau between two orderings of the same items.

    Raises:
        MismatchedRankingError: If the item sets differ or contain repeats.
    """
    if len(set(rank_a)) != len(rank_a) or set(rank_a) != set(rank_b) or len(rank_a) != len(rank_b):
        raise MismatchedRankingError("rankings cover different items")
    n = len(rank_a)
    if n < 2:
        return 1.0
    position = {item: i for i, item in enumerate(rank_b)}
    b = [position[item] for item in rank_a]
    concordant = discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            if b[i] < b[j]:
                concordant += 1
            else:
                discordant += 1
    return (concordant - discordant) / (n * (n - 1) / 2.0)


def mean(values):
    # type: (Sequence[float]) -> float
    """Arithmetic mean; NaN for an empty sequence."""
    return float(np.mean(values)) if len(values) else math.nan
