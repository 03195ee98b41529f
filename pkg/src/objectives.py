"""
Training objectives: reciprocal-rank targets, ListNet cross-entropy and
the orthogonal anchor regularizer.
"""

import logging
import math

import numpy as np

from typing import Optional, Sequence, Tuple, Union

from .model import LossValue, RecordError, check_permutation
from .numerics import (
    DimensionError, NonFiniteError, Tensor, as_tensor, log_softmax, matmul, normalize,
    reduce_sum, softmax, stack, swapaxes
)
from .utils import MvpError

logger = logging.getLogger(__name__)


class LabelError(MvpError):
    """Exception raised for ranks that are not a permutation of 1..n."""


class TrainingDivergenceError(MvpError):
    """Exception raised when a loss component is not finite."""

    def __init__(self, component, step=None):
        # type: (str, Optional[int]) -> None
        self.component = component
        self.step = step
        where = "" if step is None else " at step {}".format(step)
        super(TrainingDivergenceError, self).__init__(
            "non-finite {}{}".format(component, where)
        )

    def at_step(self, step):
        # type: (int) -> TrainingDivergenceError
        return TrainingDivergenceError(self.component, step)


class RankLabels(object):
    """Ground-truth ranks r_i and their reciprocal targets y_i = 1 / r_i."""

    def __init__(self, ranks):
        # type: (Sequence[int]) -> None
        try:
            check_permutation(list(ranks))
        except RecordError as e:
            raise LabelError(e.message)
        self.ranks = [int(r) for r in ranks]

    @property
    def targets(self):
        # type: () -> np.ndarray
        return 1.0 / np.asarray(self.ranks, dtype=np.float64)

    def __len__(self):
        # type: () -> int
        return len(self.ranks)


def reciprocal_targets(ranks):
    # type: (Sequence[int]) -> np.ndarray
    """
    Raises:
        LabelError: On a repeated or out-of-range rank.
    """
    return RankLabels(ranks).targets


def listnet_loss(y, s, temperature=0.8):
    # type: (Union[Tensor, np.ndarray, Sequence[float]], Tensor, float) -> Tensor
    """
    ListNet cross-entropy -sum P(y) log P(s), both softmaxes at temperature.

    The gradient with respect to s is (P(s) - P(y)) / temperature.

    Raises:
        DimensionError: If y and s differ in length.
        ParameterError: If temperature is not positive.
    """
    y, s = as_tensor(y).detach(), as_tensor(s)
    if y.ndim != 1 or y.shape != s.shape:
        raise DimensionError("listnet_loss needs equal-length vectors, got {} and {}".format(
            y.shape, s.shape
        ))
    target = softmax(y, temperature)
    return -reduce_sum(target * log_softmax(s, temperature))


def entropy(p):
    # type: (Union[Tensor, np.ndarray, Sequence[float]]) -> float
    """Shannon entropy of a probability vector, 0 log 0 taken as 0."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    positive = p[p > 0]
    return float(-(positive * np.log(positive)).sum())


def target_entropy(y, temperature=0.8):
    # type: (Union[np.ndarray, Sequence[float]], float) -> float
    """Entropy of P(y); the lower bound of listnet_loss(y, ., temperature)."""
    return entropy(softmax(Tensor(y), temperature))


def _anchor_matrix(anchors):
    # type: (object) -> Tensor
    values = getattr(anchors, "anchors", anchors)
    values = as_tensor(values)
    if values.ndim != 2:
        raise DimensionError("anchors must be [m, d], got {}".format(values.shape))
    return values


def orthogonal_loss(anchors):
    # type: (object) -> Tensor
    """
    Sum of squared cosines over ordered pairs of distinct anchors.

    Args:
        anchors: AnchorSet or [m, d] tensor.

    Raises:
        DegenerateVectorError: If an anchor has norm at most 1e-12.
    """
    values = _anchor_matrix(anchors)
    m = values.shape[0]
    unit = normalize(values, axis=1)
    cosines = matmul(unit, swapaxes(unit, 0, 1))
    off_diagonal = cosines * (1.0 - np.eye(m))
    return reduce_sum(off_diagonal * off_diagonal)


def _finite(value, component):
    # type: (Tensor, str) -> Tensor
    if not math.isfinite(value.item()):
        raise TrainingDivergenceError(component)
    return value


def query_loss(scores, anchors, ranks, temperature=0.8, orthogonal_weight=1.0):
    # type: (Tensor, object, Sequence[int], float, float) -> LossValue
    """Objective of a single query."""
    try:
        rank_part = _finite(listnet_loss(reciprocal_targets(ranks), scores, temperature), "rank_loss")
    except NonFiniteError:
        raise TrainingDivergenceError("rank_loss")
    try:
        orthogonal_part = _finite(orthogonal_loss(anchors), "orthogonal_loss")
    except NonFiniteError:
        raise TrainingDivergenceError("orthogonal_loss")
    return LossValue(rank_part, orthogonal_part, orthogonal_weight)


def total_loss(outputs, temperature=0.8, orthogonal_weight=1.0):
    # type: (Sequence[Tuple[Tensor, object, Sequence[int]]], float, float) -> LossValue
    """
    Batch objective: per-query losses averaged over the batch.

    Args:
        outputs: (scores, anchors, ranks) of every query in the batch; scores
            may be a ScoreVector or its value tensor.
        temperature: ListNet temperature.
        orthogonal_weight: Factor on the orthogonal term, 1.0 for the plain sum.

    Raises:
        TrainingDivergenceError: Naming the non-finite component.
    """
    if not outputs:
        raise DimensionError("total_loss over an empty batch")
    rank_terms = []
    orthogonal_terms = []
    for scores, anchors, ranks in outputs:
        loss = query_loss(getattr(scores, "values", scores), anchors, ranks,
                          temperature, orthogonal_weight)
        rank_terms.append(loss.rank)
        orthogonal_terms.append(loss.orthogonal)
    count = float(len(outputs))
    rank_mean = reduce_sum(stack(rank_terms)) / count
    orthogonal_mean = reduce_sum(stack(orthogonal_terms)) / count
    return LossValue(rank_mean, orthogonal_mean, orthogonal_weight)
