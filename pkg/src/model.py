"""
Data model for ranking records, scores and pipeline costs.

These are plain value classes shared by the data, decoder, trainer,
pipeline-bench and audit modules.
"""

from enum import Enum

import numpy as np

from typing import Dict, List, Optional, Sequence

from .numerics import Tensor
from .utils import ConfigError, MvpError

MIN_CANDIDATES = 2
MAX_CANDIDATES = 100


class RecordError(MvpError):
    """Exception raised when a ranking record violates its invariants."""


def check_permutation(ranks, what="ranks"):
    # type: (Sequence[int], str) -> None
    """
    Raises:
        RecordError: Unless ranks is a permutation of 1..len(ranks).
    """
    n = len(ranks)
    seen = set()
    for r in ranks:
        if isinstance(r, bool) or not isinstance(r, (int, np.integer)):
            raise RecordError("{} value {!r} is not an integer".format(what, r))
        if not 1 <= r <= n:
            raise RecordError("{} value {} outside 1..{}".format(what, r, n))
        if r in seen:
            raise RecordError("{} value {} repeated".format(what, r))
        seen.add(r)


class Candidate(object):
    """One candidate passage of a record."""

    def __init__(self, pid, tokens):
        # type: (str, Sequence[int]) -> None
        self.pid = str(pid)
        self.tokens = [int(t) for t in tokens]

    def __eq__(self, other):
        # type: (object) -> bool
        if not isinstance(other, Candidate):
            return False
        return self.pid == other.pid and self.tokens == other.tokens

    def __ne__(self, other):
        return not self == other

    def __hash__(self):
        # type: () -> int
        return hash((self.pid, tuple(self.tokens)))

    def __repr__(self):
        # type: () -> str
        return "Candidate({}, {} tokens)".format(self.pid, len(self.tokens))


class RankingRecord(object):
    """One query with its candidates and their ground-truth ranks."""

    def __init__(self, query_id, query, candidates, ranks, relevance=None):
        # type: (str, Sequence[int], Sequence[Candidate], Sequence[int], Optional[Sequence[float]]) -> None
        """
        Initialize a ranking record.

        Args:
            query_id: Unique id of the query.
            query: Query token ids.
            candidates: Candidate passages.
            ranks: Rank of each candidate, 1 = most relevant.
            relevance: Optional graded relevance per candidate.

        Raises:
            RecordError: If the candidate count is outside [2, 100], ranks are
                not a permutation, passage ids repeat or lengths disagree.
        """
        self.query_id = str(query_id)
        self.query = [int(t) for t in query]
        self.candidates = list(candidates)
        check_permutation(list(ranks))
        self.ranks = [int(r) for r in ranks]
        self.relevance = None if relevance is None else [float(v) for v in relevance]
        self._validate()

    def _validate(self):
        # type: () -> None
        n = len(self.candidates)
        if not MIN_CANDIDATES <= n <= MAX_CANDIDATES:
            raise RecordError("record '{}' has {} candidates, expected {}..{}".format(
                self.query_id, n, MIN_CANDIDATES, MAX_CANDIDATES
            ))
        if len(self.ranks) != n:
            raise RecordError("record '{}' has {} ranks for {} candidates".format(
                self.query_id, len(self.ranks), n
            ))
        if len(set(self.pids)) != n:
            raise RecordError("record '{}' repeats a passage id".format(self.query_id))
        if self.relevance is not None:
            if len(self.relevance) != n:
                raise RecordError("record '{}' has {} relevance values for {} candidates".format(
                    self.query_id, len(self.relevance), n
                ))
            if any(not np.isfinite(v) or v < 0 for v in self.relevance):
                raise RecordError("record '{}' has negative or non-finite relevance".format(self.query_id))

    @property
    def n(self):
        # type: () -> int
        return len(self.candidates)

    @property
    def pids(self):
        # type: () -> List[str]
        return [c.pid for c in self.candidates]

    def passages(self):
        # type: () -> List[List[int]]
        return [c.tokens for c in self.candidates]

    def gains(self):
        # type: () -> List[float]
        """
        Graded relevance used by nDCG.

        Stored relevance when present, otherwise n - rank, which gives the
        last-ranked candidate zero gain.
        """
        if self.relevance is not None:
            return list(self.relevance)
        return [float(self.n - r) for r in self.ranks]

    def max_token(self):
        # type: () -> int
        ids = list(self.query)
        for c in self.candidates:
            ids.extend(c.tokens)
        return max(ids) if ids else -1

    def subset(self, indices):
        # type: (Sequence[int]) -> RankingRecord
        """
        Record over the given candidates, re-ranked 1..k by their old ranks.
        """
        order = sorted(indices, key=lambda i: (self.ranks[i], i))
        new_rank = {i: r + 1 for r, i in enumerate(order)}
        return RankingRecord(
            self.query_id,
            self.query,
            [self.candidates[i] for i in indices],
            [new_rank[i] for i in indices],
            None if self.relevance is None else [self.relevance[i] for i in indices],
        )

    def permuted(self, order):
        # type: (Sequence[int]) -> RankingRecord
        """Same record with candidates presented in the given order."""
        if sorted(order) != list(range(self.n)):
            raise RecordError("order {} is not a permutation of 0..{}".format(list(order), self.n - 1))
        return RankingRecord(
            self.query_id,
            self.query,
            [self.candidates[i] for i in order],
            [self.ranks[i] for i in order],
            None if self.relevance is None else [self.relevance[i] for i in order],
        )

    def __eq__(self, other):
        # type: (object) -> bool
        if not isinstance(other, RankingRecord):
            return False
        return (self.query_id == other.query_id and self.query == other.query
                and self.candidates == other.candidates and self.ranks == other.ranks
                and self.relevance == other.relevance)

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        # type: () -> str
        return "RankingRecord({}, n={})".format(self.query_id, self.n)


class AggregationKind(Enum):
    """How per-view scores combine into one score per candidate."""
    MEAN = "mean"
    MAX = "max"
    SINGLE_VIEW = "view"


class AggregationStrategy(object):
    """Mean, Max or SingleView(k) aggregation; k is 1-based."""

    def __init__(self, kind, view=None):
        # type: (AggregationKind, Optional[int]) -> None
        if kind is AggregationKind.SINGLE_VIEW:
            if view is None or isinstance(view, bool) or int(view) != view or view < 1:
                raise ConfigError("single-view aggregation needs a view index >= 1, got {}".format(view))
            view = int(view)
        else:
            view = None
        self.kind = kind
        self.view = view

    @classmethod
    def mean(cls):
        # type: () -> AggregationStrategy
        return cls(AggregationKind.MEAN)

    @classmethod
    def max(cls):
        # type: () -> AggregationStrategy
        return cls(AggregationKind.MAX)

    @classmethod
    def single_view(cls, k):
        # type: (int) -> AggregationStrategy
        return cls(AggregationKind.SINGLE_VIEW, k)

    @classmethod
    def parse(cls, text):
        # type: (str) -> AggregationStrategy
        """
        Parse "mean", "max" or "view:k".

        Raises:
            ConfigError: On any other text.
        """
        value = text.strip().lower()
        if value == "mean":
            return cls.mean()
        if value == "max":
            return cls.max()
        if value.startswith("view:") and value[5:].isdigit():
            return cls.single_view(int(value[5:]))
        raise ConfigError("unknown aggregation '{}' (expected mean, max or view:k)".format(text))

    def __str__(self):
        # type: () -> str
        if self.kind is AggregationKind.SINGLE_VIEW:
            return "view:{}".format(self.view)
        return self.kind.value

    def __repr__(self):
        # type: () -> str
        return "AggregationStrategy({})".format(self)

    def __eq__(self, other):
        # type: (object) -> bool
        if not isinstance(other, AggregationStrategy):
            return False
        return self.kind is other.kind and self.view == other.view

    def __ne__(self, other):
        return not self == other

    def __hash__(self):
        # type: () -> int
        return hash((self.kind, self.view))


class ScoreVector(object):
    """
    Candidate scores of one query.

    Attributes:
        values: Differentiable [n] scores.
        per_view: [n, m] grid of per-view dot products the scores came from.
        strategy: Aggregation that produced values from per_view.
    """

    def __init__(self, values, per_view, strategy):
        # type: (Tensor, Tensor, AggregationStrategy) -> None
        self.values = values
        self.per_view = per_view
        self.strategy = strategy

    @property
    def scores(self):
        # type: () -> np.ndarray
        return self.values.numpy()

    @property
    def n(self):
        # type: () -> int
        return self.values.shape[0]

    def __len__(self):
        # type: () -> int
        return self.n

    def __repr__(self):
        # type: () -> str
        return "ScoreVector(n={}, strategy={})".format(self.n, self.strategy)


class LossValue(object):
    """Ranking and orthogonal components of the training objective."""

    def __init__(self, rank, orthogonal, weight=1.0):
        # type: (Tensor, Tensor, float) -> None
        self.rank = rank
        self.orthogonal = orthogonal
        self.weight = weight
        if weight == 1.0:
            self.total = rank + orthogonal
        else:
            self.total = rank + orthogonal * weight

    @property
    def rank_loss(self):
        # type: () -> float
        return self.rank.item()

    @property
    def orthogonal_loss(self):
        # type: () -> float
        return self.orthogonal.item()

    @property
    def total_loss(self):
        # type: () -> float
        return self.total.item()

    def __repr__(self):
        # type: () -> str
        return "LossValue(rank={:.6f}, orthogonal={:.6f}, total={:.6f})".format(
            self.rank_loss, self.orthogonal_loss, self.total_loss
        )


class WindowConfig(object):
    """Sliding-window size w and stride s."""

    def __init__(self, window=20, stride=10):
        # type: (int, int) -> None
        if not 1 <= stride <= window:
            raise ConfigError("window config needs 1 <= stride <= window, got w={} s={}".format(
                window, stride
            ))
        self.window = window
        self.stride = stride

    def __repr__(self):
        # type: () -> str
        return "WindowConfig(w={}, s={})".format(self.window, self.stride)


class PipelineCost(object):
    """Prompt and decode-step accounting of one reranking run."""

    def __init__(self, prompt_count=0, decode_steps=0, passages_encoded=0, modeled_flops=None):
        # type: (int, int, int, Optional[float]) -> None
        for name, value in (("prompt_count", prompt_count), ("decode_steps", decode_steps),
                            ("passages_encoded", passages_encoded)):
            if value < 0:
                raise ConfigError("{} must be non-negative, got {}".format(name, value))
        self.prompt_count = int(prompt_count)
        self.decode_steps = int(decode_steps)
        self.passages_encoded = int(passages_encoded)
        self.modeled_flops = modeled_flops

    def as_tuple(self):
        return self.prompt_count, self.decode_steps, self.passages_encoded

    def with_flops(self, flops):
        # type: (float) -> PipelineCost
        return PipelineCost(self.prompt_count, self.decode_steps, self.passages_encoded, flops)

    def to_dict(self):
        # type: () -> Dict[str, object]
        return {
            "prompt_count": self.prompt_count,
            "decode_steps": self.decode_steps,
            "passages_encoded": self.passages_encoded,
            "modeled_flops": self.modeled_flops,
        }

    def __add__(self, other):
        # type: (PipelineCost) -> PipelineCost
        flops = None
        if self.modeled_flops is not None and other.modeled_flops is not None:
            flops = self.modeled_flops + other.modeled_flops
        return PipelineCost(self.prompt_count + other.prompt_count,
                            self.decode_steps + other.decode_steps,
                            self.passages_encoded + other.passages_encoded, flops)

    def __eq__(self, other):
        # type: (object) -> bool
        if not isinstance(other, PipelineCost):
            return False
        return self.as_tuple() == other.as_tuple() and self.modeled_flops == other.modeled_flops

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        # type: () -> str
        return "PipelineCost(prompts={}, decode_steps={}, encoded={})".format(*self.as_tuple())
