"""
Anchor-guided decoding and candidate scoring.

A single learned BOS input cross-attends over the n relevance vectors of
one view and becomes that view's anchor. All m views run as one batch
through the decoder. Candidates are scored by the dot product of each
anchor with the matching relevance vector, and the per-view scores are
aggregated into one score per candidate.

Attention sums over candidates use numpy's reduction order, not an
accumulation sorted by candidate index. Reordering the candidates can
therefore change anchors in the last bits; order checks compare anchors
at 1e-12 and scores at 1e-9.
"""

import logging
import threading
from collections import OrderedDict

import numpy as np

from typing import Dict, List, Optional, Sequence, Tuple, Union

from .config import DecoderConfig
from .encoder import PromptLayout, RelevanceMatrix, build_prompt, encode_candidates, encode_views
from .layers import (
    attention_tensors, feed_forward, feed_forward_tensors, init_gain,
    init_matrix, multi_head_attention
)
from .model import (
    MAX_CANDIDATES, AggregationKind, AggregationStrategy, RankingRecord, ScoreVector
)
from .numerics import (
    DimensionError, Tensor, layer_norm, matmul, no_grad, reduce_max, reduce_mean,
    reduce_sum, reshape, stack, swapaxes
)
from .utils import MvpError

logger = logging.getLogger(__name__)


class ViewIndexError(MvpError):
    """Exception raised for a view index outside 1..m."""


class EmptyCandidatesError(MvpError):
    """Exception raised when there is nothing to decode or rank."""


class DecoderParams(object):
    """Decoder view over a model's tensors."""

    def __init__(self, config, tensors):
        # type: (DecoderConfig, Dict[str, Tensor]) -> None
        self.config = config
        self.tensors = tensors

    @property
    def bos(self):
        # type: () -> Tensor
        return self.tensors["decoder.bos"]


def init_decoder_tensors(config, rng, std):
    # type: (DecoderConfig, np.random.Generator, float) -> Dict[str, Tensor]
    """
    Fresh decoder weights.

    Self-attention over the lone BOS position only needs its value and
    output projections, so no query or key matrices are created for it.
    Cross-attention keys and values get no positional term.
    """
    d = config.d
    tensors = OrderedDict()
    tensors["decoder.bos"] = init_matrix(rng, (1, d), std)
    for i in range(config.layers):
        prefix = "decoder.layers.{}".format(i)
        tensors[prefix + ".self_attention_norm"] = init_gain(d)
        tensors.update(attention_tensors(prefix + ".self_attention", d, rng, std,
                                         parts=("value", "output")))
        tensors[prefix + ".cross_attention_norm"] = init_gain(d)
        tensors.update(attention_tensors(prefix + ".cross_attention", d, rng, std))
        tensors[prefix + ".feed_forward_norm"] = init_gain(d)
        tensors.update(feed_forward_tensors(prefix + ".feed_forward", d, config.mlp_ratio, rng, std))
    tensors["decoder.final_norm"] = init_gain(d)
    return tensors


class AnchorSet(object):
    """
    The m anchor vectors of one query.

    Attributes:
        anchors: [m, d] tensor, row k-1 is anchor a_k.
        attention: Cross-attention weights per decoder layer, each
            [m, heads, 1, n], when captured.
    """

    def __init__(self, anchors, attention=None):
        # type: (Tensor, Optional[List[np.ndarray]]) -> None
        if anchors.ndim != 2:
            raise DimensionError("anchor set must be [m, d], got {}".format(anchors.shape))
        self.anchors = anchors
        self.attention = attention or []

    @property
    def m(self):
        # type: () -> int
        return self.anchors.shape[0]

    @property
    def d(self):
        # type: () -> int
        return self.anchors.shape[1]

    def anchor(self, k):
        # type: (int) -> Tensor
        """Anchor a_k, 1-based."""
        if not 1 <= k <= self.m:
            raise ViewIndexError("view {} outside 1..{}".format(k, self.m))
        return self.anchors[k - 1]

    def numpy(self):
        # type: () -> np.ndarray
        return self.anchors.numpy()

    def __repr__(self):
        # type: () -> str
        return "AnchorSet(m={}, d={})".format(self.m, self.d)


def stack_view(rel, k):
    # type: (RelevanceMatrix, int) -> Tensor
    """
    E_k: the view-k relevance vectors of all candidates, shape [n, d].

    Raises:
        ViewIndexError: Unless 1 <= k <= m.
    """
    if isinstance(k, bool) or not 1 <= k <= rel.m:
        raise ViewIndexError("view {} outside 1..{}".format(k, rel.m))
    return rel.values[:, k - 1, :]


def unstack_views(views):
    # type: (Sequence[Tensor]) -> RelevanceMatrix
    """Inverse of stack_view over k = 1..m."""
    if not views:
        raise ViewIndexError("no views to unstack")
    return RelevanceMatrix(stack(list(views), axis=1))


def _decode(memory, params, capture=None):
    # type: (Tensor, DecoderParams, Optional[List[np.ndarray]]) -> Tensor
    """Decoder stack over memory [..., m, n, d]; returns anchors [..., m, d]."""
    config = params.config
    if memory.ndim < 3:
        raise DimensionError("decoder memory must be [..., m, n, d], got {}".format(memory.shape))
    n, d = memory.shape[-2:]
    if n == 0:
        raise EmptyCandidatesError("cannot decode an anchor over zero candidates")
    if d != config.d:
        raise DimensionError("relevance width d={} does not match decoder width {}".format(d, config.d))
    weights = params.tensors
    lead = memory.shape[:-2]
    h = Tensor(np.zeros(lead + (1, d))) + params.bos
    for i in range(config.layers):
        prefix = "decoder.layers.{}".format(i)
        normed = layer_norm(h, weights[prefix + ".self_attention_norm"])
        h = h + matmul(matmul(normed, weights[prefix + ".self_attention.value"]),
                       weights[prefix + ".self_attention.output"])
        normed = layer_norm(h, weights[prefix + ".cross_attention_norm"])
        h = h + multi_head_attention(normed, memory, weights, prefix + ".cross_attention",
                                     config.heads, capture=capture)
        normed = layer_norm(h, weights[prefix + ".feed_forward_norm"])
        h = h + feed_forward(normed, weights, prefix + ".feed_forward")
    h = layer_norm(h, weights["decoder.final_norm"])
    return reshape(h, lead + (d,))


def decode_anchor(e_k, params):
    # type: (Tensor, DecoderParams) -> Tensor
    """
    Anchor a_k of one view.

    Args:
        e_k: [n, d] relevance vectors of the view.
        params: Decoder parameters.

    Returns:
        [1, d] anchor.

    Raises:
        EmptyCandidatesError: If n is 0.
    """
    if e_k.ndim != 2:
        raise DimensionError("E_k must be [n, d], got {}".format(e_k.shape))
    if e_k.shape[0] == 0:
        raise EmptyCandidatesError("cannot decode an anchor over zero candidates")
    return _decode(reshape(e_k, (1,) + e_k.shape), params)


def decode_anchors(rel, params, capture=False):
    # type: (RelevanceMatrix, DecoderParams, bool) -> AnchorSet
    """All m anchors in one decoder invocation, views as the batch axis."""
    attention = [] if capture else None  # type: Optional[List[np.ndarray]]
    anchors = _decode(swapaxes(rel.values, 0, 1), params, capture=attention)
    return AnchorSet(anchors, attention)


def aggregate(per_view, strategy):
    # type: (Tensor, AggregationStrategy) -> Tensor
    """
    Combine an [n, m] per-view score grid into [n] scores.

    Raises:
        ViewIndexError: If a single view lies outside 1..m.
    """
    m = per_view.shape[1]
    if strategy.kind is AggregationKind.MEAN:
        return reduce_mean(per_view, axis=1)
    if strategy.kind is AggregationKind.MAX:
        return reduce_max(per_view, axis=1)
    if not 1 <= strategy.view <= m:
        raise ViewIndexError("view {} outside 1..{}".format(strategy.view, m))
    return per_view[:, strategy.view - 1]


def score(anchors, rel, strategy=None):
    # type: (AnchorSet, RelevanceMatrix, Optional[AggregationStrategy]) -> ScoreVector
    """
    Dot-product scores s_i of every candidate.

    Raises:
        DimensionError: If the view count or the width disagree; the message
            names the axis.
        ViewIndexError: For a single view outside 1..m.
    """
    strategy = strategy or AggregationStrategy.mean()
    if anchors.m != rel.m:
        raise DimensionError("axis m: {} anchors for {} views".format(anchors.m, rel.m))
    if anchors.d != rel.d:
        raise DimensionError("axis d: anchor width {} vs relevance width {}".format(anchors.d, rel.d))
    per_view = reduce_sum(rel.values * anchors.anchors, axis=-1)
    return ScoreVector(aggregate(per_view, strategy), per_view, strategy)


def rank(scores):
    # type: (Union[ScoreVector, Sequence[float], np.ndarray]) -> List[int]
    """
    1-based candidate indices by descending score, ties by ascending index.
    """
    values = scores.scores if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    return [int(i) + 1 for i in sorted(range(len(values)), key=lambda i: (-values[i], i))]


class Forward(object):
    """Everything one query's forward pass produced."""

    def __init__(self, relevance, anchors, scores):
        # type: (RelevanceMatrix, AnchorSet, ScoreVector) -> None
        self.relevance = relevance
        self.anchors = anchors
        self.scores = scores


def forward(query, passages, params, strategy=None, layout=None, batched=False, threads=None,
            capture=False):
    # type: (Sequence[int], Sequence[Sequence[int]], object, Optional[AggregationStrategy], Optional[PromptLayout], bool, Optional[int], bool) -> Forward
    """
    Encoder, decoder and scoring for one query.

    Args:
        query: Query token ids.
        passages: Candidate token ids.
        params: ModelParams.
        strategy: Aggregation, Mean by default.
        layout: Prompt layout; derived from the encoder config when omitted.
        batched: Encode all prompts in one batched pass (the training path)
            instead of one pass per passage.
        threads: Worker thread cap for the per-passage path.
        capture: Keep cross-attention weights on the anchor set.
    """
    if len(passages) == 0:
        raise EmptyCandidatesError("no candidates to rank")
    if len(passages) > MAX_CANDIDATES:
        raise DimensionError("{} candidates exceed the limit of {}".format(len(passages), MAX_CANDIDATES))
    encoder = params.encoder
    if layout is None:
        layout = PromptLayout.from_config(encoder.config)
    if batched:
        prompts = [build_prompt(query, p, layout, slot=i) for i, p in enumerate(passages)]
        rel = RelevanceMatrix(encode_views(prompts, encoder))
    else:
        rel = encode_candidates(query, passages, encoder, layout=layout, threads=threads)
    anchors = decode_anchors(rel, params.decoder, capture=capture)
    return Forward(rel, anchors, score(anchors, rel, strategy))


def forward_batch(queries, params, strategy=None, layout=None):
    # type: (Sequence[Tuple[Sequence[int], Sequence[Sequence[int]]]], object, Optional[AggregationStrategy], Optional[PromptLayout]) -> List[Forward]
    """
    Batched forward over several queries, the training path.

    The prompts of all queries share one encode_views call, and queries with
    the same candidate count share one decoder call. Each result matches
    forward(query, passages, params, batched=True) for that query up to
    rounding.

    Args:
        queries: (query, passages) pairs.
        params: ModelParams.
        strategy: Aggregation, Mean by default.
        layout: Prompt layout; derived from the encoder config when omitted.

    Returns:
        One Forward per query, in input order.
    """
    if not queries:
        raise DimensionError("no queries to run")
    encoder = params.encoder
    if layout is None:
        layout = PromptLayout.from_config(encoder.config)
    prompts = []  # type: List[List[int]]
    bounds = []  # type: List[Tuple[int, int]]
    for query, passages in queries:
        if len(passages) == 0:
            raise EmptyCandidatesError("no candidates to rank")
        if len(passages) > MAX_CANDIDATES:
            raise DimensionError("{} candidates exceed the limit of {}".format(len(passages), MAX_CANDIDATES))
        start = len(prompts)
        prompts.extend(build_prompt(query, p, layout, slot=i) for i, p in enumerate(passages))
        bounds.append((start, len(prompts)))
    views = encode_views(prompts, encoder)
    relevance = [RelevanceMatrix(views[start:stop]) for start, stop in bounds]

    by_size = OrderedDict()  # type: Dict[int, List[int]]
    for q, rel in enumerate(relevance):
        by_size.setdefault(rel.n, []).append(q)
    results = [None] * len(queries)  # type: List[Optional[Forward]]
    for members in by_size.values():
        memory = stack([swapaxes(relevance[q].values, 0, 1) for q in members], axis=0)
        anchors = _decode(memory, params.decoder)
        for offset, q in enumerate(members):
            anchor_set = AnchorSet(anchors[offset])
            results[q] = Forward(relevance[q], anchor_set, score(anchor_set, relevance[q], strategy))
    return results


def rerank(query, candidates, params, strategy=None, layout=None, threads=None):
    # type: (Sequence[int], Sequence[Sequence[int]], object, Optional[AggregationStrategy], Optional[PromptLayout], Optional[int]) -> Tuple[ScoreVector, List[int]]
    """
    Score and order the candidates of one query in a single decoding step.

    Returns:
        (scores, 1-based ranking).
    """
    with no_grad():
        result = forward(query, candidates, params, strategy=strategy, layout=layout, threads=threads)
    return result.scores, rank(result.scores)


class Reranker(object):
    """
    Inference wrapper around a parameter set.

    Counts decode steps: one per reranked query, however many candidates it
    has. Safe to share between threads.
    """

    def __init__(self, params, strategy=None, layout=None, threads=None):
        # type: (object, Optional[AggregationStrategy], Optional[PromptLayout], Optional[int]) -> None
        self.params = params
        self.strategy = strategy or AggregationStrategy.mean()
        self.layout = layout or PromptLayout.from_config(params.encoder_config)
        self.threads = threads
        self._decode_steps = 0
        self._lock = threading.Lock()

    @property
    def decode_steps(self):
        # type: () -> int
        with self._lock:
            return self._decode_steps

    def reset(self):
        # type: () -> None
        with self._lock:
            self._decode_steps = 0

    def rerank(self, query, candidates, strategy=None):
        # type: (Sequence[int], Sequence[Sequence[int]], Optional[AggregationStrategy]) -> Tuple[ScoreVector, List[int]]
        result = rerank(query, candidates, self.params, strategy=strategy or self.strategy,
                        layout=self.layout, threads=self.threads)
        with self._lock:
            self._decode_steps += 1
        return result

    def score_record(self, record):
        # type: (RankingRecord) -> np.ndarray
        """Scores aligned with record.candidates."""
        scores, _ = self.rerank(record.query, record.passages())
        return scores.scores

    __call__ = score_record

    def item_scorer(self, query, passages):
        """
        Scorer over item indices, for pipeline simulations.

        The returned callable maps a list of indices into passages to their
        scores, reranking just that sublist.
        """
        def scorer(items):
            # type: (Sequence[int]) -> List[float]
            scores, _ = self.rerank(query, [passages[i] for i in items])
            return [float(v) for v in scores.scores]
        return scorer

    def __repr__(self):
        # type: () -> str
        return "Reranker({}, strategy={})".format(self.params, self.strategy)
