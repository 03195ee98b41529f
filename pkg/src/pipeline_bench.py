"""
Reranking pipeline cost model.

Sliding-window and tournament-sort pipelines run over any scorer that
maps a list of item ids to scores, and count the prompts and decode
steps they spend. The single-pass reranker always costs one decode step
per query.
"""

import logging
import math

from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

from .model import PipelineCost, WindowConfig
from .numerics import ParameterError
from .report import Report
from .utils import map_ordered

logger = logging.getLogger(__name__)

ItemScorer = Callable[[Sequence[int]], Sequence[float]]

COST_COLUMNS = ("n", "strategy", "prompt_count", "decode_steps", "passages_encoded",
                "modeled_flops", "decode_ratio")


def relevance_scorer(relevance):
    # type: (Sequence[float]) -> ItemScorer
    """Oracle scorer: item i scores relevance[i]."""
    def scorer(items):
        return [float(relevance[i]) for i in items]
    return scorer


def position_scorer(items):
    # type: (Sequence[int]) -> List[float]
    """Scores that only depend on the slot an item occupies in its prompt."""
    return [float(-slot) for slot in range(len(items))]


def _order_block(block, scores):
    # type: (Sequence[int], Sequence[float]) -> List[int]
    if len(scores) != len(block):
        raise ParameterError("scorer returned {} scores for {} items".format(len(scores), len(block)))
    order = sorted(range(len(block)), key=lambda i: (-scores[i], i))
    return [block[i] for i in order]


def window_spans(n, cfg):
    # type: (int, WindowConfig) -> List[Tuple[int, int]]
    """
    [start, end) of every window, back to front.

    Windows move towards the front by the stride; the last one is clamped
    to [0, min(w, n)), so every window has width min(w, n).
    """
    if n < 1:
        raise ParameterError("sliding window needs at least one item")
    width = min(cfg.window, n)
    spans = []
    end = n
    while True:
        start = end - width
        if start <= 0:
            spans.append((0, width))
            return spans
        spans.append((start, end))
        end -= cfg.stride


def sliding_window_rerank(scorer, items, cfg=None, top_k=None, multiplier=1):
    # type: (ItemScorer, Sequence[int], Optional[WindowConfig], Optional[int], int) -> Tuple[List[int], PipelineCost]
    """
    One back-to-front sliding-window pass.

    Each window is reordered by the scorer in place. One pass carries the
    best w - s items of every window forward, so the top w - s positions
    of the result are exact for an exact scorer (all positions when the
    list fits one window).

    Args:
        scorer: Maps a window of item ids to their scores.
        items: Item ids in initial order.
        cfg: Window size and stride, (20, 10) by default.
        top_k: Length of the returned ranking; all items when omitted.
        multiplier: Decode steps spent per in-window identifier.

    Returns:
        (ranking, cost) with decode_steps = prompts x min(w, n) x multiplier.
    """
    cfg = cfg or WindowConfig()
    if multiplier < 1:
        raise ParameterError("decode multiplier must be at least 1, got {}".format(multiplier))
    order = list(items)
    spans = window_spans(len(order), cfg)
    for start, end in spans:
        window = order[start:end]
        order[start:end] = _order_block(window, scorer(window))
    width = min(cfg.window, len(order))
    cost = PipelineCost(prompt_count=len(spans), decode_steps=len(spans) * width * multiplier,
                        passages_encoded=len(spans) * width)
    return order[:top_k] if top_k is not None else order, cost


class _TournamentCounter(object):
    """Runs block prompts and counts them, optionally memoizing by membership."""

    def __init__(self, scorer, group, promote, multiplier, cache):
        # type: (ItemScorer, int, int, int, bool) -> None
        self.scorer = scorer
        self.group = group
        self.promote = promote
        self.multiplier = multiplier
        self.memo = {} if cache else None  # type: Optional[Dict[FrozenSet[int], List[int]]]
        self.prompts = 0
        self.encoded = 0

    def order(self, block):
        # type: (List[int]) -> List[int]
        key = frozenset(block)
        if self.memo is not None and key in self.memo:
            return [i for i in self.memo[key]]
        ordered = _order_block(block, self.scorer(block))
        self.prompts += 1
        self.encoded += len(block)
        if self.memo is not None:
            self.memo[key] = ordered
        return ordered

    def winner(self, pool):
        # type: (List[int]) -> int
        current = list(pool)
        while len(current) > 1:
            if len(current) <= self.group:
                return self.order(current)[0]
            promoted = []
            for b in range(0, len(current), self.group):
                block = current[b:b + self.group]
                if len(block) <= self.promote:
                    promoted.extend(block)
                    continue
                best = set(self.order(block)[:self.promote])
                promoted.extend(i for i in block if i in best)
            current = promoted
        return current[0]


def tournament_rerank(scorer, items, group=5, promote=2, top_k=1, cache=False, multiplier=1):
    # type: (ItemScorer, Sequence[int], int, int, int, bool, int) -> Tuple[List[int], PipelineCost]
    """
    Tournament sort: top_k rounds of top-1 tournaments.

    Each tournament splits the remaining items into blocks of group, keeps
    the best promote of every block and repeats until one block is left,
    whose best item wins. Blocks with at most promote members pass through
    without a prompt.

    Args:
        scorer: Maps a block of item ids to their scores.
        items: Item ids in initial order.
        group: Block size m_t.
        promote: Items promoted per block r, 1 <= r < m_t.
        top_k: Number of leading positions to resolve.
        cache: Reuse the outcome of a block whose membership was already
            scored.
        multiplier: Decode steps per identifier.

    Returns:
        (winners followed by the unresolved items in input order, cost)
        with group x multiplier decode steps per prompt.
    """
    if not 1 <= promote < group:
        raise ParameterError("tournament needs 1 <= promote < group, got r={} m_t={}".format(promote, group))
    if top_k < 1:
        raise ParameterError("top_k must be >= 1, got {}".format(top_k))
    if multiplier < 1:
        raise ParameterError("decode multiplier must be at least 1, got {}".format(multiplier))
    remaining = list(items)
    if not remaining:
        raise ParameterError("tournament needs at least one item")
    counter = _TournamentCounter(scorer, group, promote, multiplier, cache)
    winners = []
    for _ in range(min(top_k, len(remaining))):
        best = counter.winner(remaining)
        winners.append(best)
        remaining.remove(best)
    cost = PipelineCost(prompt_count=counter.prompts,
                        decode_steps=counter.prompts * group * multiplier,
                        passages_encoded=counter.encoded)
    return winners + remaining, cost


def single_pass_cost(n):
    # type: (int) -> PipelineCost
    """n per-passage encodes and one decoding step."""
    if n < 1:
        raise ParameterError("single pass needs at least one passage")
    return PipelineCost(prompt_count=n, decode_steps=1, passages_encoded=n)


class CostModel(object):
    """
    Closed-form transformer FLOP estimate, a model and not a measurement.

    encoder pass over L tokens: layers x L x (24 d^2 + 4 L d)
    decode step:                decoder_layers x 24 d^2
    pipeline:                   passages_encoded x encoder pass
                                + decode_steps x decode step
    """

    def __init__(self, d=32, encoder_layers=2, decoder_layers=1, tokens=64):
        # type: (int, int, int, int) -> None
        self.d = d
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.tokens = tokens

    @classmethod
    def from_train_config(cls, config):
        return cls(config.d, config.encoder_layers, config.decoder_layers, config.max_length)

    def encoder_flops(self):
        # type: () -> int
        d, length = self.d, self.tokens
        return self.encoder_layers * length * (24 * d * d + 4 * length * d)

    def decoder_flops(self):
        # type: () -> int
        return self.decoder_layers * 24 * self.d * self.d

    def modeled_flops(self, cost):
        # type: (PipelineCost) -> float
        return float(cost.passages_encoded * self.encoder_flops() + cost.decode_steps * self.decoder_flops())

    def describe(self):
        # type: () -> str
        return ("modeled_flops = passages_encoded x {} x L x (24 d^2 + 4 L d) + decode_steps x {} x 24 d^2 "
                "with d={}, L={}").format(self.encoder_layers, self.decoder_layers, self.d, self.tokens)


def _grid_rows(n, window, group, promote, top_k, multiplier, model):
    # type: (int, WindowConfig, int, int, int, int, CostModel) -> List[Dict[str, object]]
    items = list(range(n))
    oracle = relevance_scorer([float(n - i) for i in items])
    single = single_pass_cost(n)
    costs = [
        ("sliding_window", sliding_window_rerank(oracle, items, window, multiplier=multiplier)[1]),
        ("tournament", tournament_rerank(oracle, items, group, promote, min(top_k, n),
                                         multiplier=multiplier)[1]),
        ("single_pass", single),
    ]
    rows = []
    for strategy, cost in costs:
        rows.append({
            "n": n,
            "strategy": strategy,
            "prompt_count": cost.prompt_count,
            "decode_steps": cost.decode_steps,
            "passages_encoded": cost.passages_encoded,
            "modeled_flops": model.modeled_flops(cost),
            "decode_ratio": cost.decode_steps / float(single.decode_steps),
        })
    return rows


def cost_report(n_grid, window=None, group=5, promote=2, top_k=10, multiplier=1, model=None, threads=None):
    # type: (Sequence[int], Optional[WindowConfig], int, int, int, int, Optional[CostModel], Optional[int]) -> Report
    """
    Prompt, decode-step and modeled-FLOP comparison over a grid of list sizes.

    decode_ratio is each strategy's decode steps over the single pass's.
    """
    window = window or WindowConfig()
    model = model or CostModel()
    report = Report("pipeline cost (w={}, s={}, m_t={}, r={}, top_k={}, multiplier={})".format(
        window.window, window.stride, group, promote, top_k, multiplier
    ), COST_COLUMNS, notes=[model.describe()])
    grids = map_ordered(lambda n: _grid_rows(n, window, group, promote, top_k, multiplier, model),
                        list(n_grid), threads=threads)
    for rows in grids:
        for row in rows:
            report.add_row(row)
    logger.info("cost report over %d list sizes", len(grids))
    return report


def parse_grid(text):
    # type: (str) -> List[int]
    """
    Parse "100", "5,50,500" or "10..30" into list sizes.

    Raises:
        ParameterError: On anything else or a size below 1.
    """
    sizes = []  # type: List[int]
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                low, high = part.split("..", 1)
                sizes.extend(range(int(low), int(high) + 1))
            else:
                sizes.append(int(part))
        except ValueError:
            raise ParameterError("bad list size '{}'".format(part))
    if any(n < 1 for n in sizes):
        raise ParameterError("list sizes must be >= 1")
    return sizes


def expected_window_count(n, cfg):
    # type: (int, WindowConfig) -> int
    """Closed form of len(window_spans(n, cfg))."""
    if n <= cfg.window:
        return 1
    return 1 + int(math.ceil((n - cfg.window) / float(cfg.stride)))
