"""
Bias audits.

candidate_permutation_audit reranks every record under reordered
candidate lists and compares scores and rankings with the original order.
identifier_audit checks that the prompt layout carries nothing that
identifies a passage by its position. anchor_similarity_stats measures how
similar the m views of a model are to each other.
"""

import logging
from collections import OrderedDict

import numpy as np

from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .decoder import forward
from .encoder import PromptLayout, build_prompt
from .metrics import UndefinedMetricError, kendall_tau, ndcg_at_k
from .model import RankingRecord
from .numerics import DegenerateVectorError, no_grad
from .report import Report
from .utils import MvpError, map_ordered

logger = logging.getLogger(__name__)

RecordScorer = Callable[[RankingRecord], np.ndarray]

MODES = ("orig", "shuffle", "reverse")

# Scores closer than this are one tie before rankings are compared.
TIE_THRESHOLD = 1e-6

IDENTIFIER_PROMPTS = 100

INAPPLICABLE_VERDICT = "identifier permutation inapplicable"

# Pairwise cosine means of a full-scale model, with and without the
# orthogonal loss. Directional reference only.
REFERENCE_COSINES = OrderedDict([
    ("with orthogonal loss", {"relevance_vectors": 0.4910, "anchors": -0.0025}),
    ("without orthogonal loss", {"relevance_vectors": 0.8815, "anchors": 0.9800}),
])

PERMUTATION_COLUMNS = ("mode", "corpus", "trials", "ndcg", "delta", "max_score_deviation",
                       "kendall_tau", "min_kendall_tau")

SIMILARITY_COLUMNS = ("model", "vectors", "mean", "std", "mean_abs", "count", "reference_mean")


class AuditFailure(MvpError):
    """Exception raised when an audit finds what it must not find."""


class InapplicableAuditError(MvpError):
    """Exception raised when an audit does not apply to the model."""


def position_scorer(record):
    # type: (RankingRecord) -> np.ndarray
    """Order-sensitive mock: a candidate scores minus its input position."""
    return -np.arange(record.n, dtype=np.float64)


def tie_aware_order(scores, pids, threshold=TIE_THRESHOLD):
    # type: (Sequence[float], Sequence[str], float) -> List[str]
    """
    Passage ids by descending score.

    Scores within threshold of the best score of their run form one tie
    group, ordered by passage id.
    """
    values = np.asarray(scores, dtype=np.float64)
    by_score = sorted(range(len(values)), key=lambda i: (-values[i], pids[i]))
    order = []  # type: List[str]
    group = []  # type: List[str]
    head = None
    for i in by_score:
        if head is not None and head - values[i] > threshold:
            order.extend(sorted(group))
            group = []
            head = None
        if head is None:
            head = values[i]
        group.append(pids[i])
    order.extend(sorted(group))
    return order


def _mode_orders(mode, n, seeds, index):
    # type: (str, int, Sequence[int], int) -> List[List[int]]
    if mode == "orig":
        return [list(range(n))]
    if mode == "reverse":
        return [list(range(n - 1, -1, -1))]
    if mode == "shuffle":
        return [[int(i) for i in np.random.default_rng((seed, index)).permutation(n)] for seed in seeds]
    raise InapplicableAuditError("unknown permutation mode '{}' (supported: {})".format(mode, ", ".join(MODES)))


class _Trial(object):

    def __init__(self, ndcg, deviation, tau):
        # type: (Optional[float], float, float) -> None
        self.ndcg = ndcg
        self.deviation = deviation
        self.tau = tau


def _ordered_ndcg(ranking, record, k):
    # type: (List[str], RankingRecord, int) -> Optional[float]
    place = {pid: i + 1 for i, pid in enumerate(record.pids)}
    try:
        return ndcg_at_k([place[pid] for pid in ranking], record.gains(), k)
    except UndefinedMetricError:
        return None


def _audit_record(scorer, record, index, modes, seeds, k, threshold):
    # type: (RecordScorer, RankingRecord, int, Sequence[str], Sequence[int], int, float) -> Tuple[Optional[float], Dict[str, List[_Trial]]]
    original = np.asarray(scorer(record), dtype=np.float64)
    reference = tie_aware_order(original, record.pids, threshold)
    trials = OrderedDict()  # type: Dict[str, List[_Trial]]
    for mode in modes:
        trials[mode] = []
        for order in _mode_orders(mode, record.n, seeds, index):
            shown = record.permuted(order)
            scores = np.asarray(scorer(shown), dtype=np.float64)
            aligned = np.empty_like(scores)
            aligned[order] = scores
            ranking = tie_aware_order(scores, shown.pids, threshold)
            trials[mode].append(_Trial(_ordered_ndcg(ranking, shown, k),
                                       float(np.max(np.abs(aligned - original))),
                                       kendall_tau(reference, ranking)))
    return _ordered_ndcg(reference, record, k), trials


def candidate_permutation_audit(scorer, records, modes=MODES, seeds=(0, 1, 2), k=10, corpus="synthetic",
                                threshold=TIE_THRESHOLD, threads=None):
    # type: (RecordScorer, Sequence[RankingRecord], Sequence[str], Sequence[int], int, str, float, Optional[int]) -> Report
    """
    Rerank every record under candidate-order permutations.

    For each mode the report holds the mean nDCG@k, its change against the
    original order, the largest per-candidate score deviation from the
    original scores and Kendall's tau between the tie-aware rankings.
    Shuffles use one permutation per seed and record.

    Args:
        scorer: Maps a record to scores aligned with its candidates, for
            example a decoder.Reranker.
        records: Records to audit.
        modes: Any of "orig", "shuffle" and "reverse".
        seeds: Shuffle seeds.
        k: nDCG cutoff.
        corpus: Label for the corpus column.
        threshold: Tie threshold on scores.
        threads: Worker thread cap over records.

    Raises:
        InapplicableAuditError: On an unknown mode or no records.
    """
    if not records:
        raise InapplicableAuditError("candidate permutation audit needs at least one record")
    for mode in modes:
        if mode not in MODES:
            raise InapplicableAuditError("unknown permutation mode '{}' (supported: {})".format(
                mode, ", ".join(MODES)
            ))
    with no_grad():
        per_record = map_ordered(
            lambda item: _audit_record(scorer, item[1], item[0], modes, seeds, k, threshold),
            list(enumerate(records)), threads=threads
        )

    report = Report("candidate permutation audit (k={}, seeds={})".format(k, list(seeds)), PERMUTATION_COLUMNS,
                    notes=["scores within {:g} are tied and ordered by passage id".format(threshold)])
    originals = [ndcg for ndcg, _ in per_record if ndcg is not None]
    baseline = float(np.mean(originals)) if originals else None
    for mode in modes:
        trials = [t for _, result in per_record for t in result[mode]]
        defined = [t.ndcg for t in trials if t.ndcg is not None]
        ndcg = float(np.mean(defined)) if defined else None
        taus = [t.tau for t in trials]
        report.add_row(
            mode=mode,
            corpus=corpus,
            trials=len(trials),
            ndcg=ndcg,
            delta=None if ndcg is None or baseline is None else ndcg - baseline,
            max_score_deviation=max(t.deviation for t in trials),
            kendall_tau=float(np.mean(taus)),
            min_kendall_tau=min(taus),
        )
        logger.info("permutation audit %s: %d trials, min tau %.4f", mode, len(trials), min(taus))
    return report


def _prompt_header(prompt, layout):
    # type: (List[int], PromptLayout) -> Tuple[int, ...]
    marker = layout.vocab.passage_marker_id
    cut = len(prompt) - prompt[::-1].index(marker)
    return tuple(prompt[:cut])


def identifier_audit(layout, records=None, prompts=IDENTIFIER_PROMPTS):
    # type: (PromptLayout, Optional[Sequence[RankingRecord]], int) -> Report
    """
    Check that no prompt token depends on a passage's slot.

    Lays out one query against candidates in slots 0..prompts-1 and
    compares everything up to the passage marker across all prompts.

    Raises:
        AuditFailure: If the prompts differ outside the passage, which
            means the layout tags passages with identifiers.
    """
    if records:
        query = list(records[0].query)
        passages = [c.tokens for r in records for c in r.candidates]
    else:
        content = layout.vocab.content_ids
        query = [content[i % len(content)] for i in range(4)]
        passages = [[content[(i + j) % len(content)] for j in range(6)] for i in range(prompts)]
    headers = OrderedDict()  # type: Dict[Tuple[int, ...], List[int]]
    for slot in range(prompts):
        prompt = build_prompt(query, passages[slot % len(passages)], layout, slot=slot)
        headers.setdefault(_prompt_header(prompt, layout), []).append(slot)
    if len(headers) > 1:
        varying = sorted(set(i for h in headers for i in h) - set.intersection(*(set(h) for h in headers)))
        raise AuditFailure(
            "layout gives {} distinct prompt headers over {} slots".format(len(headers), prompts),
            "tokens that vary by slot: {}".format(", ".join(layout.vocab.word(i) for i in varying))
        )
    header = next(iter(headers))
    view_ids = [header[i] for i in layout.view_positions if i < len(header)]
    report = Report("identifier audit", ("field", "value"))
    report.add_row(field="verdict", value=INAPPLICABLE_VERDICT)
    report.add_row(field="prompts", value=prompts)
    report.add_row(field="distinct_headers", value=len(headers))
    report.add_row(field="shared_view_tokens", value=" ".join(layout.vocab.word(i) for i in view_ids))
    for key, value in layout.describe().items():
        report.add_row(field="layout.{}".format(key), value=value)
    logger.info("identifier audit: %s", INAPPLICABLE_VERDICT)
    return report


class CosineStats(object):
    """Mean and spread of per-item mean pairwise cosines."""

    def __init__(self, values, abs_values):
        # type: (Sequence[float], Sequence[float]) -> None
        self.count = len(values)
        self.mean = float(np.mean(values)) if values else float("nan")
        self.std = float(np.std(values)) if values else float("nan")
        self.mean_abs = float(np.mean(abs_values)) if abs_values else float("nan")

    def to_dict(self):
        # type: () -> Dict[str, float]
        return OrderedDict([("mean", self.mean), ("std", self.std), ("mean_abs", self.mean_abs),
                            ("count", self.count)])

    def __repr__(self):
        # type: () -> str
        return "CosineStats(mean={:.4f}, std={:.4f}, mean_abs={:.4f}, n={})".format(
            self.mean, self.std, self.mean_abs, self.count
        )


def pairwise_cosines(vectors):
    # type: (np.ndarray) -> np.ndarray
    """
    Cosine of every unordered pair of rows of an [m, d] array.

    Raises:
        InapplicableAuditError: For fewer than two rows.
        DegenerateVectorError: For a zero row.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    m = vectors.shape[0]
    if m < 2:
        raise InapplicableAuditError("pairwise similarity needs m >= 2 views, got {}".format(m))
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("zero vector among the {} views".format(m))
    unit = vectors / norms[:, None]
    upper = np.triu_indices(m, k=1)
    return (unit @ unit.T)[upper]


def pairwise_cosine_stats(vector_sets):
    # type: (Sequence[np.ndarray]) -> CosineStats
    """Statistics over sets of m vectors, each set contributing its mean pair cosine."""
    means = []
    abs_means = []
    for vectors in vector_sets:
        cosines = pairwise_cosines(vectors)
        means.append(float(np.mean(cosines)))
        abs_means.append(float(np.mean(np.abs(cosines))))
    return CosineStats(means, abs_means)


def anchor_similarity_stats(params, records, threads=None):
    # type: (object, Sequence[RankingRecord], Optional[int]) -> Dict[str, CosineStats]
    """
    Pairwise cosine statistics of anchors and of relevance vectors.

    Anchors contribute one set per query; relevance vectors one set per
    query-passage pair.

    Returns:
        {"anchors": CosineStats, "relevance_vectors": CosineStats}

    Raises:
        InapplicableAuditError: If the model has fewer than two views.
    """
    m = params.encoder_config.views
    if m < 2:
        raise InapplicableAuditError("anchor similarity needs m >= 2 views, got {}".format(m))

    def one(record):
        with no_grad():
            result = forward(record.query, record.passages(), params, threads=1)
        return result.anchors.numpy(), list(result.relevance.values.numpy())

    outputs = map_ordered(one, list(records), threads=threads)
    return OrderedDict([
        ("anchors", pairwise_cosine_stats([anchors for anchors, _ in outputs])),
        ("relevance_vectors", pairwise_cosine_stats([row for _, rows in outputs for row in rows])),
    ])


def similarity_report(stats_by_model):
    # type: (Dict[str, Dict[str, CosineStats]]) -> Report
    """Tabulate anchor_similarity_stats results of one or more models."""
    report = Report("pairwise cosine similarity", SIMILARITY_COLUMNS)
    for model, stats in stats_by_model.items():
        reference = REFERENCE_COSINES.get(model, {})
        for vectors, s in stats.items():
            report.add_row(model=model, vectors=vectors, mean=s.mean, std=s.std, mean_abs=s.mean_abs,
                           count=s.count, reference_mean=reference.get(vectors))
    for label, values in REFERENCE_COSINES.items():
        report.add_note("full-scale reference {}: relevance vectors {}, anchors {}".format(
            label, values["relevance_vectors"], values["anchors"]
        ))
    return report
