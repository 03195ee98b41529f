import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.decoder import (
    AnchorSet, EmptyCandidatesError, Reranker, ViewIndexError, aggregate, decode_anchor,
    decode_anchors, forward, forward_batch, rank, rerank, score, stack_view, unstack_views
)
from src.encoder import RelevanceMatrix
from src.model import AggregationStrategy, Candidate, RankingRecord
from src.numerics import DimensionError, Tensor, no_grad

QUERY = [12, 13, 14]
PASSAGES = [[20, 21, 22, 23], [15, 16], [12, 13, 14, 30], [25, 26, 27, 28, 29], [31, 12]]


def relevance(seed=0, n=5, m=2, d=8):
    return RelevanceMatrix(Tensor(np.random.default_rng(seed).normal(size=(n, m, d))))


def test_stack_and_unstack_views():
    rel = relevance()
    views = [stack_view(rel, k) for k in (1, 2)]
    assert views[0].shape == (5, 8)
    assert_array_equal(views[1].data, rel.values.data[:, 1, :])
    assert_array_equal(unstack_views(views).values.data, rel.values.data)


@pytest.mark.parametrize("k", [0, 3])
def test_stack_view_rejects_bad_index(k):
    with pytest.raises(ViewIndexError):
        stack_view(relevance(), k)


def test_anchors_do_not_depend_on_candidate_order(tiny_params):
    rel = relevance()
    order = [4, 2, 0, 3, 1]
    shuffled = RelevanceMatrix(Tensor(rel.values.data[order]))
    with no_grad():
        a = decode_anchors(rel, tiny_params.decoder).anchors.data
        b = decode_anchors(shuffled, tiny_params.decoder).anchors.data
    assert_allclose(a, b, rtol=0, atol=1e-12)


def test_batched_anchors_match_per_view_decoding(tiny_params):
    rel = relevance(seed=3)
    with no_grad():
        anchors = decode_anchors(rel, tiny_params.decoder)
        for k in (1, 2):
            single = decode_anchor(stack_view(rel, k), tiny_params.decoder)
            assert single.shape == (1, 8)
            assert_allclose(single.data[0], anchors.anchor(k).data, rtol=0, atol=1e-12)


def test_decode_anchor_rejects_empty_view(tiny_params):
    with pytest.raises(EmptyCandidatesError):
        decode_anchor(Tensor(np.zeros((0, 8))), tiny_params.decoder)


def test_captured_attention_sums_to_one(tiny_params):
    with no_grad():
        anchors = decode_anchors(relevance(n=4), tiny_params.decoder, capture=True)
    assert len(anchors.attention) == 1
    weights = anchors.attention[0]
    assert weights.shape == (2, 2, 1, 4)
    assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)


def test_single_candidate_gets_all_attention(tiny_params):
    with no_grad():
        anchors = decode_anchors(relevance(n=1), tiny_params.decoder, capture=True)
    assert anchors.attention
    for weights in anchors.attention:
        assert weights.shape == (2, 2, 1, 1)
        assert_array_equal(weights, 1.0)


def test_duplicated_candidates_leave_anchor_unchanged(tiny_params):
    e_k = stack_view(relevance(seed=4, n=3), 1)
    doubled = Tensor(np.concatenate([e_k.data, e_k.data]))
    with no_grad():
        a = decode_anchor(e_k, tiny_params.decoder).data
        b = decode_anchor(doubled, tiny_params.decoder).data
    assert_allclose(b, a, rtol=0, atol=1e-10)


def hand_example():
    anchors = AnchorSet(Tensor([[1.0, 0.0], [0.0, 1.0]]))
    rel = RelevanceMatrix(Tensor([[[1.0, 2.0], [3.0, 4.0]],
                                  [[2.0, 0.0], [0.0, 1.0]]]))
    return anchors, rel


@pytest.mark.parametrize("strategy, expected", [
    (AggregationStrategy.mean(), [2.5, 1.5]),
    (AggregationStrategy.max(), [4.0, 2.0]),
    (AggregationStrategy.single_view(1), [1.0, 2.0]),
    (AggregationStrategy.single_view(2), [4.0, 1.0]),
])
def test_score_hand_example(strategy, expected):
    anchors, rel = hand_example()
    scores = score(anchors, rel, strategy)
    assert_array_equal(scores.scores, expected)
    assert_array_equal(scores.per_view.data, [[1.0, 4.0], [2.0, 1.0]])


def test_score_names_mismatched_axis():
    anchors, rel = hand_example()
    with pytest.raises(DimensionError) as e:
        score(AnchorSet(Tensor(np.ones((3, 2)))), rel)
    assert "axis m" in str(e.value)
    with pytest.raises(DimensionError) as e:
        score(AnchorSet(Tensor(np.ones((2, 3)))), rel)
    assert "axis d" in str(e.value)
    with pytest.raises(ViewIndexError):
        aggregate(Tensor(np.ones((2, 2))), AggregationStrategy.single_view(3))


def test_anchor_index_is_one_based():
    anchors, _ = hand_example()
    assert_array_equal(anchors.anchor(2).data, [0.0, 1.0])
    with pytest.raises(ViewIndexError):
        anchors.anchor(0)


def test_rank_breaks_ties_by_index():
    assert rank([0.2, 0.9, 0.9, 0.1]) == [2, 3, 1, 4]


def test_rank_matches_stable_sort():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        values = rng.integers(0, 4, size=int(rng.integers(1, 12))).astype(np.float64)
        expected = [int(i) + 1 for i in np.argsort(-values, kind="stable")]
        assert rank(values) == expected


def test_scores_are_permutation_equivariant(tiny_params):
    base, _ = rerank(QUERY, PASSAGES, tiny_params)
    order = [2, 4, 1, 0, 3]
    permuted, _ = rerank(QUERY, [PASSAGES[i] for i in order], tiny_params)
    assert_allclose(permuted.scores, base.scores[order], rtol=0, atol=1e-12)


def test_ranking_is_a_permutation(tiny_params):
    scores, ranking = rerank(QUERY, PASSAGES, tiny_params, strategy=AggregationStrategy.max())
    assert sorted(ranking) == [1, 2, 3, 4, 5]
    values = scores.scores
    assert all(values[a - 1] >= values[b - 1] for a, b in zip(ranking, ranking[1:]))


def test_single_candidate_ranks_first(tiny_params):
    scores, ranking = rerank(QUERY, [PASSAGES[0]], tiny_params)
    assert ranking == [1]
    assert scores.n == 1


def test_batched_forward_matches_per_passage(tiny_params):
    with no_grad():
        single = forward(QUERY, PASSAGES, tiny_params).scores.scores
        batched = forward(QUERY, PASSAGES, tiny_params, batched=True).scores.scores
    assert_allclose(batched, single, rtol=0, atol=1e-10)


def test_forward_candidate_limits(tiny_params):
    with pytest.raises(EmptyCandidatesError):
        forward(QUERY, [], tiny_params)
    with pytest.raises(DimensionError):
        forward(QUERY, [[20]] * 101, tiny_params)


def test_forward_batch_matches_single_queries(tiny_params):
    queries = [(QUERY, PASSAGES), ([12, 13], PASSAGES[:2]), ([14], PASSAGES[2:4]), ([15, 16], PASSAGES[:3])]
    with no_grad():
        results = forward_batch(queries, tiny_params)
        for (query, passages), result in zip(queries, results):
            single = forward(query, passages, tiny_params, batched=True)
            assert result.relevance.n == len(passages)
            assert_allclose(result.anchors.numpy(), single.anchors.numpy(), rtol=0, atol=1e-10)
            assert_allclose(result.scores.scores, single.scores.scores, rtol=0, atol=1e-10)


def test_forward_batch_rejects_empty_input(tiny_params):
    with pytest.raises(DimensionError):
        forward_batch([], tiny_params)
    with pytest.raises(EmptyCandidatesError):
        forward_batch([(QUERY, PASSAGES), (QUERY, [])], tiny_params)


def test_reranker_counts_one_decode_step_per_query(tiny_params):
    reranker = Reranker(tiny_params)
    record = RankingRecord("q", QUERY, [Candidate("p{}".format(i), p) for i, p in enumerate(PASSAGES)],
                           [1, 2, 3, 4, 5])
    assert reranker(record).shape == (5,)
    reranker.rerank(QUERY, PASSAGES[:2])
    assert reranker.decode_steps == 2
    reranker.reset()
    assert reranker.decode_steps == 0


def test_item_scorer_reranks_sublists(tiny_params):
    reranker = Reranker(tiny_params)
    full, _ = reranker.rerank(QUERY, PASSAGES)
    scorer = reranker.item_scorer(QUERY, PASSAGES)
    assert len(scorer([3, 1])) == 2
    assert reranker.decode_steps == 2
    assert full.n == 5


def test_reranker_counts_fifty_queries(tiny_params):
    reranker = Reranker(tiny_params)
    for i in range(50):
        reranker.rerank(QUERY, PASSAGES[:1 + i % 5])
    assert reranker.decode_steps == 50
