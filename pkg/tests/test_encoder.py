import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.encoder import (
    CONTENT_START, FIRST_VIEW_ID, CandidateEncodingError, InputTooLongError, PromptLayout,
    Vocab, VocabError, build_prompt, encode, encode_candidates, encode_views, extract_views
)
from src.numerics import DimensionError, no_grad
from src.params import ModelParams

QUERY = [12, 13, 14]
PASSAGES = [[20, 21, 22, 23], [15, 16], [12, 13, 14, 30], [25, 26, 27, 28, 29], [31, 12]]


def test_vocab_words_and_text():
    vocab = Vocab(32)
    assert vocab.word(FIRST_VIEW_ID) == "<v1>"
    assert vocab.word(2) == "[Q]"
    assert vocab.encode_text("w12 13") == [12, 13]
    with pytest.raises(VocabError):
        vocab.encode_text("w5")
    with pytest.raises(VocabError):
        Vocab(CONTENT_START)


@pytest.mark.parametrize("mode, prefix", [
    ("dedicated", [FIRST_VIEW_ID, FIRST_VIEW_ID + 1]),
    ("lexical", [CONTENT_START, CONTENT_START + 1]),
    ("first-k", []),
])
def test_build_prompt_layouts(mode, prefix):
    layout = PromptLayout(2, 16, Vocab(32), mode=mode)
    assert build_prompt(QUERY, [20, 21], layout) == prefix + [2] + QUERY + [3, 20, 21]


def test_build_prompt_truncates_passage_tail_only():
    layout = PromptLayout(2, 10, Vocab(32))
    prompt = build_prompt(QUERY, list(range(12, 30)), layout)
    assert len(prompt) == 10
    assert prompt[:6] == [FIRST_VIEW_ID, FIRST_VIEW_ID + 1, 2, 12, 13, 14]
    assert prompt[6:] == [3, 12, 13, 14]


def test_build_prompt_rejects_query_over_budget():
    layout = PromptLayout(2, 8, Vocab(32))
    with pytest.raises(InputTooLongError):
        build_prompt(list(range(12, 17)), [20], layout)


def test_first_k_prompt_is_padded_to_view_count():
    layout = PromptLayout(4, 16, Vocab(32), mode="first-k")
    assert build_prompt([], [], layout) == [2, 3, 0, 0]


def test_encode_shapes_and_extract_views(tiny_params):
    layout = PromptLayout.from_config(tiny_params.encoder_config)
    h = encode(build_prompt(QUERY, PASSAGES[0], layout), tiny_params.encoder)
    assert h.shape == (2 + 1 + 3 + 1 + 4, 8)
    views = extract_views(h, 2)
    assert_array_equal(views.data, h.data[:2])
    with pytest.raises(DimensionError):
        extract_views(h[:1], 2)


def test_encode_rejects_unknown_token(tiny_params):
    with pytest.raises(VocabError):
        encode([FIRST_VIEW_ID, FIRST_VIEW_ID + 1, 2, 99], tiny_params.encoder)


def test_view_embedding_only_in_dedicated_mode(tiny_config):
    dedicated = ModelParams.from_train_config(tiny_config)
    lexical = ModelParams.from_train_config(tiny_config.replace(view_token_mode="lexical"))
    assert dedicated["encoder.view_embedding"].shape == (2, 8)
    assert "encoder.view_embedding" not in lexical


def test_relevance_rows_are_permutation_equivariant(tiny_params):
    with no_grad():
        base = encode_candidates(QUERY, PASSAGES, tiny_params.encoder).values.data
        order = [3, 0, 4, 2, 1]
        permuted = encode_candidates(QUERY, [PASSAGES[i] for i in order], tiny_params.encoder).values.data
    assert_array_equal(permuted, base[order])


def test_relevance_row_ignores_other_candidates(tiny_params):
    with no_grad():
        alone = encode_candidates(QUERY, [PASSAGES[2]], tiny_params.encoder).values.data
        among = encode_candidates(QUERY, PASSAGES, tiny_params.encoder).values.data
    assert_array_equal(alone[0], among[2])


def test_threaded_encoding_matches_serial(tiny_params):
    with no_grad():
        serial = encode_candidates(QUERY, PASSAGES, tiny_params.encoder, threads=1).values.data
        threaded = encode_candidates(QUERY, PASSAGES, tiny_params.encoder, threads=4).values.data
    assert_array_equal(serial, threaded)


def test_batched_encoding_matches_per_passage(tiny_params):
    layout = PromptLayout.from_config(tiny_params.encoder_config)
    prompts = [build_prompt(QUERY, p, layout) for p in PASSAGES]
    batched = encode_views(prompts, tiny_params.encoder).data
    single = encode_candidates(QUERY, PASSAGES, tiny_params.encoder).values.data
    assert batched.shape == (5, 2, 8)
    assert_allclose(batched, single, rtol=0, atol=1e-12)


def test_candidate_error_names_the_candidate(tiny_params):
    with pytest.raises(CandidateEncodingError) as e:
        encode_candidates(QUERY, [PASSAGES[0], [12, 500]], tiny_params.encoder)
    assert e.value.index == 1
    assert isinstance(e.value.cause, VocabError)


def test_empty_candidate_list_is_rejected(tiny_params):
    with pytest.raises(DimensionError):
        encode_candidates(QUERY, [], tiny_params.encoder)
