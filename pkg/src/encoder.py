"""
Multi-view passage encoder.

Every (query, passage) pair becomes its own prompt that starts with m view
tokens at fixed positions 0..m-1. A small transformer encoder runs over each
prompt independently and the hidden states at the view positions become the
pair's m relevance vectors.
"""

import logging
from collections import OrderedDict

import numpy as np

from typing import Dict, List, Optional, Sequence

from .config import MAX_VIEWS, EncoderConfig
from .layers import (
    attention_tensors, feed_forward, feed_forward_tensors, init_gain,
    init_matrix, multi_head_attention
)
from .numerics import DimensionError, Tensor, concat, is_grad_enabled, layer_norm, no_grad, stack
from .utils import MvpError, map_ordered

logger = logging.getLogger(__name__)

PAD_ID = 0
BOS_ID = 1
QUERY_MARKER_ID = 2
PASSAGE_MARKER_ID = 3
FIRST_VIEW_ID = 4
CONTENT_START = FIRST_VIEW_ID + MAX_VIEWS


class InputTooLongError(MvpError):
    """Exception raised when a query does not fit in the prompt budget."""


class VocabError(MvpError):
    """Exception raised for a token id or word outside the vocabulary."""


class CandidateEncodingError(MvpError):
    """Exception raised when one candidate of a list fails to encode."""

    def __init__(self, index, error):
        # type: (int, MvpError) -> None
        self.index = index
        self.cause = error
        super(CandidateEncodingError, self).__init__(
            "candidate {}: {}".format(index, error.message), details=error.details
        )


class Vocab(object):
    """
    Closed synthetic vocabulary.

    Ids 0-3 are padding, BOS, query marker and passage marker; the next
    MAX_VIEWS ids are reserved view tokens; everything from CONTENT_START up
    is ordinary content. Content ids print as "w<id>".
    """

    def __init__(self, size=64):
        # type: (int) -> None
        """
        Initialize a vocabulary.

        Args:
            size: Total number of token ids.

        Raises:
            VocabError: If size leaves no room for content tokens.
        """
        if size <= CONTENT_START:
            raise VocabError("vocabulary of size {} leaves no content ids (reserved: {})".format(
                size, CONTENT_START
            ))
        self.size = size
        self.pad_id = PAD_ID
        self.bos_id = BOS_ID
        self.query_marker_id = QUERY_MARKER_ID
        self.passage_marker_id = PASSAGE_MARKER_ID
        self.view_ids = list(range(FIRST_VIEW_ID, FIRST_VIEW_ID + MAX_VIEWS))

    @property
    def reserved(self):
        # type: () -> List[int]
        return [self.pad_id, self.bos_id, self.query_marker_id, self.passage_marker_id] + self.view_ids

    @property
    def content_ids(self):
        # type: () -> range
        return range(CONTENT_START, self.size)

    def view_tokens(self, m):
        # type: (int) -> List[int]
        """Ids of the first m dedicated view tokens."""
        return self.view_ids[:m]

    def word(self, token_id):
        # type: (int) -> str
        """Printable form of a token id."""
        names = {
            PAD_ID: "[PAD]",
            BOS_ID: "[BOS]",
            QUERY_MARKER_ID: "[Q]",
            PASSAGE_MARKER_ID: "[P]",
        }
        if token_id in names:
            return names[token_id]
        if FIRST_VIEW_ID <= token_id < CONTENT_START:
            return "<v{}>".format(token_id - FIRST_VIEW_ID + 1)
        return "w{}".format(token_id)

    def encode_text(self, text):
        # type: (str) -> List[int]
        """
        Tokenize whitespace-separated content words ("w17" or "17").

        Raises:
            VocabError: On a word that is not a content token.
        """
        ids = []
        for word in text.split():
            digits = word[1:] if word.startswith("w") else word
            if not digits.isdigit() or int(digits) not in self.content_ids:
                raise VocabError("'{}' is not a content word of this vocabulary".format(word))
            ids.append(int(digits))
        return ids

    def decode(self, ids):
        # type: (Sequence[int]) -> str
        return " ".join(self.word(int(i)) for i in ids)

    def check(self, ids):
        # type: (Sequence[int]) -> None
        """
        Raises:
            VocabError: If any id lies outside [0, size).
        """
        for token_id in ids:
            if not 0 <= token_id < self.size:
                raise VocabError("token id {} outside vocabulary of size {}".format(token_id, self.size))

    def __repr__(self):
        # type: () -> str
        return "Vocab(size={}, content={}..{})".format(self.size, CONTENT_START, self.size - 1)


class PromptLayout(object):
    """
    How a (query, passage) pair is laid out as a prompt.

    dedicated: <v1>..<vm> [Q] query [P] passage
    lexical:   content ids w12..w(12+m-1) in the view slots, same shape
    first-k:   [Q] query [P] passage, the first m positions act as views

    identifier_ids exists only so audits can model rerankers that tag each
    passage with a distinct identifier; the default layout has none.
    """

    def __init__(self, views, max_length, vocab, mode="dedicated", identifier_ids=None):
        # type: (int, int, Vocab, str, Optional[List[int]]) -> None
        self.views = views
        self.max_length = max_length
        self.vocab = vocab
        self.mode = mode
        self.identifier_ids = list(identifier_ids) if identifier_ids else []

    @classmethod
    def from_config(cls, config, vocab=None):
        # type: (EncoderConfig, Optional[Vocab]) -> PromptLayout
        return cls(config.views, config.max_length, vocab or Vocab(config.vocab_size),
                   mode=config.view_token_mode)

    @property
    def view_positions(self):
        # type: () -> List[int]
        return list(range(self.views))

    def slot_ids(self):
        # type: () -> List[int]
        """Token ids prepended before the query marker."""
        if self.mode == "dedicated":
            return self.vocab.view_tokens(self.views)
        if self.mode == "lexical":
            return list(self.vocab.content_ids)[:self.views]
        return []

    def describe(self):
        # type: () -> Dict[str, object]
        """Plain description of the layout, used as audit evidence."""
        slots = self.slot_ids()
        return OrderedDict([
            ("mode", self.mode),
            ("views", self.views),
            ("max_length", self.max_length),
            ("view_positions", self.view_positions),
            ("view_slot_tokens", [self.vocab.word(i) for i in slots]),
            ("structure", "{}[Q] query{} [P] passage".format(
                " ".join(self.vocab.word(i) for i in slots) + " " if slots else "",
                " <id>" if self.identifier_ids else ""
            )),
            ("identifier_tokens", [self.vocab.word(i) for i in self.identifier_ids]),
        ])

    def __repr__(self):
        # type: () -> str
        return "PromptLayout(m={}, L={}, mode={})".format(self.views, self.max_length, self.mode)


def build_prompt(query, passage, layout, slot=0):
    # type: (Sequence[int], Sequence[int], PromptLayout, int) -> List[int]
    """
    Lay out one (query, passage) pair as a prompt.

    The passage tail is truncated when the pair does not fit; view slots and
    the query are never truncated.

    Args:
        query: Query token ids.
        passage: Passage token ids.
        layout: Prompt layout.
        slot: Position of the passage in its candidate list; only layouts
            with identifier tokens use it.

    Returns:
        Token ids of the prompt, at most layout.max_length long.

    Raises:
        InputTooLongError: If the query alone exceeds the budget.
    """
    prefix = layout.slot_ids()
    identifier = []  # type: List[int]
    if layout.identifier_ids:
        identifier = [layout.identifier_ids[slot % len(layout.identifier_ids)]]
    budget = layout.max_length - len(prefix) - 2 - len(identifier)
    if len(query) > budget:
        raise InputTooLongError("query of {} tokens exceeds the prompt budget of {}".format(
            len(query), budget
        ))
    passage = list(passage)[:budget - len(query)]
    tokens = (list(prefix) + [layout.vocab.query_marker_id] + list(query)
              + identifier + [layout.vocab.passage_marker_id] + passage)
    if len(tokens) < layout.views:
        tokens += [layout.vocab.pad_id] * (layout.views - len(tokens))
    return tokens


class EncoderParams(object):
    """Encoder view over a model's tensors."""

    def __init__(self, config, tensors):
        # type: (EncoderConfig, Dict[str, Tensor]) -> None
        self.config = config
        self.tensors = tensors

    @property
    def token_embedding(self):
        # type: () -> Tensor
        return self.tensors["encoder.token_embedding"]

    @property
    def position_embedding(self):
        # type: () -> Tensor
        return self.tensors["encoder.position_embedding"]

    @property
    def view_embedding(self):
        # type: () -> Optional[Tensor]
        """[m, d] embeddings of the dedicated view tokens; None in other modes."""
        return self.tensors.get("encoder.view_embedding")


def init_encoder_tensors(config, rng, std):
    # type: (EncoderConfig, np.random.Generator, float) -> Dict[str, Tensor]
    """Fresh encoder weights: N(0, std^2) matrices, unit gains."""
    d = config.d
    tensors = OrderedDict()
    tensors["encoder.token_embedding"] = init_matrix(rng, (config.vocab_size, d), std)
    tensors["encoder.position_embedding"] = init_matrix(rng, (config.max_length, d), std)
    if config.view_token_mode == "dedicated":
        tensors["encoder.view_embedding"] = init_matrix(rng, (config.views, d), std)
    for i in range(config.layers):
        prefix = "encoder.layers.{}".format(i)
        tensors[prefix + ".attention_norm"] = init_gain(d)
        tensors.update(attention_tensors(prefix + ".attention", d, rng, std))
        tensors[prefix + ".feed_forward_norm"] = init_gain(d)
        tensors.update(feed_forward_tensors(prefix + ".feed_forward", d, config.mlp_ratio, rng, std))
    tensors["encoder.final_norm"] = init_gain(d)
    return tensors


def _forward(ids, params):
    # type: (np.ndarray, EncoderParams) -> Tensor
    """Encoder stack over an integer array of shape [..., L]."""
    config = params.config
    length = ids.shape[-1]
    if length > config.max_length:
        raise InputTooLongError("prompt of {} tokens exceeds max_length {}".format(
            length, config.max_length
        ))
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        bad = ids[(ids < 0) | (ids >= config.vocab_size)].reshape(-1)[0]
        raise VocabError("token id {} outside vocabulary of size {}".format(int(bad), config.vocab_size))
    weights = params.tensors
    table = params.token_embedding
    view_rows = params.view_embedding
    if view_rows is not None:
        is_view = (ids >= FIRST_VIEW_ID) & (ids < FIRST_VIEW_ID + view_rows.shape[0])
        if is_view.any():
            table = concat([table, view_rows], axis=0)
            ids = np.where(is_view, ids - FIRST_VIEW_ID + config.vocab_size, ids)
    h = table[ids] + params.position_embedding[0:length]
    for i in range(config.layers):
        prefix = "encoder.layers.{}".format(i)
        normed = layer_norm(h, weights[prefix + ".attention_norm"])
        h = h + multi_head_attention(normed, normed, weights, prefix + ".attention", config.heads)
        normed = layer_norm(h, weights[prefix + ".feed_forward_norm"])
        h = h + feed_forward(normed, weights, prefix + ".feed_forward")
    return layer_norm(h, weights["encoder.final_norm"])


def encode(x_i, params):
    # type: (Sequence[int], EncoderParams) -> Tensor
    """
    Run the encoder over one prompt.

    Args:
        x_i: Prompt token ids.
        params: Encoder parameters.

    Returns:
        Hidden states H_i of shape [len(x_i), d].

    Raises:
        VocabError: If an id is outside the vocabulary.
        InputTooLongError: If the prompt exceeds max_length.
    """
    if len(x_i) == 0:
        raise DimensionError("cannot encode an empty prompt")
    return _forward(np.asarray(x_i, dtype=np.int64), params)


def extract_views(h_i, m):
    # type: (Tensor, int) -> Tensor
    """
    Relevance vectors of one prompt: rows 0..m-1 of its hidden states.

    Raises:
        DimensionError: If the prompt is shorter than m.
    """
    if h_i.ndim < 2 or h_i.shape[-2] < m:
        raise DimensionError("cannot extract {} views from hidden states of shape {}".format(m, h_i.shape))
    return h_i[..., :m, :]


def encode_views(prompts, params):
    # type: (Sequence[Sequence[int]], EncoderParams) -> Tensor
    """
    Batched encode-and-extract over many prompts.

    Prompts of equal length are encoded together; the result is [n, m, d]
    in input order. This is the training path.
    """
    if not prompts:
        raise DimensionError("no prompts to encode")
    m = params.config.views
    groups = OrderedDict()  # type: Dict[int, List[int]]
    for i, prompt in enumerate(prompts):
        groups.setdefault(len(prompt), []).append(i)
    rows = [None] * len(prompts)  # type: List[Optional[Tensor]]
    for length, members in groups.items():
        if length < m:
            raise DimensionError("prompt of length {} is shorter than {} views".format(length, m))
        ids = np.asarray([prompts[i] for i in members], dtype=np.int64)
        views = _forward(ids, params)[:, :m, :]
        for offset, i in enumerate(members):
            rows[i] = views[offset]
    return stack(rows, axis=0)


class RelevanceMatrix(object):
    """The n x m x d grid of relevance vectors e_ik."""

    def __init__(self, values):
        # type: (Tensor) -> None
        if values.ndim != 3:
            raise DimensionError("relevance matrix must be [n, m, d], got {}".format(values.shape))
        if not np.all(np.isfinite(values.data)):
            raise DimensionError("relevance matrix holds non-finite entries")
        self.values = values

    @property
    def n(self):
        # type: () -> int
        return self.values.shape[0]

    @property
    def m(self):
        # type: () -> int
        return self.values.shape[1]

    @property
    def d(self):
        # type: () -> int
        return self.values.shape[2]

    def row(self, i):
        # type: (int) -> Tensor
        """Relevance vectors of candidate i, shape [m, d]."""
        return self.values[i]

    def __repr__(self):
        # type: () -> str
        return "RelevanceMatrix(n={}, m={}, d={})".format(self.n, self.m, self.d)


def encode_candidates(query, candidates, params, layout=None, threads=None):
    # type: (Sequence[int], Sequence[Sequence[int]], EncoderParams, Optional[PromptLayout], Optional[int]) -> RelevanceMatrix
    """
    Encode every candidate of a query independently.

    Each passage gets its own prompt and its own forward pass, so row i is
    bitwise the same whatever the other candidates are or where they sit.

    Args:
        query: Query token ids.
        candidates: Passage token ids, one sequence per candidate.
        params: Encoder parameters.
        layout: Prompt layout; derived from params.config when omitted.
        threads: Worker thread cap (MVP_THREADS by default).

    Returns:
        RelevanceMatrix of shape [n, m, d].

    Raises:
        CandidateEncodingError: Wrapping the first failing candidate's error.
    """
    if len(candidates) == 0:
        raise DimensionError("encode_candidates needs at least one candidate")
    if layout is None:
        layout = PromptLayout.from_config(params.config)
    m = params.config.views
    grad_enabled = is_grad_enabled()

    def encode_one(item):
        index, passage = item
        try:
            prompt = build_prompt(query, passage, layout, slot=index)
            if grad_enabled:
                return extract_views(encode(prompt, params), m)
            with no_grad():
                return extract_views(encode(prompt, params), m)
        except CandidateEncodingError:
            raise
        except MvpError as e:
            raise CandidateEncodingError(index, e)

    if grad_enabled:
        rows = [encode_one(item) for item in enumerate(candidates)]
    else:
        rows = map_ordered(encode_one, list(enumerate(candidates)), threads=threads)
    return RelevanceMatrix(stack(rows, axis=0))
