"""
Transformer sublayers shared by the encoder and the anchor decoder.

Weights are stored as [in, out] matrices and applied as x @ W; there are
no bias terms.
"""

import math
from collections import OrderedDict

import numpy as np

from typing import Dict, List, Optional, Tuple

from .numerics import Tensor, gelu, matmul, reshape, scale, softmax, swapaxes


def init_matrix(rng, shape, std):
    # type: (np.random.Generator, Tuple[int, ...], float) -> Tensor
    """Trainable tensor drawn from N(0, std^2)."""
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def init_gain(width):
    # type: (int) -> Tensor
    """Trainable normalization gain, initialized to ones."""
    return Tensor(np.ones(width), requires_grad=True)


def attention_tensors(prefix, width, rng, std, parts=("query", "key", "value", "output")):
    # type: (str, int, np.random.Generator, float, Tuple[str, ...]) -> Dict[str, Tensor]
    tensors = OrderedDict()
    for part in parts:
        tensors["{}.{}".format(prefix, part)] = init_matrix(rng, (width, width), std)
    return tensors


def feed_forward_tensors(prefix, width, ratio, rng, std):
    # type: (str, int, int, np.random.Generator, float) -> Dict[str, Tensor]
    tensors = OrderedDict()
    tensors["{}.up".format(prefix)] = init_matrix(rng, (width, width * ratio), std)
    tensors["{}.down".format(prefix)] = init_matrix(rng, (width * ratio, width), std)
    return tensors


def split_heads(x, heads):
    # type: (Tensor, int) -> Tensor
    """[..., L, d] -> [..., heads, L, d / heads]."""
    width = x.shape[-1]
    x = reshape(x, x.shape[:-1] + (heads, width // heads))
    return swapaxes(x, -2, -3)


def merge_heads(x):
    # type: (Tensor) -> Tensor
    """[..., heads, L, dh] -> [..., L, heads * dh]."""
    x = swapaxes(x, -2, -3)
    return reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def multi_head_attention(query_input, memory, weights, prefix, heads, capture=None):
    # type: (Tensor, Tensor, Dict[str, Tensor], str, int, Optional[List[np.ndarray]]) -> Tensor
    """
    Scaled dot-product attention of query_input over memory.

    No mask and no positional term is added to the scores, so the result
    does not depend on the order of the memory rows.

    Args:
        query_input: [..., Lq, d] queries.
        memory: [..., Lk, d] keys and values.
        weights: Tensor dictionary holding "<prefix>.query" ... "<prefix>.output".
        prefix: Name prefix of this attention block.
        heads: Head count.
        capture: If given, the attention weights are appended to it.

    Returns:
        [..., Lq, d] attention output.
    """
    q = split_heads(matmul(query_input, weights[prefix + ".query"]), heads)
    k = split_heads(matmul(memory, weights[prefix + ".key"]), heads)
    v = split_heads(matmul(memory, weights[prefix + ".value"]), heads)
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    attention = softmax(scores, axis=-1)
    if capture is not None:
        capture.append(attention.numpy())
    return matmul(merge_heads(matmul(attention, v)), weights[prefix + ".output"])


def feed_forward(x, weights, prefix):
    # type: (Tensor, Dict[str, Tensor], str) -> Tensor
    """Position-wise GELU feed-forward block."""
    hidden = gelu(matmul(x, weights[prefix + ".up"]))
    return matmul(hidden, weights[prefix + ".down"])
