"""
Dense float64 tensors with reverse-mode differentiation.

Every operation used by the encoder, decoder and training objectives is
defined here together with its gradient rule. A forward pass records the
operations it performs (the tape is rebuilt on every pass); calling
backward() on a scalar result walks that record in reverse topological
order and returns the gradients keyed by tensor.

Tensors are immutable: their arrays are flagged read-only and every
operation returns a new tensor.
"""

import logging
import math
import threading
from contextlib import contextmanager

import numpy as np

from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from .utils import MvpError

logger = logging.getLogger(__name__)

# Smallest vector norm accepted by cosine similarity and normalization.
EPSILON = 1e-12

# Variance floor inside layer_norm.
NORM_EPS = 1e-9

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class DimensionError(MvpError):
    """Exception raised when tensor shapes do not agree."""


class ParameterError(MvpError):
    """Exception raised for an invalid scalar parameter (temperature, step)."""


class DegenerateVectorError(MvpError):
    """Exception raised when a vector norm is too small to normalize."""


class EvaluationError(MvpError):
    """Exception raised when a function under gradient check is not finite."""


class NonFiniteError(MvpError):
    """Exception raised in checked mode when a tensor holds NaN or Inf."""


# Checked mode is process wide; grad recording is per thread.
_checked = {"enabled": False}
_local = threading.local()


def set_checked_mode(enabled):
    # type: (bool) -> None
    """Turn NaN/Inf rejection at tensor construction on or off."""
    _checked["enabled"] = bool(enabled)


def is_checked_mode():
    # type: () -> bool
    return _checked["enabled"]


@contextmanager
def checked_mode(enabled=True):
    """Context manager that temporarily sets checked mode."""
    previous = is_checked_mode()
    _checked["enabled"] = bool(enabled)
    try:
        yield
    finally:
        _checked["enabled"] = previous


def is_grad_enabled():
    # type: () -> bool
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Context manager under which operations record no graph (this thread)."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor(object):
    """
    An immutable float64 array that may take part in a differentiable graph.

    Attributes:
        requires_grad: True for trainable leaves and for every result that
            depends on one while gradient recording is enabled.
        op: Name of the operation that produced the tensor ("leaf" for inputs).
    """

    def __init__(self, data, requires_grad=False):
        # type: (ArrayLike, bool) -> None
        """
        Create a leaf tensor holding a copy of data.

        Args:
            data: Array-like values.
            requires_grad: Whether gradients should be computed for it.

        Raises:
            NonFiniteError: In checked mode, if data holds NaN or Inf.
        """
        if isinstance(data, Tensor):
            data = data.data
        array = np.array(data, dtype=np.float64)
        self._init(array, bool(requires_grad), (), None, "leaf")

    @classmethod
    def _result(cls, array, parents, backward, op):
        # type: (np.ndarray, Tuple[Tensor, ...], Callable, str) -> Tensor
        """Wrap an operation result, recording the graph edge when needed."""
        tensor = cls.__new__(cls)
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        if track:
            tensor._init(np.asarray(array, dtype=np.float64), True, parents, backward, op)
        else:
            tensor._init(np.asarray(array, dtype=np.float64), False, (), None, op)
        return tensor

    def _init(self, array, requires_grad, parents, backward, op):
        if is_checked_mode() and not np.all(np.isfinite(array)):
            raise NonFiniteError(
                "non-finite value in tensor produced by '{}'".format(op)
            )
        array.setflags(write=False)
        self._data = array
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def data(self):
        # type: () -> np.ndarray
        """Read-only view of the values."""
        return self._data

    @property
    def flat(self):
        # type: () -> np.ndarray
        """Values in row-major order."""
        return self._data.ravel()

    @property
    def shape(self):
        # type: () -> Tuple[int, ...]
        return self._data.shape

    @property
    def ndim(self):
        # type: () -> int
        return self._data.ndim

    @property
    def size(self):
        # type: () -> int
        return self._data.size

    def item(self):
        # type: () -> float
        """Return the value of a one-element tensor as a float."""
        if self._data.size != 1:
            raise DimensionError(
                "item() needs a one-element tensor, got shape {}".format(self.shape)
            )
        return float(self._data.reshape(-1)[0])

    def numpy(self):
        # type: () -> np.ndarray
        """Writable copy of the values."""
        return self._data.copy()

    def detach(self):
        # type: () -> Tensor
        """Leaf copy that takes no part in the current graph."""
        return Tensor(self._data)

    def __repr__(self):
        # type: () -> str
        return "Tensor(shape={}, op={}, requires_grad={})".format(
            self.shape, self.op, self.requires_grad
        )

    def __len__(self):
        # type: () -> int
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a scalar constant")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, axis1, axis2):
        return swapaxes(self, axis1, axis2)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value):
    # type: (ArrayLike) -> Tensor
    """Return value unchanged if it is a Tensor, else a constant leaf."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad, shape):
    # type: (np.ndarray, Tuple[int, ...]) -> np.ndarray
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    # type: (Tuple[int, ...], Tuple[int, ...], str) -> Tuple[int, ...]
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise DimensionError("{}: incompatible shapes {} and {}".format(op, a, b))


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    # type: (ArrayLike, ArrayLike) -> Tensor
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    # type: (ArrayLike, ArrayLike) -> Tensor
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    # type: (ArrayLike, ArrayLike) -> Tensor
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def scale(a, factor):
    # type: (Tensor, float) -> Tensor
    """Multiply by a constant scalar."""
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return Tensor._result(a.data * factor, (a,), backward, "scale")


def exp(a):
    # type: (Tensor) -> Tensor
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor._result(out, (a,), backward, "exp")


def log(a):
    # type: (Tensor) -> Tensor
    def backward(g):
        return (g / a.data,)

    return Tensor._result(np.log(a.data), (a,), backward, "log")


def gelu(a):
    # type: (Tensor) -> Tensor
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return Tensor._result(0.5 * x * (1.0 + t), (a,), backward, "gelu")


def clip(a, low, high):
    # type: (Tensor, float, float) -> Tensor
    """Clamp values; the gradient passes only where no clamping happened."""
    inside = (a.data >= low) & (a.data <= high)

    def backward(g):
        return (g * inside,)

    return Tensor._result(np.clip(a.data, low, high), (a,), backward, "clip")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    # type: (Tensor, Tuple[int, ...]) -> Tensor
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError("cannot reshape {} into {}".format(a.shape, tuple(shape)))

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._result(out, (a,), backward, "reshape")


def swapaxes(a, axis1, axis2):
    # type: (Tensor, int, int) -> Tensor
    def backward(g):
        return (np.swapaxes(g, axis1, axis2),)

    return Tensor._result(np.swapaxes(a.data, axis1, axis2), (a,), backward, "swapaxes")


def _is_advanced_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def index(a, key):
    # type: (Tensor, object) -> Tensor
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    if isinstance(key, Tensor):
        raise DimensionError("tensors cannot be used as indices")
    try:
        out = np.array(a.data[key])
    except IndexError as e:
        raise DimensionError("index out of range for shape {}: {}".format(a.shape, e))
    advanced = _is_advanced_key(key)

    def backward(g):
        grad = np.zeros(a.shape)
        if advanced:
            np.add.at(grad, key, g)
        else:
            grad[key] = g
        return (grad,)

    return Tensor._result(out, (a,), backward, "index")


def concat(tensors, axis=0):
    # type: (Sequence[Tensor], int) -> Tensor
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError("concat: {}".format(e))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    # type: (Sequence[Tensor], int) -> Tensor
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("stack needs at least one tensor")
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError("stack: {}".format(e))

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tuple(tensors), backward, "stack")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False):
    # type: (Tensor, Optional[Union[int, Tuple[int, ...]]], bool) -> Tensor
    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    # type: (Tensor, Optional[Union[int, Tuple[int, ...]]], bool) -> Tensor
    count = a.data.size if axis is None else int(np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)]
    ))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_max(a, axis=-1):
    # type: (Tensor, int) -> Tensor
    """Maximum along one axis; ties send the gradient to the first maximum."""
    winners = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(winners, axis), axis=axis)

    def backward(g):
        grad = np.zeros(a.shape)
        np.put_along_axis(grad, np.expand_dims(winners, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return Tensor._result(np.squeeze(out, axis=axis), (a,), backward, "max")


# ---------------------------------------------------------------------------
# Linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a, b):
    # type: (ArrayLike, ArrayLike) -> Tensor
    """
    Matrix product over the last two axes, broadcasting leading axes.

    Raises:
        DimensionError: If either operand has fewer than two axes or the
            inner dimensions disagree; the message names both shapes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul: shape mismatch {} x {}".format(a.shape, b.shape))
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return Tensor._result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def softmax(v, temperature=1.0, axis=-1):
    # type: (Tensor, float, int) -> Tensor
    """
    Temperature-scaled softmax, computed with max subtraction.

    Raises:
        ParameterError: If temperature is not positive.
        DimensionError: If the softmax axis is empty.
    """
    v = as_tensor(v)
    _check_temperature(temperature)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis (shape {})".format(v.shape))
    z = v.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return Tensor._result(out, (v,), backward, "softmax")


def log_softmax(v, temperature=1.0, axis=-1):
    # type: (Tensor, float, int) -> Tensor
    v = as_tensor(v)
    _check_temperature(temperature)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis (shape {})".format(v.shape))
    z = v.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        total = g.sum(axis=axis, keepdims=True)
        return ((g - np.exp(out) * total) / temperature,)

    return Tensor._result(out, (v,), backward, "log_softmax")


def _check_temperature(temperature):
    if not temperature > 0:
        raise ParameterError("temperature must be positive, got {}".format(temperature))


def layer_norm(x, gain, eps=NORM_EPS):
    # type: (Tensor, Tensor, float) -> Tensor
    """
    Normalize the last axis to zero mean and unit RMS, then apply gain.

    There is no bias term. A constant row normalizes to zeros.

    Raises:
        DimensionError: If the last axis is empty or gain does not match it.
    """
    x, gain = as_tensor(x), as_tensor(gain)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("layer_norm over an empty axis (shape {})".format(x.shape))
    if gain.shape != (x.shape[-1],):
        raise DimensionError("layer_norm gain shape {} does not match width {}".format(
            gain.shape, x.shape[-1]
        ))
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    sigma = np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered / sigma

    def backward(g):
        dn = g * gain.data
        dx = (dn - dn.mean(axis=-1, keepdims=True)
              - normed * (dn * normed).mean(axis=-1, keepdims=True)) / sigma
        dgain = (g * normed).reshape(-1, x.shape[-1]).sum(axis=0)
        return dx, dgain

    return Tensor._result(normed * gain.data, (x, gain), backward, "layer_norm")


def normalize(x, axis=-1):
    # type: (Tensor, int) -> Tensor
    """
    Scale vectors along an axis to unit Euclidean norm.

    Raises:
        DegenerateVectorError: If any vector norm is at most EPSILON.
    """
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norms <= EPSILON):
        raise DegenerateVectorError("cannot normalize a vector with norm <= {}".format(EPSILON))
    out = x.data / norms

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * inner) / norms,)

    return Tensor._result(out, (x,), backward, "normalize")


def cosine_similarity(x, y):
    # type: (ArrayLike, ArrayLike) -> Tensor
    """
    Cosine of the angle between two vectors, clamped to [-1, 1].

    Raises:
        DimensionError: If the vectors have different shapes.
        DegenerateVectorError: If either norm is at most EPSILON.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError("cosine_similarity needs two vectors of equal length, got {} and {}".format(
            x.shape, y.shape
        ))
    cosine = reduce_sum(normalize(x) * normalize(y))
    return clip(cosine, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

class Gradients(object):
    """Gradients of one backward pass, keyed by tensor."""

    def __init__(self, values):
        # type: (Dict[int, Tuple[Tensor, np.ndarray]]) -> None
        self._values = values

    def __getitem__(self, tensor):
        # type: (Tensor) -> np.ndarray
        """Gradient for tensor; zeros when the tensor did not influence the root."""
        entry = self._values.get(id(tensor))
        if entry is None or entry[0] is not tensor:
            return np.zeros(tensor.shape)
        return entry[1]

    def __contains__(self, tensor):
        entry = self._values.get(id(tensor))
        return entry is not None and entry[0] is tensor

    def __len__(self):
        return len(self._values)


class DifferentiableGraph(object):
    """
    The operation record reachable from one root tensor.

    Attributes:
        root: The tensor the graph was built from.
        nodes: Tensors in topological order (parents before children).
    """

    def __init__(self, root):
        # type: (Tensor) -> None
        self.root = root
        self.nodes = _topological_order(root)

    def backward(self):
        # type: () -> Gradients
        """
        Propagate d(root)/d(node) to every node, visiting each exactly once.

        Returns:
            Gradients for the leaves that require them (and the root).

        Raises:
            DimensionError: If the root is not a one-element tensor.
        """
        if self.root.size != 1:
            raise DimensionError("backward needs a scalar root, got shape {}".format(self.root.shape))
        pending = {id(self.root): np.ones(self.root.shape)}
        leaves = {}  # type: Dict[int, Tuple[Tensor, np.ndarray]]
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                if node.requires_grad or node is self.root:
                    leaves[id(node)] = (node, grad)
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad
        return Gradients(leaves)


def _topological_order(root):
    # type: (Tensor) -> List[Tensor]
    order = []  # type: List[Tensor]
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root):
    # type: (Tensor) -> Gradients
    """Run the reverse pass from a scalar root."""
    return DifferentiableGraph(root).backward()


def grad_check(f, theta, h=1e-5):
    # type: (Callable[[Tensor], Tensor], ArrayLike, float) -> float
    """
    Compare the analytic gradient of f with central finite differences.

    Args:
        f: Function from a tensor to a scalar tensor.
        theta: Point at which to check.
        h: Finite-difference step, within [1e-6, 1e-4].

    Returns:
        Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12).

    Raises:
        ParameterError: If h is outside the accepted range.
        EvaluationError: If f is not finite at any evaluated point.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ParameterError("finite-difference step must lie in [1e-6, 1e-4], got {}".format(h))
    base = np.array(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    value = f(leaf)
    _finite_scalar(value, "analytic pass")
    analytic = backward(value)[leaf]

    central = np.empty_like(base)
    with no_grad():
        for i in range(base.size):
            shifted = base.copy()
            shifted.flat[i] = base.flat[i] + h
            upper = _finite_scalar(f(Tensor(shifted)), "coordinate {}".format(i))
            shifted.flat[i] = base.flat[i] - h
            lower = _finite_scalar(f(Tensor(shifted)), "coordinate {}".format(i))
            central.flat[i] = (upper - lower) / (2.0 * h)

    if base.size == 0:
        return 0.0
    error = np.abs(analytic - central) / (np.abs(analytic) + np.abs(central) + 1e-12)
    worst = float(error.max())
    logger.debug("grad_check over %d coordinates: max relative error %.3e", base.size, worst)
    return worst


def _finite_scalar(value, where):
    # type: (Tensor, str) -> float
    if not isinstance(value, Tensor) or value.size != 1:
        raise EvaluationError("function under check must return a scalar tensor")
    scalar = value.item()
    if not math.isfinite(scalar):
        raise EvaluationError("non-finite loss at {}".format(where))
    return scalar
