"""
🧮 DIFFCORE
Dense float64 tensors with reverse-mode automatic differentiation.
Just enough for MLPs, multi-head cross-attention, dropout and Gaussian log-densities.

Every op records its parents and a closure that pushes the output gradient back
to them; `backward` walks the recorded graph in reverse topological order.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from taanp.errors import ConfigError, ContractError, DimensionError, DomainError, NumericError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Tensor:
    """Row-major float64 array plus the bookkeeping needed for backprop"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 _parents: Tuple["Tensor", ...] = (), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op='{self._op}', requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(self)

    # --- arithmetic ------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        out_data = self.data + other.data

        def _backward(g: np.ndarray) -> None:
            _accumulate(self, _unbroadcast(g, self.shape))
            _accumulate(other, _unbroadcast(g, other.shape))

        return _make(out_data, (self, other), "+", _backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def _backward(g: np.ndarray) -> None:
            _accumulate(self, -g)

        return _make(-self.data, (self,), "neg", _backward)

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        out_data = self.data * other.data

        def _backward(g: np.ndarray) -> None:
            _accumulate(self, _unbroadcast(g * other.data, self.shape))
            _accumulate(other, _unbroadcast(g * self.data, other.shape))

        return _make(out_data, (self, other), "*", _backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        out_data = self.data / other.data

        def _backward(g: np.ndarray) -> None:
            _accumulate(self, _unbroadcast(g / other.data, self.shape))
            _accumulate(other, _unbroadcast(-g * self.data / other.data ** 2, other.shape))

        return _make(out_data, (self, other), "/", _backward)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        out_data = self.data[index]

        def _backward(g: np.ndarray) -> None:
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            _accumulate(self, full)

        return _make(out_data, (self,), "index", _backward)

    # --- elementwise -------------------------------------------------------
    def square(self) -> "Tensor":
        def _backward(g: np.ndarray) -> None:
            _accumulate(self, 2.0 * self.data * g)

        return _make(self.data ** 2, (self,), "square", _backward)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def _backward(g: np.ndarray) -> None:
            _accumulate(self, out_data * g)

        return _make(out_data, (self,), "exp", _backward)

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            raise DomainError("log of a non-positive value")

        def _backward(g: np.ndarray) -> None:
            _accumulate(self, g / self.data)

        return _make(np.log(self.data), (self,), "log", _backward)

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0):
            raise DomainError("sqrt of a negative value")
        out_data = np.sqrt(self.data)

        def _backward(g: np.ndarray) -> None:
            _accumulate(self, 0.5 * g / out_data)

        return _make(out_data, (self,), "sqrt", _backward)

    def relu(self) -> "Tensor":
        mask = self.data > 0

        def _backward(g: np.ndarray) -> None:
            _accumulate(self, g * mask)

        return _make(self.data * mask, (self,), "relu", _backward)

    def softplus(self) -> "Tensor":
        x = self.data
        out_data = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)

        def _backward(g: np.ndarray) -> None:
            _accumulate(self, g * _sigmoid(x))

        return _make(out_data, (self,), "softplus", _backward)

    # --- reductions and shape ----------------------------------------------
    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def _backward(g: np.ndarray) -> None:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(self, np.broadcast_to(g, self.shape).copy())

        return _make(out_data, (self,), "sum", _backward)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def _backward(g: np.ndarray) -> None:
            _accumulate(self, g.reshape(self.shape))

        return _make(self.data.reshape(shape), (self,), "reshape", _backward)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        def _backward(g: np.ndarray) -> None:
            _accumulate(self, np.swapaxes(g, a, b))

        return _make(np.swapaxes(self.data, a, b), (self,), "swapaxes", _backward)

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike) -> Tensor:
    """Trainable leaf"""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    # Only tape the op when some parent needs a gradient.
    if any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, _parents=parents, _op=op)
        out._backward = backward_fn
        return out
    return Tensor(data, _op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- free-standing ops ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(…×m×k) @ (…×k×n); batch dims broadcast like numpy"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out_data, (a, b), "matmul", _backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction"""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("NaN reached softmax_lastdim")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def _backward(g: np.ndarray) -> None:
        _accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (x,), "softmax", _backward)


def dropout(x: Tensor, rate: float, rng: "RngStream", active: bool) -> Tensor:
    """Inverted dropout; identity when inactive or rate == 0"""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not active or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def _backward(g: np.ndarray) -> None:
        _accumulate(x, g * keep)

    return _make(x.data * keep, (x,), "dropout", _backward)


def gaussian_logpdf(y, mu, sigma) -> Tensor:
    """log N(y | mu, sigma^2), elementwise and differentiable in mu and sigma"""
    y, mu, sigma = as_tensor(y), as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise DomainError("gaussian_logpdf needs sigma > 0")
    z = (y - mu) / sigma
    return -0.5 * z.square() - sigma.log() - HALF_LOG_2PI


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def softplus(x: Tensor) -> Tensor:
    return as_tensor(x).softplus()


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _make(out_data, tuple(tensors), "concat", _backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows (axis 0) by integer index"""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def _backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, full)

    return _make(x.data[index], (x,), "take_rows", _backward)


def stable_mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0 that is bit-identical under any row permutation.

    Each column is sorted before the pairwise reduction, so the summation
    order depends only on the multiset of values.
    """
    x = as_tensor(x)
    if x.shape[0] < 1:
        raise ContractError("mean over an empty set of rows")
    n = x.shape[0]
    out_data = np.sort(x.data.T, axis=-1).sum(axis=-1) / n

    def _backward(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g / n, x.shape).copy())

    return _make(out_data, (x,), "stable_mean", _backward)


# --- graph -------------------------------------------------------------------

@dataclass
class ComputeGraph:
    """Topologically ordered op records reachable from one output"""
    nodes: List[Tensor] = field(default_factory=list)
    leaf_params: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "ComputeGraph":
        order: List[Tensor] = []
        visited = set()
        # iterative DFS, deep MLP stacks would blow the recursion limit otherwise
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
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
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        leaves = [n for n in order if n.is_leaf and n.requires_grad]
        return cls(nodes=order, leaf_params=leaves)


def backward(loss: Tensor, graph: Optional[ComputeGraph] = None) -> Dict[Tensor, np.ndarray]:
    """Reverse-mode pass from a scalar loss.

    Leaves accumulate across calls; intermediate gradients are rebuilt each call.
    Returns the gradient of every trainable leaf reached.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = graph or ComputeGraph.trace(loss)
    for node in graph.nodes:
        if not node.is_leaf:
            node.grad = None
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return {leaf: leaf.grad for leaf in graph.leaf_params}


# --- randomness ------------------------------------------------------------------

@dataclass
class RngStream:
    """Counter-free splittable stream: (seed, stream_id, subkeys) → independent PCG64.

    Distinct keys go through numpy's SeedSequence spawn mechanism, so streams
    are statistically independent and a key always reproduces its draws.
    """
    seed: int
    stream_id: int = 0
    subkeys: Tuple[int, ...] = ()
    algorithm: str = "PCG64/SeedSequence"

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0 or any(k < 0 for k in self.subkeys):
            raise ConfigError("seed, stream_id and subkeys must be non-negative")
        sequence = np.random.SeedSequence(entropy=int(self.seed),
                                          spawn_key=(int(self.stream_id),) + tuple(int(k) for k in self.subkeys))
        self._gen = np.random.Generator(np.random.PCG64(sequence))

    def derive(self, *keys: int) -> "RngStream":
        """Independent child stream addressed by extra integer keys"""
        return RngStream(self.seed, self.stream_id, self.subkeys + tuple(int(k) for k in keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, x):
        return self._gen.permutation(x)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def binomial(self, n, p, size=None) -> np.ndarray:
        return self._gen.binomial(n, p, size)


# --- numerical gradient oracle -------------------------------------------------------

def finite_difference_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar-valued closure w.r.t. one parameter (in place, restored)"""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn().item()
        flat[i] = original - step
        minus = fn().item()
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a| + |n|, floor), elementwise"""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
