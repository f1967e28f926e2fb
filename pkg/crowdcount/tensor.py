"""Dense float64 tensors with reverse-mode automatic differentiation.

Each forward op returns a new ``Tensor`` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
that graph once in reverse topological order. The graph is rebuilt on every
forward pass and is owned by the thread that built it.
"""

import contextlib
import threading

from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import ContractError, NumericAbort, ShapeError

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction for the current thread."""

    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        """Wraps ``data`` as a float64 array.

        Args:
            data: Array-like values (copied only when not already float64)
            requires_grad: Accumulate ``grad`` for this leaf in ``backward``
        """

        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    # --- properties ---

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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # --- operators ---

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    # --- autodiff ---

    def backward(self):
        """Populates ``grad`` on every reachable leaf with d(self)/d(leaf).

        Gradients accumulate into existing ``grad`` buffers.
        """

        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


class Parameter(Tensor):
    """A trainable leaf tensor; ``name`` is its checkpoint slot."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Module:
    """Container of parameters and submodules, discovered from attributes.

    Attribute declaration order defines the parameter order, so naming and
    checkpoint layout are stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{key}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = ""):
        for name, param in self.named_parameters(prefix):
            param.name = name
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


# --- graph plumbing ---

def _topological_order(root: Tensor) -> List[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericAbort(f"non-finite value produced by {op}")
    out = Tensor(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise ---

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)),
                 "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericAbort("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tensor_abs(x: Tensor) -> Tensor:
    # sign(0) = 0 gives the zero subgradient at the kink
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""

    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


# --- reductions ---

def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    out = special.logsumexp(x.data, axis=axis, keepdims=True)
    weights = np.exp(x.data - out)
    result = out if keepdims else np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _make(np.asarray(result), (x,), backward, "logsumexp")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor with per-row max subtraction."""

    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {x.shape}")
    return softmax(x, axis=-1)


# --- linear algebra and layout ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def getitem(x: Tensor, index) -> Tensor:
    """Basic slicing and integer-array indexing (gathers accumulate on the way back)."""

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), backward, "getitem")


def embed(x: Tensor, rows: np.ndarray, cols: np.ndarray, shape: Tuple[int, int]) -> Tensor:
    """Places a 2-D block into a zero matrix at the cross product rows x cols."""

    grid = np.ix_(rows, cols)
    out = np.zeros(shape, dtype=DTYPE)
    out[grid] = x.data
    return _make(out, (x,), lambda g: (g[grid],), "embed")


# --- normalisation ---

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalises over the last axis, then applies the affine gamma/beta."""

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgamma = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        dbeta = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return dx, dgamma.reshape(gamma.shape), dbeta.reshape(beta.shape)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


# --- sliding windows ---

def window_grid(h: int, w: int, k: int, s: int, p: int) -> Tuple[int, int]:
    """Number of window placements along each axis for a padded input."""

    if k < 1 or s < 1 or p < 0:
        raise ShapeError(f"invalid window k={k} s={s} p={p}")
    if h + 2 * p < k or w + 2 * p < k:
        raise ShapeError(f"window {k}x{k} larger than padded input {h + 2 * p}x{w + 2 * p}")
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def _unfold_array(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    c, h, w = x.shape
    gh, gw = window_grid(h, w, k, s, p)
    padded = np.pad(x, ((0, 0), (p, p), (p, p)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::s, ::s][:, :gh, :gw]
    # (c, gh, gw, k, k) -> (gh, gw, c, k, k): channel-major, then row, then column
    return np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(gh * gw, c * k * k)


def _fold_array(cols: np.ndarray, shape: Tuple[int, int, int], k: int, s: int, p: int) -> np.ndarray:
    c, h, w = shape
    gh, gw = window_grid(h, w, k, s, p)
    if cols.shape != (gh * gw, c * k * k):
        raise ShapeError(f"fold expects columns of shape {(gh * gw, c * k * k)}, got {cols.shape}")
    blocks = cols.reshape(gh, gw, c, k, k)
    padded = np.zeros((c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            padded[:, i:i + s * gh:s, j:j + s * gw:s] += blocks[:, :, :, i, j].transpose(2, 0, 1)
    return padded[:, p:p + h, p:p + w]


def unfold(x: Tensor, k: int, s: int, p: int) -> Tensor:
    """Sliding k x k windows of a [c, h, w] tensor as rows of a [N, c*k*k] matrix.

    Padding is zero; rows follow the window grid in row-major order.
    """

    if x.ndim != 3:
        raise ShapeError(f"unfold expects [c, h, w], got {x.shape}")
    return _make(_unfold_array(x.data, k, s, p), (x,),
                 lambda g: (_fold_array(g, x.shape, k, s, p),), "unfold")


def fold(cols: Tensor, shape: Tuple[int, int, int], k: int, s: int, p: int) -> Tensor:
    """Adjoint of ``unfold``: sums window rows back into a [c, h, w] tensor."""

    return _make(_fold_array(cols.data, tuple(shape), k, s, p), (cols,),
                 lambda g: (_unfold_array(g, k, s, p),), "fold")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """[c, h, w] * [o, c, k, k] -> [o, h', w'] via unfold + matmul."""

    out_c, in_c, k, _ = weight.shape
    if x.shape[0] != in_c:
        raise ShapeError(f"conv2d expects {in_c} input channels, got {x.shape[0]}")
    gh, gw = window_grid(x.shape[1], x.shape[2], k, stride, padding)
    cols = unfold(x, k, stride, padding)
    out = matmul(cols, transpose(reshape(weight, (out_c, in_c * k * k))))
    if bias is not None:
        out = out + bias
    return reshape(transpose(out), (out_c, gh, gw))


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1,
                     padding: int = 0) -> Tensor:
    """[c, h, w] with weight [c, o, k, k] -> [o, (h-1)*s - 2p + k, ...]."""

    in_c, out_c, k, _ = weight.shape
    c, h, w = x.shape
    if c != in_c:
        raise ShapeError(f"conv_transpose2d expects {in_c} input channels, got {c}")
    out_h = (h - 1) * stride - 2 * padding + k
    out_w = (w - 1) * stride - 2 * padding + k
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv_transpose2d output collapses to {out_h}x{out_w}")
    cols = matmul(transpose(reshape(x, (c, h * w))), reshape(weight, (in_c, out_c * k * k)))
    out = fold(cols, (out_c, out_h, out_w), k, stride, padding)
    if bias is not None:
        out = out + reshape(bias, (out_c, 1, 1))
    return out


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d window {k} does not tile {h}x{w}")
    return mean(reshape(x, (c, h // k, k, w // k, k)), axis=(2, 4))
