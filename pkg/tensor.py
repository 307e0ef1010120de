# tensor.py - Dense tensors with reverse-mode automatic differentiation

import contextlib
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from defaults import DTYPE
from error_handler import ShapeError, NonFiniteError, GraphError, LabelError

logger = logging.getLogger(__name__)

_DTYPES = {"float64": np.float64, "float32": np.float32}

_default_dtype = _DTYPES.get(DTYPE, np.float64)
_grad_enabled = True
_scope_stack: List[str] = []
_pass_listeners: List = []

ArrayLike = Union[np.ndarray, float, int, Sequence]


def set_default_dtype(name: str):
    """Select float64 (default) or float32 for newly created tensors"""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"Unsupported dtype {name!r}; use one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype():
    return _default_dtype


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Operations inside this block build no graph"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def network_scope(name: str):
    """
    Tag every node built inside the block with a network name and report one
    forward pass of that network to the active pass listeners.
    """
    for listener in list(_pass_listeners):
        listener.on_forward(name)
    _scope_stack.append(name)
    try:
        yield
    finally:
        _scope_stack.pop()


@contextlib.contextmanager
def listening(listener):
    """Route forward/backward pass notifications to `listener` inside the block"""
    _pass_listeners.append(listener)
    try:
        yield listener
    finally:
        _pass_listeners.remove(listener)


def _check_finite(data: np.ndarray, op: str):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(
            f"{op or 'tensor'} produced non-finite values",
            details=f"shape {tuple(data.shape)}, {int(np.sum(~np.isfinite(data)))} bad elements",
        )


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the dimensions that were broadcast to reach grad.shape"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


def _broadcast_shape(a: "Tensor", b: "Tensor", op: str) -> Tuple[int, ...]:
    # only bias-add / per-channel scale-shift style broadcasting: one side must already be the result shape
    try:
        out = tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
    if out != a.shape and out != b.shape:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} need mutual broadcasting",
            details="reshape one operand explicitly",
        )
    return out


class Tensor:
    """
    A dense n-dimensional array that records the operations applied to it so
    that `backward` can propagate gradients to every leaf with requires_grad.
    """

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _default_dtype)
        _check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._grad_fn: Optional[Callable] = None
        self._op = ""
        self._scope: Optional[str] = None
        self._is_leaf = True
        self._released = False

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], grad_fn: Callable, op: str) -> "Tensor":
        data = np.asarray(data)
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._scope = _scope_stack[-1] if _scope_stack else None
        out._is_leaf = False
        out._released = False
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
            out._is_leaf = True
        return out

    # ---- basic properties -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._grad_fn = None
        out._op = "detach"
        out._scope = None
        out._is_leaf = True
        out._released = False
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other, dtype=self.data.dtype)

    def _accumulate(self, grad: np.ndarray):
        grad = np.asarray(grad, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    # ---- elementwise arithmetic ---------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._wrap(other)
        _broadcast_shape(self, other, "add")
        a_shape, b_shape = self.shape, other.shape

        def grad_fn(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), grad_fn, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        other = self._wrap(other)
        _broadcast_shape(self, other, "sub")
        a_shape, b_shape = self.shape, other.shape

        def grad_fn(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._make(self.data - other.data, (self, other), grad_fn, "sub")

    def __rsub__(self, other) -> "Tensor":
        return self._wrap(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._wrap(other)
        _broadcast_shape(self, other, "mul")
        a, b = self.data, other.data

        def grad_fn(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), grad_fn, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._wrap(other)
        _broadcast_shape(self, other, "div")
        a, b = self.data, other.data

        def grad_fn(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a / b, (self, other), grad_fn, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return self._wrap(other) / self

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def sigmoid(self) -> "Tensor":
        out = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def softplus(self) -> "Tensor":
        a = self.data
        out = np.logaddexp(0.0, a)
        slope = 0.5 * (1.0 + np.tanh(0.5 * a))
        return Tensor._make(out, (self,), lambda g: (g * slope,), "softplus")

    # ---- reductions and shape --------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(out, (self,), grad_fn, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {original} into {shape}")
        return Tensor._make(out, (self,), lambda g: (g.reshape(original),), "reshape")

    def matmul(self, other: "Tensor") -> "Tensor":
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {self.shape} and {other.shape}")
        a, b = self.data, other.data

        def grad_fn(g):
            return g @ b.T, a.T @ g

        return Tensor._make(a @ b, (self, other), grad_fn, "matmul")

    __matmul__ = matmul

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape
        out = self.data[index]

        def grad_fn(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(np.array(out), (self,), grad_fn, "getitem")

    # ---- backward ---------------------------------------------------------------

    def backward(self, retain_graph: bool = False):
        """
        Accumulate d(self)/d(leaf) into `.grad` of every reachable leaf that
        requires grad. The graph is released afterwards unless retain_graph.
        Leaves the loss does not reach keep `.grad` as is (None after
        zero_grad), so SGD skips them rather than applying a zero step.
        """
        if self.data.size != 1:
            raise GraphError("backward() needs a scalar loss", details=f"got shape {self.shape}")
        if self._released:
            raise GraphError("graph already consumed by a previous backward()")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        traversed = set()

        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._is_leaf:
                node._accumulate(g)
                continue
            if node._released:
                raise GraphError("graph already consumed by a previous backward()")
            if node._scope is not None:
                traversed.add(node._scope)
            for parent, parent_grad in zip(node._parents, node._grad_fn(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

        if not retain_graph:
            for node in order:
                if not node._is_leaf:
                    node._parents = ()
                    node._grad_fn = None
                    node._released = True

        for listener in list(_pass_listeners):
            listener.on_backward(traversed)


def _topological_order(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


class Parameter(Tensor):
    """A trainable tensor; a frozen parameter never acquires gradients"""

    def __init__(self, data: ArrayLike, name: str = None, frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.name = name
        self._frozen = bool(frozen)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool):
        self._frozen = bool(value)
        self.requires_grad = not self._frozen
        if self._frozen:
            self.grad = None

    def _accumulate(self, grad: np.ndarray):
        if self._frozen:
            return
        super()._accumulate(grad)

    def __repr__(self):
        state = "frozen" if self._frozen else "trainable"
        return f"Parameter(name={self.name!r}, shape={self.shape}, {state})"


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}")
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(tensors), grad_fn, "concat")


# ---- layers ---------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def linear(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """input[N,D] @ weight[D,K] + bias[K]"""
    if input.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {input.shape} and {weight.shape}")
    if input.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input features {input.shape[1]} != weight rows {weight.shape[0]}",
            details=f"input {input.shape}, weight {weight.shape}",
        )
    out = input.matmul(weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias
    return out


def _conv_output_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of input[N,C,H,W] with kernel[F,C,kh,kw]"""
    if input.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {input.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride must be positive and padding non-negative (got {stride}, {padding})")
    n, c, h, w = input.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(
            f"conv2d: input has {c} channels but kernel expects {kc}",
            details=f"input {input.shape}, kernel {kernel.shape}",
        )
    out_h = _conv_output_extent(h, kh, stride, padding)
    out_w = _conv_output_extent(w, kw, stride, padding)
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    padded = np.pad(input.data, pad) if padding else input.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    k = kernel.data
    out = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def grad_fn(g):
        grad_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_padded = np.zeros(padded.shape, dtype=g.dtype)
        h_stop = stride * (out_h - 1) + 1
        w_stop = stride * (out_w - 1) + 1
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, k[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                grad_padded[:, :, i:i + h_stop:stride, j:j + w_stop:stride] += contrib
        grad_input = grad_padded[:, :, padding:padding + h, padding:padding + w]
        return grad_input, grad_kernel

    return Tensor._make(np.ascontiguousarray(out), (input, kernel), grad_fn, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    return x.mean(axis=(2, 3))


def avg_pool2d(x: Tensor, k: int, stride: int = None) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects [N,C,H,W], got {x.shape}")
    stride = stride or k
    n, c, h, w = x.shape
    out_h = _conv_output_extent(h, k, stride, 0)
    out_w = _conv_output_extent(w, k, stride, 0)
    if k < 1 or out_h <= 0 or out_w <= 0:
        raise ShapeError(f"avg_pool2d: window {k} does not fit input {h}x{w}")
    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = windows.mean(axis=(-2, -1))
    shape = x.shape

    def grad_fn(g):
        grad = np.zeros(shape, dtype=g.dtype)
        share = g / (k * k)
        h_stop = stride * (out_h - 1) + 1
        w_stop = stride * (out_w - 1) + 1
        for i in range(k):
            for j in range(k):
                grad[:, :, i:i + h_stop:stride, j:j + w_stop:stride] += share
        return (grad,)

    return Tensor._make(np.ascontiguousarray(out), (x,), grad_fn, "avg_pool2d")


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be integer class indices", details=f"dtype {labels.dtype}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(
            f"label out of range [0, {k})",
            details=f"min {int(labels.min())}, max {int(labels.max())}",
        )
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """
    Mean (or per-sample with reduction="none") of -log softmax(logits)[label],
    stabilised by subtracting the row maximum.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    per_sample = log_norm - shifted[rows, labels]
    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, labels] -= 1.0

    if reduction == "none":
        return Tensor._make(per_sample, (logits,), lambda g: (probs * g[:, None],), "cross_entropy")
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return Tensor._make(np.array(per_sample.mean()), (logits,), lambda g: (probs * (g / n),), "cross_entropy")


def finite_diff_check(f: Callable[[Tensor], Tensor], at: ArrayLike, h: float = 1e-5) -> float:
    """
    Compare the autodiff gradient of scalar f at `at` with central differences.
    Returns the max relative error, |a - b| / max(|a|, |b|, 1e-8). An f that
    does not depend on its input has a zero analytic gradient.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    base = np.array(at.data if isinstance(at, Tensor) else at, dtype=_default_dtype)

    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if out.requires_grad:
        out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    with no_grad():
        for index in np.ndindex(base.shape):
            original = base[index]
            base[index] = original + h
            plus = f(Tensor(base.copy())).item()
            base[index] = original - h
            minus = f(Tensor(base.copy())).item()
            base[index] = original
            numeric[index] = (plus - minus) / (2.0 * h)

    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    error = float(np.max(np.abs(analytic - numeric) / denominator)) if base.size else 0.0
    logger.debug("finite_diff_check: %d elements, max relative error %.3e", base.size, error)
    return error
