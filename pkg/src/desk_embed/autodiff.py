"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to per-parent gradients.  Calling
:func:`backward` on a scalar walks the recorded nodes once, in reverse
topological order, and deposits gradients on leaves that require them.

The op set is deliberately small; anything the encoder or the losses need
is expressed in terms of it.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "GraphStateError",
    "no_grad",
    "grad_enabled",
    "make_op",
    "backward",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "getitem",
    "concat",
    "tensor_sum",
    "tensor_mean",
    "exp",
    "log",
    "sqrt",
    "silu",
    "softmax",
    "log_softmax",
    "layernorm",
    "embedding",
    "cross_entropy",
    "l2_normalize",
]


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class GraphStateError(RuntimeError):
    """Raised on misuse of a :class:`Graph` (e.g. backward before forward)."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


def _check_finite_enabled() -> bool:
    return getattr(_state, "check_finite", True)


class no_grad:
    """Context manager disabling graph recording on the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


class finite_checks:
    """Context manager toggling the per-op NaN/Inf scan."""

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        self._prev = _check_finite_enabled()
        _state.check_finite = self.enabled
        return self

    def __exit__(self, *exc):
        _state.check_finite = self._prev
        return False


class Tensor:
    """A float64 array that may participate in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ---------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``.

    ``grad_fn(g)`` must return one gradient (or None) per parent, each shaped
    like that parent.  Recording is skipped under :class:`no_grad` or when no
    parent requires a gradient.
    """
    if _check_finite_enabled() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values (output shape {data.shape})")
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"op '{op}': cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return make_op(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return make_op(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return make_op(
        "mul", a.data * b.data, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return make_op(
        "div", out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


# -- linear algebra & shape -------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"op 'matmul': incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"op 'matmul': incompatible batch shapes {a.shape} @ {b.shape}") from None

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op("matmul", out, (a, b), grad_fn)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"op 'transpose': axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return make_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"op 'reshape': cannot reshape {a.shape} to {tuple(shape)}") from None
    return make_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    """Slicing and integer-array gathering; repeated indices accumulate."""
    a = _as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"op 'slice': {exc} (shape {a.shape})") from None
    basic = _is_basic_index(idx)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_op("slice", np.array(out, dtype=np.float64, copy=True), (a,), grad_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"op 'concat': incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op("concat", out, ts, grad_fn)


# -- reductions -------------------------------------------------------------

def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op("sum", np.asarray(out, dtype=np.float64), (a,), grad_fn)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- elementwise unary ------------------------------------------------------

def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_op("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return make_op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return make_op("silu", a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", out, (a,), grad_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op("log_softmax", out, (a,), grad_fn)


# -- fused layers -----------------------------------------------------------

def layernorm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis with elementwise affine parameters."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"op 'layernorm': affine shapes {weight.shape}, {bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def grad_fn(g):
        red = tuple(range(g.ndim - 1))
        gw = (g * xhat).sum(axis=red) if weight.requires_grad else None
        gb = g.sum(axis=red) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * weight.data
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gw, gb

    return make_op("layernorm", out, (x, weight, bias), grad_fn)


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]``; ``ids`` is an integer array of any shape."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"op 'embedding': id out of range for table of {weight.shape[0]} rows")
    out = weight.data[ids]

    def grad_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return make_op("embedding", out, (weight,), grad_fn)


def cross_entropy(logits, targets, ignore_index: int = -100) -> Tensor:
    """Mean cross-entropy of ``logits[N, C]`` against integer ``targets[N]``.

    Rows whose target equals ``ignore_index`` contribute nothing.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"op 'cross_entropy': logits {logits.shape} vs targets {targets.shape}")
    valid = targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: no labeled positions")
    rows = np.nonzero(valid)[0]
    cols = targets[valid]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    out = np.asarray((lse[rows] - z[rows, cols]).sum() / count)

    def grad_fn(g):
        p = np.exp(z - lse[:, None])
        p[~valid] = 0.0
        p[rows, cols] -= 1.0
        return (p * (g / count),)

    return make_op("cross_entropy", out, (logits,), grad_fn)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Divide by the L2 norm along ``axis``; zero-norm slices are rejected."""
    x = _as_tensor(x)
    sq = (x.data * x.data).sum(axis=axis, keepdims=True)
    if np.any(sq == 0.0):
        raise ValueError("l2_normalize: zero-norm vector")
    return x / sqrt(tensor_sum(x * x, axis=axis, keepdims=True))


# -- graph traversal --------------------------------------------------------

def _topo_order(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen:
            continue
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf.

    ``root`` must be a scalar unless an explicit upstream ``grad`` is given.
    """
    if grad is None:
        if root.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {root.shape}")
        grad = np.ones_like(root.data)
    else:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != root.shape:
            raise ShapeError(f"upstream gradient shape {grad.shape} != output shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(_topo_order([root])):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


class Graph:
    """A recorded computation: wraps ``fn(**inputs)`` and keeps its node list.

    ``forward`` runs the function and stores the reachable nodes in
    topological order; ``backward`` then differentiates a scalar output.
    """

    def __init__(self, fn: Callable[..., Tensor | dict]):
        self.fn = fn
        self.nodes: list[Tensor] = []
        self.outputs = None

    def forward(self, **inputs):
        out = self.fn(**inputs)
        roots = list(out.values()) if isinstance(out, dict) else [out]
        self.nodes = _topo_order(roots)
        self.outputs = out
        return out

    def backward(self, loss: Tensor | None = None) -> None:
        if self.outputs is None:
            raise GraphStateError("backward called before forward")
        if loss is None:
            if isinstance(self.outputs, dict):
                raise GraphStateError("graph has several outputs; name the loss tensor")
            loss = self.outputs
        backward(loss)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: dict[str, np.ndarray],
    epsilon: float = 1e-6,
    tolerance: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, dict]:
    """Compare analytic gradients with central differences for every input.

    Non-scalar outputs are reduced with a fixed random projection.  The
    relative error of a coordinate is ``|a - n| / max(|a|, |n|, 1e-3)``;
    each leaf reports its maximum and whether it stays under ``tolerance``.
    ``max_coords`` limits the probe to a random subset of coordinates.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    rng = np.random.default_rng(seed)
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    proj: list[np.ndarray] = []

    def scalar(arrays: dict[str, np.ndarray], track: bool):
        leaves = {k: Tensor(v, requires_grad=track) for k, v in arrays.items()}
        out = fn(**leaves)
        if not proj:
            proj.append(rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape))
        return (out * proj[0]).sum(), leaves

    loss, leaves = scalar(base, True)
    loss.backward()

    report: dict[str, dict] = {}
    with no_grad():
        for name, arr in base.items():
            analytic = leaves[name].grad
            if analytic is None:
                analytic = np.zeros_like(arr)
            flat_idx = np.arange(arr.size)
            if max_coords is not None and arr.size > max_coords:
                flat_idx = rng.choice(arr.size, size=max_coords, replace=False)
            worst = 0.0
            for i in flat_idx:
                idx = np.unravel_index(i, arr.shape)
                bumped = dict(base)
                plus = arr.copy()
                plus[idx] += epsilon
                minus = arr.copy()
                minus[idx] -= epsilon
                bumped[name] = plus
                fp = scalar(bumped, False)[0].item()
                bumped[name] = minus
                fm = scalar(bumped, False)[0].item()
                numeric = (fp - fm) / (2 * epsilon)
                a = analytic[idx]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
                worst = max(worst, err)
            report[name] = {"max_rel_error": worst, "ok": worst <= tolerance, "checked": len(flat_idx)}
    return report
