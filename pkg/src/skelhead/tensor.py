"""Dense tensors with reverse-mode differentiation.

Every array operation the model needs is defined here as a function that
returns a new :class:`Tensor` and, when gradients are tracked, a closure
that maps the output adjoint to the input adjoints.  Calling
:meth:`Tensor.backward` on a scalar collects the graph into a :class:`Tape`
(topologically ordered) and replays the closures in reverse.

Data lives in numpy arrays.  float32 is used for training and float64 for
gradient checking; operations preserve the dtype of their inputs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "TapeConsumedError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "power",
    "relu",
    "sigmoid",
    "where",
    "sum_axis",
    "reduce_mean_axis",
    "reduce_max_axis",
    "reshape",
    "permute",
    "concat_axis",
    "split_axis",
    "slice_axis",
    "l2_norm",
    "conv2d",
    "group_norm",
    "batch_norm",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "logsumexp_lastdim",
]

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeConsumedError(RuntimeError):
    """backward() was called twice on the same recorded graph."""


_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-dimensional array that can record how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created from non-finite values")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward: Backward, op: str) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._consumed = False
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- array protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    # -- operators --------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keep: bool = False) -> Tensor:
        return sum_axis(self, axis, keep)

    def mean(self, axis: int, keep: bool = False) -> Tensor:
        return reduce_mean_axis(self, axis, keep)

    def max(self, axis: int, keep: bool = False) -> Tensor:
        return reduce_max_axis(self, axis, keep)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *order) -> Tensor:
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return permute(self, order)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def relu(self) -> Tensor:
        return relu(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise IndexError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# Tape and reverse pass
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Operations reachable from a root, inputs before the ops that use them."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in self.nodes:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if root._consumed:
        raise TapeConsumedError("graph already differentiated; rebuild the forward pass")
    if root.data.size != 1:
        raise ValueError(f"backward() needs a scalar output, got shape {root.shape}")
    if not root.requires_grad:
        return
    tape = Tape.from_root(root)
    tape.replay(root, np.ones_like(root.data))
    root._consumed = True


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):  # reported as NonFiniteError
        out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return Tensor._result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), bw, "matmul")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor._result(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    p = float(exponent)
    return Tensor._result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), f"pow{p:g}")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Two-sided form: exp() only ever sees non-positive arguments.
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` holds, else ``b``.  ``mask`` is a constant."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    m = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            _unbroadcast(np.where(m, g, 0), sa) if a.requires_grad else None,
            _unbroadcast(np.where(m, 0, g), sb) if b.requires_grad else None,
        )

    return Tensor._result(np.where(m, a.data, b.data), (a, b), bw, "where")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum_axis(a: Tensor, axis=None, keep: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        out = np.asarray(a.data.sum(keepdims=keep))
        return Tensor._result(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(_check_axis(ax, a.ndim) for ax in axes)
    out = a.data.sum(axis=axes, keepdims=keep)

    def bw(g):
        if not keep:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw, "sum")


def reduce_mean_axis(a: Tensor, axis: int, keep: bool = False) -> Tensor:
    ax = _check_axis(axis, a.ndim)
    n = a.shape[ax]
    shape = a.shape
    out = a.data.mean(axis=ax, keepdims=keep)

    def bw(g):
        if not keep:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw, "mean")


def reduce_max_axis(a: Tensor, axis: int, keep: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal element."""
    ax = _check_axis(axis, a.ndim)
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)
    shape = a.shape

    def bw(g):
        if not keep:
            g = np.expand_dims(g, ax)
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx, g, axis=ax)
        return (full,)

    if not keep:
        out = np.squeeze(out, axis=ax)
    return Tensor._result(out, (a,), bw, "max")


def logsumexp_lastdim(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    p = e / s
    return Tensor._result(out, (a,), lambda g: (g[..., None] * p,), "logsumexp")


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last axis")
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._result(p, (a,), bw, "softmax")


def log_softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (a,), bw, "log_softmax")


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``.  The gradient at the zero vector is taken as 0."""
    ax = _check_axis(axis, a.ndim)
    x = a.data
    n = np.sqrt((x * x).sum(axis=ax))

    def bw(g):
        nk = np.expand_dims(n, ax)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.where(nk > 0, x / safe, 0.0) * np.expand_dims(g, ax),)

    return Tensor._result(n, (a,), bw, "l2_norm")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(tuple(shape))
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a: Tensor, order: Sequence[int]) -> Tensor:
    order = tuple(int(o) for o in order)
    if len(order) != a.ndim:
        raise ValueError(f"permutation of length {len(order)} for rank {a.ndim}")
    if sorted(order) != list(range(a.ndim)):
        raise ValueError(f"{order} is not a permutation of 0..{a.ndim - 1}")
    inverse = tuple(np.argsort(order))
    out = np.ascontiguousarray(a.data.transpose(order))
    return Tensor._result(out, (a,), lambda g: (g.transpose(inverse),), "permute")


def concat_axis(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat of an empty list")
    rank = xs[0].ndim
    ax = _check_axis(axis, rank)
    for x in xs[1:]:
        if x.ndim != rank:
            raise ValueError("concat inputs differ in rank")
        if any(x.shape[i] != xs[0].shape[i] for i in range(rank) if i != ax):
            raise ValueError(f"concat shapes {xs[0].shape} and {x.shape} differ off axis {ax}")
    if len(xs) == 1:
        return Tensor._result(xs[0].data.copy(), (xs[0],), lambda g: (g,), "concat")
    offsets = np.cumsum([x.shape[ax] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=ax)
    return Tensor._result(out, tuple(xs), lambda g: tuple(np.split(g, offsets, axis=ax)), "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = _check_axis(axis, a.ndim)
    if not 0 <= start < stop <= a.shape[ax]:
        raise IndexError(f"slice [{start}:{stop}) out of range for extent {a.shape[ax]}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return Tensor._result(a.data[index].copy(), (a,), bw, "slice")


def split_axis(a: Tensor, sizes: Iterable[int], axis: int) -> list[Tensor]:
    sizes = list(sizes)
    ax = _check_axis(axis, a.ndim)
    if sum(sizes) != a.shape[ax]:
        raise ValueError(f"split sizes {sizes} do not cover extent {a.shape[ax]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(a, ax, start, start + s))
        start += s
    return out


# ---------------------------------------------------------------------------
# Convolution and normalization
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _full_correlation(g: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Adjoint of a stride-1 cross-correlation: result has the padded input's extent."""
    cout, cin, kh, kw = weight.shape
    gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    n, _, hp, wp = gp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, cout * kh * kw, ho * wo)
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * kh * kw)
    return (flipped @ cols).reshape(n, cin, ho, wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """2-D cross-correlation over (N, Cin, H, W) with zero padding.

    A rank-3 input (Cin, H, W) is treated as a batch of one and returned
    without the batch axis.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects input (N,Cin,H,W) and kernel (Cout,Cin,kh,kw)")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"kernel expects {wcin} input channels, got {cin}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError("kernel larger than padded input")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    wmat = weight.data.reshape(cout, -1)

    if kh == kw == 1 and sh == sw == 1 and not (ph or pw):
        cols = x.data.reshape(n, cin, h * w)
        xp_shape = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
        xp_shape = xp.shape
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
        # cols: (N, Cin*kh*kw, Ho*Wo)
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, cin * kh * kw, ho * wo)
    out = wmat @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def bw(g):
        g3 = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            if xp_shape is None:
                gx = (wmat.T @ g3).reshape(x.shape)
            elif sh == sw == 1:
                gx = _full_correlation(g, weight.data)[:, :, ph : ph + h, pw : pw + w]
            else:
                gcols = (wmat.T @ g3).reshape(n, cin, kh, kw, ho, wo)
                gxp = np.zeros(xp_shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += gcols[:, :, i, j]
                gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    res = Tensor._result(out, parents, bw, "conv2d")
    if squeeze:
        res = reshape(res, res.shape[1:])
    return res


def _normalize_groups(x: np.ndarray, eps: float, axes: tuple[int, ...]):
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean) * inv, inv, mean, var


def _norm_input_grad(gxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    return inv * (
        gxhat - gxhat.mean(axis=axes, keepdims=True) - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
    )


def group_norm(x: Tensor, num_groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of (N, C, ...) or (C, ...) input with per-channel affine."""
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n, c = x.shape[:2]
    if num_groups < 1 or c % num_groups:
        raise ValueError(f"{c} channels cannot be split into {num_groups} groups")
    spatial = x.shape[2:]
    xg = x.data.reshape(n, num_groups, -1)
    xhat_g, inv, _, _ = _normalize_groups(xg, eps, (2,))
    xhat = xhat_g.reshape(x.shape)
    bshape = (1, c) + (1,) * len(spatial)
    gd = gain.data.reshape(bshape)
    out = xhat * gd + bias.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gg = (g * xhat).sum(axis=red) if gain.requires_grad else None
        gb = g.sum(axis=red) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = (g * gd).reshape(n, num_groups, -1)
            gx = _norm_input_grad(gxhat, xhat_g, inv, (2,)).reshape(x.shape)
        return gx, gg, gb

    res = Tensor._result(out.astype(x.dtype, copy=False), (x, gain, bias), bw, "group_norm")
    if squeeze:
        res = reshape(res, res.shape[1:])
    return res


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over axis 1 of (N, C, ...).

    In training mode the batch statistics normalize the input and the
    running buffers are updated in place; in eval mode the running buffers
    are used and the op is a fixed per-channel affine map.
    """
    c = x.shape[1]
    bshape = (1, c) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    gd = gain.data.reshape(bshape)
    if train:
        xhat, inv, mean, var = _normalize_groups(x.data, eps, red)
        count = x.data.size // c
        unbiased = var.reshape(c) * (count / max(count - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(bshape).astype(x.dtype)) * inv
    out = xhat * gd + bias.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=red) if gain.requires_grad else None
        gb = g.sum(axis=red) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            gx = _norm_input_grad(gxhat, xhat, inv, red) if train else gxhat * inv
        return gx, gg, gb

    return Tensor._result(out.astype(x.dtype, copy=False), (x, gain, bias), bw, "batch_norm")
