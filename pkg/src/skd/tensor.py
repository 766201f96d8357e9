"""Dense tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`GradientTape` whenever at
least one input has ``requires_grad=True``.  Outside a tape every op is a plain
numpy computation, which is how frozen (teacher) forwards are run.

    with GradientTape() as tape:
        loss = (x * w).sum()
    grads = tape.backward(loss)          # {leaf tensor: ndarray}
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from skd.errors import ContractError, DimensionError, NumericError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
DEFAULT_DTYPE = np.dtype(np.float32)

_local = threading.local()

BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


def _tape_stack() -> list["GradientTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus optional gradient-tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node", "name")
    __array_ufunc__ = None  # make ``ndarray * Tensor`` dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            if dtype is not None:
                raise ContractError(f"unsupported dtype {arr.dtype}")
            arr = arr.astype(DEFAULT_DTYPE)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"zero-sized dimension in shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a constant instead")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass(eq=False)
class Node:
    """One recorded operation: ``output = op(*inputs)`` with its backward rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    tape: "GradientTape" = field(repr=False)


class GradientTape:
    """Records operations in execution (hence topological) order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("gradient tapes exited out of order")
        stack.pop()

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, fn: BackwardFn) -> None:
        node = Node(op, inputs, output, fn, self)
        output.tape_node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None,
                 accumulate: bool = True) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) back through the tape.

        Gradients are accumulated into ``.grad`` of every reached leaf tensor
        unless ``accumulate`` is False.
        Returns ``{tensor: gradient}`` for ``wrt`` (zeros where unreachable) or,
        when ``wrt`` is None, for every reached leaf.
        """
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if loss.tape_node is None or loss.tape_node.tape is not self:
            raise ContractError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            needs = [t.requires_grad for t in node.inputs]
            for t, gi in zip(node.inputs, node.backward(g, needs)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if t.tape_node is None:
                    leaves[key] = t
                grads[key] = grads[key] + gi if key in grads else gi

        for key, t in leaves.items() if accumulate else ():
            g = grads[key]
            t.grad = g.copy() if t.grad is None else t.grad + g

        if wrt is None:
            return {t: grads[key] for key, t in leaves.items()}
        return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}


def backward(tape: GradientTape, loss: Tensor, wrt: Iterable[Tensor] | None = None,
             accumulate: bool = True) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss, wrt, accumulate)


# ---------------------------------------------------------------------------
# plumbing


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(op, inputs, out, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _result("scale", a.data * c, (a,), lambda g, needs: (_unbroadcast(g * c, a.shape),))

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _result("mul", a.data * b.data, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g, needs: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    """Square root whose gradient at 0 is taken as 0 (subgradient)."""
    out = np.sqrt(x.data)

    def bw(g, needs):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(x.dtype),)

    return _result("sqrt", out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,),
                   lambda g, needs: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _result("reshape", x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(x.shape),))


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients are scattered back with ``np.add.at``."""
    out = np.array(x.data[index])

    def bw(g, needs):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result("take", out, (x,), bw)


def gather(x: Tensor, labels) -> Tensor:
    """``x[i, labels[i]]`` for a 2-D tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    return take(x, (np.arange(x.shape[0]), labels))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, needs):
        return tuple(np.split(g, sizes, axis=axis))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# ---------------------------------------------------------------------------
# network ops


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x of shape [N, d_in]."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"affine expects [N,d_in], [d_in,d_out], [d_out]; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"affine inner dimensions disagree: {x.shape} @ {w.shape} + {b.shape}")

    def bw(g, needs):
        return (g @ w.data.T if needs[0] else None,
                x.data.T @ g if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return _result("affine", x.data @ w.data + b.data, (x, w, b), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and FCkk kernels."""
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise DimensionError(f"conv2d expects [N,C,H,W], [F,C,kh,kw], [F]; got {x.shape}, {w.shape}, {b.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"invalid stride={stride} / padding={padding}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"input has {c} channels but kernel expects {cw}")
    if b.shape[0] != f:
        raise DimensionError(f"bias length {b.shape[0]} != filter count {f}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,F
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b.data[None, :, None, None]

    def bw(g, needs):
        gx = gw = gb = None
        if needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        if needs[1]:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if needs[0]:
            cols = np.tensordot(g, w.data, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        cols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw, gb

    return _result("conv2d", out, (x, w, b), bw)


def max_pool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties go to the first element in row-major order."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool2x2 expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max2x2 pooling needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def bw(g, needs):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _result("max_pool2x2", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def bw(g, needs):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(x.dtype),)

    return _result("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), bw)


def pool(x: Tensor, mode: str) -> Tensor:
    if mode == "max2x2":
        return max_pool2x2(x)
    if mode == "global_avg":
        return global_avg_pool(x)
    raise ContractError(f"unknown pooling mode {mode!r}")


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise (last axis) log-softmax with max subtraction."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax received non-finite logits")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bw(g, needs):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", out, (x,), bw)


def softmax(x) -> np.ndarray:
    """Plain numpy softmax over the last axis; never recorded."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    e = np.exp(data - data.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
