"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Only the operations needed by the refinement network and its losses are
provided. Everything is float64 and evaluated eagerly with numpy; each op
records its parents and a closure that maps the output gradient to parent
gradients. ``backward`` walks the recorded graph once in reverse topological
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "tsum",
    "mean",
    "reshape",
    "slice_channels",
    "concat_channels",
    "conv2d",
    "activate",
    "sigmoid",
    "tanh",
    "bilinear_resize",
    "channel_norm",
    "build_graph",
    "backward",
    "grad_check",
]

# Largest float64 strictly below 1; keeps saturated activations inside their open ranges.
_ONE_MINUS = np.nextafter(1.0, 0.0)
_TINY = np.nextafter(0.0, 1.0)


class ShapeError(ValueError):
    """Operand shapes are inconsistent; the message names the offending dimension."""


class NonFiniteError(ValueError):
    """A tensor would contain NaN or Inf."""


class GraphError(RuntimeError):
    """Invalid use of the autodiff graph (non-scalar loss, reused graph)."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable float64 array with an optional autodiff record.

    Leaf tensors created by the user copy their input. Tensors produced by
    operations keep a reference to their parents and a backward closure while
    any parent requires a gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op="leaf"):
        if _op == "leaf":
            arr = np.array(data, dtype=np.float64)
        else:
            arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{_op}: result contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = _op
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: BackwardFn | None = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements, expected 1")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.op = "detach"
        out._parents = ()
        out._backward = None
        out._consumed = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result; the graph is recorded only if some parent needs a gradient."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0).any():
        raise ValueError("log: argument must be positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data < 0).any():
        raise ValueError("sqrt: argument must be nonnegative")
    out = np.sqrt(a.data)
    safe = np.where(out > 0, out, 1.0)
    return _make(out, (a,), lambda g: (np.where(out > 0, g / (2.0 * safe), 0.0),), "sqrt")


# ---------------------------------------------------------------------------
# reductions and shape


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return div(tsum(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def slice_channels(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 4:
        raise ShapeError(f"slice_channels: expected a 4-d tensor, got {a.data.ndim} dims")

    def grad_fn(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop], (a,), grad_fn, "slice_channels")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack N×Ci×H×W tensors along the channel axis, in argument order."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_channels: no parts given")
    for i, p in enumerate(parts):
        if p.data.ndim != 4:
            raise ShapeError(f"concat_channels: part {i} has {p.data.ndim} dims, expected 4")
        for axis, name in ((0, "N"), (2, "H"), (3, "W")):
            if p.shape[axis] != parts[0].shape[axis]:
                raise ShapeError(
                    f"concat_channels: part {i} has {name}={p.shape[axis]}, "
                    f"expected {parts[0].shape[axis]}"
                )
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def grad_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(out, parts, grad_fn, "concat_channels")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of an N×Cin×H×W input with a Cout×Cin×kH×kW kernel.

    Lowered to one matrix product per batch item over an im2col buffer, with
    fixed accumulation order. ``bias`` may be None.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be N×C×H×W, got {x.data.ndim} dims")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be Cout×Cin×kH×kW, got {kernel.data.ndim} dims")
    n, c, h, w = x.shape
    cout, cin, kh, kw = kernel.shape
    if cin != c:
        raise ShapeError(f"conv2d: input channels Cin={c} but kernel expects Cin={cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size {kh}×{kw} must be odd")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or pad={pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}×{kw} larger than padded input {h + 2 * pad}×{w + 2 * pad}")
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} but Cout={cout}")
        parents.append(bias)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    taps = kh * kw
    # im2col: rows ordered (channel, tap) to match the kernel's row-major layout
    cols = np.empty((n, c, taps, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i : i + hs : stride, j : j + ws : stride]
    cols = cols.reshape(n, c * taps, ho * wo)
    k2 = kernel.data.reshape(cout, c * taps)
    out = np.empty((n, cout, ho * wo))
    for b in range(n):
        np.matmul(k2, cols[b], out=out[b])
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def grad_fn(g):
        g = g.reshape(n, cout, ho * wo)
        gx = gk = gb = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for b in range(n):
                gcols = (k2.T @ g[b]).reshape(c, taps, ho, wo)
                for i in range(kh):
                    for j in range(kw):
                        gxp[b, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, i * kw + j]
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        if kernel.requires_grad:
            gk = np.zeros((cout, c * taps))
            for b in range(n):
                gk += g[b] @ cols[b].T
            gk = gk.reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    return _make(out, parents, grad_fn, "conv2d")


# ---------------------------------------------------------------------------
# activations


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = np.clip(out, _TINY, _ONE_MINUS)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.clip(np.tanh(x.data), -_ONE_MINUS, _ONE_MINUS)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def activate(kind: str, x) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"activate: unknown kind {kind!r}; expected 'sigmoid' or 'tanh'")


# ---------------------------------------------------------------------------
# resampling


def _lerp_taps(n_in: int, n_out: int):
    """Source indices and fractions for align_corners=False linear resampling."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of an N×C×H×W tensor (half-pixel centers, edge clamped)."""
    x = _as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output size {out_h}×{out_w} must be positive")
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected N×C×H×W, got {x.data.ndim} dims")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    y0, y1, fy = _lerp_taps(h, out_h)
    x0, x1, fx = _lerp_taps(w, out_w)
    fy = fy[:, None]
    d = x.data
    rows = d[:, :, y0, :] + fy * (d[:, :, y1, :] - d[:, :, y0, :])
    out = rows[:, :, :, x0] + fx * (rows[:, :, :, x1] - rows[:, :, :, x0])

    def grad_fn(g):
        grows = np.zeros(rows.shape)
        np.add.at(grows, (slice(None), slice(None), slice(None), x0), g * (1.0 - fx))
        np.add.at(grows, (slice(None), slice(None), slice(None), x1), g * fx)
        gx = np.zeros(x.shape)
        np.add.at(gx, (slice(None), slice(None), y0, slice(None)), grows * (1.0 - fy))
        np.add.at(gx, (slice(None), slice(None), y1, slice(None)), grows * fy)
        return (gx,)

    return _make(out, (x,), grad_fn, "bilinear_resize")


def channel_norm(x) -> Tensor:
    """Euclidean norm over the channel axis of an N×C×H×W tensor, keeping the axis.

    The gradient at a zero vector is defined as zero.
    """
    x = _as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    safe = np.where(out > 0, out, 1.0)
    return _make(out, (x,), lambda g: (np.where(out > 0, g * x.data / safe, 0.0),), "channel_norm")


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Operation records reachable from a loss, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


def build_graph(loss: Tensor) -> Graph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return Graph(order)


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The graph is consumed: intermediate closures are released and a second
    call on the same loss raises ``GraphError``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any tensor requiring grad")
    graph = build_graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    return graph


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Largest relative disagreement between autodiff and central differences.

    Returns max over entries of |a - n| / (|a| + |n| + 1e-12).
    """
    # C order so the flat view below aliases ``base``
    base = np.array(x.data, dtype=np.float64, order="C")
    probe = Tensor(base, requires_grad=True)
    backward(f(probe))
    analytic = probe.grad if probe.grad is not None else np.zeros(base.shape)
    numeric = np.zeros(base.shape)
    flat = base.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(Tensor(base)).item()
        flat[k] = orig - eps
        fm = f(Tensor(base)).item()
        flat[k] = orig
        numeric.reshape(-1)[k] = (fp - fm) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0
