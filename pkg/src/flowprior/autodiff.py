"""Reverse-mode automatic differentiation over dense float64 tensors.

The op vocabulary is deliberately small: 2D convolutions (1x1 and 3x3),
elementwise arithmetic, reductions, channel slicing/concatenation,
space-to-depth, and the two matrix ops (inverse, log|det|) an invertible
1x1 convolution needs. Each operation records a node on a tape; `backprop`
walks the tape once and returns exact gradients for every leaf that
requires them. Tapes are rebuilt per forward pass and are confined to a
single thread; the underlying numpy arrays are treated as immutable once
recorded.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ._convkernels import col2im3, im2col3


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class DomainError(ValueError):
    """Operand values lie outside the operation's domain."""


class ContractError(ValueError):
    """An operation was called in a way that violates its contract."""


def _as_f64(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A tape node: a float64 array plus the bookkeeping to differentiate it.

    Leaves are created directly (``Tensor(data)`` or :func:`parameter`);
    interior nodes are produced by the module's operations and hold
    references to their parents together with one vector-Jacobian-product
    callback per parent.
    """

    __slots__ = ("data", "requires_grad", "op", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, *,
                 op: str = "leaf",
                 parents: tuple = (),
                 vjps: tuple = ()):
        self.data = _as_f64(data)
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._vjps = vjps

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are accepted as 0-d constants.
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

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)


def parameter(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data, op, parents, vjps) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op, parents=tuple(parents), vjps=tuple(vjps))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (the reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return _node(out, "add", (a, b),
                 (lambda g: _unbroadcast(g, a.shape),
                  lambda g: _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    return _node(out, "sub", (a, b),
                 (lambda g: _unbroadcast(g, a.shape),
                  lambda g: _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    return _node(out, "mul", (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.shape),
                  lambda g: _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = _coerce(a)
    c = float(c)
    return _node(a.data * c, "scale", (a,), (lambda g: g * c,))


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        bad = float(a.data.min())
        raise DomainError(f"log: input must be strictly positive, min value {bad}")
    return _node(np.log(a.data), "log", (a,), (lambda g: g / a.data,))


def relu(a) -> Tensor:
    a = _coerce(a)
    out = np.maximum(a.data, 0.0)
    return _node(out, "relu", (a,), (lambda g: g * (out > 0.0),))


def sqrt(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(a.data)

    def vjp(g):
        # subgradient 0 at the origin, matching relu's kink convention
        return np.where(out > 0.0, 0.5 * g / np.where(out > 0.0, out, 1.0), 0.0)

    return _node(out, "sqrt", (a,), (vjp,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tensor_sum(a) -> Tensor:
    a = _coerce(a)
    return _node(a.data.sum(), "sum", (a,),
                 (lambda g: np.full(a.shape, g),))


def tensor_mean(a) -> Tensor:
    a = _coerce(a)
    n = a.size
    return _node(a.data.mean(), "mean", (a,),
                 (lambda g: np.full(a.shape, g / n),))


def l2_norm(a) -> Tensor:
    a = _coerce(a)
    out = float(np.sqrt((a.data * a.data).sum()))

    def vjp(g):
        if out == 0.0:
            return np.zeros(a.shape)
        return (g / out) * a.data

    return _node(out, "l2_norm", (a,), (vjp,))


def sum_samples(a) -> Tensor:
    """Sum over all axes except the leading (batch) one -> shape (N,)."""
    a = _coerce(a)
    if a.ndim < 1:
        raise ShapeError("sum_samples: input must have a batch axis")
    n = a.shape[0]
    out = a.data.reshape(n, -1).sum(axis=1)

    def vjp(g):
        return np.broadcast_to(g.reshape((n,) + (1,) * (a.ndim - 1)), a.shape).copy()

    return _node(out, "sum_samples", (a,), (vjp,))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    return _node(a.data.reshape(shape), "reshape", (a,),
                 (lambda g: g.reshape(a.shape),))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ContractError("concat_channels: need at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def make_vjp(i):
        lo, hi = bounds[i], bounds[i + 1]
        return lambda g: g[:, lo:hi]

    return _node(out, "concat", tuple(parts),
                 tuple(make_vjp(i) for i in range(len(parts))))


def channels(a, lo: int, hi: int) -> Tensor:
    a = _coerce(a)
    if not (0 <= lo < hi <= a.shape[1]):
        raise ShapeError(f"channels: slice [{lo}:{hi}] out of range for shape {a.shape}")
    out = a.data[:, lo:hi].copy()

    def vjp(g):
        full = np.zeros(a.shape)
        full[:, lo:hi] = g
        return full

    return _node(out, "channels", (a,), (vjp,))


def _squeeze_raw(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    # output channel c*4 + (dy*2 + dx): 2x2 tile positions stacked row-major
    return (x.reshape(n, c, h // 2, 2, w // 2, 2)
             .transpose(0, 1, 3, 5, 2, 4)
             .reshape(n, c * 4, h // 2, w // 2))


def _unsqueeze_raw(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return (x.reshape(n, c // 4, 2, 2, h, w)
             .transpose(0, 1, 4, 2, 5, 3)
             .reshape(n, c // 4, h * 2, w * 2))


def squeeze2x(a) -> Tensor:
    a = _coerce(a)
    if a.ndim != 4:
        raise ShapeError(f"squeeze2x: expected NCHW input, got shape {a.shape}")
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze2x: spatial extents must be even, got {h}x{w}")
    return _node(_squeeze_raw(a.data), "squeeze2x", (a,),
                 (lambda g: _unsqueeze_raw(g),))


def unsqueeze2x(a) -> Tensor:
    a = _coerce(a)
    if a.ndim != 4 or a.shape[1] % 4:
        raise ShapeError(f"unsqueeze2x: channel count must be divisible by 4, got shape {a.shape}")
    return _node(_unsqueeze_raw(a.data), "unsqueeze2x", (a,),
                 (lambda g: _squeeze_raw(g),))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None) -> Tensor:
    """2D convolution, NCHW, kernel 1x1 or 3x3 (zero padding 1, so H and W
    are preserved). Linear in both the input and the weight."""
    x, weight = _coerce(x), _coerce(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got weight shape {weight.shape}")
    if c_in != c:
        raise ShapeError(f"conv2d: input shape {x.shape} does not match weight shape {weight.shape}")
    if bias is not None:
        bias = _coerce(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")

    if kh == 1:
        w2 = weight.data.reshape(c_out, c)
        x3 = x.data.reshape(n, c, h * w)
        out = np.matmul(w2, x3).reshape(n, c_out, h, w)

        def vjp_x(g):
            return np.matmul(w2.T, g.reshape(n, c_out, h * w)).reshape(n, c, h, w)

        def vjp_w(g):
            g3 = g.reshape(n, c_out, h * w)
            gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0)
            return gw.reshape(c_out, c, 1, 1)
    else:
        # the im2col buffer feeds the forward GEMM and is reused for the
        # weight gradient, so it is kept alive only while the tape is
        cols = im2col3(x.data)
        w2 = weight.data.reshape(c_out, c * 9)
        out = np.matmul(w2, cols).reshape(n, c_out, h, w)

        def vjp_x(g):
            g3 = g.reshape(n, c_out, h * w)
            gcols = np.matmul(np.ascontiguousarray(w2.T), g3)
            return col2im3(gcols, h, w)

        def vjp_w(g):
            g3 = g.reshape(n, c_out, h * w)
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            return gw.reshape(c_out, c, 3, 3)

    parents = [x, weight]
    vjps = [vjp_x, vjp_w]
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)
        parents.append(bias)
        vjps.append(lambda g: g.sum(axis=(0, 2, 3)))
    return _node(out, "conv2d", tuple(parents), tuple(vjps))


# ---------------------------------------------------------------------------
# matrix ops (for the invertible 1x1 convolution)
# ---------------------------------------------------------------------------

def mat_inverse(a) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"mat_inverse: need a square matrix, got shape {a.shape}")
    inv = np.linalg.inv(a.data)
    return _node(inv, "mat_inverse", (a,),
                 (lambda g: -inv.T @ g @ inv.T,))


def log_abs_det(a) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"log_abs_det: need a square matrix, got shape {a.shape}")
    _, logdet = np.linalg.slogdet(a.data)
    return _node(logdet, "log_abs_det", (a,),
                 (lambda g: g * np.linalg.inv(a.data).T,))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list:
    """Iterative post-order walk; tapes can be deeper than the recursion limit."""
    order = []
    seen = set()
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backprop(loss: Tensor, release: bool = False) -> dict:
    """Exact reverse-mode gradients for every requires_grad leaf reachable
    from `loss`. Returns a mapping from leaf Tensor to a gradient array of
    the leaf's shape. Deterministic: the same tape always yields
    bit-identical gradients.

    With ``release=True`` the tape is consumed as it is walked (buffers
    captured for the backward pass are freed early); the default keeps the
    tape intact so backprop can run again.
    """
    if loss.size != 1:
        raise ContractError(f"backprop: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _toposort(loss)
    grads: dict = {id(loss): np.ones(loss.shape)}
    # some vjps hand back views of the incoming gradient, so an accumulator
    # may only be updated in place once this pass owns it
    owned: set = set()
    leaf_grads: dict = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            leaf_grads[node] = g
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            pid = id(parent)
            acc = grads.get(pid)
            if acc is None:
                grads[pid] = pg
            elif pid in owned:
                acc += pg
            else:
                grads[pid] = acc + pg
                owned.add(pid)
        if release:
            node._parents = ()
            node._vjps = ()
    return leaf_grads


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    `f` must map a Tensor to a scalar Tensor. The error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    x = _coerce(x)
    leaf = Tensor(x.data.copy(), requires_grad=True)
    analytic = backprop(f(leaf)).get(leaf)
    if analytic is None:
        analytic = np.zeros(x.shape)
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] += step
        hi = float(f(constant(probe.reshape(x.shape))).data)
        probe[i] -= 2 * step
        lo = float(f(constant(probe.reshape(x.shape))).data)
        numeric = (hi - lo) / (2 * step)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
