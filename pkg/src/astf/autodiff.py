"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation on tensors that require grad
records its parents and a vector-Jacobian closure. Backward walks the
recorded nodes once, in reverse topological order. VJP closures are written
in terms of tensor operations, so gradients themselves can be differentiated
(``grad(..., create_graph=True)``), which the R1 penalty needs.

Domain restrictions: ``log``/``sqrt``/non-integer ``pow`` expect positive
inputs, ``div`` a nonzero divisor. Within those, finite inputs give finite
outputs.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation is called outside its contract."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

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

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- operator sugar ------------------------------------------------------

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
        return neg(self)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp, op) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = True
    t.grad = None
    t._parents = parents
    t._vjp = vjp
    t._op = op
    return t


def _plain(data) -> Tensor:
    """Untracked result tensor (fast path: data is already a float64 array)."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._vjp = None
    t._op = "leaf"
    return t


def _tracing(*ts) -> bool:
    return _grad_enabled and any(t.requires_grad for t in ts)


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, tuple(shape))
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    if not _tracing(a, b):
        return _plain(out)

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    if not _tracing(a, b):
        return _plain(out)

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(neg(g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = -a.data
    if not _tracing(a):
        return _plain(out)

    def vjp(g):
        return (neg(g),)

    return _node(out, (a,), vjp, "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    if not _tracing(a, b):
        return _plain(out)

    def vjp(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    if not _tracing(a, b):
        return _plain(out)

    def vjp(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _node(out, (a, b), vjp, "div")


def pow_(a, p) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p
    if not _tracing(a):
        return _plain(out)

    def vjp(g):
        return (mul(g, mul(pow_(a, p - 1.0), p)),)

    return _node(out, (a,), vjp, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    if not _tracing(a):
        return _plain(out)

    result = _node(out, (a,), None, "exp")

    def vjp(g):
        return (mul(g, result),)

    result._vjp = vjp
    return result


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    if not _tracing(a):
        return _plain(out)

    def vjp(g):
        return (div(g, a),)

    return _node(out, (a,), vjp, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    if not _tracing(a):
        return _plain(out)

    result = _node(out, (a,), None, "sqrt")

    def vjp(g):
        return (div(mul(g, 0.5), result),)

    result._vjp = vjp
    return result


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    if not _tracing(a):
        return _plain(out)

    result = _node(out, (a,), None, "sigmoid")

    def vjp(g):
        return (mul(g, mul(result, sub(1.0, result))),)

    result._vjp = vjp
    return result


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    if not _tracing(a):
        return _plain(out)

    def vjp(g):
        return (mul(g, sigmoid(a)),)

    return _node(out, (a,), vjp, "softplus")


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    a = as_tensor(a)
    out = np.where(a.data > 0, a.data, alpha * a.data)
    if not _tracing(a):
        return _plain(out)

    slope = Tensor(np.where(a.data > 0, 1.0, alpha))

    def vjp(g):
        return (mul(g, slope),)

    return _node(out, (a,), vjp, "leaky_relu")


def stop_gradient(a) -> Tensor:
    """Identity forward (shares the data buffer), zero backward."""
    a = as_tensor(a)
    t = Tensor.__new__(Tensor)
    t.data = a.data
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._vjp = None
    t._op = "stop_gradient"
    return t


# -- shape ops ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data
    if not _tracing(a, b):
        return _plain(out)

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if not _tracing(a):
        return _plain(out)
    inv = None if axes is None else tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inv),)

    return _node(out, (a,), vjp, "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.reshape(a.data, shape)
    if not _tracing(a):
        return _plain(out)
    orig = a.shape

    def vjp(g):
        return (reshape(g, orig),)

    return _node(out, (a,), vjp, "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    if not _tracing(a):
        return _plain(out)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _node(out, (a,), vjp, "broadcast_to")


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    if not _tracing(*parts):
        return _plain(out)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        grads = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = tuple(
                    slice(int(lo), int(hi)) if d == axis % g.ndim else slice(None)
                    for d in range(g.ndim)
                )
                grads.append(getitem(g, idx))
            else:
                grads.append(None)
        return tuple(grads)

    return _node(out, tuple(parts), vjp, "concat")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[idx])
    if not _tracing(a):
        return _plain(out)
    shape = a.shape

    def vjp(g):
        return (_scatter(g, idx, shape),)

    return _node(out, (a,), vjp, "getitem")


def _scatter(g, idx, shape) -> Tensor:
    g = as_tensor(g)
    out = np.zeros(shape, dtype=np.float64)
    out[idx] = g.data
    if not _tracing(g):
        return _plain(out)

    def vjp(gg):
        return (getitem(gg, idx),)

    return _node(out, (g,), vjp, "scatter")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    if not _tracing(a):
        return _plain(out)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            kshape = (1,) * len(in_shape)
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % len(in_shape) for ax in axes)
            kshape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
        gk = g if g.shape == kshape else reshape(g, kshape)
        return (broadcast_to(gk, in_shape),)

    return _node(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return div(sum_(a, axis=axis, keepdims=keepdims), float(n))


# -- composites ---------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax: nonnegative, sums to 1 along ``axis``."""
    a = as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, sum_(e, axis=axis, keepdims=True))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    z = sub(a, shift)
    return sub(z, log(sum_(exp(z), axis=axis, keepdims=True)))


def instance_normalize(x, eps: float = 1e-5) -> Tensor:
    """Normalize each feature row (axis 0) to zero mean, ~unit variance.

    Variance of the output is sigma^2 / (sigma^2 + eps); constant rows map
    to exact zeros.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeMismatch(f"instance_normalize expects >=2 dims, got {x.shape}")
    axes = tuple(range(1, x.ndim))
    mu = mean(x, axis=axes, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=axes, keepdims=True)
    return div(xc, sqrt(add(var, eps)))


# -- backward -----------------------------------------------------------------


def _topo(root: Tensor):
    """Operation records reachable from ``root``, topologically ordered."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def graph_nodes(root: Tensor):
    """Expose the recorded graph for inspection (leaves first)."""
    return _topo(root)


def _accumulate(output: Tensor, seed: Tensor, create_graph: bool):
    order = _topo(output)
    grads = {id(output): seed}
    ctx = nullcontext() if create_graph else no_grad()
    if create_graph:
        combine = add
    else:
        combine = lambda a, b: _plain(a.data + b.data)
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeMismatch(
                        f"vjp of {node._op}: grad shape {pg.shape} != {parent.shape}"
                    )
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else combine(acc, pg)
    return order, grads


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor requiring grad")
    seed = Tensor(np.ones_like(loss.data))
    order, grads = _accumulate(loss, seed, create_graph=False)
    for node in order:
        if node._vjp is None:
            g = grads.get(id(node))
            if g is not None:
                node.grad = g if node.grad is None else Tensor(node.grad.data + g.data)


def grad(output: Tensor, inputs, create_graph: bool = False):
    """Gradients of a scalar ``output`` w.r.t. ``inputs``, without touching .grad.

    With ``create_graph`` the returned tensors are differentiable.
    """
    if output.size != 1:
        raise ContractError(f"grad expects a scalar output, got shape {output.shape}")
    seed = Tensor(np.ones_like(output.data))
    _, grads = _accumulate(output, seed, create_graph=create_graph)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out


# -- finite-difference checking ------------------------------------------------


@dataclass
class GradCheckResult:
    ok: bool
    max_abs_err: float
    max_rel_err: float
    n_checked: int
    failures: list = field(default_factory=list)


def gradcheck(
    fn,
    inputs,
    step: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-6,
    max_entries_per_input=None,
    rng=None,
) -> GradCheckResult:
    """Compare analytic gradients of ``fn(*inputs)`` to central differences.

    ``fn`` must be a deterministic function returning a scalar Tensor.
    Entries per input can be subsampled (seeded) for large parameter sets.
    """
    out = fn(*inputs)
    analytic = grad(out, inputs)
    res = GradCheckResult(True, 0.0, 0.0, 0)
    for k, (t, a) in enumerate(zip(inputs, analytic)):
        flat_idx = np.arange(t.size)
        if max_entries_per_input is not None and t.size > max_entries_per_input:
            r = rng if rng is not None else np.random.default_rng(0)
            flat_idx = np.sort(r.choice(t.size, size=max_entries_per_input, replace=False))
        a_flat = a.data.ravel()
        for idx in flat_idx:
            orig = t.data.flat[idx]
            t.data.flat[idx] = orig + step
            f_plus = float(fn(*inputs).data)
            t.data.flat[idx] = orig - step
            f_minus = float(fn(*inputs).data)
            t.data.flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            ana = float(a_flat[idx])
            abs_err = abs(ana - numeric)
            scale = max(abs(ana), abs(numeric))
            rel_err = abs_err / scale if scale > 0 else 0.0
            res.max_abs_err = max(res.max_abs_err, abs_err)
            res.max_rel_err = max(res.max_rel_err, rel_err)
            res.n_checked += 1
            if abs_err > max(rtol * scale, atol):
                res.ok = False
                res.failures.append((k, int(idx), ana, numeric))
    return res
