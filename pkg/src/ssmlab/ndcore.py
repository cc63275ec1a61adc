"""Dense tensors with reverse-mode automatic differentiation on top of numpy.

A ``Tensor`` wraps an ndarray; arithmetic on tensors is recorded on the
active ``Tape`` whenever any operand requires gradients. ``Tape.backward``
walks the recorded operations in reverse execution order (which is a valid
topological order by construction) and accumulates gradients into the leaf
tensors' ``.grad`` fields.

Default precision is float64. float32 mode exists to study finite-precision
overflow and is selected with ``set_dtype`` / ``precision``.

Reductions inherit numpy's fixed pairwise summation order, so results are
bit-reproducible for identical inputs in single-threaded execution.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_DTYPES = {"float64": np.float64, "float32": np.float32}
_active_dtype = np.float64

_TAPES: list["Tape"] = []


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class OverflowDetected(ArithmeticError):
    """A non-finite value appeared where finite values are required.

    ``context`` carries locating information (layer index, time step, ...).
    """

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


def set_dtype(name: str) -> None:
    """Select the run-wide float precision: 'float64' or 'float32'."""
    global _active_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision mode {name!r}; use 'float64' or 'float32'")
    _active_dtype = _DTYPES[name]


def get_dtype() -> np.dtype:
    return np.dtype(_active_dtype)


def dtype_name() -> str:
    return "float32" if _active_dtype is np.float32 else "float64"


def float_max() -> float:
    """Largest representable magnitude for the active precision mode."""
    return float(np.finfo(_active_dtype).max)


@contextmanager
def precision(name: str):
    """Temporarily switch the active precision mode."""
    old = dtype_name()
    set_dtype(name)
    try:
        yield
    finally:
        set_dtype(old)


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Nodes are appended in forward execution order, so iterating the record
    in reverse is a reverse-topological traversal. A tape is consumed by
    ``backward`` and must not be shared between concurrent training steps.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError(
                "loss does not depend on any tracked parameter; was it computed "
                "while this tape was active?")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
            # free intermediate gradients; leaves are never on the tape
            node.grad = None
            node._backward = None
            node._parents = ()
        self.nodes.clear()


def backward(tape: Tape, loss: "Tensor") -> None:
    tape.backward(loss)


def _coerce(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: "Tensor", g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """Immutable dense array participating in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_active_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- introspection -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _node(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Create a derived tensor, recording it when tracing is active."""
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        _TAPES[-1].nodes.append(out)
    return out


# -- elementwise primitives ---------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatch(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeMismatch(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _node(-a.data, (a,), bw)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a python scalar exponent."""
    if isinstance(p, Tensor):
        raise TypeError("power supports scalar exponents only")
    data = a.data**p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _node(data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        _accum(a, g * data)

    return _node(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g / a.data)

    return _node(np.log(a.data), (a,), bw)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - data * data))

    return _node(data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # stable for both signs
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))), np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    data = data.astype(_active_dtype, copy=False)

    def bw(g):
        _accum(a, g * data * (1.0 - data))

    return _node(data, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU as one primitive (hot in every MLP)."""
    c = 0.7978845608028654  # sqrt(2/pi)
    x = a.data
    inner = np.tanh(c * (x + 0.044715 * x**3))
    data = 0.5 * x * (1.0 + inner)

    def bw(g):
        sech2 = 1.0 - inner * inner
        local = 0.5 * (1.0 + inner) + 0.5 * x * sech2 * c * (1.0 + 3 * 0.044715 * x * x)
        _accum(a, g * local)

    return _node(data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.data.dtype)

    def bw(g):
        _accum(a, g * mask)

    return _node(a.data * mask, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift.

    Fused primitive: the closed-form backward avoids taping the dozen
    elementwise ops the composite formulation would record per block.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        _accum(x, gx)
        red = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=red))
        _accum(bias, g.sum(axis=red))

    return _node(data, (x, gain, bias), bw)


# -- matmul ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy matmul semantics with leading batch dimensions on either side."""
    a_vec = a.ndim == 1
    b_vec = b.ndim == 1
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None

    def bw(g):
        # hot path: batched activations against a 2-D weight; collapsing the
        # batch dims turns the weight gradient into a single GEMM instead of
        # a batched product followed by a reduction
        if b.ndim == 2 and a.ndim >= 2 and not a_vec:
            k_in, k_out = b.shape
            ga = np.matmul(g, b.data.T)
            gb = np.matmul(a.data.reshape(-1, k_in).T, g.reshape(-1, k_out))
            _accum(a, ga)
            _accum(b, gb)
            return
        ad = a.data[None, :] if a_vec else a.data
        bd = b.data[:, None] if b_vec else b.data
        gg = g
        if a_vec and b_vec:
            gg = np.asarray(g).reshape(1, 1)
        elif a_vec:
            gg = np.expand_dims(g, -2)
        elif b_vec:
            gg = np.expand_dims(g, -1)
        ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
        if a_vec:
            ga = np.squeeze(ga, -2)
        if b_vec:
            gb = np.squeeze(gb, -1)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _node(data, (a, b), bw)


# -- reductions -----------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy() if np.shape(gg) != a.shape else gg)

    return _node(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# -- softmax family --------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _node(data, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse

    def bw(g):
        _accum(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _node(data, (a,), bw)


# -- shape manipulation ----------------------------------------------------

def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] += g
        _accum(a, full)

    return _node(data, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), bw)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bw(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _node(np.swapaxes(a.data, ax1, ax2), (a,), bw)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of an empty sequence")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def bw(g):
        off = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(off, off + n)
            _accum(p, g[tuple(sl)])
            off += n

    return _node(data, tuple(parts), bw)


def stack(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("stack of an empty sequence")
    data = np.stack([p.data for p in parts], axis=axis)

    def bw(g):
        for i, p in enumerate(parts):
            _accum(p, np.take(g, i, axis=axis))

    return _node(data, tuple(parts), bw)


# -- indexing primitives for embeddings / gather ---------------------------

def take_rows(weight: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``weight[idx]`` for an integer index array (embedding)."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(f"take_rows: index out of range for {weight.shape[0]} rows")
    data = weight.data[idx]

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, idx, g)
        _accum(weight, full)

    return _node(data, (weight,), bw)


def take_along(a: Tensor, idx: np.ndarray, axis: int = -1) -> Tensor:
    """Gather along ``axis`` with an integer array shaped like ``a`` minus that axis."""
    idx = np.asarray(idx)
    expanded = np.expand_dims(idx, axis)
    data = np.take_along_axis(a.data, expanded, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, expanded, np.expand_dims(g, axis), axis=axis)
        _accum(a, full)

    return _node(data, (a,), bw)


# -- oracles & checks -------------------------------------------------------

def finite_diff_gradient(f, params: list[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient estimate of scalar ``f()`` w.r.t. each tensor.

    Perturbs parameter data in place and restores it; the estimate per
    coordinate is (f(th+eps) - f(th-eps)) / (2 eps). This path never touches
    the tape machinery, so it is an independent oracle for ``backward``.
    """
    if eps <= 0:
        raise ValueError("finite_diff_gradient: eps must be positive")
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f())
            flat[i] = orig - eps
            f_minus = float(f())
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads


def check_finite(t: Tensor, **context) -> None:
    """Raise OverflowDetected when ``t`` holds inf or nan."""
    if not np.isfinite(t.data).all():
        raise OverflowDetected("non-finite values detected", **context)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_active_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_active_dtype), requires_grad=requires_grad)
