"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops execute immediately on numpy arrays.  While a ``Tape`` is active
(``with Tape() as tape: ...``) every executed op is appended to the tape
in execution order; ``tape.backward(loss)`` walks the record in reverse
and accumulates gradients additively into the leaf tensors that require
them.  Zeroing gradients between steps is the caller's job.

Tensors are treated as immutable once created.  A tape belongs to one
logical thread; independent tapes may run concurrently on separate
threads.  Any op that produces a NaN or Inf raises ``NumericError``
instead of letting the value propagate.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    NumericError,
    OracleError,
)

_STATE = threading.local()


def _current_tape():
    return getattr(_STATE, "tape", None)


def _check_finite(arr, op_name):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by '{op_name}'")


class Tensor:
    """A dense row-major float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions are the canonical ops.
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _TapeOp:
    __slots__ = ("inputs", "output", "forward_fn", "backward_fn", "name")

    def __init__(self, inputs, output, forward_fn, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of the ops executed during one forward pass."""

    def __init__(self):
        self._ops = []

    def __enter__(self):
        if _current_tape() is not None:
            raise ContractError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def __len__(self):
        return len(self._ops)

    def backward(self, loss: Tensor):
        """Accumulate dloss/dleaf into every reachable leaf's ``.grad``.

        Unreachable leaves keep ``grad is None``; reachable ones
        accumulate additively on top of any existing gradient.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        grads = {id(loss): [loss, np.ones_like(loss.data)]}
        for op in reversed(self._ops):
            entry = grads.pop(id(op.output), None)
            if entry is None:
                continue
            if not any(t.requires_grad for t in op.inputs):
                continue
            in_grads = op.backward_fn(entry[1])
            for t, g in zip(op.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                if prev is None:
                    grads[id(t)] = [t, np.array(g, dtype=np.float64, copy=True)]
                else:
                    prev[1] = prev[1] + g
        for t, g in grads.values():
            if t._is_leaf and t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g

    def replay(self):
        """Re-execute every recorded op from its stored inputs.

        Returns the recomputed output arrays in execution order; with
        unchanged inputs the results are bit-identical to the originals.
        """
        fresh = {}
        outs = []
        for op in self._ops:
            args = [fresh.get(id(t), t.data) for t in op.inputs]
            out = op.forward_fn(*args)
            fresh[id(op.output)] = out
            outs.append(out)
        return outs


def _make(data, inputs, forward_fn, backward_fn, name):
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._is_leaf = False
    tape = _current_tape()
    if tape is not None:
        tape._ops.append(_TapeOp(tuple(inputs), out, forward_fn, backward_fn, name))
    return out


def custom_op(out_data, inputs, forward_fn, backward_fn, name="custom"):
    """Register a fused op whose backward rule is supplied by the caller.

    ``backward_fn(out_grad)`` must return one gradient array (or None)
    per input, in order.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    return _make(np.asarray(out_data, dtype=np.float64), inputs, forward_fn, backward_fn, name)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda x, y: x + y,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(
        a.data - b.data,
        (a, b),
        lambda x, y: x - y,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(
        a.data * b.data,
        (a, b),
        lambda x, y: x * y,
        lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results are caught by _make
    return _make(
        out,
        (a, b),
        lambda x, y: x / y,
        lambda g: (
            _unbroadcast(g / b.data, sa),
            _unbroadcast(-g * a.data / (b.data * b.data), sb),
        ),
        "div",
    )


def neg(x):
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda d: -d, lambda g: (-g,), "neg")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul needs (m,k) by (k,n), got {a.data.shape} by {b.data.shape}"
        )
    return _make(
        a.data @ b.data,
        (a, b),
        lambda x, y: x @ y,
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), np.tanh, lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x):
    x = as_tensor(x)
    xd = x.data
    return _make(
        np.maximum(xd, 0.0),
        (x,),
        lambda d: np.maximum(d, 0.0),
        lambda g: (g * (xd > 0.0),),
        "relu",
    )


def sigmoid(x):
    x = as_tensor(x)
    y = _stable_sigmoid(x.data)
    return _make(y, (x,), _stable_sigmoid, lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), np.exp, lambda g: (g * y,), "exp")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log needs strictly positive inputs")
    xd = x.data
    return _make(np.log(xd), (x,), np.log, lambda g: (g / xd,), "log")


_UNARY = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log}


def elementwise_unary(kind, x):
    """Apply one of tanh/relu/sigmoid/exp/log element by element."""
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise ConfigError(f"unknown unary kind '{kind}'") from None
    return fn(x)


def softmax(x, axis=-1):
    """Max-stabilized softmax along ``axis``; slices sum to 1."""
    x = as_tensor(x)
    if x.data.ndim == 0 or x.data.shape[axis] == 0:
        raise DimensionError(f"softmax needs a nonempty axis, got shape {x.data.shape}")

    def fwd(d):
        e = np.exp(d - d.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    y = fwd(x.data)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return _make(y, (x,), fwd, bwd, "softmax")


def concat(parts, axis=0):
    """Concatenate tensors along ``axis``; gradient splits back apart."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat needs at least one part")
    first = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if len(s) != len(first) or any(
            s[i] != first[i] for i in range(len(s)) if i != axis % len(s)
        ):
            raise DimensionError(
                f"concat off-axis mismatch: {first} vs {s} on axis {axis}"
            )
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=axis))

    return _make(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda *ds: np.concatenate(ds, axis=axis),
        bwd,
        "concat",
    )


def stack(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("stack needs at least one part")

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.moveaxis(g, axis, 0))

    return _make(
        np.stack([p.data for p in parts], axis=axis),
        parts,
        lambda *ds: np.stack(ds, axis=axis),
        bwd,
        "stack",
    )


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shape).copy(),)

    return _make(
        x.data.sum(axis=axis, keepdims=keepdims),
        (x,),
        lambda d: d.sum(axis=axis, keepdims=keepdims),
        bwd,
        "sum",
    )


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.data.shape
    n = x.data.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / n, shape).copy(),)

    return _make(
        x.data.mean(axis=axis, keepdims=keepdims),
        (x,),
        lambda d: d.mean(axis=axis, keepdims=keepdims),
        bwd,
        "mean",
    )


def max_(x, axis, keepdims=False):
    """Maximum along ``axis``; the gradient flows to the first argmax."""
    x = as_tensor(x)
    xd = x.data
    idx = xd.argmax(axis=axis)
    mask = np.zeros_like(xd)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)

    def bwd(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        return (mask * ge,)

    return _make(
        xd.max(axis=axis, keepdims=keepdims),
        (x,),
        lambda d: d.max(axis=axis, keepdims=keepdims),
        bwd,
        "max",
    )


def abs_(x):
    x = as_tensor(x)
    sign = np.sign(x.data)  # 0 at exact ties, so the subgradient there is 0
    return _make(np.abs(x.data), (x,), np.abs, lambda g: (g * sign,), "abs")


def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data < 0.0):
        raise DomainError("sqrt needs nonnegative inputs")
    y = np.sqrt(x.data)
    return _make(y, (x,), np.sqrt, lambda g: (g * 0.5 / np.maximum(y, 1e-300),), "sqrt")


def maximum_const(x, c):
    """Elementwise max(x, c) for scalar c; gradient flows where x >= c."""
    x = as_tensor(x)
    c = float(c)
    mask = x.data >= c
    return _make(
        np.maximum(x.data, c),
        (x,),
        lambda d: np.maximum(d, c),
        lambda g: (g * mask,),
        "maximum_const",
    )


def reshape(x, shape):
    x = as_tensor(x)
    old = x.data.shape
    return _make(
        x.data.reshape(shape),
        (x,),
        lambda d: d.reshape(shape),
        lambda g: (g.reshape(old),),
        "reshape",
    )


def transpose(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.data.shape}")
    return _make(
        np.ascontiguousarray(x.data.T),
        (x,),
        lambda d: np.ascontiguousarray(d.T),
        lambda g: (np.ascontiguousarray(g.T),),
        "transpose",
    )


def flip(x, axis=0):
    x = as_tensor(x)
    return _make(
        np.ascontiguousarray(np.flip(x.data, axis=axis)),
        (x,),
        lambda d: np.ascontiguousarray(np.flip(d, axis=axis)),
        lambda g: (np.ascontiguousarray(np.flip(g, axis=axis)),),
        "flip",
    )


def narrow(x, axis, start, length):
    """Contiguous slice of ``length`` entries from ``start`` along ``axis``."""
    x = as_tensor(x)
    if start < 0 or start + length > x.data.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}) out of range on axis {axis} "
            f"of shape {x.data.shape}"
        )
    sl = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(x.data.ndim)
    )
    shape = x.data.shape

    def bwd(g):
        full = np.zeros(shape)
        full[sl] = g
        return (full,)

    return _make(
        np.ascontiguousarray(x.data[sl]),
        (x,),
        lambda d: np.ascontiguousarray(d[sl]),
        bwd,
        "narrow",
    )


def dot(a, b):
    """Inner product of two equal-shape tensors (flattened)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"dot needs equal shapes, got {a.data.shape} and {b.data.shape}")
    return sum_(mul(a, b))


def finite_diff_check(f, x, h=1e-5, coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps one Tensor to a scalar Tensor and must be pure; purity is
    probed by evaluating twice and comparing bits.  Error per coordinate
    is |analytic - numeric| / (|analytic| + |numeric| + 1e-8).  When
    ``coords`` is given, that many coordinates are sampled with ``rng``
    instead of sweeping all of them.
    """
    x = as_tensor(x)
    probe_a = f(Tensor(x.data.copy())).data
    probe_b = f(Tensor(x.data.copy())).data
    if probe_a.tobytes() != probe_b.tobytes():
        raise OracleError("f is not deterministic; finite differences are meaningless")
    if probe_a.size != 1:
        raise ContractError("finite_diff_check needs a scalar-valued f")

    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
        tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    n = leaf.data.size
    if coords is None:
        indices = range(n)
    else:
        if rng is None:
            raise ContractError("sampled finite_diff_check needs an rng")
        indices = rng.choice(n, size=min(coords, n), replace=False)

    worst = 0.0
    base = leaf.data.copy()
    for i in indices:
        xp = base.copy()
        xp.flat[i] += h
        fp = float(f(Tensor(xp)).data.reshape(()))
        xm = base.copy()
        xm.flat[i] -= h
        fm = float(f(Tensor(xm)).data.reshape(()))
        numeric = (fp - fm) / (2.0 * h)
        ana = float(analytic.flat[i])
        err = abs(ana - numeric) / (abs(ana) + abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst


def gradient_check(loss_fn, params, h=1e-5, coords_per_param=None, rng=None,
                   atol=None):
    """Finite-difference check of ``loss_fn`` against several parameters.

    ``params`` maps names to leaf tensors that the zero-argument
    ``loss_fn`` closes over.  Parameter data is perturbed in place for
    the numeric side and restored afterwards.  Returns the worst
    relative error seen.

    Central differences on a float64 loss cannot resolve disagreements
    below roughly eps*|loss|/h (roundoff in fp - fm), so coordinates
    whose absolute disagreement falls under ``atol`` count as agreeing.
    The default floor is 256*eps*|loss|/h, far below the scale at which
    a genuine backward bug on any resolvable coordinate would show up.
    """
    probe_a = loss_fn().data
    probe_b = loss_fn().data
    if probe_a.tobytes() != probe_b.tobytes():
        raise OracleError("loss_fn is not deterministic")
    if probe_a.size != 1:
        raise ContractError("gradient_check needs a scalar loss")
    if atol is None:
        atol = 256.0 * np.finfo(np.float64).eps * abs(float(probe_a.reshape(()))) / h

    for p in params.values():
        p.grad = None
    with Tape() as tape:
        tape.backward(loss_fn())

    worst = 0.0
    for p in params.values():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        n = p.data.size
        if coords_per_param is None:
            indices = range(n)
        else:
            if rng is None:
                raise ContractError("sampled gradient_check needs an rng")
            indices = rng.choice(n, size=min(coords_per_param, n), replace=False)
        for i in indices:
            orig = p.data.flat[i]
            p.data.flat[i] = orig + h
            fp = float(loss_fn().data.reshape(()))
            p.data.flat[i] = orig - h
            fm = float(loss_fn().data.reshape(()))
            p.data.flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            ana = float(analytic.flat[i])
            if abs(ana - numeric) <= atol:
                continue
            err = abs(ana - numeric) / (abs(ana) + abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
