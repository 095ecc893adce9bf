"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The primitive set is closed and small: add, sub, mul, neg, matmul, linear
(fused matvec + bias), tanh, exp, log, sin, sum, logsumexp, plus the linear
plumbing ops take_cols / combine_cols / slice1d / reshape (constant selection
matrices and views). Everything else in the package is a composition of these.
sqrt, where needed, is written exp(0.5 * log(x)).

Every op is polymorphic: given plain ndarrays it computes the value directly
with no graph (fast path); given a Tensor anywhere in its inputs it records a
node with a VJP closure. Gradients are accumulated in a fixed topological
order, so repeated runs on the same graph are bit-identical.

Scalars and arrays are float64 throughout. Each node checks its output for
non-finite entries and raises NumericError naming the primitive, so overflow
surfaces at the op that produced it instead of as a NaN loss later.
"""

from __future__ import annotations

import builtins
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

_LOG_FLOOR = 1e-300


def _quiet():
    # Fresh instance per use: a shared errstate cannot be entered nested.
    return np.errstate(over="ignore", invalid="ignore", divide="ignore")


class Tensor:
    """A node in the computation graph: a float64 array plus VJP bookkeeping."""

    __slots__ = ("value", "grad", "_parents", "_vjp", "_op")

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        self._op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def backward(self):
        """Accumulate gradients of this scalar into every upstream Tensor."""
        if self.value.ndim != 0:
            raise ShapeError(f"backward needs a scalar, got shape {self.value.shape}")
        order = _topo_order(self)
        for t in order:
            t.grad = None
        self.grad = np.ones((), dtype=np.float64)
        for t in reversed(order):
            if t._vjp is None or t.grad is None:
                continue
            contribs = t._vjp(t.grad)
            for parent, g in zip(t._parents, contribs):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + g

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

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.value.shape})"


def _topo_order(root):
    # Iterative DFS; graphs can be a few thousand nodes deep on long flows.
    order, seen, stack = [], set(), [(root, False)]
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


def _is_tensor(x):
    return isinstance(x, Tensor)


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _node(op, value, parents, vjp):
    if not np.all(np.isfinite(value)):
        raise NumericError(op, "non-finite result")
    return Tensor(value, parents=parents, vjp=vjp, op=op)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    av, bv = _val(a), _val(b)
    if not (_is_tensor(a) or _is_tensor(b)):
        return av + bv
    value = av + bv

    def vjp(g):
        return (
            _unbroadcast(g, av.shape) if _is_tensor(a) else None,
            _unbroadcast(g, bv.shape) if _is_tensor(b) else None,
        )

    return _node("add", value, tuple(t for t in (a, b) if _is_tensor(t)), _pack_vjp(vjp, a, b))


def sub(a, b):
    av, bv = _val(a), _val(b)
    if not (_is_tensor(a) or _is_tensor(b)):
        return av - bv
    value = av - bv

    def vjp(g):
        return (
            _unbroadcast(g, av.shape) if _is_tensor(a) else None,
            _unbroadcast(-g, bv.shape) if _is_tensor(b) else None,
        )

    return _node("sub", value, tuple(t for t in (a, b) if _is_tensor(t)), _pack_vjp(vjp, a, b))


def mul(a, b):
    av, bv = _val(a), _val(b)
    if not (_is_tensor(a) or _is_tensor(b)):
        with _quiet():
            return av * bv
    with _quiet():
        value = av * bv

    def vjp(g):
        with _quiet():
            return (
                _unbroadcast(g * bv, av.shape) if _is_tensor(a) else None,
                _unbroadcast(g * av, bv.shape) if _is_tensor(b) else None,
            )

    return _node("mul", value, tuple(t for t in (a, b) if _is_tensor(t)), _pack_vjp(vjp, a, b))


def _pack_vjp(raw_vjp, a, b):
    # Drop grads for constant operands so vjp outputs align with tensor parents.
    def packed(g):
        ga, gb = raw_vjp(g)
        out = []
        if _is_tensor(a):
            out.append(ga)
        if _is_tensor(b):
            out.append(gb)
        return tuple(out)

    return packed


def neg(a):
    if not _is_tensor(a):
        return -_val(a)
    return _node("neg", -a.value, (a,), lambda g: (-g,))


def matmul(a, b):
    """2-D matrix product. Vector operands must be reshaped by the caller."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    if not (_is_tensor(a) or _is_tensor(b)):
        with _quiet():
            return av @ bv
    with _quiet():
        value = av @ bv

    def vjp(g):
        with _quiet():
            return (
                g @ bv.T if _is_tensor(a) else None,
                av.T @ g if _is_tensor(b) else None,
            )

    return _node("matmul", value, tuple(t for t in (a, b) if _is_tensor(t)), _pack_vjp(vjp, a, b))


def linear(x, w, b):
    """Fused affine map: x @ w.T + b with w of shape (out, in).

    Accepts a single input vector (in,) or a batch (n, in).
    """
    xv, wv, bv = _val(x), _val(w), _val(b)
    if wv.ndim != 2 or bv.ndim != 1 or wv.shape[0] != bv.shape[0]:
        raise ShapeError(f"linear weights malformed: w {wv.shape}, b {bv.shape}")
    if xv.shape[-1] != wv.shape[1]:
        raise ShapeError(f"linear input width {xv.shape} vs w {wv.shape}")
    if xv.ndim not in (1, 2):
        raise ShapeError(f"linear input must be 1-D or 2-D, got {xv.shape}")
    single = xv.ndim == 1
    with _quiet():
        value = xv @ wv.T + bv
    if not (_is_tensor(x) or _is_tensor(w) or _is_tensor(b)):
        return value

    def vjp(g):
        with _quiet():
            gx = g @ wv if _is_tensor(x) else None
            if _is_tensor(w):
                gw = np.outer(g, xv) if single else g.T @ xv
            else:
                gw = None
            if _is_tensor(b):
                gb = g if single else g.sum(axis=0)
            else:
                gb = None
        out = []
        if _is_tensor(x):
            out.append(gx)
        if _is_tensor(w):
            out.append(gw)
        if _is_tensor(b):
            out.append(gb)
        return tuple(out)

    parents = tuple(t for t in (x, w, b) if _is_tensor(t))
    return _node("linear", value, parents, vjp)


def tanh(x):
    if not _is_tensor(x):
        return np.tanh(_val(x))
    value = np.tanh(x.value)
    return _node("tanh", value, (x,), lambda g: (g * (1.0 - value * value),))


def exp(x):
    if not _is_tensor(x):
        with _quiet():
            out = np.exp(_val(x))
        return out
    with _quiet():
        value = np.exp(x.value)
    return _node("exp", value, (x,), lambda g: (g * value,))


def log(x):
    """Guarded natural log: raises on any argument <= 0, floors tiny positives.

    The floor at 1e-300 keeps denormal-range densities from producing -inf; a
    genuinely non-positive argument is a logic error upstream and raises.
    """
    xv = _val(x)
    if np.any(xv <= 0.0):
        raise NumericError("log", "argument <= 0")
    safe = np.maximum(xv, _LOG_FLOOR)
    if not _is_tensor(x):
        return np.log(safe)
    value = np.log(safe)
    return _node("log", value, (x,), lambda g: (g / safe,))


def sin(x):
    if not _is_tensor(x):
        return np.sin(_val(x))
    return _node("sin", np.sin(x.value), (x,), lambda g: (g * np.cos(x.value),))


def sum(x, axis=None):  # noqa: A001 - numpy-style reduction name on purpose
    xv = _val(x)
    if not _is_tensor(x):
        return np.sum(xv, axis=axis)
    value = np.sum(xv, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return _node("sum", value, (x,), vjp)


def mean(x, axis=None):
    xv = _val(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def logsumexp(x, axis=None):
    """Stable log-sum-exp. -inf entries are allowed in plain-array inputs;
    a slice that is entirely -inf raises (its log-sum is undefined here)."""
    xv = _val(x)
    m = np.max(xv, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericError("logsumexp", "reduction over empty or all -inf values")
    with _quiet():
        shifted = np.exp(xv - m)
    total = np.sum(shifted, axis=axis, keepdims=True)
    value = np.squeeze(m + np.log(total), axis=axis) if axis is not None else np.squeeze(m + np.log(total))
    if not _is_tensor(x):
        return value

    def vjp(g):
        soft = shifted / total
        if axis is None:
            return (g * soft,)
        return (np.expand_dims(g, axis) * soft,)

    return _node("logsumexp", value, (x,), vjp)


def take_cols(x, idx):
    """Select columns of a 2-D array: equivalent to multiplying by a constant
    0/1 selection matrix, kept as its own op for speed."""
    xv = _val(x)
    idx = np.asarray(idx, dtype=np.intp)
    if xv.ndim != 2:
        raise ShapeError(f"take_cols needs a 2-D input, got {xv.shape}")
    if not _is_tensor(x):
        return xv[:, idx]
    value = xv[:, idx]

    def vjp(g):
        out = np.zeros_like(xv)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return _node("take_cols", value, (x,), vjp)


def combine_cols(n_cols, parts):
    """Scatter column blocks back into an (n, n_cols) array.

    `parts` is a sequence of (idx, block) pairs whose index sets must
    partition range(n_cols). Inverse of take_cols.
    """
    idx_all = np.concatenate([np.asarray(i, dtype=np.intp) for i, _ in parts])
    if sorted(idx_all.tolist()) != list(range(n_cols)):
        raise ShapeError("combine_cols parts must partition the columns")
    n_rows = _val(parts[0][1]).shape[0]
    any_tensor = builtins.any(_is_tensor(b) for _, b in parts)
    value = np.empty((n_rows, n_cols), dtype=np.float64)
    for idx, block in parts:
        bv = _val(block)
        if bv.shape != (n_rows, len(np.atleast_1d(idx))):
            raise ShapeError(f"combine_cols block shape {bv.shape} at columns {idx}")
        value[:, np.asarray(idx, dtype=np.intp)] = bv
    if not any_tensor:
        return value

    tensor_parts = [(np.asarray(i, dtype=np.intp), b) for i, b in parts if _is_tensor(b)]

    def vjp(g):
        return tuple(g[:, idx] for idx, _ in tensor_parts)

    return _node("combine_cols", value, tuple(b for _, b in tensor_parts), vjp)


def slice1d(x, start, stop):
    xv = _val(x)
    if xv.ndim != 1:
        raise ShapeError(f"slice1d needs a 1-D input, got {xv.shape}")
    if not _is_tensor(x):
        return xv[start:stop]

    def vjp(g):
        out = np.zeros_like(xv)
        out[start:stop] = g
        return (out,)

    return _node("slice1d", xv[start:stop], (x,), vjp)


def reshape(x, shape):
    xv = _val(x)
    if not _is_tensor(x):
        return xv.reshape(shape)
    return _node("reshape", xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


# ---------------------------------------------------------------------------
# parameter vectors


class ParamLayout:
    """Ordered map from slot name to a contiguous slice of a flat vector.

    The order of `slots` is the serialization order: checkpoints write the
    flat vector as-is (row-major blocks, 64-bit little-endian).
    """

    def __init__(self, slots):
        self._offsets = {}
        self._shapes = {}
        self.names = []
        off = 0
        for name, shape in slots:
            shape = tuple(int(s) for s in shape)
            if name in self._shapes:
                raise ShapeError(f"duplicate layout slot {name!r}")
            size = int(np.prod(shape)) if shape else 1
            self._offsets[name] = off
            self._shapes[name] = shape
            self.names.append(name)
            off += size
        self.size = off

    def shape_of(self, name):
        return self._shapes[name]

    def slice_of(self, name):
        off = self._offsets[name]
        shape = self._shapes[name]
        size = int(np.prod(shape)) if shape else 1
        return off, off + size

    def __contains__(self, name):
        return name in self._shapes

    def __eq__(self, other):
        return (
            isinstance(other, ParamLayout)
            and self.names == other.names
            and all(self._shapes[n] == other._shapes[n] for n in self.names)
        )


class ParamVector:
    """Flat float64 parameter vector with a named-slot layout."""

    def __init__(self, layout: ParamLayout, values=None):
        self.layout = layout
        if values is None:
            self.values = np.zeros(layout.size, dtype=np.float64)
        else:
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (layout.size,):
                raise ShapeError(f"param vector length {values.shape} != layout size {layout.size}")
            if not np.all(np.isfinite(values)):
                raise NumericError("param_vector", "non-finite parameter values")
            self.values = values.copy()

    def __getitem__(self, name):
        a, b = self.layout.slice_of(name)
        return self.values[a:b].reshape(self.layout.shape_of(name))

    def __setitem__(self, name, arr):
        a, b = self.layout.slice_of(name)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != self.layout.shape_of(name):
            raise ShapeError(f"slot {name!r} expects shape {self.layout.shape_of(name)}, got {arr.shape}")
        self.values[a:b] = arr.ravel()

    def copy(self):
        return ParamVector(self.layout, self.values)


class TracedParams:
    """Tensor-view counterpart of ParamVector for building gradients."""

    def __init__(self, layout: ParamLayout, leaf: Tensor):
        self.layout = layout
        self.leaf = leaf
        self._views = {}

    def __getitem__(self, name):
        view = self._views.get(name)
        if view is None:
            a, b = self.layout.slice_of(name)
            view = reshape(slice1d(self.leaf, a, b), self.layout.shape_of(name))
            self._views[name] = view
        return view


# ---------------------------------------------------------------------------
# small MLP and gradient drivers


@dataclass(frozen=True)
class MLPSpec:
    """Single-hidden-layer net: out = w2 @ tanh(w1 @ x + b1) + b2."""

    n_in: int
    n_hidden: int
    n_out: int

    def layout(self):
        return ParamLayout(
            [
                ("w1", (self.n_hidden, self.n_in)),
                ("b1", (self.n_hidden,)),
                ("w2", (self.n_out, self.n_hidden)),
                ("b2", (self.n_out,)),
            ]
        )


def mlp_forward(params, spec: MLPSpec, x):
    """Run the net on one input vector or a batch of row vectors."""
    xv = _val(x)
    if xv.shape[-1] != spec.n_in:
        raise ShapeError(f"mlp input width {xv.shape} != n_in {spec.n_in}")
    hidden = tanh(linear(x, params["w1"], params["b1"]))
    return linear(hidden, params["w2"], params["b2"])


@dataclass
class GradResult:
    loss: float
    grad: np.ndarray


def grad_scalar(loss_program, params: ParamVector) -> GradResult:
    """Evaluate loss_program(traced_params) and return loss and d loss / d params.

    loss_program must build its output from the ops in this module; the
    returned gradient aligns with params.values.
    """
    leaf = Tensor(params.values)
    traced = TracedParams(params.layout, leaf)
    out = loss_program(traced)
    if not isinstance(out, Tensor):
        raise ShapeError("loss_program must return a Tensor scalar")
    if out.value.ndim != 0:
        raise ShapeError(f"loss_program must return a scalar, got shape {out.value.shape}")
    out.backward()
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(params.values)
    if not np.all(np.isfinite(grad)):
        raise NumericError("grad_scalar", "non-finite gradient")
    return GradResult(loss=float(out.value), grad=np.asarray(grad, dtype=np.float64))


@dataclass
class FDCheck:
    max_rel_error: float
    grad_analytic: np.ndarray
    grad_numeric: np.ndarray


def finite_diff_check(loss_program, params: ParamVector, epsilon: float = 1e-5) -> FDCheck:
    """Compare grad_scalar against central finite differences, coordinatewise.

    Relative error per coordinate is |analytic - central| / max(1e-6, |central|);
    the maximum over coordinates is returned. The 1e-6 floor absorbs central
    difference roundoff (about |loss| * 1e-16 / epsilon in absolute terms),
    which otherwise swamps coordinates whose true gradient is near zero; a
    dropped gradient term of absolute size 1e-6 or more still fails loudly.
    """
    analytic = grad_scalar(loss_program, params).grad
    numeric = np.zeros_like(analytic)
    work = params.copy()
    for i in range(params.layout.size):
        orig = work.values[i]
        work.values[i] = orig + epsilon
        hi = _eval_loss(loss_program, work)
        work.values[i] = orig - epsilon
        lo = _eval_loss(loss_program, work)
        work.values[i] = orig
        numeric[i] = (hi - lo) / (2.0 * epsilon)
    denom = np.maximum(1e-6, np.abs(numeric))
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
    return FDCheck(max_rel, analytic, numeric)


def _eval_loss(loss_program, params: ParamVector) -> float:
    out = loss_program(TracedParams(params.layout, Tensor(params.values)))
    return float(out.value if isinstance(out, Tensor) else out)
