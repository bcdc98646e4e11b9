"""Reverse-mode automatic differentiation over dense numpy arrays.

Ops evaluate eagerly and, when a ``Tape`` is active, append a record
``(out, inputs, backward_fn)`` to it. Creation order on the tape is a valid
topological order, so ``backward`` just walks the records in reverse and
accumulates cotangents keyed by tensor identity. With no tape active the ops
are plain numpy calls, which keeps evaluation-only code (greedy decoding,
metrics) fast.

Shape discipline is explicit: binary ops accept equal shapes, a python number,
or a 0-d tensor -- nothing else. The row-wise helpers (``add_bias``,
``scale_rows``, ``take_rows``, ``take_last``) cover the patterns that would
otherwise need implicit broadcasting.

``maximum``/``minimum`` use a subgradient: the selected operand receives the
whole gradient and ties go to the first operand. While a tape is active they
also track the smallest margin ``|a - b|`` seen, so gradient checks can reject
evaluation points that sit within a finite-difference step of a kink.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRUNE_EPS = 1e-9  # re-exported for stack code; kept here with the numerics

# When True, every op output is checked for NaN/Inf and the first offender
# raises with the op name. Costs one isfinite pass per op, so off by default.
DEBUG_FINITE = False


class DiffError(Exception):
    """Base class for engine errors."""


class ShapeError(DiffError):
    """Operands have incompatible shapes or dtypes for the requested op."""


class NonFiniteError(DiffError):
    """A NaN or Inf appeared where a finite value was required."""


_TAPES: list["Tape"] = []


class Tape:
    """Context manager that records ops for one backward pass.

    ``kink_margin`` is the smallest ``|a - b|`` any maximum/minimum saw while
    this tape was the innermost active one (inf if none executed).
    """

    __slots__ = ("_nodes", "_out_ids", "kink_margin")

    def __init__(self):
        self._nodes = []
        self._out_ids = set()
        self.kink_margin = float("inf")

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        if popped is not self:
            raise DiffError("tapes exited out of order")
        return False

    def __len__(self):
        return len(self._nodes)


class Tensor:
    """Immutable dense array. The wrapped numpy buffer is marked read-only."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=np.float32):
        arr = np.array(data, dtype=dtype)
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr):
        # Takes ownership of arr without copying.
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def tolist(self):
        return self.data.tolist()

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor({self.data!r})"


def tensor(data, dtype=np.float32):
    return Tensor(data, dtype=dtype)


def zeros(shape, dtype=np.float32):
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def _record(out, inputs, bw):
    if _TAPES:
        tape = _TAPES[-1]
        tape._nodes.append((out, inputs, bw))
        tape._out_ids.add(id(out))


def _note_kink(a, b):
    # Called with the two (possibly broadcast) operand arrays of a max/min.
    if _TAPES:
        diff = np.abs(a - b)
        m = float(diff.min()) if diff.size else float("inf")
        tape = _TAPES[-1]
        if m < tape.kink_margin:
            tape.kink_margin = m


def _finish(arr, op, inputs, bw):
    if DEBUG_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in output of {op}")
    out = Tensor._wrap(arr)
    _record(out, inputs, bw)
    return out


def _check_pair(op, a, b):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _sum_to_scalar(g):
    return np.asarray(g.sum())


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b):
    if isinstance(b, (int, float)):
        out = a.data + b
        return _finish(out, "add", (a,), lambda g: (g,))
    _check_pair("add", a, b)
    out = a.data + b.data
    if a.shape == b.shape:
        return _finish(out, "add", (a, b), lambda g: (g, g))
    if a.ndim == 0:
        return _finish(out, "add", (a, b), lambda g: (_sum_to_scalar(g), g))
    return _finish(out, "add", (a, b), lambda g: (g, _sum_to_scalar(g)))


def sub(a, b):
    if isinstance(b, (int, float)):
        out = a.data - b
        return _finish(out, "sub", (a,), lambda g: (g,))
    _check_pair("sub", a, b)
    out = a.data - b.data
    if a.shape == b.shape:
        return _finish(out, "sub", (a, b), lambda g: (g, -g))
    if a.ndim == 0:
        return _finish(out, "sub", (a, b), lambda g: (_sum_to_scalar(g), -g))
    return _finish(out, "sub", (a, b), lambda g: (g, -_sum_to_scalar(g)))


def mul(a, b):
    if isinstance(b, (int, float)):
        out = a.data * b
        return _finish(out, "mul", (a,), lambda g: (g * b,))
    _check_pair("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd
    if a.shape == b.shape:
        return _finish(out, "mul", (a, b), lambda g: (g * bd, g * ad))
    if a.ndim == 0:
        return _finish(out, "mul", (a, b), lambda g: (_sum_to_scalar(g * bd), g * ad))
    return _finish(out, "mul", (a, b), lambda g: (g * bd, _sum_to_scalar(g * ad)))


def maximum(a, b):
    """Elementwise max; gradient flows to the larger operand (ties: ``a``)."""
    if isinstance(b, (int, float)):
        _note_kink(a.data, np.asarray(b, a.data.dtype))
        sel = a.data >= b
        out = np.maximum(a.data, np.asarray(b, a.data.dtype))
        return _finish(out, "maximum", (a,), lambda g: (g * sel,))
    _check_pair("maximum", a, b)
    _note_kink(a.data, b.data)
    sel = a.data >= b.data
    out = np.maximum(a.data, b.data)
    if a.shape == b.shape:
        return _finish(out, "maximum", (a, b), lambda g: (g * sel, g * ~sel))
    if a.ndim == 0:
        return _finish(
            out, "maximum", (a, b), lambda g: (_sum_to_scalar(g * sel), g * ~sel)
        )
    return _finish(
        out, "maximum", (a, b), lambda g: (g * sel, _sum_to_scalar(g * ~sel))
    )


def minimum(a, b):
    """Elementwise min; gradient flows to the smaller operand (ties: ``a``)."""
    if isinstance(b, (int, float)):
        _note_kink(a.data, np.asarray(b, a.data.dtype))
        sel = a.data <= b
        out = np.minimum(a.data, np.asarray(b, a.data.dtype))
        return _finish(out, "minimum", (a,), lambda g: (g * sel,))
    _check_pair("minimum", a, b)
    _note_kink(a.data, b.data)
    sel = a.data <= b.data
    out = np.minimum(a.data, b.data)
    if a.shape == b.shape:
        return _finish(out, "minimum", (a, b), lambda g: (g * sel, g * ~sel))
    if a.ndim == 0:
        return _finish(
            out, "minimum", (a, b), lambda g: (_sum_to_scalar(g * sel), g * ~sel)
        )
    return _finish(
        out, "minimum", (a, b), lambda g: (g * sel, _sum_to_scalar(g * ~sel))
    )


# ---------------------------------------------------------------------------
# elementwise unary ops


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _finish(out, "sigmoid", (x,), lambda g: (g * (out * (1.0 - out)),))


def tanh(x):
    out = np.tanh(x.data)
    return _finish(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def exp(x):
    out = np.exp(x.data)
    return _finish(out, "exp", (x,), lambda g: (g * out,))


def log(x):
    xd = x.data
    out = np.log(xd)
    return _finish(out, "log", (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a, b):
    ad, bd = a.data, b.data
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"matmul: dtype mismatch {ad.dtype} vs {bd.dtype}")
    if a.ndim == 2 and b.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
        out = ad @ bd
        return _finish(out, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))
    if a.ndim == 1 and b.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
        out = ad @ bd
        return _finish(out, "matmul", (a, b), lambda g: (g @ bd.T, np.outer(ad, g)))
    if a.ndim == 2 and b.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
        out = ad @ bd
        return _finish(out, "matmul", (a, b), lambda g: (np.outer(g, bd), g @ ad))
    raise ShapeError(f"matmul: unsupported ranks {a.ndim} and {b.ndim}")


def add_bias(m, v):
    """Add vector ``v`` to every row of matrix ``m``."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {m.shape} and {v.shape}")
    out = m.data + v.data
    return _finish(out, "add_bias", (m, v), lambda g: (g, g.sum(axis=0)))


def scale_rows(m, s):
    """Scale row ``i`` of matrix ``m`` by scalar ``s[i]``."""
    if m.ndim != 2 or s.ndim != 1 or m.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows: incompatible shapes {m.shape} and {s.shape}")
    md, sd = m.data, s.data
    out = md * sd[:, None]
    return _finish(
        out,
        "scale_rows",
        (m, s),
        lambda g: (g * sd[:, None], (g * md).sum(axis=1)),
    )


def take_rows(table, idx):
    """Gather rows ``table[idx[i]]`` (embedding lookup). ``idx`` is an int array."""
    idx = np.asarray(idx)
    if table.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"take_rows: need 2-d table and 1-d idx, got {table.shape}")
    out = table.data[idx]

    def bw(g):
        buf = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(buf, idx, g)
        return (buf,)

    return _finish(out, "take_rows", (table,), bw)


def take_last(x, idx):
    """Pick one entry along the last axis: ``x[i, idx[i]]`` or ``x[idx]``."""
    if x.ndim == 2:
        idx = np.asarray(idx)
        if idx.ndim != 1 or idx.shape[0] != x.shape[0]:
            raise ShapeError(f"take_last: index shape {idx.shape} for {x.shape}")
        rows = np.arange(x.shape[0])
        out = x.data[rows, idx]

        def bw(g):
            buf = np.zeros(x.shape, dtype=g.dtype)
            buf[rows, idx] = g
            return (buf,)

        return _finish(out, "take_last", (x,), bw)
    if x.ndim == 1:
        i = int(idx)
        out = np.asarray(x.data[i])

        def bw1(g):
            buf = np.zeros(x.shape, dtype=np.asarray(g).dtype)
            buf[i] = g
            return (buf,)

        return _finish(out, "take_last", (x,), bw1)
    raise ShapeError(f"take_last: unsupported rank {x.ndim}")


def concat(parts):
    """Concatenate tensors along the last axis."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    nd = parts[0].ndim
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.ndim != nd or p.shape[:-1] != lead:
            raise ShapeError(
                f"concat: incompatible shapes {[p.shape for p in parts]}"
            )
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        return tuple(
            g[..., offsets[i] : offsets[i + 1]] for i in range(len(parts))
        )

    return _finish(out, "concat", parts, bw)


def slice_last(x, lo, hi):
    """Slice ``x[..., lo:hi]`` along the last axis."""
    if not (0 <= lo <= hi <= x.shape[-1]):
        raise ShapeError(f"slice_last: bad range [{lo}:{hi}] for {x.shape}")
    out = x.data[..., lo:hi]

    def bw(g):
        buf = np.zeros(x.shape, dtype=g.dtype)
        buf[..., lo:hi] = g
        return (buf,)

    return _finish(out, "slice_last", (x,), bw)


# ---------------------------------------------------------------------------
# reductions and normalizations


def reduce_sum(x):
    out = np.asarray(x.data.sum())
    shape = x.shape
    return _finish(out, "reduce_sum", (x,), lambda g: (np.broadcast_to(g, shape),))


def reduce_mean(x):
    n = x.size
    out = np.asarray(x.data.mean())
    shape = x.shape
    return _finish(
        out, "reduce_mean", (x,), lambda g: (np.broadcast_to(g / n, shape),)
    )


def sum_last(x):
    """Sum over the last axis."""
    if x.ndim == 0:
        raise ShapeError("sum_last: 0-d input")
    out = x.data.sum(axis=-1)
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, -1), shape),)

    return _finish(out, "sum_last", (x,), bw)


def softmax(x):
    """Softmax over the last axis (max-subtracted for stability)."""
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _finish(out, "softmax", (x,), bw)


def log_softmax(x):
    """Log-softmax over the last axis (max-subtracted for stability)."""
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _finish(out, "log_softmax", (x,), bw)


# ---------------------------------------------------------------------------
# backward pass


class Gradients:
    """Gradient lookup keyed by tensor identity; absent tensors read as zero."""

    __slots__ = ("_table",)

    def __init__(self, table):
        self._table = table

    def __getitem__(self, t):
        g = self._table.get(id(t))
        if g is None:
            return np.zeros(t.shape, dtype=t.dtype)
        out = np.asarray(g, dtype=t.dtype)
        if out.shape != t.shape:  # pragma: no cover - internal invariant
            raise ShapeError(f"gradient shape {out.shape} for tensor {t.shape}")
        return out

    def __contains__(self, t):
        return id(t) in self._table


def backward(tape, loss):
    """Accumulate d(loss)/d(tensor) for every tensor recorded on ``tape``.

    ``loss`` must be a 0-d tensor produced while ``tape`` was active. Tensors
    with no path to the loss simply have no entry (``Gradients`` reads zero).
    """
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be a scalar, got {loss.shape}")
    if id(loss) not in tape._out_ids:
        raise DiffError("backward: loss was not produced on this tape")
    table = {id(loss): np.ones((), dtype=loss.dtype)}
    for out, inputs, bw in reversed(tape._nodes):
        g = table.get(id(out))
        if g is None:
            continue
        gs = bw(g)
        for t, gi in zip(inputs, gs):
            if gi is None:
                continue
            key = id(t)
            acc = table.get(key)
            table[key] = gi if acc is None else acc + gi
    return Gradients(table)


def kink_margin(f, x):
    """Smallest |a - b| seen by any max/min while evaluating ``f(x)``."""
    with Tape() as tape:
        f(x)
    return tape.kink_margin


def grad_check(f, x, h=1e-5):
    """Compare reverse-mode and central-difference gradients of ``f`` at ``x``.

    ``f`` maps one tensor to a scalar tensor and must be built from ops in
    this module. Returns the max over coordinates of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``. The caller
    is responsible for choosing points away from max/min kinks (see
    ``kink_margin``); float64 inputs are strongly recommended.
    """
    with Tape() as tape:
        y = f(x)
    if y.shape != ():
        raise ShapeError(f"grad_check: f must return a scalar, got {y.shape}")
    analytic = backward(tape, y)[x].ravel()
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("grad_check: non-finite analytic gradient")
    base = x.data
    worst = 0.0
    for i in range(base.size):
        hi = base.copy().ravel()
        hi[i] += h
        lo = base.copy().ravel()
        lo[i] -= h
        fp = f(Tensor._wrap(hi.reshape(base.shape))).item()
        fm = f(Tensor._wrap(lo.reshape(base.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"grad_check: non-finite f near coordinate {i}")
        num = (fp - fm) / (2.0 * h)
        a = float(analytic[i])
        rel = abs(a - num) / max(1e-8, abs(a) + abs(num))
        if rel > worst:
            worst = rel
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moments plus hyperparameters; L2 is added to the gradient."""

    lr: float = 1e-4
    l2: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One Adam update. Returns a dict of new Tensors; inputs are not mutated.

    ``params`` maps name -> Tensor and ``grads`` maps name -> ndarray of the
    same shape. ``state`` is updated in place (step count and moments).
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} for {name} {p.shape}")
        if state.l2:
            g = g + state.l2 * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        delta = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = Tensor._wrap(p.data - delta)
    return out
