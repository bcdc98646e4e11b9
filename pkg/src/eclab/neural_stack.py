"""A differentiable stack with continuous push/pop/read strengths.

Every entry pairs a value vector with a scalar strength >= 0. One step does,
in order: pop with strength ``u``, push ``(v, d)``, then read with strength
``r``. Popping consumes strength top-down; reading averages value vectors
top-down until ``r`` worth of strength has been gathered. Strengths may exceed
1, so a single step can pop several entries or read past the top one.

All three directives may be differentiable 0-d tensors (or, in batched use,
length-B tensors with value matrices [B, width]); gradients flow through the
max/min gates into whatever produced the directives. States are immutable:
each op returns a new ``StackState`` sharing untouched entry tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffengine as de
from .diffengine import PRUNE_EPS, Tensor


class StackError(ValueError):
    """Malformed directive or value shape for this stack."""


@dataclass(frozen=True)
class StackDirectives:
    """Per-step controller outputs: push value v, strengths u (pop), d (push),
    r (read)."""

    v: Tensor
    u: Tensor
    d: Tensor
    r: Tensor


@dataclass(frozen=True)
class StackState:
    """Immutable stack: parallel tuples of value tensors and strength tensors.

    ``batch`` is None for a single stack (values [width], strengths 0-d) or B
    for a batch of stacks evolving in lockstep (values [B, width], strengths
    [B]).
    """

    values: tuple
    strengths: tuple
    width: int
    batch: int | None = None
    dtype: np.dtype = np.float32

    @classmethod
    def empty(cls, width, batch=None, dtype=np.float32):
        return cls((), (), width, batch, np.dtype(dtype))

    @property
    def depth(self):
        return len(self.values)

    def _zero_value(self):
        shape = (self.width,) if self.batch is None else (self.batch, self.width)
        return de.zeros(shape, dtype=self.dtype)


def _coerce_strength(state, s, what):
    if isinstance(s, (int, float)):
        if s < 0:
            raise StackError(f"{what} strength must be >= 0, got {s}")
        shape = () if state.batch is None else (state.batch,)
        return Tensor._wrap(np.full(shape, s, dtype=state.dtype))
    want = () if state.batch is None else (state.batch,)
    if s.shape != want:
        raise StackError(f"{what} strength shape {s.shape}, expected {want}")
    if np.any(s.data < 0):
        raise StackError(f"{what} strength must be >= 0")
    return s


def _weighted(value, w):
    # value [W] * w (0-d), or value [B, W] * w [B]
    if value.ndim == 2:
        return de.scale_rows(value, w)
    return de.mul(value, w)


def stack_pop(state, u):
    """Remove ``u`` worth of strength from the top down.

    Each entry keeps ``max(0, s_i - max(0, u - sum_above))`` where
    ``sum_above`` is the original strength above it.
    """
    u = _coerce_strength(state, u, "pop")
    if state.depth == 0:
        return state
    above = None
    new_strengths = [None] * state.depth
    for i in range(state.depth - 1, -1, -1):
        s_i = state.strengths[i]
        deficit = u if above is None else de.maximum(de.sub(u, above), 0.0)
        new_strengths[i] = de.maximum(de.sub(s_i, deficit), 0.0)
        above = s_i if above is None else de.add(above, s_i)
    return replace(state, strengths=tuple(new_strengths))


def stack_push(state, v, d):
    """Append one entry with value ``v`` and strength ``d``."""
    d = _coerce_strength(state, d, "push")
    want = (state.width,) if state.batch is None else (state.batch, state.width)
    if v.shape != want:
        raise StackError(f"push value shape {v.shape}, expected {want}")
    return replace(
        state, values=state.values + (v,), strengths=state.strengths + (d,)
    )


def stack_read(state, r):
    """Strength-weighted sum of value vectors from the top down.

    Entry i contributes ``min(s_i, max(0, r - sum_above))`` of its value; if
    total strength is below ``r`` the result just comes up short (shrinks
    toward zero for an empty stack).
    """
    r = _coerce_strength(state, r, "read")
    total = None
    above = None
    for i in range(state.depth - 1, -1, -1):
        s_i = state.strengths[i]
        avail = r if above is None else de.maximum(de.sub(r, above), 0.0)
        w_i = de.minimum(s_i, avail)
        part = _weighted(state.values[i], w_i)
        total = part if total is None else de.add(total, part)
        above = s_i if above is None else de.add(above, s_i)
    if total is None:
        return state._zero_value()
    return total


def stack_step(state, directives):
    """One full transition: pop ``u``, push ``(v, d)``, read ``r``.

    Returns ``(new_state, read_vector)``. Entries whose strength fell below
    1e-9 everywhere in the batch are pruned so depth stays bounded by the
    number of surviving pushes.
    """
    if not isinstance(directives, StackDirectives):
        raise StackError(f"expected StackDirectives, got {type(directives).__name__}")
    popped = stack_pop(state, directives.u)
    pushed = stack_push(popped, directives.v, directives.d)
    pushed = _prune(pushed)
    read = stack_read(pushed, directives.r)
    return pushed, read


def _prune(state):
    keep = [
        i
        for i, s in enumerate(state.strengths)
        if float(np.max(s.data)) >= PRUNE_EPS
    ]
    if len(keep) == state.depth:
        return state
    return replace(
        state,
        values=tuple(state.values[i] for i in keep),
        strengths=tuple(state.strengths[i] for i in keep),
    )


def total_strength(state):
    """Sum of entry strengths (0-d tensor, or [B] for a batched stack)."""
    if state.depth == 0:
        shape = () if state.batch is None else (state.batch,)
        return de.zeros(shape, dtype=state.dtype)
    total = state.strengths[0]
    for s in state.strengths[1:]:
        total = de.add(total, s)
    return total
