"""Reverse-mode differentiation over numpy arrays.

A :class:`Var` wraps an array. Operations executed while a :class:`GradientTape`
is active, and touching at least one Var with ``requires_grad``, append a
backward closure to that tape. ``tape.backward(loss)`` replays the closures in
reverse order exactly once.
"""

from __future__ import annotations

import numpy as np

_ACTIVE: list["GradientTape"] = []


class TapeStateError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name", "_tape_id")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape_id = None

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return self.value.shape[0]

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def active_tape() -> "GradientTape | None":
    return _ACTIVE[-1] if _ACTIVE else None


def record(out: Var, inputs, backward_fn) -> Var:
    """Register ``backward_fn`` for ``out`` if any input is differentiable."""
    if any(v.requires_grad for v in inputs):
        out.requires_grad = True
        tape = active_tape()
        if tape is not None:
            tape._push(out, backward_fn)
    return out


class GradientTape:
    """Records differentiable ops; use as a context manager around the forward pass."""

    def __init__(self):
        self._ops: list[tuple[Var, object]] = []
        self._done = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self._ops)

    def _push(self, out, fn):
        if self._done:
            raise TapeStateError("tape already replayed")
        out._tape_id = id(self)
        self._ops.append((out, fn))

    def backward(self, loss: Var) -> None:
        if self._done:
            raise TapeStateError("backward already ran on this tape")
        if not self._ops or loss._tape_id != id(self):
            raise TapeStateError("loss was not produced by a forward pass recorded on this tape")
        if loss.value.size != 1:
            raise ValueError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)
        self._done = True
        self._ops.clear()


def backward(loss: Var, tape: GradientTape) -> None:
    tape.backward(loss)
