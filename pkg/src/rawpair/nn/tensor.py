"""Reverse-mode autodiff over numpy arrays.

A `Tensor` wraps an ndarray (N,C,H,W for the image ops, any rank for the
scalar/elementwise ones) plus an optional gradient. Ops build a tape of
parent links and backward closures; `Tensor.backward()` walks the tape in
reverse topological order, accumulates gradients into every reachable
`requires_grad` tensor, and releases the graph. Values are 32-bit by
default; pass 64-bit arrays for gradient-check work.

The tape is confined to one thread of execution. Tensors are treated as
immutable once produced by an op (mutating `.data` of an intermediate node
invalidates recorded backward closures).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FINITE_CHECKS = True


class AutodiffError(RuntimeError):
    """Tape misuse or numerical failure (non-scalar backward, NaN/Inf, ...)."""


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the NaN/Inf hard check after every forward/backward op.

    Returns the previous setting. Enabled by default; disabling trades the
    invariant for a small throughput gain in inner loops.
    """
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _FINITE_CHECKS and not np.isfinite(arr).all():
        raise AutodiffError(f"non-finite values produced by {what}")


class Tensor:
    """An ndarray with an optional gradient and a tape link.

    Args:
        data: array-like; non-float input is cast to the default 32-bit
            dtype, float arrays keep their precision unless `dtype` is given.
        requires_grad: record this tensor as a gradient target (leaf).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._released = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def __repr__(self) -> str:
        tag = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"

    # -- gradient bookkeeping -----------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Populate `.grad` on every reachable `requires_grad` tensor.

        The loss must be a scalar produced by a recorded computation.
        Gradients accumulate into existing `.grad` arrays (call
        `zero_grad` between optimizer steps). The tape is released
        afterwards; a second backward through the same graph raises.
        """
        if self._released:
            raise AutodiffError("graph already released by a previous backward; "
                                "rerun the forward pass")
        if self.data.size != 1:
            raise AutodiffError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise AutodiffError("loss is not connected to any requires_grad tensor")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data) if self.grad is None \
            else self.grad + np.ones_like(self.data)

        for node in reversed(topo):
            fn = node._backward_fn
            if fn is None:
                continue
            if node.grad is None:  # pruned branch
                node._parents = ()
                node._backward_fn = None
                node._released = True
                continue
            for parent, grad in zip(node._parents, fn(node.grad)):
                if grad is None or not parent.requires_grad:
                    continue
                _check_finite(grad, "backward")
                parent.grad = grad if parent.grad is None else parent.grad + grad
            if node is not self:
                node.grad = None
            node._parents = ()
            node._backward_fn = None
            node._released = True

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _scalar_error(t: Tensor):
    raise AutodiffError(f"item() requires a single-element tensor, got shape {t.data.shape}")


def apply_op(name: str,
             data: np.ndarray,
             parents: Sequence[Tensor],
             backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an op result as a tape node; the building block for all ops."""
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    out._released = False
    return out


def _require_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise AutodiffError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise AutodiffError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# -- elementwise / reduction primitives --------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same(a, b, "add")
    return apply_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return apply_op("add_scalar", a.data + a.data.dtype.type(s), (a,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same(a, b, "mul")
    return apply_op("mul", a.data * b.data, (a, b),
                    lambda g: (g * b.data, g * a.data))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    c = a.data.dtype.type(s)
    return apply_op("mul_scalar", a.data * c, (a,), lambda g: (g * c,))


def mul_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Multiply by a constant array (broadcastable; no gradient to it)."""
    const = np.asarray(const, dtype=a.data.dtype)
    out = a.data * const

    def bw(g):
        grad = g * const
        # fold broadcast axes back onto a's shape
        extra = grad.ndim - a.data.ndim
        if extra:
            grad = grad.sum(axis=tuple(range(extra)))
        keep = tuple(i for i, n in enumerate(a.data.shape) if n == 1 and grad.shape[i] != 1)
        if keep:
            grad = grad.sum(axis=keep, keepdims=True)
        return (grad,)

    return apply_op("mul_const", out, (a,), bw)


def tensor_sum(a: Tensor) -> Tensor:
    total = a.data.sum(dtype=a.data.dtype)
    return apply_op("sum", np.asarray(total), (a,),
                    lambda g: (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),))
