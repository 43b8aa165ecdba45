"""Minimal define-by-run reverse-mode differentiation over numpy arrays.

Every differentiable operation returns a :class:`Tensor` whose ``node`` records
the inputs and a closure mapping the output gradient to input gradients.
Only the broadcasting patterns the network needs are supported: identical
shapes, channel gates ``(B, C, 1)`` and time gates ``(B, 1, T)`` against a
``(B, C, T)`` feature map, and python scalars.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an operation."""


class GraphError(RuntimeError):
    """Raised on misuse of the computation graph (non-scalar or freed backward)."""


class NonFiniteError(FloatingPointError):
    """Raised when a checked computation produces NaN or infinity."""


# per-thread so concurrent training runs do not see each other's no_grad blocks
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager disabling graph construction (evaluation passes)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.enabled = False

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    freed: bool = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: mul(self, -1.0)
    __sub__ = lambda self, other: add(self, mul(other, -1.0))


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _broadcast_axes(shape: tuple[int, ...], target: tuple[int, ...], op: str) -> tuple[int, ...]:
    """Axes along which ``shape`` is expanded to ``target`` (size-1 gate axes)."""
    if shape == target or len(shape) == 0:
        return ()
    if len(shape) != len(target):
        raise ShapeError(f"{op}: rank mismatch {shape} vs {target}")
    axes = []
    for i, (a, b) in enumerate(zip(shape, target)):
        if a == b:
            continue
        if a == 1:
            axes.append(i)
        else:
            raise ShapeError(f"{op}: axis {i} has extent {a} vs {b}")
    if len(target) != 3 or axes not in ([1], [2]):
        raise ShapeError(
            f"{op}: unsupported broadcast {shape} -> {target}; "
            "only (B,C,1) or (B,1,T) against (B,C,T)"
        )
    return tuple(axes)


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return a.shape, (), ()
    if b.data.ndim == 0:
        return a.shape, (), None
    if a.data.ndim == 0:
        return b.shape, None, ()
    if a.data.size >= b.data.size:
        return a.shape, (), _broadcast_axes(b.shape, a.shape, op)
    return b.shape, _broadcast_axes(a.shape, b.shape, op), ()


def _reduce(grad: np.ndarray, axes) -> np.ndarray:
    if axes is None:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    if not axes:
        return grad
    return grad.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _, ra, rb = _binary_shapes(a, b, "add")

    def bw(g):
        return _reduce(g, ra), _reduce(g, rb)

    return _make(a.data + b.data, "add", (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _, ra, rb = _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce(g * bd, ra), _reduce(g * ad, rb)

    return _make(ad * bd, "mul", (a, b), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape

    def bw(g):
        return (np.full(shape, g / n, dtype=x.dtype),)

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), "mean", (x,), bw)


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    """Pack scalar tensors into a 1-D tensor."""
    for t in xs:
        if t.data.size != 1:
            raise ShapeError(f"stack_scalars: expected scalars, got {t.shape}")
    data = np.array([t.data.reshape(()) for t in xs], dtype=xs[0].dtype)

    def bw(g):
        return tuple(np.asarray(g[i], dtype=g.dtype) for i in range(len(xs)))

    return _make(data, "stack", tuple(xs), bw)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _backprop(loss: Tensor, retain_graph: bool, targets: Sequence[Tensor] | None = None) -> dict[int, tuple[Tensor, np.ndarray]]:
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward on a tensor that does not require grad")
    order = _toposort(loss)
    wanted = None
    if targets is not None:
        # prune to nodes lying on some path from a target up to the loss
        want_ids = {id(t) for t in targets}
        wanted = set()
        for t in order:
            if id(t) in want_ids or (t.node is not None and any(id(p) in wanted for p in t.node.inputs)):
                wanted.add(id(t))
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None or (targets is not None and id(t) in want_ids):
            leaf_grads[id(t)] = (t, g)
            if t.node is None:
                continue
        if t.node.freed:
            raise GraphError(
                f"backward through freed graph at op '{t.node.op}'; "
                "pass retain_graph=True for repeated passes (higher-order gradients are unsupported)"
            )
        in_grads = t.node.backward(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if wanted is not None and key not in wanted:
                continue
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            grads[key] = grads[key] + pg if key in grads else pg
        if not retain_graph:
            t.node.freed = True
            t.node.backward = None
    return leaf_grads


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf.

    Gradients add to any existing ``grad``; callers zero them between uses.
    With ``retain_graph=False`` the saved closures are released, and a second
    backward through the same graph raises :class:`GraphError`.
    """
    for t, g in _backprop(loss, retain_graph).values():
        t.grad = g.copy() if t.grad is None else t.grad + g


def grad(loss: Tensor, inputs: Sequence[Tensor], retain_graph: bool = False) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``inputs``, without touching ``.grad``.

    Only the part of the graph between ``inputs`` and ``loss`` is traversed.
    Inputs that do not influence the loss get zeros.
    """
    got = _backprop(loss, retain_graph, inputs)
    return [got[id(t)][1] if id(t) in got else np.zeros_like(t.data) for t in inputs]


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    tol: float = 1e-5,
    wrt: Sequence[Tensor] | None = None,
) -> GradcheckReport:
    """Compare analytic gradients of scalar ``f`` against central differences.

    ``x`` is the input array (or Tensor); it is promoted to float64.  When
    ``wrt`` is given, those parameter tensors are perturbed as well and their
    gradients included in the comparison.  Relative error per entry is
    ``|a - n| / max(1, |a|, |n|)``, so entries near zero are judged absolutely.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    targets = [xt] + list(wrt or [])
    for t in targets:
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck requires float64 tensors, got {t.dtype}")
        t.grad = None
    out = f(xt)
    _check_finite(out, "forward")
    backward(out)
    analytic = np.concatenate([
        (t.grad if t.grad is not None else np.zeros_like(t.data)).ravel() for t in targets
    ])

    numeric_parts = []
    for t in targets:
        num = np.zeros(t.data.size)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = _evaluate(f, xt, targets)
            flat[i] = orig - eps
            with no_grad():
                fm = _evaluate(f, xt, targets)
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * eps)
        numeric_parts.append(num)
    numeric = np.concatenate(numeric_parts)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0
    return GradcheckReport(err, tol, err <= tol, analytic, numeric)


def _evaluate(f, xt: Tensor, targets) -> float:
    out = f(xt)
    _check_finite(out, "perturbed forward")
    return float(out.data.reshape(()))


def _check_finite(t: Tensor, where: str) -> None:
    if t.data.size != 1:
        raise GraphError(f"gradcheck: function must be scalar-valued, got {t.shape}")
    if np.all(np.isfinite(t.data)):
        return
    op = t.node.op if t.node is not None else "output"
    if t.requires_grad:
        # name the earliest op in the graph that went non-finite
        for u in _toposort(t):
            if u.node is not None and not np.all(np.isfinite(u.data)):
                op = u.node.op
                break
    raise NonFiniteError(f"gradcheck: non-finite value in {where} (op '{op}')")
