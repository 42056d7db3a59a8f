"""Reverse-mode automatic differentiation over dense n-dimensional arrays.

Every differentiable operation is recorded on an explicit tape: an
append-only list of nodes, one per op, each holding the op kind, the node
ids of its inputs, and a backward closure over whatever forward state the
gradient needs. Backward walks the nodes in exact reverse append order and
accumulates gradients into a node_id -> buffer map. Tapes are cheap and
rebuilt for every forward pass; parameters re-register as leaves on
whichever tape they are used from next.

Two precisions are supported: float32 for training speed and float64 for
finite-difference gradient checking, where float32 noise would swamp the
comparison.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, TapeError

DEFAULT_DTYPE = np.float32

# When enabled (tests, selfcheck), every recorded op asserts its output is
# finite so a NaN/Inf is reported at the op that produced it.
_NAN_CHECKS = False


def enable_nan_checks(on: bool = True) -> None:
    global _NAN_CHECKS
    _NAN_CHECKS = on


def nan_checks_enabled() -> bool:
    return _NAN_CHECKS


class Tensor:
    """Dense array plus gradient bookkeeping.

    Fields:
        data: the numpy buffer (float32 or float64, row-major).
        requires_grad: whether backward should deliver a gradient here.
        grad: accumulated gradient for leaf tensors, filled by backward().
        node_id / tape: position on the tape this tensor participates in.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.tape: "Tape | None" = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # Convenience arithmetic; the full layer zoo lives in layers.py.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)


class TapeNode:
    __slots__ = ("op", "input_ids", "backward_fn")

    def __init__(self, op: str, input_ids: tuple[int, ...], backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of one forward pass.

    nodes[i] was appended i-th; that order is a topological order of the
    graph, and backward() visits it strictly in reverse. `gradients` maps
    node_id to the gradient buffer computed for that node (leaves always,
    interior nodes only when backward is called with retain_all=True).
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.gradients: dict[int, np.ndarray] = {}
        self.leaves: list[tuple[Tensor, int]] = []
        self.finished = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _register_leaf(self, t: Tensor) -> int:
        node_id = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), None))
        self.leaves.append((t, node_id))
        t.tape = self
        t.node_id = node_id
        return node_id


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(
    op_kind: str,
    inputs: Sequence[Tensor],
    forward_fn: Callable[..., tuple[np.ndarray, Callable | None]],
) -> Tensor:
    """Run a forward op and, if a tape is active, register it for backward.

    `forward_fn` receives the raw input arrays and returns
    (output_array, backward_fn), where backward_fn maps the output gradient
    to one gradient (or None) per input, in input order. With no active
    tape, or when no input requires a gradient, the op runs forward-only.
    """
    out_data, backward_fn = forward_fn(*[t.data for t in inputs])
    if _NAN_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite output from op '{op_kind}'")
    tape = active_tape()
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data)
    if tape is None or not needs_grad:
        return out
    if tape.finished:
        raise TapeError(f"op '{op_kind}' recorded on a tape already consumed by backward; build a new tape")
    input_ids = []
    for t in inputs:
        if not t.requires_grad:
            input_ids.append(-1)  # constant: no gradient delivered
        elif t.tape is tape:
            input_ids.append(t.node_id)
        elif t.is_leaf:
            input_ids.append(tape._register_leaf(t))
        else:
            raise TapeError(f"op '{op_kind}': input was produced on a different tape")
    node_id = len(tape.nodes)
    tape.nodes.append(TapeNode(op_kind, tuple(input_ids), backward_fn))
    out.requires_grad = True
    out.is_leaf = False
    out.tape = tape
    out.node_id = node_id
    return out


def backward(tape: Tape, loss: Tensor, retain_all: bool = False) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) through the tape in reverse append order.

    Returns the gradient map (node_id -> buffer). Leaf gradients are also
    accumulated into each leaf tensor's .grad. Interior gradients are freed
    as soon as they have been consumed unless retain_all is set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if tape.finished:
        raise TapeError("backward called twice on the same tape; re-run the forward pass")
    if loss.tape is not tape or loss.node_id is None:
        raise TapeError("loss tensor was not produced on this tape")
    tape.finished = True

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaf_ids = {node_id for _, node_id in tape.leaves}
    for node_id in range(len(tape.nodes) - 1, -1, -1):
        g = grads.get(node_id)
        if g is None:
            continue
        node = tape.nodes[node_id]
        if node.backward_fn is None:
            continue  # leaf: gradient stays in the map
        input_grads = node.backward_fn(g)
        for iid, ig in zip(node.input_ids, input_grads):
            if iid < 0 or ig is None:
                continue
            if iid in grads:
                grads[iid] = grads[iid] + ig
            else:
                grads[iid] = ig
        if not retain_all and node_id not in leaf_ids:
            del grads[node_id]

    for t, node_id in tape.leaves:
        g = grads.get(node_id)
        if g is None:
            continue
        if g.shape != t.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match leaf shape {t.data.shape}")
        t.grad = g if t.grad is None else t.grad + g
    tape.gradients = grads
    return grads


def grad_check(fn, inputs: Sequence[Tensor], epsilon: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` must be scalar-valued and is re-evaluated 2N times for the N input
    elements, so keep the inputs small. Requires float64 inputs; in float32
    the difference quotient itself carries more noise than the 1e-4
    tolerance this check is used with.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued fn")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: fn produced a non-finite output")
    backward(tape, out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    max_rel = 0.0
    for t, ag in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = ag.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = fn(*inputs).item()
            flat[i] = orig - epsilon
            f_minus = fn(*inputs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            rel = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
    return max_rel


def _require_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"op '{op}': operand shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    def fwd(x, y):
        _require_same_shape("add", x, y)
        return x + y, lambda g: (g, g)

    return record("add", (a, b), fwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def fwd(x, y):
        _require_same_shape("sub", x, y)
        return x - y, lambda g: (g, -g)

    return record("sub", (a, b), fwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def fwd(x, y):
        _require_same_shape("mul", x, y)
        return x * y, lambda g: (g * y, g * x)

    return record("mul", (a, b), fwd)


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), lambda x: (-x, lambda g: (-g,)))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar (kept out of the graph)."""

    def fwd(x):
        return x * factor, lambda g: (g * factor,)

    return record("scale", (a,), fwd)


def sum_all(a: Tensor) -> Tensor:
    def fwd(x):
        return np.asarray(x.sum(), dtype=x.dtype), lambda g: (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", (a,), fwd)


def mean_all(a: Tensor) -> Tensor:
    def fwd(x):
        inv = 1.0 / x.size
        return np.asarray(x.mean(), dtype=x.dtype), lambda g: ((np.broadcast_to(g, x.shape) * inv).astype(x.dtype),)

    return record("mean", (a,), fwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def fwd(x):
        old = x.shape
        return x.reshape(shape), lambda g: (g.reshape(old),)

    return record("reshape", (a,), fwd)
