"""Dense tensors with a recorded op graph and reverse-mode differentiation.

Every differentiable op appends a :class:`Node` to the active :class:`Graph`.
``backward`` walks that list in strict reverse insertion order and populates
``.grad`` on every leaf tensor that requires it. A graph is consumed by its
first backward pass; ops issued afterwards start a fresh graph.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_precision = "f32"
_check_finite = True


class _ThreadState(threading.local):
    """Grad mode and the recording graph are per thread; precision is process-wide."""

    grad_enabled = True
    graph: Graph | None = None


_local = _ThreadState()
_ids = itertools.count()
# op kind -> multiplier applied to that op's input gradients (fault injection)
_grad_faults: dict[str, float] = {}


class NumcoreError(Exception):
    """Base class for numcore contract violations."""


class ShapeError(NumcoreError, ValueError):
    pass


class NonFiniteError(NumcoreError, FloatingPointError):
    pass


class GraphError(NumcoreError, RuntimeError):
    pass


# ---------------------------------------------------------------------------
# global run settings
# ---------------------------------------------------------------------------


def set_precision(mode: str) -> None:
    """Select the run-wide scalar type: ``"f32"`` (default) or ``"f64"``."""
    global _precision
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    if mode != _precision:
        # a graph never mixes precisions
        _local.graph = None
    _precision = mode


def get_precision() -> str:
    return _precision


def get_dtype() -> type:
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    prev = _precision
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording them."""
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _local.grad_enabled


@contextlib.contextmanager
def corrupt_gradient(kind: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the input gradients of every ``kind`` node; a negative control for grad checks."""
    _grad_faults[kind] = factor
    try:
        yield
    finally:
        _grad_faults.pop(kind, None)


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    global _check_finite
    prev = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = prev


# ---------------------------------------------------------------------------
# tensors and graphs
# ---------------------------------------------------------------------------


class Tensor:
    """Dense array plus an optional gradient slot.

    ``data`` is a C-ordered numpy array in the run precision. Leaf tensors are
    created directly; non-leaf tensors are produced by ops and remember the
    graph that recorded them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "id", "_graph")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=get_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.id = next(_ids)
        self._graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._graph is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{tag})"

    # operator sugar for the common same-shape cases
    def __add__(self, other: Tensor) -> Tensor:
        from .ops import add

        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        from .ops import mul

        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        from .ops import matmul

        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


@dataclass
class Node:
    """One recorded op: kind, input tensors, output tensor, and its two rules."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    forward: Callable[..., np.ndarray]


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)
    dtype: type = field(default_factory=get_dtype)
    consumed: bool = False

    def records(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(op kind, input ids, output id) for every node, in insertion order."""
        return [(n.kind, tuple(t.id for t in n.inputs), n.output.id) for n in self.nodes]

    def replay(self) -> bool:
        """Recompute every node from leaf data; True iff all outputs match bit for bit."""
        values: dict[int, np.ndarray] = {}
        ok = True
        for node in self.nodes:
            args = [values.get(t.id, t.data) for t in node.inputs]
            out = node.forward(*args)
            if out.shape != node.output.shape or out.tobytes() != node.output.data.tobytes():
                ok = False
            values[node.output.id] = out
        return ok


def new_graph() -> Graph:
    """Start recording into a fresh graph, dropping any abandoned one."""
    _local.graph = Graph(dtype=get_dtype())
    return _local.graph


def current_graph() -> Graph:
    g = _local.graph
    if g is None or g.consumed or g.dtype is not get_dtype():
        g = _local.graph = Graph(dtype=get_dtype())
    return g


def record(
    kind: str,
    inputs: Sequence[Tensor],
    out: np.ndarray,
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    forward: Callable[..., np.ndarray],
) -> Tensor:
    """Wrap an op result, appending a node when any input needs a gradient."""
    dtype = get_dtype()
    for t in inputs:
        if t.data.dtype != dtype:
            raise NumcoreError(
                f"{kind}: input dtype {t.data.dtype} does not match run precision {_precision}"
            )
    if _check_finite and out.dtype.kind == "f" and not np.isfinite(out).all():
        raise NonFiniteError(f"{kind}: produced non-finite values")
    result = Tensor.__new__(Tensor)
    result.data = out if out.dtype == dtype else out.astype(dtype)
    result.grad = None
    result.name = None
    result.id = next(_ids)
    result._graph = None
    needs = _local.grad_enabled and any(t.requires_grad for t in inputs)
    result.requires_grad = needs
    if needs:
        graph = current_graph()
        for t in inputs:
            if t._graph is not None and t._graph is not graph:
                raise GraphError(
                    f"{kind}: input was produced by a different (consumed or abandoned) graph"
                )
        graph.nodes.append(Node(kind, tuple(inputs), result, backward, forward))
        result._graph = graph
    return result


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf that feeds ``loss``.

    Raises when the loss is not scalar, was not produced by a recorded graph,
    the graph was already consumed, or a leaf still holds an unreset gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = loss._graph
    if graph is None:
        raise GraphError("loss is detached: it was not produced by a recorded graph")
    if graph.consumed:
        raise GraphError("graph already consumed by a previous backward call")

    leaves: dict[int, Tensor] = {}
    for node in graph.nodes:
        for t in node.inputs:
            if t.requires_grad and t._graph is None:
                if t.grad is not None and t.id not in leaves:
                    raise GraphError(
                        f"leaf {t.name or t.id} holds a stale gradient; call zero_grad() first"
                    )
                leaves[t.id] = t

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        fault = _grad_faults.get(node.kind)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if fault is not None:
                gi = gi * fault
            target = leaf_grads if t._graph is None else grads
            prev = target.get(t.id)
            target[t.id] = gi if prev is None else prev + gi

    for tid, t in leaves.items():
        g = leaf_grads.get(tid)
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    graph.consumed = True
