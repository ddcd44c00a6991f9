"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive that touches a gradient-tracked input records a
:class:`Node` holding its inputs and a backward rule.  Nodes carry a global
sequence number, so the nodes reachable from a loss, sorted by that number,
form the tape in recording order; :func:`backward` walks it in exact reverse.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True
_sequence = itertools.count()


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording of backward rules inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float32 array, optionally tracked for gradients.

    Parameters
    ----------
    data : array_like
        Values; converted to a C-contiguous float32 array.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad`` on backward.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def placeholder(cls, shape, requires_grad: bool = False) -> "Tensor":
        """Read-only all-zero tensor that allocates no storage."""
        t = cls.__new__(cls)
        t.data = np.broadcast_to(np.zeros((), DTYPE), tuple(shape))
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # small arithmetic surface; the layer primitives live in st3d.ops
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from .ops import sum_all
        return sum_all(self)

    def reshape(self, *shape) -> "Tensor":
        from .ops import reshape
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    """One recorded operation: inputs, the produced tensor's id and its backward rule.

    ``backward_fn(grad_out, needs)`` returns one gradient (or None) per input;
    ``needs[i]`` tells the rule whether input ``i`` wants a gradient at all.
    """

    op: str
    inputs: tuple
    out_id: int
    backward_fn: BackwardFn
    seq: int = field(default_factory=lambda: next(_sequence))


def record(op: str, out_data: np.ndarray, inputs: Iterable[Tensor],
           backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and attach a tape node when tracking applies."""
    inputs = tuple(inputs)
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._node = Node(op, inputs, id(out), backward_fn)
    return out


class Tape:
    """Ordered list of recorded nodes; every node's inputs precede it."""

    def __init__(self, nodes: Sequence[Node] = ()):
        self.nodes = list(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        """Collect every node reachable from ``out``, in recording order."""
        seen: dict[int, Node] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(node.inputs)
        return cls(sorted(seen.values(), key=lambda n: n.seq))


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked leaf reachable from ``loss``.

    Intermediate gradients are released as soon as their node has run.
    Gradients add onto whatever ``grad`` already holds; call :func:`zero_grads`
    between optimisation steps.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    if tape is None:
        tape = Tape.from_output(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        needs = [t.requires_grad for t in node.inputs]
        in_grads = node.backward_fn(g, needs)
        for t, need, gi in zip(node.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            key = id(t)
            tensors[key] = t
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, g in grads.items():
        t = tensors[key]
        g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
