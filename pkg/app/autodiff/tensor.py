import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import GraphContractError
import logging

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


def _graph_stack() -> List["ComputationGraph"]:
    if not hasattr(_local, "graphs"):
        _local.graphs = []
        _local.grad_enabled = True
    return _local.graphs


def current_graph() -> Optional["ComputationGraph"]:
    """Innermost active graph of the calling thread, if any."""
    stack = _graph_stack()
    if not stack or not _local.grad_enabled:
        return None
    return stack[-1]


@contextmanager
def no_grad():
    """Run ops without recording graph nodes."""
    _graph_stack()
    previous = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Node:
    """One recorded operation: inputs, output and the rule mapping dOut to dInputs."""

    __slots__ = ("index", "op", "inputs", "backward_fn", "graph")

    def __init__(self, index: int, op: str, inputs: Tuple["Tensor", ...], backward_fn: BackwardFn,
                 graph: "ComputationGraph"):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.graph = graph

    def __repr__(self) -> str:
        return f"Node({self.index}, {self.op})"


class ComputationGraph:
    """Append-only tape of operation records.

    Append order is a topological order, so a backward sweep is a single reverse
    walk over the tape.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "ComputationGraph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", backward_fn: BackwardFn) -> Node:
        node = Node(len(self.nodes), op, inputs, backward_fn, self)
        self.nodes.append(node)
        output._node = node
        return node

    def _owns(self, tensor: "Tensor") -> bool:
        return tensor._node is not None and tensor._node.graph is self

    def backward(self, loss: "Tensor", constants: Iterable["Tensor"] = ()) -> None:
        """Accumulate dLoss/dLeaf into ``.grad`` of every trainable leaf.

        Tensors listed in ``constants`` are treated as constant values: they
        receive no gradient and nothing flows through them. Nodes that cannot
        reach a non-constant leaf are skipped.
        """
        if loss.data.size != 1:
            raise GraphContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._owns(loss):
            raise GraphContractError("loss was not produced inside this computation graph")

        frozen = {id(t) for t in constants}
        live = [False] * len(self.nodes)
        for node in self.nodes:
            for t in node.inputs:
                if id(t) in frozen or not t.requires_grad:
                    continue
                if self._owns(t):
                    if live[t._node.index]:
                        live[node.index] = True
                        break
                elif t._node is None:
                    live[node.index] = True
                    break

        pending = {loss._node.index: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss._node.index + 1]):
            grad = pending.pop(node.index, None)
            if grad is None or not live[node.index]:
                continue
            input_grads = node.backward_fn(grad)
            for t, g in zip(node.inputs, input_grads):
                if g is None or id(t) in frozen or not t.requires_grad:
                    continue
                if self._owns(t):
                    if live[t._node.index]:
                        idx = t._node.index
                        pending[idx] = g if idx not in pending else pending[idx] + g
                elif t._node is None:
                    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
                    t.grad = g.copy() if t.grad is None else t.grad + g


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense N-d array with an optional back-reference into the active graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data: np.ndarray = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph control ---------------------------------------------------
    def detach(self) -> "Tensor":
        """Same values, no gradient path."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, constants: Iterable["Tensor"] = ()) -> None:
        if self._node is None:
            raise GraphContractError("tensor was not produced by a recorded operation")
        self._node.graph.backward(self, constants=constants)

    # -- operator sugar, implemented in ops ------------------------------
    def __add__(self, other):
        from app.autodiff import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from app.autodiff import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from app.autodiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from app.autodiff import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from app.autodiff import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from app.autodiff import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from app.autodiff import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from app.autodiff import ops
        return ops.div(other, self)

    def __neg__(self):
        from app.autodiff import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from app.autodiff import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from app.autodiff import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from app.autodiff import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from app.autodiff import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims: bool = False):
        from app.autodiff import ops
        return ops.reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from app.autodiff import ops
        return ops.reduce_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: BackwardFn) -> Tensor:
    """Wrap an op's output and record it when any input is on a gradient path."""
    dtype = np.result_type(*[t.data.dtype for t in inputs]) if inputs else None
    out = Tensor(np.asarray(data, dtype=dtype))
    graph = current_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(op, tuple(inputs), out, backward_fn)
    return out
