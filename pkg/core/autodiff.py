"""
Disentangle - Reverse-Mode Autodiff
Dynamic tape over float64 numpy arrays, sized for small MLPs plus the gradient
and curvature needs of HMC and the Laplace approximation
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from core.errors import ContractViolation, NumericError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, int, np.ndarray]
Layout = Tuple[Tuple[str, Tuple[int, ...], int], ...]


@dataclass
class _Node:
    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    backward: Optional[Callable] = None
    param: Optional[str] = None
    requires_grad: bool = False


class Tensor:
    """Handle to one node on a tape"""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _lift(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, self.tape.constant(-1.0))

    def __sub__(self, other):
        return add(self, -self._lift(other))

    def __rsub__(self, other):
        return add(self._lift(other), -self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __repr__(self) -> str:
        return f"Tensor(op={self.tape.nodes[self.index].op!r}, shape={self.shape})"


class Tape:
    """
    Ordered record of primitive applications.
    Nodes are appended in evaluation order, so inputs always precede their outputs.
    A tape belongs to one thread; build a fresh one per forward pass.
    """

    def __init__(self):
        self.nodes: List[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def constant(self, value: ArrayLike) -> Tensor:
        arr = np.asarray(value, dtype=np.float64)
        return self._push("constant", (), arr, None, requires_grad=False)

    def parameter(self, value: ArrayLike, name: str) -> Tensor:
        arr = np.asarray(value, dtype=np.float64)
        tensor = self._push("parameter", (), arr, None, requires_grad=True)
        self.nodes[tensor.index].param = name
        return tensor

    def bind(self, params: "ParameterVector") -> Dict[str, Tensor]:
        """Place every entry of a ParameterVector on the tape as a parameter leaf"""
        return {name: self.parameter(arr, name) for name, arr in params.unflatten().items()}

    def _push(self, op: str, inputs: Tuple[int, ...], value: np.ndarray,
              backward: Optional[Callable], requires_grad: Optional[bool] = None) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise NumericError(op)
        if requires_grad is None:
            requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(_Node(op, inputs, value, backward, requires_grad=requires_grad))
        return Tensor(self, len(self.nodes) - 1)


# -------------------------
# Broadcasting helpers
# -------------------------

def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim < big.ndim and big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...], square: bool) -> np.ndarray:
    """Sum a broadcast gradient back to `shape`; squared contributions when accumulating curvature"""
    if square:
        grad = grad * grad
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _same_tape(op: str, *tensors: Tensor) -> "Tape":
    tape = tensors[0].tape
    if any(t.tape is not tape for t in tensors):
        raise ContractViolation(f"{op}: inputs live on different tapes")
    return tape


# -------------------------
# Primitives
# -------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("matmul", a, b)
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ContractViolation(f"matmul: shapes {A.shape} and {B.shape} do not conform")

    def backward(g, sq):
        ga = (g * g) @ (B * B).T if sq[0] else g @ B.T
        gb = (A * A).T @ (g * g) if sq[1] else A.T @ g
        return ga, gb

    return tape._push("matmul", (a.index, b.index), A @ B, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("add", a, b)
    A, B = a.data, b.data
    _check_broadcast("add", A, B)

    def backward(g, sq):
        return _reduce_to(g, A.shape, sq[0]), _reduce_to(g, B.shape, sq[1])

    return tape._push("add", (a.index, b.index), A + B, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("mul", a, b)
    A, B = a.data, b.data
    _check_broadcast("mul", A, B)

    def backward(g, sq):
        return _reduce_to(g * B, A.shape, sq[0]), _reduce_to(g * A, B.shape, sq[1])

    return tape._push("mul", (a.index, b.index), A * B, backward)


def _unary(op: str, x: Tensor, value: np.ndarray, local_grad: Callable[[], np.ndarray]) -> Tensor:
    X = x.data

    def backward(g, sq):
        return (_reduce_to(g * local_grad(), X.shape, sq[0]),)

    return x.tape._push(op, (x.index,), value, backward)


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly zero is 0
    return _unary("relu", x, np.maximum(x.data, 0.0), lambda: (x.data > 0.0).astype(np.float64))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary("tanh", x, out, lambda: 1.0 - out * out)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _unary("exp", x, out, lambda: out)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _unary("log", x, out, lambda: 1.0 / x.data)


def sin(x: Tensor) -> Tensor:
    return _unary("sin", x, np.sin(x.data), lambda: np.cos(x.data))


def softplus(x: Tensor) -> Tensor:
    return _unary("softplus", x, np.logaddexp(0.0, x.data), lambda: special.expit(x.data))


def abs_(x: Tensor) -> Tensor:
    return _unary("abs", x, np.abs(x.data), lambda: np.sign(x.data))


def lgamma(x: Tensor) -> Tensor:
    return _unary("lgamma", x, special.gammaln(x.data), lambda: special.digamma(x.data))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    X = x.data
    return _unary("clip", x, np.clip(X, lo, hi), lambda: ((X > lo) & (X < hi)).astype(np.float64))


def sum_(x: Tensor, axis: Optional[int] = None) -> Tensor:
    X = x.data
    out = np.asarray(X.sum()) if axis is None else X.sum(axis=axis, keepdims=True)

    def backward(g, sq):
        return (_reduce_to(np.broadcast_to(g, X.shape), X.shape, sq[0]),)

    return x.tape._push("sum", (x.index,), out, backward)


def mean(x: Tensor) -> Tensor:
    X = x.data
    if X.size == 0:
        raise ContractViolation("mean: empty input")
    scale = 1.0 / X.size

    def backward(g, sq):
        return (_reduce_to(np.broadcast_to(g * scale, X.shape), X.shape, sq[0]),)

    return x.tape._push("mean", (x.index,), np.asarray(X.mean()), backward)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sin": sin,
    "softplus": softplus,
    "sum": sum_,
    "mean": mean,
    "abs": abs_,
    "lgamma": lgamma,
    "clip": clip,
}


def forward_primitive(op: str, *inputs: Tensor, **attrs) -> Tensor:
    """Apply a named primitive and record it on the inputs' tape"""
    fn = PRIMITIVES.get(op)
    if fn is None:
        raise ContractViolation(f"unknown primitive '{op}'")
    return fn(*inputs, **attrs)


# -------------------------
# Reverse pass
# -------------------------

def backward(tape: Tape, root: Tensor, seed: Optional[np.ndarray] = None,
             square: bool = False) -> Dict[str, np.ndarray]:
    """
    Propagate adjoints from `root` back through the tape in exact reverse order.

    Returns the gradient for every parameter leaf on the tape; parameters that
    `root` does not depend on get zeros. With `square=True` the contributions
    reaching parameter leaves are squared before being summed over examples,
    which yields per-example curvature sums (see hessian_diag_ggn).
    """
    if root.tape is not tape:
        raise ContractViolation("backward: root does not belong to this tape")
    root_node = tape.nodes[root.index]
    if seed is None:
        if root_node.value.ndim != 0:
            raise ContractViolation(f"backward: root must be scalar, got shape {root_node.value.shape}")
        seed = np.ones(())
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root_node.value.shape:
            raise ContractViolation(f"backward: seed shape {seed.shape} != root shape {root_node.value.shape}")

    grads: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[root.index] = seed
    for i in range(root.index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.backward is None or not node.requires_grad:
            continue
        flags = tuple(square and tape.nodes[j].param is not None for j in node.inputs)
        for j, gj in zip(node.inputs, node.backward(g, flags)):
            if gj is None or not tape.nodes[j].requires_grad:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj

    out: Dict[str, np.ndarray] = {}
    for i, node in enumerate(tape.nodes):
        if node.param is not None:
            g = grads[i]
            out[node.param] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64).reshape(node.value.shape)
    return out


def hessian_diag_ggn(tape: Tape, heads: Sequence[Tuple[Tensor, np.ndarray]]) -> Dict[str, np.ndarray]:
    """
    Diagonal of the generalized Gauss-Newton matrix  sum_n J_n^T Lambda_n J_n.

    `heads` pairs each network output of shape (N, 1) with the per-example
    second derivative of the loss with respect to that output (shape (N,)).
    Requires a row-separable graph in which every parameter is consumed once,
    through a matmul or a broadcast add, as in an MLP.
    """
    total: Dict[str, np.ndarray] = {}
    for output, precision in heads:
        precision = np.asarray(precision, dtype=np.float64).reshape(-1)
        if np.any(precision < 0):
            raise ContractViolation("hessian_diag_ggn: output precisions must be nonnegative")
        if output.shape != (precision.size, 1):
            raise ContractViolation(f"hessian_diag_ggn: head shape {output.shape} vs {precision.size} precisions")
        seed = np.sqrt(precision)[:, None]
        for name, g in backward(tape, output, seed=seed, square=True).items():
            total[name] = g if name not in total else total[name] + g
    return total


# -------------------------
# Parameter vectors
# -------------------------

@dataclass(frozen=True)
class ParameterVector:
    """Flat float64 snapshot of all trainable parameters plus their (name, shape, offset) layout"""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        expected = 0
        for name, shape, offset in self.layout:
            if offset != expected:
                raise ContractViolation(f"layout entry '{name}' starts at {offset}, expected {expected}")
            expected += int(np.prod(shape, dtype=np.int64))
        if expected != values.size:
            raise ContractViolation(f"layout covers {expected} values, vector has {values.size}")

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ParameterVector":
        layout = []
        chunks = []
        offset = 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout.append((name, tuple(int(s) for s in arr.shape), offset))
            chunks.append(arr.reshape(-1))
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, tuple(layout))

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def names(self) -> List[str]:
        return [name for name, _, _ in self.layout]

    def unflatten(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, shape, offset in self.layout:
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = self.values[offset:offset + size].reshape(shape)
        return out

    def flatten_like(self, arrays: Dict[str, np.ndarray]) -> np.ndarray:
        """Concatenate a name -> array mapping (e.g. gradients) in this vector's layout order"""
        if not self.layout:
            return np.zeros(0)
        return np.concatenate([np.asarray(arrays[name], dtype=np.float64).reshape(-1)
                               for name, _, _ in self.layout])

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.layout)

    def save(self, path: Path):
        header = json.dumps([[name, list(shape), offset] for name, shape, offset in self.layout])
        np.savez(Path(path), values=self.values, layout=np.array(header))

    @classmethod
    def load(cls, path: Path) -> "ParameterVector":
        with np.load(Path(path)) as blob:
            layout = tuple((name, tuple(shape), int(offset))
                           for name, shape, offset in json.loads(str(blob["layout"])))
            return cls(blob["values"].copy(), layout)


LossFn = Callable[[Tape, Dict[str, Tensor]], Tensor]


def grad_at(params: ParameterVector, loss_fn: LossFn) -> Tuple[float, np.ndarray]:
    """Evaluate loss_fn at `params` on a fresh tape and return (loss, flat gradient)"""
    tape = Tape()
    bound = tape.bind(params)
    loss = loss_fn(tape, bound)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError("loss")
    grads = backward(tape, loss)
    return value, params.flatten_like(grads)
