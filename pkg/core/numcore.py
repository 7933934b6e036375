"""Dense double-precision arithmetic and a reverse-mode autodiff tape.

Every primitive evaluates eagerly with numpy and appends a node to the tape
of its operands. ``backward`` walks the tape once in reverse order and looks
up the local gradient rule of each node in ``VJP_RULES`` (op name -> rule),
so a rule can be swapped out in tests.
"""
import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ContractViolation, NumericError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

DEFAULT_EPS = 1e-12


def as_tensor(values, checked: bool = True) -> Tensor:
    """Copy ``values`` into a read-only float64 array."""
    try:
        arr = np.array(values, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ContractViolation(f"not a numeric tensor: {e}") from e
    if checked and not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    arr.setflags(write=False)
    return arr


class Node:
    __slots__ = ("tape", "id", "op", "value", "inputs", "ctx", "name", "is_param")

    def __init__(self, tape: "Tape", node_id: int, op: str, value: Tensor,
                 inputs: Tuple["Node", ...], ctx=None, name: Optional[str] = None,
                 is_param: bool = False):
        self.tape = tape
        self.id = node_id
        self.op = op
        self.value = value
        self.inputs = inputs
        self.ctx = ctx
        self.name = name
        self.is_param = is_param

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.shape})"


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self, checked: bool = True):
        self.checked = checked
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, value, inputs: Sequence[Node] = (), ctx=None,
               name: Optional[str] = None, is_param: bool = False) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if self.checked and not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value produced by '{op}'")
        for inp in inputs:
            if inp.tape is not self:
                raise ContractViolation(f"operand of '{op}' belongs to another tape")
        node = Node(self, len(self.nodes), op, value, tuple(inputs), ctx, name, is_param)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: Optional[str] = None) -> Node:
        """Trainable leaf; ``backward`` reports a gradient for it."""
        return self.record("leaf", as_tensor(value, self.checked), name=name, is_param=True)

    def constant(self, value) -> Node:
        return self.record("const", as_tensor(value, self.checked))

    def params(self) -> Dict[str, Node]:
        return {n.name if n.name is not None else str(n.id): n for n in self.nodes if n.is_param}


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ContractViolation("operands belong to different tapes")
    return tape


def _same_shape(op: str, a: Node, b: Node):
    if a.shape != b.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _vector(op: str, a: Node):
    if a.value.ndim != 1 or a.value.shape[0] == 0:
        raise ContractViolation(f"{op}: expected a non-empty vector, got shape {a.shape}")


def _scalar(op: str, a: Node):
    if a.value.size != 1:
        raise ContractViolation(f"{op}: expected a scalar, got shape {a.shape}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# Primitives

def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _tape_of(a, b).record("add", a.value + b.value, (a, b))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return _tape_of(a, b).record("sub", a.value - b.value, (a, b))


def mul(a: Node, b: Node) -> Node:
    """Elementwise product."""
    _same_shape("mul", a, b)
    return _tape_of(a, b).record("mul", a.value * b.value, (a, b))


def scale(a: Node, c: Union[float, Node]) -> Node:
    """``c * a`` for a float constant or a scalar node ``c``."""
    if isinstance(c, Node):
        _scalar("scale", c)
        return _tape_of(a, c).record("scale_by", a.value * c.value.reshape(()), (a, c))
    return a.tape.record("scale", a.value * float(c), (a,), ctx=float(c))


def divide(a: Node, s: Node) -> Node:
    """``a / s`` for a scalar node ``s``."""
    _scalar("divide", s)
    denom = s.value.reshape(())
    if denom == 0.0:
        raise NumericError("divide: zero denominator")
    return _tape_of(a, s).record("divide", a.value / denom, (a, s))


def matvec(m: Node, v: Node) -> Node:
    if m.value.ndim != 2 or v.value.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ContractViolation(f"matvec: incompatible shapes {m.shape} and {v.shape}")
    return _tape_of(m, v).record("matvec", m.value @ v.value, (m, v))


def affine(m: Node, v: Node, b: Node) -> Node:
    return add(matvec(m, v), b)


def tanh(a: Node) -> Node:
    return a.tape.record("tanh", np.tanh(a.value), (a,))


def sigmoid(a: Node) -> Node:
    return a.tape.record("sigmoid", _sigmoid(a.value), (a,))


def exp(a: Node) -> Node:
    return a.tape.record("exp", np.exp(a.value), (a,))


def log(a: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return a.tape.record("log", value, (a,))


def absolute(a: Node) -> Node:
    return a.tape.record("abs", np.abs(a.value), (a,))


def softmax(v: Node) -> Node:
    _vector("softmax", v)
    z = np.exp(v.value - np.max(v.value))
    return v.tape.record("softmax", z / np.sum(z), (v,))


def neg_entropy(p: Node) -> Node:
    """``sum_k p_k log p_k`` with the convention 0 log 0 = 0."""
    _vector("neg_entropy", p)
    if np.any(p.value < 0):
        raise ContractViolation("neg_entropy: negative probability")
    pos = p.value > 0
    value = np.sum(p.value[pos] * np.log(p.value[pos]))
    return p.tape.record("neg_entropy", value, (p,))


def l2_normalize(v: Node, eps: float = DEFAULT_EPS) -> Node:
    """``v / max(||v||, eps)``."""
    _vector("l2_normalize", v)
    if not eps > 0:
        raise ContractViolation("l2_normalize: eps must be positive")
    norm = float(np.linalg.norm(v.value))
    denom = max(norm, eps)
    return v.tape.record("l2_normalize", v.value / denom, (v,), ctx=(denom, norm > eps))


def coordinate_max(vs: Sequence[Node]) -> Node:
    """Coordinate-wise maximum; ties go to the lowest index."""
    if not vs:
        raise ContractViolation("coordinate_max: no operands")
    for v in vs[1:]:
        _same_shape("coordinate_max", vs[0], v)
    stacked = np.stack([v.value for v in vs])
    winners = np.argmax(stacked, axis=0)
    value = np.take_along_axis(stacked, winners[np.newaxis, ...], axis=0)[0]
    return _tape_of(*vs).record("coordinate_max", value, tuple(vs), ctx=winners)


def dot(a: Node, b: Node) -> Node:
    _same_shape("dot", a, b)
    _vector("dot", a)
    return _tape_of(a, b).record("dot", np.dot(a.value, b.value), (a, b))


def total(a: Node) -> Node:
    return a.tape.record("sum", np.sum(a.value), (a,))


def index(a: Node, i: int) -> Node:
    _vector("index", a)
    if not 0 <= i < a.shape[0]:
        raise ContractViolation(f"index: {i} out of range for length {a.shape[0]}")
    return a.tape.record("index", a.value[i], (a,), ctx=i)


def stack(scalars: Sequence[Node]) -> Node:
    """Scalars -> vector."""
    if not scalars:
        raise ContractViolation("stack: no operands")
    for s in scalars:
        _scalar("stack", s)
    value = np.array([s.value.reshape(()) for s in scalars])
    return _tape_of(*scalars).record("stack", value, tuple(scalars))


def concat(a: Node, b: Node) -> Node:
    _vector("concat", a)
    _vector("concat", b)
    return _tape_of(a, b).record("concat", np.concatenate([a.value, b.value]), (a, b))


def neg(a: Node) -> Node:
    return scale(a, -1.0)


# Local gradient rules: rule(g, node) -> one gradient (or None) per input.

def _vjp_scale_by(g, node):
    a, c = node.inputs
    return [g * c.value.reshape(()), np.sum(g * a.value).reshape(c.shape)]


def _vjp_divide(g, node):
    a, s = node.inputs
    denom = s.value.reshape(())
    return [g / denom, (-np.sum(g * a.value) / (denom * denom)).reshape(s.shape)]


def _vjp_softmax(g, node):
    y = node.value
    return [y * (g - np.dot(g, y))]


def _vjp_neg_entropy(g, node):
    p = node.inputs[0].value
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = g * (np.log(p[pos]) + 1.0)
    return [out]


def _vjp_l2_normalize(g, node):
    denom, above = node.ctx
    if not above:
        return [g / denom]
    y = node.value
    return [(g - y * np.dot(g, y)) / denom]


def _vjp_coordinate_max(g, node):
    winners = node.ctx
    return [np.where(winners == i, g, 0.0) for i in range(len(node.inputs))]


def _vjp_index(g, node):
    out = np.zeros_like(node.inputs[0].value)
    out[node.ctx] = g
    return [out]


def _vjp_stack(g, node):
    return [g[i].reshape(s.shape) for i, s in enumerate(node.inputs)]


def _vjp_concat(g, node):
    n = node.inputs[0].shape[0]
    return [g[:n], g[n:]]


VJP_RULES: Dict[str, Callable[[np.ndarray, Node], List[Optional[np.ndarray]]]] = {
    "add": lambda g, n: [g, g],
    "sub": lambda g, n: [g, -g],
    "mul": lambda g, n: [g * n.inputs[1].value, g * n.inputs[0].value],
    "scale": lambda g, n: [g * n.ctx],
    "scale_by": _vjp_scale_by,
    "divide": _vjp_divide,
    "matvec": lambda g, n: [np.outer(g, n.inputs[1].value), n.inputs[0].value.T @ g],
    "tanh": lambda g, n: [g * (1.0 - n.value * n.value)],
    "sigmoid": lambda g, n: [g * n.value * (1.0 - n.value)],
    "exp": lambda g, n: [g * n.value],
    "log": lambda g, n: [g / n.inputs[0].value],
    "abs": lambda g, n: [g * np.sign(n.inputs[0].value)],
    "softmax": _vjp_softmax,
    "neg_entropy": _vjp_neg_entropy,
    "l2_normalize": _vjp_l2_normalize,
    "coordinate_max": _vjp_coordinate_max,
    "dot": lambda g, n: [g * n.inputs[1].value, g * n.inputs[0].value],
    "sum": lambda g, n: [np.full_like(n.inputs[0].value, g)],
    "index": _vjp_index,
    "stack": _vjp_stack,
    "concat": _vjp_concat,
}


def backward(tape: Tape, output: Node) -> Dict[int, Tensor]:
    """Gradient of a scalar ``output`` w.r.t. every parameter leaf, keyed by node id.

    Parameters the output does not depend on get a zero gradient.
    """
    if output.tape is not tape:
        raise ContractViolation("backward: output node belongs to another tape")
    if output.value.size != 1:
        raise ContractViolation(f"backward: output must be scalar, got shape {output.shape}")

    pending: Dict[int, np.ndarray] = {output.id: np.ones_like(output.value)}
    grads: Dict[int, Tensor] = {n.id: np.zeros_like(n.value) for n in tape.nodes if n.is_param}
    for node in reversed(tape.nodes[:output.id + 1]):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        if not node.inputs:
            if node.is_param:
                grads[node.id] = g
            continue
        for parent, pg in zip(node.inputs, VJP_RULES[node.op](g, node)):
            if pg is None:
                continue
            if parent.id in pending:
                pending[parent.id] = pending[parent.id] + pg
            else:
                pending[parent.id] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    if tape.checked:
        for node_id, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {tape.nodes[node_id].name or node_id}")
    return grads


def grads_by_name(tape: Tape, grads: Mapping[int, Tensor]) -> Dict[str, Tensor]:
    return {name: grads[node.id] for name, node in tape.params().items()}


# Finite-difference oracle

LossFn = Callable[[Tape, Dict[str, Node]], Node]


def analytic_gradients(loss_fn: LossFn, params: Mapping[str, Tensor]) -> Tuple[float, Dict[str, Tensor]]:
    tape = Tape()
    leaves = {name: tape.leaf(value, name=name) for name, value in params.items()}
    out = loss_fn(tape, leaves)
    grads = backward(tape, out)
    return out.item(), {name: grads[leaf.id] for name, leaf in leaves.items()}


def _loss_value(loss_fn: LossFn, params: Mapping[str, np.ndarray]) -> float:
    tape = Tape()
    leaves = {name: tape.leaf(value, name=name) for name, value in params.items()}
    return loss_fn(tape, leaves).item()


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def finite_diff_errors(loss_fn: LossFn, params: Mapping[str, Tensor],
                       step: float = 1e-5) -> Dict[str, Tuple[float, Tuple[int, ...]]]:
    """Worst relative error and its coordinate for every parameter array."""
    if not step > 0:
        raise ContractViolation("finite difference step must be positive")
    _, grads = analytic_gradients(loss_fn, params)
    work = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    report: Dict[str, Tuple[float, Tuple[int, ...]]] = {}
    for name, value in work.items():
        worst, worst_at = 0.0, ()
        for coord in np.ndindex(value.shape):
            original = value[coord]
            value[coord] = original + step
            f_plus = _loss_value(loss_fn, work)
            value[coord] = original - step
            f_minus = _loss_value(loss_fn, work)
            value[coord] = original
            err = relative_error(float(grads[name][coord]), (f_plus - f_minus) / (2.0 * step))
            if err > worst or not worst_at:
                worst, worst_at = err, coord
        report[name] = (worst, worst_at)
        logger.debug("finite difference %s: worst relative error %.3e at %s", name, worst, worst_at)
    return report


def finite_diff_check(loss_fn: LossFn, params: Mapping[str, Tensor], step: float = 1e-5) -> float:
    report = finite_diff_errors(loss_fn, params, step)
    return max((err for err, _ in report.values()), default=0.0)
