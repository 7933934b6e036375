"""Adaptive scan pooling and the mean / max / MIL baselines."""
import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from core import numcore as nc
from core.errors import ContractViolation, NumericError
from core.numcore import Node, Tape, Tensor

logger = logging.getLogger(__name__)

# f_imp(psi_t, phi_{t+1}) -> gamma_{t+1}; a plain float is accepted as a constant score.
ImportanceFn = Callable[[Node, Node], Union[Node, float]]
AffineFn = Callable[[Node], Node]

SELECTION_THRESHOLD = 0.5


@dataclass(frozen=True)
class FeatureSequence:
    """T x D per-frame features of one sequence."""

    frames: Tensor
    label: int
    id: str = ""
    signal_mask: Optional[Tuple[bool, ...]] = None

    def __post_init__(self):
        frames = nc.as_tensor(self.frames)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ContractViolation(f"sequence '{self.id}': frames must be a non-empty T x D matrix, "
                                    f"got shape {frames.shape}")
        object.__setattr__(self, "frames", frames)
        if int(self.label) != self.label or self.label < 0:
            raise ContractViolation(f"sequence '{self.id}': label must be a non-negative integer")
        object.__setattr__(self, "label", int(self.label))
        if self.signal_mask is not None:
            mask = tuple(bool(m) for m in self.signal_mask)
            if len(mask) != frames.shape[0]:
                raise ContractViolation(f"sequence '{self.id}': signal_mask has length {len(mask)}, "
                                        f"expected {frames.shape[0]}")
            object.__setattr__(self, "signal_mask", mask)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def D(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames, signal_mask=None) -> "FeatureSequence":
        return dataclasses.replace(self, frames=frames, signal_mask=signal_mask)


@dataclass(frozen=True)
class PoolState:
    """psi(X, t), the cumulative weight and the importance trace after t frames."""

    psi: Node
    gamma_hat: Node
    trace: Tuple[Node, ...]

    @classmethod
    def start(cls, first_frame: Node) -> "PoolState":
        # psi(X, 1) = phi(x_1) with gamma_1 = 1
        one = first_frame.tape.constant(1.0)
        return cls(first_frame, one, (one,))

    def advance(self, frame: Node, gamma: Node) -> "PoolState":
        g = gamma.item()
        if g == 0.0:
            raise NumericError("importance score underflowed to 0")
        if not 0.0 < g <= 1.0:
            raise ContractViolation(f"importance score {g} outside (0, 1]")
        gamma_hat = nc.add(self.gamma_hat, gamma)
        weighted = nc.add(nc.scale(self.psi, self.gamma_hat), nc.scale(frame, gamma))
        return PoolState(nc.divide(weighted, gamma_hat), gamma_hat, self.trace + (gamma,))

    @property
    def t(self) -> int:
        return len(self.trace)

    def gammas(self) -> List[float]:
        return [g.item() for g in self.trace]


def _gamma_node(value: Union[Node, float], tape: Tape) -> Node:
    if isinstance(value, Node):
        if value.value.size != 1:
            raise ContractViolation(f"importance function must return a scalar, got shape {value.shape}")
        return value
    return tape.constant(float(value))


def _frame_nodes(seq: FeatureSequence, tape: Tape, frames: Optional[Sequence[Node]]) -> List[Node]:
    nodes = list(frames) if frames is not None else [tape.constant(row) for row in seq.frames]
    if not nodes:
        raise ContractViolation(f"sequence '{seq.id}' is empty")
    return nodes


def adascan_pool(seq: FeatureSequence, f_imp: ImportanceFn, tape: Tape,
                 frames: Optional[Sequence[Node]] = None) -> Tuple[Node, Node]:
    """Recursive importance-weighted pooling; returns (psi(X, T), gammas).

    ``frames`` overrides the rows of ``seq`` (used for frame dropout).
    """
    nodes = _frame_nodes(seq, tape, frames)
    state = PoolState.start(nodes[0])
    for frame in nodes[1:]:
        state = state.advance(frame, _gamma_node(f_imp(state.psi, frame), tape))
    return state.psi, nc.stack(state.trace)


def weighted_mean_closed_form(frames, gammas) -> Tensor:
    """sum_t gamma_t phi_t / sum_t gamma_t."""
    frames = np.asarray(frames, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    if frames.ndim != 2 or gammas.shape != (frames.shape[0],):
        raise ContractViolation(f"closed form: frames {frames.shape} and gammas {gammas.shape} disagree")
    if np.any(gammas < 0):
        raise ContractViolation("closed form: weights must be non-negative")
    total = np.sum(gammas)
    if total <= 0:
        raise ContractViolation("closed form: weights sum to zero")
    return gammas @ frames / total


def mean_pool(seq: FeatureSequence) -> Tensor:
    return np.mean(seq.frames, axis=0)


def max_pool(seq: FeatureSequence) -> Tensor:
    return np.max(seq.frames, axis=0)


def mil_forward(seq: FeatureSequence, classifier: AffineFn, tape: Tape,
                frames: Optional[Sequence[Node]] = None) -> Node:
    """Per-class max over per-frame class scores."""
    nodes = _frame_nodes(seq, tape, frames)
    return nc.coordinate_max([classifier(frame) for frame in nodes])


def selected_mask(gammas: Sequence[float]) -> List[bool]:
    return [g > SELECTION_THRESHOLD for g in gammas]


class ScanStep(NamedTuple):
    t: int
    gamma: float
    psi: Tensor
    probs: Optional[Tensor]


class OnlineScanner:
    """Streaming form of adascan_pool: frames arrive one at a time.

    Only psi, the cumulative weight and the scores are kept between frames.
    Each push records on a fresh tape, to which ``bind_importance`` and
    ``bind_head`` attach the model weights.
    """

    def __init__(self, bind_importance: Callable[[Tape], ImportanceFn],
                 bind_head: Optional[Callable[[Tape], Callable[[Node], Node]]] = None):
        self._bind_importance = bind_importance
        self._bind_head = bind_head
        self.reset()

    def reset(self):
        self.psi: Optional[Tensor] = None
        self.gamma_hat = 0.0
        self.gammas: List[float] = []

    @property
    def t(self) -> int:
        return len(self.gammas)

    def push(self, frame) -> ScanStep:
        tape = Tape()
        node = tape.constant(frame)
        if node.value.ndim != 1:
            raise ContractViolation(f"frame must be a vector, got shape {node.shape}")
        if self.psi is None:
            state = PoolState.start(node)
        else:
            if node.shape != self.psi.shape:
                raise ContractViolation(f"frame has dimension {node.shape[0]}, "
                                        f"expected {self.psi.shape[0]}")
            state = PoolState(tape.constant(self.psi), tape.constant(self.gamma_hat), ())
            gamma = _gamma_node(self._bind_importance(tape)(state.psi, node), tape)
            state = state.advance(node, gamma)
        probs = self._bind_head(tape)(state.psi).value.copy() if self._bind_head else None
        self.psi = state.psi.value
        self.gamma_hat = state.gamma_hat.item()
        self.gammas.append(state.trace[-1].item())
        return ScanStep(self.t, self.gammas[-1], self.psi.copy(), probs)
