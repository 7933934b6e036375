"""Importance MLP, classifier head, loss and model persistence."""
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from core import numcore as nc
from core.errors import AdaScanError, ContractViolation, IngestionError
from core.numcore import Node, Tape, Tensor
from core.pooling import (
    AffineFn,
    FeatureSequence,
    ImportanceFn,
    OnlineScanner,
    adascan_pool,
    max_pool,
    mean_pool,
    mil_forward,
)
from models.config_models import HyperParams, ModelDims
from models.record_models import MODEL_FORMAT_VERSION, ModelDocument

logger = logging.getLogger(__name__)

PARAM_BLOCKS: Dict[str, Tuple[str, str]] = {
    "imp.layer1": ("imp.W1", "imp.b1"),
    "imp.layer2": ("imp.W2", "imp.b2"),
    "imp.layer3": ("imp.W3", "imp.b3"),
    "classifier": ("cls.W", "cls.b"),
}
PARAM_NAMES = tuple(name for block in PARAM_BLOCKS.values() for name in block)
POOL_GROUP = "pool"
CLASSIFIER_GROUP = "classifier"


def param_group(name: str) -> str:
    """Optimizer group of a parameter: the pooling MLP or the classifier."""
    return POOL_GROUP if name.startswith("imp.") else CLASSIFIER_GROUP


@dataclass(frozen=True)
class ImportanceMlp:
    """f_imp: tanh -> tanh -> sigmoid."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    W3: Tensor
    b3: Tensor

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]


@dataclass(frozen=True)
class Classifier:
    W: Tensor
    b: Tensor


@dataclass(frozen=True)
class ModelParams:
    imp: ImportanceMlp
    classifier: Classifier
    dims: ModelDims
    hyper: HyperParams
    pooler: str = "adascan"
    version: str = MODEL_FORMAT_VERSION

    def __post_init__(self):
        d, c, h1, h2 = self.dims.D, self.dims.C, self.dims.h1, self.dims.h2
        imp_in = 2 * d if self.hyper.imp_input == "concat" else d
        expected = {
            "imp.W1": (h1, imp_in), "imp.b1": (h1,),
            "imp.W2": (h2, h1), "imp.b2": (h2,),
            "imp.W3": (1, h2), "imp.b3": (1,),
            "cls.W": (c, d), "cls.b": (c,),
        }
        for name, value in self.arrays().items():
            if value.shape != expected[name]:
                raise ContractViolation(f"{name} has shape {value.shape}, expected {expected[name]}")
        if tuple(self.hyper.hidden) != (h1, h2):
            raise ContractViolation(f"hidden sizes {tuple(self.hyper.hidden)} disagree with dims ({h1}, {h2})")

    def arrays(self) -> Dict[str, Tensor]:
        return {
            "imp.W1": self.imp.W1, "imp.b1": self.imp.b1,
            "imp.W2": self.imp.W2, "imp.b2": self.imp.b2,
            "imp.W3": self.imp.W3, "imp.b3": self.imp.b3,
            "cls.W": self.classifier.W, "cls.b": self.classifier.b,
        }

    def with_arrays(self, arrays: Mapping[str, Tensor]) -> "ModelParams":
        a = {name: nc.as_tensor(arrays[name]) for name in PARAM_NAMES}
        imp = ImportanceMlp(a["imp.W1"], a["imp.b1"], a["imp.W2"], a["imp.b2"], a["imp.W3"], a["imp.b3"])
        return dataclasses.replace(self, imp=imp, classifier=Classifier(a["cls.W"], a["cls.b"]))

    def with_hyper(self, hyper: HyperParams) -> "ModelParams":
        return dataclasses.replace(self, hyper=hyper)

    def bind(self, tape: Tape) -> Dict[str, Node]:
        """Register every weight array as a trainable leaf of ``tape``."""
        return {name: tape.leaf(value, name=name) for name, value in self.arrays().items()}


def f_imp_forward(mlp_input: Node, weights: Mapping[str, Node]) -> Node:
    """gamma = sigmoid(W3 tanh(W2 tanh(W1 r + b1) + b2) + b3) as a scalar node."""
    if mlp_input.value.ndim != 1 or mlp_input.shape[0] != weights["imp.W1"].shape[1]:
        raise ContractViolation(f"importance input has shape {mlp_input.shape}, "
                                f"expected ({weights['imp.W1'].shape[1]},)")
    h = nc.tanh(nc.affine(weights["imp.W1"], mlp_input, weights["imp.b1"]))
    h = nc.tanh(nc.affine(weights["imp.W2"], h, weights["imp.b2"]))
    return nc.index(nc.sigmoid(nc.affine(weights["imp.W3"], h, weights["imp.b3"])), 0)


def importance_fn(weights: Mapping[str, Node], imp_input: str = "residual") -> ImportanceFn:
    if imp_input == "concat":
        return lambda psi, frame: f_imp_forward(nc.concat(psi, frame), weights)
    return lambda psi, frame: f_imp_forward(nc.sub(frame, psi), weights)


def classifier_fn(weights: Mapping[str, Node]) -> AffineFn:
    return lambda v: nc.affine(weights["cls.W"], v, weights["cls.b"])


def classify(psi: Node, weights: Mapping[str, Node]) -> Tuple[Node, Node]:
    """softmax(W l2_normalize(psi) + b); returns (logits, probs)."""
    logits = classifier_fn(weights)(nc.l2_normalize(psi))
    return logits, nc.softmax(logits)


def entropy_reg(gammas: Node) -> Node:
    """Entropy of softmax(gammas)."""
    return nc.neg(nc.neg_entropy(nc.softmax(gammas)))


def l1_reg(gammas: Node) -> Node:
    return nc.total(nc.absolute(gammas))


REGULARIZERS = {"entropy": entropy_reg, "l1": l1_reg}


def predicted_scores(gammas: Node) -> Optional[Node]:
    """gamma_2..gamma_T, the scores f_imp produced; None for a single frame.

    gamma_1 is the constant 1. Left inside the softmax it would make
    lowering every predicted score a way to reduce the entropy.
    """
    if gammas.shape[0] < 2:
        return None
    return nc.stack([nc.index(gammas, t) for t in range(1, gammas.shape[0])])


def dropout_mask(vec, p: float, rng: Union[np.random.Generator, int, None], train: bool) -> Tensor:
    """Inverted dropout: zero each coordinate with probability p, scale survivors by 1/(1-p)."""
    vec = np.asarray(vec, dtype=np.float64)
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout probability {p} outside [0, 1)")
    if not train or p == 0.0:
        return vec
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = rng.random(vec.shape) >= p
    return np.where(keep, vec / (1.0 - p), 0.0)


@dataclass
class ForwardResult:
    loss: Node
    cross_entropy: Node
    logits: Node
    probs: Node
    gammas: Optional[Node]
    weights: Dict[str, Node]

    @property
    def pred(self) -> int:
        return int(np.argmax(self.probs.value))

    def gamma_values(self) -> Optional[Tensor]:
        return None if self.gammas is None else self.gammas.value.copy()


def forward(seq: FeatureSequence, params: ModelParams, tape: Tape,
            weights: Optional[Mapping[str, Node]] = None, train: bool = False,
            rng: Optional[np.random.Generator] = None,
            constant_importance: Optional[float] = None) -> ForwardResult:
    """Pool -> classify -> loss for any pooler, recorded on one tape."""
    hyper = params.hyper
    if seq.D != params.dims.D:
        raise ContractViolation(f"sequence '{seq.id}' has D={seq.D}, model expects {params.dims.D}")
    if seq.label >= params.dims.C:
        raise ContractViolation(f"sequence '{seq.id}' has label {seq.label} >= C={params.dims.C}")
    weights = dict(weights) if weights is not None else params.bind(tape)
    dropping = train and hyper.dropout_p > 0.0
    if dropping and rng is None:
        raise ContractViolation("training with dropout needs a random generator")

    frames = seq.frames
    if dropping:
        frames = np.stack([dropout_mask(row, hyper.dropout_p, rng, True) for row in frames])
        seq = seq.with_frames(frames, seq.signal_mask)

    gammas = None
    if params.pooler == "mil":
        logits = mil_forward(seq, classifier_fn(weights), tape)
        probs = nc.softmax(logits)
    else:
        if params.pooler == "adascan":
            f = (lambda psi, frame: constant_importance) if constant_importance is not None \
                else importance_fn(weights, hyper.imp_input)
            psi, gammas = adascan_pool(seq, f, tape)
        elif params.pooler == "mean":
            psi = tape.constant(mean_pool(seq))
        elif params.pooler == "max":
            psi = tape.constant(max_pool(seq))
        else:
            raise ContractViolation(f"unknown pooler '{params.pooler}'")
        if dropping:
            psi = nc.mul(psi, tape.constant(dropout_mask(np.ones(seq.D), hyper.dropout_p, rng, True)))
        logits, probs = classify(psi, weights)

    ce = nc.neg(nc.log(nc.index(probs, seq.label)))
    loss = ce
    if gammas is not None and hyper.reg_kind != "none" and hyper.lambda_ > 0.0:
        predicted = predicted_scores(gammas)
        if predicted is not None:
            loss = nc.add(ce, nc.scale(REGULARIZERS[hyper.reg_kind](predicted), hyper.lambda_))
    return ForwardResult(loss, ce, logits, probs, gammas, weights)


def total_loss(seq: FeatureSequence, params: ModelParams, tape: Tape) -> Tuple[Node, Node, Optional[Node]]:
    """L = L_CE + lambda * reg(gamma_2..gamma_T) in eval mode; returns (loss, logits, gammas)."""
    result = forward(seq, params, tape)
    return result.loss, result.logits, result.gammas


def loss_and_grads(seq: FeatureSequence, params: ModelParams, train: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tuple[ForwardResult, Dict[str, Tensor]]:
    tape = Tape()
    result = forward(seq, params, tape, train=train, rng=rng)
    grads = nc.backward(tape, result.loss)
    return result, {name: grads[node.id] for name, node in result.weights.items()}


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_params(dims: ModelDims, seed: int, hyper: Optional[HyperParams] = None,
                pooler: str = "adascan") -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    hyper = hyper or HyperParams(hidden=(dims.h1, dims.h2))
    rng = np.random.default_rng(seed)
    imp_in = 2 * dims.D if hyper.imp_input == "concat" else dims.D
    imp = ImportanceMlp(
        W1=nc.as_tensor(_glorot(rng, dims.h1, imp_in)), b1=nc.as_tensor(np.zeros(dims.h1)),
        W2=nc.as_tensor(_glorot(rng, dims.h2, dims.h1)), b2=nc.as_tensor(np.zeros(dims.h2)),
        W3=nc.as_tensor(_glorot(rng, 1, dims.h2)), b3=nc.as_tensor(np.zeros(1)),
    )
    classifier = Classifier(nc.as_tensor(_glorot(rng, dims.C, dims.D)), nc.as_tensor(np.zeros(dims.C)))
    return ModelParams(imp, classifier, dims, hyper, pooler)


def scanner(params: ModelParams) -> OnlineScanner:
    """Streaming adaptive scan with the model's f_imp and classifier head."""
    if params.pooler != "adascan":
        raise ContractViolation(f"pooler '{params.pooler}' produces no importance scores")

    def bind_importance(tape: Tape) -> ImportanceFn:
        return importance_fn(params.bind(tape), params.hyper.imp_input)

    def bind_head(tape: Tape):
        weights = params.bind(tape)
        return lambda psi: classify(psi, weights)[1]

    return OnlineScanner(bind_importance, bind_head)


# Persistence

def to_document(params: ModelParams) -> ModelDocument:
    return ModelDocument(
        version=params.version,
        pooler=params.pooler,
        dims=params.dims,
        hyper=params.hyper.to_document(),
        weights={name: value.tolist() for name, value in params.arrays().items()},
    )


def from_document(doc: ModelDocument) -> ModelParams:
    missing = [name for name in PARAM_NAMES if name not in doc.weights]
    if missing:
        raise ContractViolation(f"model document lacks weights {missing}")
    hyper = HyperParams.model_validate(doc.hyper)
    arrays = {name: nc.as_tensor(doc.weights[name]) for name in PARAM_NAMES}
    imp = ImportanceMlp(*(arrays[name] for name in PARAM_NAMES[:6]))
    return ModelParams(imp, Classifier(arrays["cls.W"], arrays["cls.b"]), doc.dims, hyper, doc.pooler, doc.version)


def dumps_model(params: ModelParams) -> str:
    # json writes floats with repr, which round-trips every finite double
    return json.dumps(to_document(params).model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def save_model(params: ModelParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_model(params))
    logger.info("saved %s model to %s", params.pooler, path)
    return path


def load_model(path: Union[str, Path]) -> ModelParams:
    """Read a model JSON document; malformed files raise IngestionError."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = ModelDocument.model_validate(json.loads(text))
    except json.JSONDecodeError as e:
        raise IngestionError(str(path), e.lineno, f"invalid JSON: {e.msg}") from e
    except ValidationError as e:
        raise IngestionError(str(path), 1, "; ".join(err["msg"] for err in e.errors())) from e
    try:
        return from_document(doc)
    except (AdaScanError, ValidationError) as e:
        raise IngestionError(str(path), 1, str(e)) from e
