"""Adam with two parameter groups, global-norm clipping, the epoch loop and metrics."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from core.data import Dataset, random_subsample, uniform_subsample
from core.errors import ContractViolation, NumericError
from core.model import CLASSIFIER_GROUP, ModelParams, POOL_GROUP, forward, loss_and_grads, param_group
from core.numcore import Tape, Tensor
from core.pooling import SELECTION_THRESHOLD, FeatureSequence
from models.config_models import HyperParams
from models.record_models import EpochRecord

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def group_learning_rates(hyper: HyperParams, names: Iterable[str]) -> Dict[str, float]:
    rates = {POOL_GROUP: hyper.lr_pool, CLASSIFIER_GROUP: hyper.lr_classifier}
    return {name: rates[param_group(name)] for name in names}


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: AdamState,
              lr_map: Mapping[str, float]) -> Tuple[Dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; batch aborted")
    step = state.step + 1
    m, v, updated = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ContractViolation(f"{name}: gradient {g.shape} / moment {state.m[name].shape} "
                                    f"do not match parameter {p.shape}")
        m[name] = BETA1 * state.m[name] + (1.0 - BETA1) * g
        v[name] = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
        m_hat = m[name] / (1.0 - BETA1 ** step)
        v_hat = v[name] / (1.0 - BETA2 ** step)
        updated[name] = p - lr_map[name] * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return updated, AdamState(m, v, step)


def global_norm(grads: Mapping[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, Tensor], clip_norm: float) -> Dict[str, Tensor]:
    """Rescale so the global l2 norm is at most clip_norm."""
    if not clip_norm > 0:
        raise ContractViolation("clip_norm must be positive")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return dict(grads)
    logger.debug("clipping gradient norm %.4g to %.4g", norm, clip_norm)
    factor = clip_norm / norm
    return {name: g * factor for name, g in grads.items()}


class SampleScore(NamedTuple):
    seq: FeatureSequence
    pred: int
    probs: Tensor
    loss: float
    gammas: Optional[Tensor]
    # (subsampled sequence, gammas) per test view when predictions are averaged
    views: Tuple[Tuple[FeatureSequence, Tensor], ...] = ()

    def importance_views(self) -> Tuple[Tuple[FeatureSequence, Tensor], ...]:
        if self.views:
            return self.views
        return () if self.gammas is None else ((self.seq, self.gammas),)


@dataclass
class Metrics:
    accuracy: float
    mean_selected_fraction: float
    signal_gap: Optional[float]
    per_class_accuracy: List[float]
    mean_loss: float
    top_gamma_on_signal: Optional[float] = None
    count: int = 0

    def to_record(self, epoch: int, split: str) -> EpochRecord:
        return EpochRecord(epoch=epoch, split=split, accuracy=self.accuracy,
                           mean_selected_fraction=self.mean_selected_fraction,
                           signal_gap=self.signal_gap, mean_loss=self.mean_loss)

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_selected_fraction": self.mean_selected_fraction,
            "signal_gap": self.signal_gap,
            "top_gamma_on_signal": self.top_gamma_on_signal,
            "per_class_accuracy": self.per_class_accuracy,
            "mean_loss": self.mean_loss,
            "count": self.count,
        }


def _map(fn, items: Sequence, workers: int) -> List:
    if workers <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def score(seq: FeatureSequence, params: ModelParams,
          constant_importance: Optional[float] = None) -> SampleScore:
    """Eval-mode forward pass of one sequence; the single path behind evaluate, trace and serving."""
    try:
        result = forward(seq, params, Tape(), constant_importance=constant_importance)
    except NumericError as e:
        if e.sample_id is not None:
            raise
        raise NumericError(str(e), sample_id=seq.id or None) from e
    return SampleScore(seq, result.pred, result.probs.value.copy(), result.loss.item(), result.gamma_values())


def score_views(seq: FeatureSequence, params: ModelParams, frames: int, views: int,
                rng: np.random.Generator, constant_importance: Optional[float] = None) -> SampleScore:
    """Mean prediction over ``views`` random temporal samples of ``frames`` frames each."""
    if views < 1:
        raise ContractViolation("need at least one test view")
    scored = [score(random_subsample(seq, frames, rng), params, constant_importance) for _ in range(views)]
    probs = np.mean([s.probs for s in scored], axis=0)
    gammas = tuple((s.seq, s.gammas) for s in scored if s.gammas is not None)
    loss = -math.log(max(float(probs[seq.label]), np.finfo(np.float64).tiny))
    return SampleScore(seq, int(np.argmax(probs)), probs, loss, None, gammas)


def summarize(scores: Sequence[SampleScore], num_classes: int) -> Metrics:
    n = len(scores)
    if n == 0:
        return Metrics(0.0, 0.0, None, [0.0] * num_classes, 0.0, None, 0)
    correct = [s.pred == s.seq.label for s in scores]
    per_class = []
    for c in range(num_classes):
        hits = [ok for ok, s in zip(correct, scores) if s.seq.label == c]
        per_class.append(sum(hits) / len(hits) if hits else 0.0)

    fractions, signal, distractor, top_hits = [], [], [], []
    for s in scores:
        views = s.importance_views()
        if not views:
            # uniform weighting: every frame counts fully
            fractions.append(1.0)
            continue
        fractions.append(float(np.mean([np.mean(g > SELECTION_THRESHOLD) for _, g in views])))
        for seq, gammas in views:
            if seq.signal_mask is None or seq.T < 2:
                continue
            # gamma_1 is fixed at 1, so only predicted scores enter the gap
            predicted = gammas[1:]
            mask = np.array(seq.signal_mask[1:], dtype=bool)
            signal.extend(predicted[mask].tolist())
            distractor.extend(predicted[~mask].tolist())
            if mask.any():
                top_hits.append(bool(mask[int(np.argmax(predicted))]))

    gap = float(np.mean(signal) - np.mean(distractor)) if signal and distractor else None
    return Metrics(
        accuracy=sum(correct) / n,
        mean_selected_fraction=float(np.mean(fractions)),
        signal_gap=gap,
        per_class_accuracy=per_class,
        mean_loss=float(np.mean([s.loss for s in scores])),
        top_gamma_on_signal=float(np.mean(top_hits)) if top_hits else None,
        count=n,
    )


def evaluate(dataset: Dataset, params: ModelParams, constant_importance: Optional[float] = None,
             workers: int = 1, test_views: Optional[int] = None, frames: Optional[int] = None,
             view_seed: int = 0) -> Metrics:
    """Eval-mode metrics (no dropout).

    With ``test_views`` each prediction is the mean of that many random
    ``frames``-frame samples of the sequence, drawn from a generator seeded by
    ``view_seed`` and the sample position.
    """
    if len(dataset) and dataset.D != params.dims.D:
        raise ContractViolation(f"dataset has D={dataset.D}, model expects {params.dims.D}")
    if test_views is None:
        scores = _map(lambda seq: score(seq, params, constant_importance), dataset.samples, workers)
    else:
        if frames is None:
            raise ContractViolation("averaging test views needs a frame count")

        def one(item):
            position, seq = item
            rng = np.random.default_rng([view_seed, position])
            return score_views(seq, params, frames, test_views, rng, constant_importance)

        scores = _map(one, list(enumerate(dataset.samples)), workers)
    return summarize(scores, params.dims.C)


def _sample_rng(seed: int, epoch: int, position: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, position])


def batch_gradient(params: ModelParams, batch: Sequence[Tuple[FeatureSequence, np.random.Generator]],
                   workers: int = 1) -> Tuple[float, Dict[str, Tensor]]:
    """Mean loss and mean gradient over a batch, summed in batch order."""

    def one(item):
        seq, rng = item
        try:
            result, grads = loss_and_grads(seq, params, train=True, rng=rng)
        except NumericError as e:
            raise NumericError(str(e), sample_id=seq.id) from e
        loss = result.loss.item()
        if not math.isfinite(loss):
            raise NumericError("non-finite loss", sample_id=seq.id)
        return loss, grads

    results = _map(one, batch, workers)
    total = {name: np.zeros_like(p) for name, p in params.arrays().items()}
    for _, grads in results:
        for name in total:
            total[name] = total[name] + grads[name]
    n = float(len(results))
    return sum(loss for loss, _ in results) / n, {name: g / n for name, g in total.items()}


EpochCallback = Callable[[int, ModelParams, List[EpochRecord]], None]


def train(dataset: Dataset, params: ModelParams, hyper: Optional[HyperParams] = None,
          rng_seed: Optional[int] = None, test: Optional[Dataset] = None,
          subsample: Optional[int] = None, workers: int = 1,
          on_epoch: Optional[EpochCallback] = None) -> Tuple[ModelParams, List[EpochRecord]]:
    """Seeded epoch loop; returns final params and the per-epoch metrics log.

    Epoch 0 records the metrics of the initial parameters. ``subsample``
    draws that many frames per training sequence at random each time it is
    visited; metrics are then taken on uniformly subsampled views of both splits.
    """
    if len(dataset) == 0:
        raise ContractViolation("cannot train on an empty dataset")
    if hyper is not None:
        params = params.with_hyper(hyper)
    hyper = params.hyper
    seed = hyper.seed if rng_seed is None else rng_seed
    # init_params draws from default_rng(seed); shuffling uses a child stream
    order_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    lr_map = group_learning_rates(hyper, params.arrays())
    state = AdamState.zeros(params.arrays())
    log: List[EpochRecord] = []
    eval_train, eval_test = dataset, test
    if subsample is not None:
        eval_train = dataset.map(lambda s: uniform_subsample(s, subsample))
        if test is not None:
            eval_test = test.map(lambda s: uniform_subsample(s, subsample))

    def record(epoch: int):
        rows = [evaluate(eval_train, params, workers=workers).to_record(epoch, "train")]
        if eval_test is not None and len(eval_test):
            rows.append(evaluate(eval_test, params, workers=workers).to_record(epoch, "test"))
        for row in rows:
            logger.info("epoch %d %s: accuracy=%.4f selected=%.3f gap=%s loss=%.4f", epoch, row.split,
                        row.accuracy, row.mean_selected_fraction,
                        "n/a" if row.signal_gap is None else f"{row.signal_gap:.3f}", row.mean_loss)
        log.extend(rows)
        if on_epoch is not None:
            on_epoch(epoch, params, rows)

    record(0)
    for epoch in range(1, hyper.epochs + 1):
        order = order_rng.permutation(len(dataset))
        for start in range(0, len(order), hyper.batch_size):
            batch = []
            for position in order[start:start + hyper.batch_size]:
                rng = _sample_rng(seed, epoch, int(position))
                seq = dataset.samples[position]
                if subsample is not None:
                    seq = random_subsample(seq, subsample, rng)
                batch.append((seq, rng))
            _, grads = batch_gradient(params, batch, workers)
            grads = clip_gradients(grads, hyper.clip_norm)
            arrays, state = adam_step(params.arrays(), grads, state, lr_map)
            params = params.with_arrays(arrays)
        record(epoch)
    return params, log
