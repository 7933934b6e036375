"""Implementations of the CLI commands; each returns a process exit code."""
import csv
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from core import numcore as nc
from core.data import Dataset, generate_synthetic, load_jsonl, save_jsonl, uniform_subsample
from core.errors import ContractViolation
from core.model import PARAM_BLOCKS, ModelParams, forward, init_params, load_model, save_model
from core.model_manager import trace_record
from core.pooling import FeatureSequence
from core.train import evaluate, score, train
from models.config_models import ModelDims, RunConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_STEP = 1e-5
BAR_WIDTH = 40


class UsageError(ContractViolation):
    """The requested command cannot run with the given flags."""


def _emit(payload: dict):
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")


def load_datasets(cfg: RunConfig) -> Tuple[Dataset, Optional[Dataset]]:
    """(train, test) splits for the configured data source, uniformly subsampled if asked.

    With ``--test-samples`` the sequences stay full length; the views are
    drawn at evaluation time.
    """
    if cfg.synthetic is not None:
        train_set, test_set = generate_synthetic(cfg.synthetic)
    else:
        train_set = load_jsonl(cfg.data)
        test_set = load_jsonl(cfg.test_data, num_classes=train_set.C) if cfg.test_data else None
    if cfg.subsample is not None and cfg.test_samples is None:
        n = cfg.subsample
        if cfg.subsample_mode == "uniform":
            train_set = train_set.map(lambda s: uniform_subsample(s, n))
        if test_set is not None:
            test_set = test_set.map(lambda s: uniform_subsample(s, n))
    return train_set, test_set


def _eval_split(cfg: RunConfig) -> Dataset:
    train_set, test_set = load_datasets(cfg)
    if cfg.synthetic is not None or test_set is not None:
        return test_set
    return train_set


def _initial_params(cfg: RunConfig, train_set: Dataset, pooler: str, hyper=None) -> ModelParams:
    hyper = hyper or cfg.hyper
    h1, h2 = hyper.hidden
    dims = ModelDims(D=train_set.D, C=train_set.C, h1=h1, h2=h2)
    return init_params(dims, hyper.seed, hyper, pooler)


def cmd_train(cfg: RunConfig) -> int:
    train_set, test_set = load_datasets(cfg)
    params = _initial_params(cfg, train_set, cfg.pooler)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    random_frames = cfg.subsample if cfg.subsample_mode == "random" else None

    with open(metrics_path, "w") as log_file:
        def write_rows(epoch, _params, rows):
            for row in rows:
                log_file.write(row.model_dump_json() + "\n")
            log_file.flush()

        params, log = train(train_set, params, test=test_set, subsample=random_frames,
                            workers=cfg.workers, on_epoch=write_rows)

    model_path = save_model(params, out / "model.json")
    final = [row for row in log if row.epoch == params.hyper.epochs]
    _emit({
        "model": str(model_path),
        "metrics": str(metrics_path),
        "pooler": params.pooler,
        "final": [row.model_dump() for row in final],
    })
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    params = load_model(cfg.model)
    dataset = _eval_split(cfg)
    metrics = evaluate(dataset, params, constant_importance=cfg.constant_importance, workers=cfg.workers,
                       test_views=cfg.test_samples, frames=cfg.subsample, view_seed=cfg.hyper.seed)
    _emit({"model": cfg.model, "pooler": params.pooler, **metrics.summary()})
    return EXIT_OK


def render_bars(seq: FeatureSequence, pred: int, gammas: List[float], width: int = BAR_WIDTH) -> str:
    """One row per frame, bar length proportional to gamma; '*' marks signal frames."""
    lines = [f"{seq.id} label={seq.label} pred={pred}"]
    for t, g in enumerate(gammas):
        signal = "*" if seq.signal_mask is not None and seq.signal_mask[t] else " "
        lines.append(f"{t + 1:4d} {signal} {g:.3f} {'#' * int(round(g * width))}")
    return "\n".join(lines)


def cmd_trace(cfg: RunConfig) -> int:
    params = load_model(cfg.model)
    if params.pooler != "adascan":
        raise UsageError(f"model uses the '{params.pooler}' pooler, which produces no importance scores")
    dataset = _eval_split(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.jsonl"
    with open(trace_path, "w") as f:
        for seq in dataset:
            record = trace_record(score(seq, params))
            f.write(record.model_dump_json(exclude_none=True) + "\n")
            if cfg.bars:
                sys.stdout.write(render_bars(seq, record.pred, record.gammas) + "\n\n")
    logger.info("wrote %d traces to %s", len(dataset), trace_path)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    train_set, test_set = load_datasets(cfg)
    report_on = test_set if test_set is not None else train_set
    random_frames = cfg.subsample if cfg.subsample_mode == "random" else None
    if cfg.pooler != "adascan":
        logger.warning("lambda only affects the adascan pooler; sweeping '%s'", cfg.pooler)
    rows = []
    for lam in sorted(set(cfg.lambda_grid)):
        hyper = cfg.hyper.model_copy(update={"lambda_": lam})
        params = _initial_params(cfg, train_set, cfg.pooler, hyper)
        params, _ = train(train_set, params, subsample=random_frames, workers=cfg.workers)
        metrics = evaluate(report_on, params, workers=cfg.workers)
        logger.info("lambda=%g accuracy=%.4f selected=%.3f", lam, metrics.accuracy,
                    metrics.mean_selected_fraction)
        rows.append((lam, metrics.accuracy, metrics.mean_selected_fraction))

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = out / "sweep.csv"
    with open(report, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["lambda", "accuracy", "mean_selected_fraction"])
        writer.writerows(rows)
    _emit({"report": str(report), "rows": len(rows)})
    return EXIT_OK


@contextmanager
def corrupted_rule(op: Optional[str]):
    """Temporarily replace one local gradient rule by a wrong one."""
    if op is None:
        yield
        return
    if op not in nc.VJP_RULES:
        raise UsageError(f"no gradient rule named '{op}'")
    original = nc.VJP_RULES[op]
    nc.VJP_RULES[op] = lambda g, node: [None if pg is None else 1.5 * pg for pg in original(g, node)]
    try:
        yield
    finally:
        nc.VJP_RULES[op] = original


def gradcheck_instance(cfg: RunConfig) -> Tuple[FeatureSequence, ModelParams]:
    """Seeded D=8, T=5, C=3 instance with hidden sizes (6, 4)."""
    seed = cfg.hyper.seed
    rng = np.random.default_rng(seed)
    hyper = cfg.hyper.model_copy(update={"hidden": (6, 4), "dropout_p": 0.0})
    dims = ModelDims(D=8, C=3, h1=6, h2=4)
    seq = FeatureSequence(rng.normal(size=(5, 8)), int(rng.integers(3)), "gradcheck")
    params = init_params(dims, seed, hyper, cfg.pooler)
    arrays = params.arrays()
    # non-zero biases so bias gradients are exercised away from the initial point
    arrays.update({name: rng.normal(0.0, 0.1, size=value.shape)
                   for name, value in arrays.items() if ".b" in name})
    return seq, params.with_arrays(arrays)


def gradcheck_report(seq: FeatureSequence, params: ModelParams,
                     step: float = GRADCHECK_STEP) -> Dict[str, Tuple[float, str]]:
    """Worst relative error and coordinate for every parameter block."""

    def loss_fn(tape, leaves):
        return forward(seq, params, tape, weights=leaves).loss

    errors = nc.finite_diff_errors(loss_fn, params.arrays(), step)
    report = {}
    for block, names in PARAM_BLOCKS.items():
        name = max(names, key=lambda n: errors[n][0])
        err, coord = errors[name]
        report[block] = (err, f"{name}{list(coord)}")
    return report


def cmd_gradcheck(cfg: RunConfig) -> int:
    seq, params = gradcheck_instance(cfg)
    with corrupted_rule(cfg.corrupt_rule):
        report = gradcheck_report(seq, params)
    failed = []
    for block, (err, worst) in report.items():
        ok = err < GRADCHECK_TOLERANCE
        sys.stdout.write(f"{block:<12} max_rel_err={err:.3e} worst={worst:<16} {'ok' if ok else 'FAIL'}\n")
        if not ok:
            failed.append(block)
    if failed:
        logger.error("gradient check failed for %s", ", ".join(failed))
        return EXIT_FAILURE
    return EXIT_OK


def cmd_gen_data(cfg: RunConfig) -> int:
    train_set, test_set = generate_synthetic(cfg.synthetic)
    out = Path(cfg.out)
    train_path = save_jsonl(train_set, out / "train.jsonl")
    test_path = save_jsonl(test_set, out / "test.jsonl")
    syn = cfg.synthetic
    _emit({
        "C": syn.num_classes, "D": syn.feat_dim, "T": syn.seq_len,
        "train_count": len(train_set), "test_count": len(test_set),
        "train": str(train_path), "test": str(test_path),
    })
    return EXIT_OK


def cmd_serve(cfg: RunConfig) -> int:
    import uvicorn

    from api.app import app
    from core.model_manager import model_manager

    model_manager.load(cfg.model)
    uvicorn.run(app, host=cfg.host, port=cfg.port)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "trace": cmd_trace,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
    "serve": cmd_serve,
}
