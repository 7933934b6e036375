import argparse
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from core.errors import ContractViolation
from core.model_manager import MODEL_PATH_ENV
from models.config_models import POOLERS, SYNTHETIC_PRESETS, HyperParams, RunConfig, SynthConfig

# flag dest -> HyperParams field
HYPER_FLAGS = {
    "lambda_": "lambda",
    "reg": "reg_kind",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr_pool": "lr_pool",
    "lr_classifier": "lr_classifier",
    "clip_norm": "clip_norm",
    "dropout": "dropout_p",
    "hidden": "hidden",
    "seed": "seed",
    "imp_input": "imp_input",
}

# serve settings read from the environment when neither flag nor config file sets them
SERVE_ENV = {"model": MODEL_PATH_ENV, "host": "ADASCAN_HOST", "port": "ADASCAN_PORT"}

RUN_FLAGS = ("pooler", "data", "test_data", "subsample", "subsample_mode", "out", "model",
             "constant_importance", "test_samples", "bars", "corrupt_rule", "host", "port", "workers")


def _hidden(value: str):
    try:
        h1, h2 = (int(v) for v in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated sizes, got '{value}'")
    return h1, h2


def _grid(value: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{value}'")


def _common(parser: argparse.ArgumentParser, data: bool = True):
    parser.add_argument("--config", help="YAML file with defaults for any flag")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--out", help="output directory (default: runs)")
    parser.add_argument("--seed", type=int, help="training / initialization seed")
    if data:
        parser.add_argument("--synthetic", help="preset name (%s), inline JSON or a YAML/JSON file"
                            % ", ".join(SYNTHETIC_PRESETS))
        parser.add_argument("--data", help="JSONL feature file")
        parser.add_argument("--test-data", help="JSONL feature file used as the test split")
        parser.add_argument("--subsample", type=int, help="frames per sequence (uniform sampling)")
        parser.add_argument("--subsample-mode", choices=["uniform", "random"],
                            help="random: fresh random frames per training visit")


def _hyper(parser: argparse.ArgumentParser):
    parser.add_argument("--pooler", choices=POOLERS)
    parser.add_argument("--lambda", dest="lambda_", type=float, help="regularization weight")
    parser.add_argument("--reg", choices=["entropy", "l1", "none"])
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr-pool", type=float)
    parser.add_argument("--lr-classifier", type=float)
    parser.add_argument("--clip-norm", type=float)
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--hidden", type=_hidden, help="h1,h2")
    parser.add_argument("--imp-input", choices=["residual", "concat"])
    parser.add_argument("--workers", type=int, help="threads for per-sample passes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adascan", description="Adaptive scan pooling experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a pooler and write model.json + metrics.jsonl")
    _common(p)
    _hyper(p)

    p = sub.add_parser("eval", help="evaluate a saved model")
    _common(p)
    p.add_argument("--model", help="model JSON")
    p.add_argument("--constant-importance", type=float, help="replace f_imp by a constant score")
    p.add_argument("--test-samples", type=int,
                   help="average predictions over this many random --subsample N frame samples")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("trace", help="write per-frame importance traces")
    _common(p)
    p.add_argument("--model", help="model JSON")
    p.add_argument("--bars", action="store_true", default=None, help="render importance bars")

    p = sub.add_parser("sweep", help="train one model per lambda and report accuracy/sparsity")
    _common(p)
    _hyper(p)
    p.add_argument("--grid", type=_grid, help="comma-separated lambda values")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    _common(p, data=False)
    p.add_argument("--pooler", choices=POOLERS)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--reg", choices=["entropy", "l1", "none"])
    p.add_argument("--imp-input", choices=["residual", "concat"])
    p.add_argument("--corrupt-rule", help=argparse.SUPPRESS)

    p = sub.add_parser("gen-data", help="write synthetic train/test JSONL files")
    _common(p)

    p = sub.add_parser("serve", help="serve a model over HTTP")
    _common(p, data=False)
    p.add_argument("--model", help="model JSON")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    return parser


def resolve_synthetic(value: Union[None, str, Dict[str, Any]]) -> Optional[SynthConfig]:
    """Preset name, inline JSON, YAML/JSON file or mapping -> SynthConfig.

    A mapping may name a ``preset`` whose fields it overrides.
    """
    if value is None or isinstance(value, SynthConfig):
        return value
    if isinstance(value, str):
        if value in SYNTHETIC_PRESETS:
            return SYNTHETIC_PRESETS[value]
        if value.lstrip().startswith("{"):
            try:
                value = json.loads(value)
            except json.JSONDecodeError as e:
                raise ContractViolation(f"--synthetic: invalid JSON ({e.msg})")
        elif Path(value).is_file():
            with open(value, "r") as f:
                value = yaml.safe_load(f) or {}
        else:
            raise ContractViolation(f"unknown synthetic config '{value}' "
                                    f"(presets: {', '.join(SYNTHETIC_PRESETS)})")
    if not isinstance(value, dict):
        raise ContractViolation("synthetic config must be a mapping")
    value = dict(value)
    preset = value.pop("preset", None)
    if preset is not None:
        if preset not in SYNTHETIC_PRESETS:
            raise ContractViolation(f"unknown synthetic preset '{preset}'")
        return SynthConfig(**{**SYNTHETIC_PRESETS[preset].model_dump(), **value})
    return SynthConfig(**value)


def _load_config_file(path: str) -> Dict[str, Any]:
    with open(path, "r") as f:
        loaded = yaml.safe_load(f) or {}
    if not isinstance(loaded, dict):
        raise ContractViolation(f"config file {path} must contain a mapping")
    return {k.replace("-", "_"): v for k, v in loaded.items()}


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge config file values and explicit flags; flags win."""
    values: Dict[str, Any] = _load_config_file(args.config) if getattr(args, "config", None) else {}
    hyper: Dict[str, Any] = dict(values.pop("hyper", None) or {})
    flags = vars(args)

    for dest, field in HYPER_FLAGS.items():
        if flags.get(dest) is not None:
            hyper[field] = flags[dest]
    for name in RUN_FLAGS:
        if flags.get(name) is not None:
            values[name] = flags[name]
    if flags.get("synthetic") is not None:
        values["synthetic"] = flags["synthetic"]
    if flags.get("grid") is not None:
        values["lambda_grid"] = flags["grid"]

    if args.command == "serve":
        for name, env in SERVE_ENV.items():
            if values.get(name) is None and os.environ.get(env):
                values[name] = os.environ[env]

    values["synthetic"] = resolve_synthetic(values.get("synthetic"))
    values["command"] = args.command
    values["hyper"] = HyperParams(**hyper)
    if values["synthetic"] is None:
        values.pop("synthetic")
    return RunConfig(**values)
