"""
Eraser Pipeline CLI
End-to-end workflows: generate data, train the deployed model, distill bias rules
into patch models, evaluate before/after erasing, apply the eraser to new inputs and
serve the debiasing proxy.

Usage:
    python pipeline.py run-all --config config.yaml --out runs/demo
    python pipeline.py evaluate --out runs/demo --bias-attr bias
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

import nnet
from config import ProxyConfig, RunConfig, load_config
from dataset import Dataset, generate, generate_balanced, load_csv, load_features_csv, save_csv, split_calibration
from distill import PatchArch, build_contrast_indices, distill_targets, resolve_anchor, train_patch
from errors import EraserError, IoError, ModelLoadError, ShapeError
from metrics import PredictionSet, compare, evaluate as evaluate_predictions
from oracle_client import OracleHandle, make_oracle
from prob_core import erase_multi_rows

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False) -> logging.Logger:
    """Console logging plus logs/eraser.log when the directory is writable"""
    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    try:
        if not os.path.exists('logs'):
            os.makedirs('logs')
        handlers.append(logging.FileHandler('logs/eraser.log', encoding='utf-8'))
    except OSError:
        pass  # console only

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=log_format,
        handlers=handlers,
        force=True,
    )
    return logging.getLogger(__name__)


# --- Artifact Layout ---
class RunPaths:
    def __init__(self, out: str):
        self.out = out
        self.data_dir = os.path.join(out, "data")
        self.models_dir = os.path.join(out, "models")
        self.distill_dir = os.path.join(out, "distill")

    def ensure(self) -> None:
        for d in (self.out, self.data_dir, self.models_dir, self.distill_dir):
            os.makedirs(d, exist_ok=True)

    def data(self, name: str) -> str:
        return os.path.join(self.data_dir, f"{name}.csv")

    @property
    def deployed_model(self) -> str:
        return os.path.join(self.models_dir, "deployed.json")

    def patch_model(self, attr: str) -> str:
        return os.path.join(self.models_dir, f"patch_{attr}.json")

    def targets(self, attr: str) -> str:
        return os.path.join(self.distill_dir, f"targets_{attr}.json")

    def report(self, stage: str, ext: str = "json") -> str:
        return os.path.join(self.out, f"report_{stage}.{ext}")

    @property
    def erased(self) -> str:
        return os.path.join(self.out, "erased.csv")


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_report(paths: RunPaths, stage: str, doc: Dict[str, Any], table: Optional[str] = None) -> str:
    path = paths.report(stage)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    if table is not None:
        with open(paths.report(stage, "txt"), "w", encoding="utf-8") as f:
            f.write(table + "\n")
    logger.info(f"✓ Report written to {path}")
    return path


def _bias_attrs(config: RunConfig, data: Dataset) -> List[str]:
    attrs = config.bias_attrs or data.schema.bias_names
    for attr in attrs:
        data.schema.bias_position(attr)
    return attrs


def _oracle(config: RunConfig, paths: RunPaths, k: int) -> OracleHandle:
    section = config.oracle
    return make_oracle(
        section.get("target") or paths.deployed_model,
        k=k,
        timeout_ms=section["timeout_ms"],
        retries=section["retries"],
        normalize_policy=section["normalize_policy"],
        max_in_flight=section["max_in_flight"],
        cache=bool(section.get("cache")),
    )


def _patch_paths(config: RunConfig, paths: RunPaths) -> List[Tuple[str, str]]:
    """(attr, path) pairs: explicit --bias-attr patches must exist, otherwise every patch on disk."""
    if config.bias_attrs:
        pairs = [(attr, paths.patch_model(attr)) for attr in config.bias_attrs]
    elif os.path.isdir(paths.models_dir):
        pairs = [(f[len("patch_"):-len(".json")], os.path.join(paths.models_dir, f))
                 for f in sorted(os.listdir(paths.models_dir)) if f.startswith("patch_") and f.endswith(".json")]
    else:
        pairs = []
    for attr, path in pairs:
        if not os.path.exists(path):
            raise ModelLoadError(f"No patch model for '{attr}' at {path}; run the distill stage first", path=path)
    return pairs


def _load_patches(config: RunConfig, paths: RunPaths) -> List[Tuple[str, nnet.MlpModel]]:
    return [(attr, nnet.load_file(path)) for attr, path in _patch_paths(config, paths)]


def apply_eraser(oracle: OracleHandle, patches: List[nnet.MlpModel], X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Raw oracle probabilities and their erased counterparts, row for row."""
    for patch in patches:
        if patch.input_dim != X.shape[1] or patch.num_classes != oracle.k:
            raise ShapeError("Patch model does not match the inputs or the oracle class count")
    raw = oracle.query_array(X)
    return raw, erase_multi_rows(raw, [nnet.predict_proba(p, X) for p in patches])


# --- Stages ---
def gen_data(config: RunConfig) -> Dict[str, Any]:
    paths = RunPaths(config.out_dir)
    paths.ensure()
    spec = config.synthetic_spec()
    full = generate(spec)
    deploy, calibration = split_calibration(full, config.split_fraction, config.seed)
    test = generate_balanced(spec, int(config.data["test_per_cell"]))
    outputs = {"train": full, "deploy_train": deploy, "calibration": calibration, "test": test}
    for name, data in outputs.items():
        save_csv(data, paths.data(name))
    doc = {
        "stage": "gen-data",
        "seed": config.seed,
        "spec": spec.to_dict(),
        "split_fraction": config.split_fraction,
        "datasets": {
            name: {
                "n": len(data),
                "digest": data.digest(),
                "aligned_fraction": {a: data.aligned_fraction(a) for a in data.schema.bias_names},
            }
            for name, data in outputs.items()
        },
    }
    write_report(paths, "gen-data", doc)
    return doc


def train_deployed(config: RunConfig) -> nnet.MlpModel:
    paths = RunPaths(config.out_dir)
    paths.ensure()
    data_path = paths.data("deploy_train")
    data = load_csv(data_path)
    section = config.deployed
    tc = config.train_config("deployed")
    schema = data.schema
    hidden = list(section["hidden"] or [])
    metadata: Dict[str, Any] = {"role": "deployed", "trained_on": data.digest(), "mode": section["mode"]}
    aux_dim = None
    bias_attr = None
    if section["mode"] == "multitask":
        bias_attr = _bias_attrs(config, data)[0]
        aux_dim = schema.cardinality(bias_attr)
        metadata["bias_attr"] = bias_attr

    model = nnet.build_mlp([schema.feature_dim] + hidden + [schema.num_classes],
                           activations=[section["activation"]] * len(hidden),
                           output_mode=section["output_mode"], seed=tc.seed, aux_dim=aux_dim, metadata=metadata)
    history: List[float] = []
    trained = nnet.train(model, data, tc, bias_attr=bias_attr, on_epoch=lambda epoch, loss: history.append(loss))
    nnet.save_file(trained, paths.deployed_model)
    write_report(paths, "train-deployed", {
        "stage": "train-deployed",
        "seed": tc.seed,
        "inputs": {"deploy_train": file_digest(data_path)},
        "model": {"path": paths.deployed_model, "digest": file_digest(paths.deployed_model)},
        "train_config": tc.to_dict(),
        "loss_history": history,
    })
    return trained


def distill(config: RunConfig) -> Dict[str, nnet.MlpModel]:
    paths = RunPaths(config.out_dir)
    paths.ensure()
    cal_path = paths.data("calibration")
    calibration = load_csv(cal_path)
    attrs = _bias_attrs(config, calibration)
    schema = calibration.schema
    oracle = _oracle(config, paths, schema.num_classes)
    indices = build_contrast_indices(calibration, oracle, attrs)

    tc = config.train_config("patch")
    hidden = config.patch.get("hidden")
    if hidden is None:
        hidden = nnet.default_patch_dims(schema.feature_dim, schema.num_classes, config.deployed["hidden"] or [])[1:-1]
    arch = PatchArch(hidden=list(hidden), activation=config.patch["activation"])
    anchor = resolve_anchor(config.patch.get("anchor"), len(attrs))

    patches = {}
    summary = {}
    for attr in attrs:
        targets = distill_targets(calibration, indices[attr], oracle, mode=config.patch["contrast"],
                                  scale=config.patch.get("scale"), seed=config.seed, anchor=anchor)
        targets.save_json(paths.targets(attr))
        patch = train_patch(calibration, targets, tc, arch)
        nnet.save_file(patch, paths.patch_model(attr))
        patches[attr] = patch
        summary[attr] = {
            "targets": {"path": paths.targets(attr), "digest": file_digest(paths.targets(attr))},
            "patch": {"path": paths.patch_model(attr), "digest": file_digest(paths.patch_model(attr))},
        }
    write_report(paths, "distill", {
        "stage": "distill",
        "seed": config.seed,
        "oracle_id": oracle.oracle_id,
        "inputs": {"calibration": file_digest(cal_path)},
        "contrast": config.patch["contrast"],
        "anchor": anchor,
        "patch_arch": {"hidden": arch.hidden, "activation": arch.activation},
        "train_config": tc.to_dict(),
        "patches": summary,
    })
    return patches


def evaluate(config: RunConfig) -> Dict[str, Any]:
    paths = RunPaths(config.out_dir)
    paths.ensure()
    test_path = paths.data("test")
    test = load_csv(test_path)
    oracle = _oracle(config, paths, test.schema.num_classes)
    patches = _load_patches(config, paths)
    raw, fair = apply_eraser(oracle, [p for _, p in patches], test.features)

    meta = {"seed": config.seed, "oracle_id": oracle.oracle_id, "patches": [a for a, _ in patches]}
    before = evaluate_predictions(PredictionSet.from_probs(raw, test), test.schema, metadata=dict(meta, stage="before"))
    after = evaluate_predictions(PredictionSet.from_probs(fair, test), test.schema, metadata=dict(meta, stage="after"))
    delta = compare(before, after)
    doc = {
        "stage": "evaluate",
        "seed": config.seed,
        "inputs": dict({"test": file_digest(test_path)},
                       **{f"patch_{a}": file_digest(paths.patch_model(a)) for a, _ in patches}),
        **delta.to_dict(),
    }
    write_report(paths, "evaluate", doc, delta.format_table())
    logger.info("\n" + delta.format_table())
    return doc


def erase(config: RunConfig, input_path: Optional[str] = None) -> str:
    paths = RunPaths(config.out_dir)
    paths.ensure()
    input_path = input_path or paths.data("test")
    _, X = load_features_csv(input_path)
    patch_files = _patch_paths(config, paths)
    patches = [nnet.load_file(path) for _, path in patch_files]
    k = patches[0].num_classes if patches else nnet.load_file(paths.deployed_model).num_classes
    oracle = _oracle(config, paths, k)
    raw, fair = apply_eraser(oracle, patches, X)

    header = [f"raw_{j}" for j in range(k)] + [f"fair_{j}" for j in range(k)] + ["argmax_raw", "argmax_fair"]
    with open(paths.erased, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for r, q in zip(raw.tolist(), fair.tolist()):
            writer.writerow([repr(v) for v in r] + [repr(v) for v in q] + [int(np.argmax(r)), int(np.argmax(q))])
    write_report(paths, "erase", {
        "stage": "erase",
        "seed": config.seed,
        "oracle_id": oracle.oracle_id,
        "inputs": dict({"features": file_digest(input_path)}, **{f"patch_{a}": file_digest(p) for a, p in patch_files}),
        "rows": int(X.shape[0]),
        "output": paths.erased,
    })
    logger.info(f"✓ Erased {X.shape[0]} rows -> {paths.erased}")
    return paths.erased


def serve(config: RunConfig) -> None:
    import app as proxy_app

    paths = RunPaths(config.out_dir)
    section = dict(config.proxy)
    if not section.get("upstream_url") and not section.get("upstream_model"):
        target = config.oracle.get("target") or paths.deployed_model
        key = "upstream_url" if target.startswith(("http://", "https://")) else "upstream_model"
        section[key] = target
    if not section.get("patches"):
        section["patches"] = [path for _, path in _patch_paths(config, paths)]
    proxy_app.serve(ProxyConfig.from_sources(section))


def run_all(config: RunConfig) -> Dict[str, Any]:
    gen_data(config)
    train_deployed(config)
    distill(config)
    return evaluate(config)


# --- CLI ---
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("--alpha", type=float, help="minority/majority ratio of the synthetic data")
    common.add_argument("--split", type=float, help="calibration fraction (default 1/6)")
    common.add_argument("--bias-attr", action="append", dest="bias_attrs", help="bias attribute to erase (repeatable)")
    common.add_argument("--oracle-url", help="deployed model URL (or model path)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="pipeline", description="Inference-time bias eraser")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("gen-data", parents=[common], help="generate synthetic data and splits")
    sub.add_parser("train-deployed", parents=[common], help="train the deployed model")
    sub.add_parser("distill", parents=[common], help="distill bias rules and train patches")
    sub.add_parser("evaluate", parents=[common], help="metrics before and after erasing")
    erase_cmd = sub.add_parser("erase", parents=[common], help="apply the eraser to a CSV of inputs")
    erase_cmd.add_argument("--input", help="CSV of feature rows (default: the test split)")
    sub.add_parser("serve", parents=[common], help="run the debiasing proxy")
    sub.add_parser("run-all", parents=[common], help="gen-data, train-deployed, distill, evaluate")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.alpha is not None:
        overrides.setdefault("data", {})["alpha"] = args.alpha
    if args.split is not None:
        overrides["split_fraction"] = args.split
    if args.bias_attrs:
        overrides["bias_attrs"] = args.bias_attrs
    if args.oracle_url:
        overrides.setdefault("oracle", {})["target"] = args.oracle_url
    if args.out:
        overrides.setdefault("paths", {})["out"] = args.out
    return overrides


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], Any]] = {
    "gen-data": lambda config, args: gen_data(config),
    "train-deployed": lambda config, args: train_deployed(config),
    "distill": lambda config, args: distill(config),
    "evaluate": lambda config, args: evaluate(config),
    "erase": lambda config, args: erase(config, args.input),
    "serve": lambda config, args: serve(config),
    "run-all": lambda config, args: run_all(config),
}


def _fail(command: str, error: EraserError) -> int:
    logger.error(f"{command} failed: {error.message}")
    print(json.dumps(error.to_dict(), sort_keys=True), file=sys.stderr)
    return 1


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        config = load_config(args.config, overrides_from_args(args))
        COMMANDS[args.command](config, args)
    except EraserError as e:
        return _fail(args.command, e)
    except OSError as e:
        return _fail(args.command, IoError.from_os_error(e))
    except Exception as e:
        logger.exception(f"{args.command} raised an unexpected error")
        return _fail(args.command, EraserError(f"{type(e).__name__}: {e}", exception=type(e).__name__))
    return 0


if __name__ == "__main__":
    sys.exit(main())
