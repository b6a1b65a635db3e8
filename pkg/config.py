"""
Run Configuration
Built-in defaults, YAML/JSON config files, .env loading and CLI/env overrides for
the pipeline and the debiasing proxy.
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from dataset import DEFAULT_CALIBRATION_FRACTION, VARIANTS, SyntheticSpec
from errors import ConfigError
from nnet import ACTIVATIONS, OUTPUT_MODES, TrainConfig
from oracle_client import NORMALIZE_POLICIES

logger = logging.getLogger(__name__)

DEPLOYED_MODES = ("vanilla", "multitask")

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "split_fraction": DEFAULT_CALIBRATION_FRACTION,
    "bias_attrs": [],
    "paths": {"out": "runs/default"},
    "data": {
        "variant": "binary_bias",
        "n": 12000,
        "alpha": 0.05,
        "feature_dim": 16,
        "num_classes": 2,
        # weak target channel, strong bias channel: the deployed model learns the shortcut
        "target_signal": 0.5,
        "bias_signal": 1.5,
        "noise_std": 0.5,
        "test_per_cell": 250,
    },
    "deployed": {
        "mode": "vanilla",
        "hidden": [32],
        "activation": "relu",
        "output_mode": "softmax",
        "train": {"loss": "hard_label_ce", "epochs": 200, "learning_rate": 1e-3, "batch_size": 64},
    },
    "patch": {
        "hidden": None,
        "activation": "relu",
        "contrast": "multi",
        "scale": None,
        "anchor": None,
        "train": {"loss": "soft_target_kl", "epochs": 200, "learning_rate": 1e-3, "batch_size": 64},
    },
    "oracle": {
        "target": None,
        "timeout_ms": 5000,
        "retries": 3,
        "max_in_flight": 8,
        "normalize_policy": "strict",
        "cache": False,
    },
    "proxy": {
        "listen": "127.0.0.1:8080",
        "upstream_url": None,
        "upstream_model": None,
        "patches": [],
        "normalize_policy": "strict",
        "timeout_ms": 5000,
        "max_in_flight": 64,
        "shutdown_timeout_s": 10,
    },
}


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass
class RunConfig:
    """Merged configuration with typed accessors"""

    raw: Dict[str, Any]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def split_fraction(self) -> float:
        return float(self.raw["split_fraction"])

    @property
    def out_dir(self) -> str:
        return self.raw["paths"]["out"]

    @property
    def data(self) -> Dict[str, Any]:
        return self.raw["data"]

    @property
    def deployed(self) -> Dict[str, Any]:
        return self.raw["deployed"]

    @property
    def patch(self) -> Dict[str, Any]:
        return self.raw["patch"]

    @property
    def oracle(self) -> Dict[str, Any]:
        return self.raw["oracle"]

    @property
    def proxy(self) -> Dict[str, Any]:
        return self.raw["proxy"]

    @property
    def bias_attrs(self) -> List[str]:
        return list(self.raw.get("bias_attrs") or [])

    def synthetic_spec(self) -> SyntheticSpec:
        data = self.data
        return SyntheticSpec(
            variant=data["variant"],
            n=int(data["n"]),
            alpha=float(data["alpha"]),
            feature_dim=int(data["feature_dim"]),
            target_signal=float(data["target_signal"]),
            bias_signal=float(data["bias_signal"]),
            noise_std=float(data["noise_std"]),
            seed=self.seed,
            num_classes=int(data["num_classes"]),
        )

    def train_config(self, section: str) -> TrainConfig:
        """TrainConfig for 'deployed' or 'patch'; the run seed applies unless the section sets one."""
        raw = dict(self.raw[section].get("train") or {})
        raw.setdefault("seed", self.seed)
        if section == "deployed" and self.deployed.get("mode") == "multitask":
            raw["loss"] = "multitask_ce"
        return TrainConfig.from_dict(raw)

    def validate(self) -> List[str]:
        """Collect every configuration problem"""
        errors = []
        if not isinstance(self.raw.get("seed"), int) or self.raw["seed"] < 0:
            errors.append("seed must be a non-negative integer")
        try:
            if not 0 < self.split_fraction < 1:
                errors.append("split_fraction must lie in (0, 1)")
        except (TypeError, ValueError):
            errors.append("split_fraction must be a number")
        if not self.out_dir:
            errors.append("Missing paths.out")

        if self.data.get("variant") not in VARIANTS:
            errors.append(f"data.variant must be one of {VARIANTS}")
        if self.deployed.get("mode") not in DEPLOYED_MODES:
            errors.append(f"deployed.mode must be one of {DEPLOYED_MODES}")
        for section in ("deployed", "patch"):
            if self.raw[section].get("activation") not in ACTIVATIONS:
                errors.append(f"{section}.activation must be one of {ACTIVATIONS}")
            hidden = self.raw[section].get("hidden")
            if hidden is not None and (not isinstance(hidden, list) or any(not isinstance(h, int) or h <= 0 for h in hidden)):
                errors.append(f"{section}.hidden must be a list of positive integers")
            try:
                errors.extend(f"{section}.train: {e}" for e in self.train_config(section).validate())
            except (ConfigError, TypeError) as e:
                errors.append(f"{section}.train: {e}")
        if self.deployed.get("output_mode") not in OUTPUT_MODES:
            errors.append(f"deployed.output_mode must be one of {OUTPUT_MODES}")
        if self.patch.get("contrast") not in ("multi", "single"):
            errors.append("patch.contrast must be 'multi' or 'single'")
        scale = self.patch.get("scale")
        if scale is not None and not (isinstance(scale, (int, float)) and scale > 0):
            errors.append("patch.scale must be a positive number")
        if self.patch.get("anchor") not in (None, "example", "cell"):
            errors.append("patch.anchor must be null, 'example' or 'cell'")
        if self.oracle.get("normalize_policy") not in NORMALIZE_POLICIES:
            errors.append(f"oracle.normalize_policy must be one of {NORMALIZE_POLICIES}")
        if not self.oracle.get("timeout_ms") or self.oracle["timeout_ms"] <= 0:
            errors.append("oracle.timeout_ms must be positive")
        if not isinstance(self.raw.get("bias_attrs"), list):
            errors.append("bias_attrs must be a list")
        return errors


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load a YAML or JSON config over the defaults, then apply overrides.

    Raises:
        ConfigError: unreadable file or any validation problem
    """
    load_dotenv()
    raw: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}", path=path)
        except yaml.YAMLError as e:
            raise ConfigError(f"Config {path} is not valid YAML/JSON: {e}", path=path)
        if not isinstance(raw, dict):
            raise ConfigError("Config must be a mapping at the top level.", path=path)

    config = RunConfig(raw=deep_merge(deep_merge(DEFAULTS, raw), overrides or {}))
    errors = config.validate()
    if errors:
        error_msg = "Configuration errors:\n" + "\n".join(f"  - {e}" for e in errors)
        logger.error(error_msg)
        raise ConfigError(error_msg, problems=errors)

    logger.info(f"Configuration loaded from {path or 'defaults'}")
    return config


# --- Proxy ---
@dataclass
class ProxyConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    upstream_url: Optional[str] = None
    upstream_model: Optional[str] = None
    patches: List[str] = field(default_factory=list)
    normalize_policy: str = "strict"
    timeout_ms: int = 5000
    max_in_flight: int = 64
    shutdown_timeout_s: int = 10
    k: Optional[int] = None

    def validate(self) -> List[str]:
        errors = []
        if not self.upstream_url and not self.upstream_model:
            errors.append("No upstream oracle configured (set UPSTREAM_URL or proxy.upstream_model)")
        if not self.patches:
            errors.append("At least one patch model is required")
        if self.normalize_policy not in NORMALIZE_POLICIES:
            errors.append(f"normalize_policy must be one of {NORMALIZE_POLICIES}")
        if self.timeout_ms <= 0:
            errors.append("timeout_ms must be positive")
        if self.max_in_flight < 1:
            errors.append("max_in_flight must be at least 1")
        if not 0 < self.port < 65536:
            errors.append(f"port {self.port} is out of range")
        return errors

    @classmethod
    def from_sources(cls, section: Optional[Dict[str, Any]] = None) -> "ProxyConfig":
        """Build from a config 'proxy' section; LISTEN_ADDR and UPSTREAM_URL take precedence."""
        load_dotenv()
        section = deep_merge(DEFAULTS["proxy"], section or {})
        listen = os.environ.get("LISTEN_ADDR") or section["listen"]
        upstream = os.environ.get("UPSTREAM_URL") or section.get("upstream_url")
        host, port = parse_listen(listen)
        return cls(
            host=host,
            port=port,
            upstream_url=upstream,
            upstream_model=section.get("upstream_model"),
            patches=list(section.get("patches") or []),
            normalize_policy=section["normalize_policy"],
            timeout_ms=int(section["timeout_ms"]),
            max_in_flight=int(section["max_in_flight"]),
            shutdown_timeout_s=int(section["shutdown_timeout_s"]),
            k=section.get("k"),
        )


def parse_listen(listen: str) -> tuple:
    host, sep, port = str(listen).rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"Listen address must be host:port, got '{listen}'")
    return host or "0.0.0.0", int(port)
