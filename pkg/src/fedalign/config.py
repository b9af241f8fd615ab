"""JSON experiment configuration with full defaulting.

Every key is optional. Unknown keys are rejected so typos surface as
configuration errors instead of silently running the default.

Schema (defaults shown)::

    {
      "seed": 0,
      "out_dir": "out",
      "threads": 1,
      "baseline": "feda",                 # or "fedavg"
      "data": {"num_domains": 4, "num_classes": 2, "samples_per_domain": 500,
               "input_dim": 2, "class_radius": 2.0, "rotation_gap": 0.7853981633974483,
               "noise_std": 0.3, "target_index": 0, "val_fraction": 0.1,
               "domains": null,           # optional list of {rotation, scale, shift, noise_std}
               "csv_paths": null},        # optional list of per-domain embedding CSVs
      "model": {"hidden_dims": [32], "latent_dim": 8},
      "fed": {"rounds": 100, "comm_every": 5, "local_batch": 64, "lambda_l2": 0.01,
              "lambda_cmi": 0.001, "lambda_fea": 0.1, "target_batch": 256,
              "learning_rate": 0.01, "momentum": 0.9, "weight_decay": 1e-5, "ema_alpha": 0.9},
      "al": {"cycles": 5, "budget": null, "budget_fraction": 0.02,
             "initial_fraction": 0.02, "selector": "fedalv"},
      "emd": {"num_seeds": 10, "selectors": ["fedalv", "coreset", "random"]}
    }
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

from .al import AlConfig, SelectorKind
from .datagen import (
    DatasetConfig,
    DomainSpec,
    FederationSplit,
    load_csv_embeddings,
    make_federation,
    rotated_domain_specs,
    STREAM_SPLIT,
    split_validation,
)
from .fed import FedConfig
from .model import LossLambdas, ModelConfig
from .numcore import make_rng


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "out_dir": "out",
    "threads": 1,
    "baseline": "feda",
    "data": {
        "num_domains": 4,
        "num_classes": 2,
        "samples_per_domain": 500,
        "input_dim": 2,
        "class_radius": 2.0,
        "rotation_gap": math.pi / 4,
        "noise_std": 0.3,
        "target_index": 0,
        "val_fraction": 0.1,
        "domains": None,
        "csv_paths": None,
    },
    "model": {"hidden_dims": [32], "latent_dim": 8},
    "fed": {
        "rounds": 100,
        "comm_every": 5,
        "local_batch": 64,
        "lambda_l2": 0.01,
        "lambda_cmi": 0.001,
        "lambda_fea": 0.1,
        "target_batch": 256,
        "learning_rate": 0.01,
        "momentum": 0.9,
        "weight_decay": 1e-5,
        "ema_alpha": 0.9,
    },
    "al": {
        "cycles": 5,
        "budget": None,
        "budget_fraction": 0.02,
        "initial_fraction": 0.02,
        "selector": "fedalv",
    },
    "emd": {"num_seeds": 10, "selectors": ["fedalv", "coreset", "random"]},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def resolve(overrides: dict | None = None) -> dict:
    cfg = _merge(DEFAULTS, overrides or {})
    try:
        build_dataset_config(cfg)
        build_fed_config(cfg)
        build_model_config(cfg, cfg["data"]["input_dim"], cfg["data"]["num_classes"])
        SelectorKind(cfg["al"]["selector"])
        for s in cfg["emd"]["selectors"]:
            SelectorKind(s)
        if int(cfg["threads"]) < 1:
            raise ValueError("threads must be >= 1")
        if not 0 <= int(cfg["data"]["target_index"]) < int(cfg["data"]["num_domains"]):
            raise ValueError("data.target_index out of range")
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve(raw)


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def build_dataset_config(cfg: dict) -> DatasetConfig:
    d = cfg["data"]
    return DatasetConfig(
        int(d["num_domains"]), int(d["num_classes"]), int(d["samples_per_domain"]),
        int(d["input_dim"]), float(d["class_radius"]), int(cfg["seed"]),
    )


def build_domain_specs(cfg: dict) -> list[DomainSpec]:
    d = cfg["data"]
    if d["domains"]:
        specs = [DomainSpec(float(s.get("rotation", 0.0)), float(s.get("scale", 1.0)),
                            tuple(s.get("shift", ())), float(s.get("noise_std", d["noise_std"])))
                 for s in d["domains"]]
        if len(specs) != int(d["num_domains"]):
            raise ConfigError(f"data.domains lists {len(specs)} domains, expected {d['num_domains']}")
        return specs
    return rotated_domain_specs(int(d["num_domains"]), float(d["rotation_gap"]), float(d["noise_std"]))


def build_fed_config(cfg: dict) -> FedConfig:
    f = cfg["fed"]
    fc = FedConfig(
        rounds=int(f["rounds"]), comm_every=int(f["comm_every"]), local_batch=int(f["local_batch"]),
        lambdas=LossLambdas(float(f["lambda_l2"]), float(f["lambda_cmi"])),
        lambda_fea=float(f["lambda_fea"]), target_batch=int(f["target_batch"]),
        learning_rate=float(f["learning_rate"]), momentum=float(f["momentum"]),
        weight_decay=float(f["weight_decay"]), ema_alpha=float(f["ema_alpha"]),
        baseline=cfg["baseline"], seed=int(cfg["seed"]),
    )
    return fc.as_fedavg() if fc.baseline == "fedavg" else fc


def build_model_config(cfg: dict, input_dim: int, num_classes: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(int(input_dim), tuple(m["hidden_dims"]), int(m["latent_dim"]), int(num_classes))


def build_federation(cfg: dict, target_index: int | None = None) -> FederationSplit:
    d = cfg["data"]
    t = int(d["target_index"] if target_index is None else target_index)
    if d["csv_paths"]:
        return _federation_from_csv(cfg, t)
    return make_federation(build_dataset_config(cfg), build_domain_specs(cfg), t,
                           float(d["val_fraction"]))


def _federation_from_csv(cfg: dict, target_index: int) -> FederationSplit:
    d = cfg["data"]
    paths = d["csv_paths"]
    if not 0 <= target_index < len(paths):
        raise ConfigError(f"target_index {target_index} out of range for {len(paths)} CSV domains")
    domains = [load_csv_embeddings(p) for p in paths]
    if len({ds.features.shape[1] for ds in domains}) != 1:
        raise ConfigError("CSV domains have differing feature widths")
    sources, validation = [], []
    for k, ds in enumerate(domains):
        ds.domain = k
        if k == target_index:
            continue
        train, val = split_validation(ds, float(d["val_fraction"]), make_rng(int(cfg["seed"]), STREAM_SPLIT, k))
        sources.append(train)
        validation.append(val)
    target = domains[target_index]
    target.labeled_mask[:] = False
    return FederationSplit(sources, target, target_index, validation)


def build_al_config(cfg: dict, federation: FederationSplit, selector: str | None = None) -> AlConfig:
    a = cfg["al"]
    budget = a["budget"]
    if budget is None:
        budget = int(round(float(a["budget_fraction"]) * sum(len(s) for s in federation.sources)))
    return AlConfig(int(a["cycles"]), int(budget), float(a["initial_fraction"]),
                    SelectorKind(selector or a["selector"]))
