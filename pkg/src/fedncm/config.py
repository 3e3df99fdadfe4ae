"""JSON experiment configs: parsing with per-key validation, and serialisation.

A run config is a JSON object with the :class:`ExperimentConfig` fields and
nested ``partition``, ``backbone`` and ``dataset`` blocks. A sweep config has
exactly the keys ``base`` (a run config), ``sweep`` and optionally ``seeds``::

    {"base": {...},
     "sweep": {"axis": "alpha", "values": [100, 0.1, 0.01]},
     "seeds": [0, 1, 2]}

    {"base": {...},
     "sweep": {"axis": "lr_grid", "client_lr": [0.1, 0.01], "server_lr": [1e-3, 1e-4]}}

The partition seed is not configurable: it always equals the run seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from .data import DatasetSpec, PartitionSpec
from .engine import METHODS, SERVER_OPTS, ExperimentConfig
from .errors import ConfigError, FedNCMError
from .model import ACTIVATIONS, BackboneSpec

SWEEP_AXES = ("alpha", "local_epochs", "num_clients", "lr_grid")


@dataclass(frozen=True)
class SweepSpec:
    base: ExperimentConfig
    axis: str
    values: tuple  # for lr_grid: (client_lrs, server_lrs)
    seeds: tuple[int, ...]

    def expand(self) -> list[tuple[str, ExperimentConfig]]:
        """``(label, config)`` for every sweep point, seed not yet applied."""
        out = []
        if self.axis == "lr_grid":
            clrs, slrs = self.values
            for c in clrs:
                for s in slrs:
                    out.append((f"client_lr={c:g}_server_lr={s:g}", replace(self.base, client_lr=c, server_lr=s)))
            return out
        for v in self.values:
            if self.axis == "alpha":
                cfg = replace(self.base, partition=replace(self.base.partition, alpha=v))
            elif self.axis == "num_clients":
                cfg = replace(self.base, partition=replace(self.base.partition, num_clients=v))
            else:
                cfg = replace(self.base, local_epochs=v)
            out.append((f"{self.axis}={v:g}", cfg))
        return out


def _num(key: str, value: Any, kind: type) -> Any:
    if isinstance(value, bool):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if kind is int:
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(key, f"expected a finite number, got {value!r}")
    return float(value)


def _str(key: str, value: Any, choices=None) -> str:
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    if choices is not None and value not in choices:
        raise ConfigError(key, f"must be one of {list(choices)}, got {value!r}")
    return value


def _check(key: str, ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(key, message)


def _reject_unknown(block: dict, allowed, prefix: str) -> None:
    if not isinstance(block, dict):
        raise ConfigError(prefix.rstrip(".") or "config", "expected a JSON object")
    for key in block:
        if key not in allowed:
            raise ConfigError(prefix + key, "unknown key")


def _parse_partition(raw: dict) -> PartitionSpec:
    _reject_unknown(raw, ("num_clients", "alpha"), "partition.")
    out = {}
    if "num_clients" in raw:
        out["num_clients"] = _num("partition.num_clients", raw["num_clients"], int)
        _check("partition.num_clients", out["num_clients"] >= 1, "must be >= 1")
    if "alpha" in raw:
        out["alpha"] = _num("partition.alpha", raw["alpha"], float)
        _check("partition.alpha", out["alpha"] > 0, "must be > 0")
    return PartitionSpec(**out)


def _parse_backbone(raw: dict) -> BackboneSpec:
    _reject_unknown(raw, ("widths", "activation", "init", "init_seed"), "backbone.")
    out = {}
    if "widths" in raw:
        _check("backbone.widths", isinstance(raw["widths"], list), "expected a list of widths")
        out["widths"] = tuple(_num("backbone.widths", w, int) for w in raw["widths"])
        _check("backbone.widths", all(w >= 1 for w in out["widths"]), "widths must be >= 1")
    if "activation" in raw:
        out["activation"] = _str("backbone.activation", raw["activation"], ACTIVATIONS)
    if "init" in raw:
        out["init"] = _str("backbone.init", raw["init"])
    if "init_seed" in raw:
        out["init_seed"] = _num("backbone.init_seed", raw["init_seed"], int)
        _check("backbone.init_seed", out["init_seed"] >= 0, "must be >= 0")
    return BackboneSpec(**out)


_DATASET_INTS = ("num_classes", "dim", "per_class", "test_per_class", "seed")


def _parse_dataset(raw: dict) -> DatasetSpec:
    _reject_unknown(raw, [f.name for f in fields(DatasetSpec)], "dataset.")
    out = {}
    if "kind" in raw:
        out["kind"] = _str("dataset.kind", raw["kind"], ("synthetic", "embeddings"))
    for key in _DATASET_INTS:
        if key in raw:
            out[key] = _num(f"dataset.{key}", raw[key], int)
    for key in ("class_sep", "noise_sigma"):
        if key in raw:
            out[key] = _num(f"dataset.{key}", raw[key], float)
            _check(f"dataset.{key}", out[key] >= 0, "must be >= 0")
    for key in ("train", "test"):
        if raw.get(key) is not None:
            out[key] = _str(f"dataset.{key}", raw[key])
    _check("dataset.num_classes", out.get("num_classes", 2) >= 2, "must be >= 2")
    _check("dataset.dim", out.get("dim", 2) >= 2, "must be >= 2")
    _check("dataset.per_class", out.get("per_class", 1) >= 1, "must be >= 1")
    _check("dataset.test_per_class", out.get("test_per_class", 1) >= 1, "must be >= 1")
    _check("dataset.seed", out.get("seed", 0) >= 0, "must be >= 0")
    if out.get("kind") == "embeddings":
        _check("dataset.train", "train" in out, "required for embeddings datasets")
        _check("dataset.test", "test" in out, "required for embeddings datasets")
    return DatasetSpec(**out)


_RUN_KEYS = (
    "name", "method", "server_opt", "rounds", "local_epochs", "batch_size", "participation",
    "client_lr", "server_lr", "adam_betas", "adam_eps", "seed", "partition", "backbone", "dataset",
)


def config_from_dict(raw: dict) -> ExperimentConfig:
    _reject_unknown(raw, _RUN_KEYS, "")
    _check("dataset", "dataset" in raw, "required key missing")
    out: dict[str, Any] = {}
    if "name" in raw:
        out["name"] = _str("name", raw["name"])
        _check("name", out["name"] != "" and "/" not in out["name"], "must be a non-empty file-name-safe string")
    if "method" in raw:
        out["method"] = _str("method", raw["method"], METHODS)
    if "server_opt" in raw:
        out["server_opt"] = _str("server_opt", raw["server_opt"], SERVER_OPTS)
    for key, low in (("rounds", 0), ("local_epochs", 1), ("batch_size", 1), ("seed", 0)):
        if key in raw:
            out[key] = _num(key, raw[key], int)
            _check(key, out[key] >= low, f"must be >= {low}")
    if "participation" in raw:
        out["participation"] = _num("participation", raw["participation"], float)
        _check("participation", 0 < out["participation"] <= 1, "must lie in (0, 1]")
    for key in ("client_lr", "server_lr"):
        if key in raw:
            out[key] = _num(key, raw[key], float)
            _check(key, out[key] >= 0, "must be >= 0")
    if "adam_betas" in raw:
        betas = raw["adam_betas"]
        _check("adam_betas", isinstance(betas, list) and len(betas) == 2, "expected [beta1, beta2]")
        out["adam_betas"] = tuple(_num("adam_betas", b, float) for b in betas)
        _check("adam_betas", all(0 <= b < 1 for b in out["adam_betas"]), "betas must lie in [0, 1)")
    if "adam_eps" in raw:
        out["adam_eps"] = _num("adam_eps", raw["adam_eps"], float)
        _check("adam_eps", out["adam_eps"] > 0, "must be > 0")
    if "partition" in raw:
        out["partition"] = _parse_partition(raw["partition"])
    if "backbone" in raw:
        out["backbone"] = _parse_backbone(raw["backbone"])
    out["dataset"] = _parse_dataset(raw["dataset"])
    try:
        return ExperimentConfig(**out)
    except FedNCMError as exc:
        raise ConfigError("config", str(exc)) from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Every field, including defaults; ``config_from_dict`` inverts it."""
    return {
        "name": cfg.name,
        "method": cfg.method,
        "server_opt": cfg.server_opt,
        "rounds": cfg.rounds,
        "local_epochs": cfg.local_epochs,
        "batch_size": cfg.batch_size,
        "participation": cfg.participation,
        "client_lr": cfg.client_lr,
        "server_lr": cfg.server_lr,
        "adam_betas": list(cfg.adam_betas),
        "adam_eps": cfg.adam_eps,
        "seed": cfg.seed,
        "partition": {"num_clients": cfg.partition.num_clients, "alpha": cfg.partition.alpha},
        "backbone": {
            "widths": list(cfg.backbone.widths),
            "activation": cfg.backbone.activation,
            "init": cfg.backbone.init,
            "init_seed": cfg.backbone.init_seed,
        },
        "dataset": {f.name: getattr(cfg.dataset, f.name) for f in fields(DatasetSpec)},
    }


def sweep_from_dict(raw: dict) -> SweepSpec:
    _reject_unknown(raw, ("base", "sweep", "seeds"), "")
    _check("base", "base" in raw, "required key missing")
    _check("sweep", "sweep" in raw, "required key missing")
    base = config_from_dict(raw["base"])
    sweep = raw["sweep"]
    _reject_unknown(sweep, ("axis", "values", "client_lr", "server_lr"), "sweep.")
    axis = _str("sweep.axis", sweep.get("axis"), SWEEP_AXES)
    if axis == "lr_grid":
        lists = []
        for key in ("client_lr", "server_lr"):
            vals = sweep.get(key)
            _check(f"sweep.{key}", isinstance(vals, list) and len(vals) > 0, "expected a non-empty list")
            lists.append(tuple(_num(f"sweep.{key}", v, float) for v in vals))
            _check(f"sweep.{key}", all(v >= 0 for v in lists[-1]), "learning rates must be >= 0")
        values: tuple = tuple(lists)
    else:
        vals = sweep.get("values")
        _check("sweep.values", isinstance(vals, list) and len(vals) > 0, "expected a non-empty list")
        kind = float if axis == "alpha" else int
        values = tuple(_num("sweep.values", v, kind) for v in vals)
        low_ok = all(v > 0 for v in values) if axis == "alpha" else all(v >= 1 for v in values)
        _check("sweep.values", low_ok, f"out of range for axis {axis}")
    seeds = raw.get("seeds", [base.seed])
    _check("seeds", isinstance(seeds, list) and len(seeds) > 0, "expected a non-empty list")
    seeds = tuple(_num("seeds", s, int) for s in seeds)
    _check("seeds", all(s >= 0 for s in seeds), "seeds must be >= 0")
    return SweepSpec(base, axis, values, seeds)


def sweep_to_dict(spec: SweepSpec) -> dict:
    if spec.axis == "lr_grid":
        sweep = {"axis": "lr_grid", "client_lr": list(spec.values[0]), "server_lr": list(spec.values[1])}
    else:
        sweep = {"axis": spec.axis, "values": list(spec.values)}
    return {"base": config_to_dict(spec.base), "sweep": sweep, "seeds": list(spec.seeds)}


def parse_config(path: str | Path) -> ExperimentConfig | SweepSpec:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object")
    if "sweep" in raw or "base" in raw:
        return sweep_from_dict(raw)
    return config_from_dict(raw)


def dumps(obj: ExperimentConfig | SweepSpec) -> str:
    d = sweep_to_dict(obj) if isinstance(obj, SweepSpec) else config_to_dict(obj)
    return json.dumps(d, indent=2, sort_keys=True) + "\n"
