"""Experiment configuration: JSON documents plus dotted ``--key value`` overrides."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .models import DEFAULT_ZOO_HIDDEN, ExtractorSpec

ALGORITHMS = ("standalone", "fedavg_homo", "case_a_replace", "case_b_seen_replace",
              "fedproto_lite", "fedssa")
ALIASES = {"case_a": "case_a_replace", "case_b": "case_b_seen_replace",
           "fedavg": "fedavg_homo", "fedproto": "fedproto_lite", "case_c": "fedssa"}
FUSIONS = ("additive", "convex")


def canonical_algorithm(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {name!r}; choose from {', '.join(ALGORITHMS)}",
                          "algorithm")
    return name


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    per_class_n: int = 100
    d_in: int = 32
    spread: float = 3.0
    images: str | None = None
    labels: str | None = None


@dataclass
class AlgoParams:
    mu0: float = 0.5
    T_stable: int = 25
    lam: float = 1.0
    fusion: str = "convex"


@dataclass
class ZooEntry:
    hidden: list[int]
    d_rep: int = 64


def _default_zoo() -> list[ZooEntry]:
    return [ZooEntry(list(h), 64) for h in DEFAULT_ZOO_HIDDEN]


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    S: int = 10
    N: int = 10
    C: float = 1.0
    T: int = 50
    E: int = 1
    B: int = 16
    eta: float = 0.01
    classes_per_client: int = 2
    model_zoo: list[ZooEntry] = field(default_factory=_default_zoo)
    algorithm: str = "fedssa"
    algo_params: AlgoParams = field(default_factory=AlgoParams)
    seed: int = 0
    output_dir: str = "runs"
    run_id: str | None = None
    target_accuracy: float = 0.9
    checkpoint_every: int = 0
    timing: bool = False

    @property
    def d_rep(self) -> int:
        return self.model_zoo[0].d_rep

    @property
    def input_dim(self) -> int | None:
        return self.dataset.d_in if self.dataset.kind == "blobs" else None

    def extractor_specs(self, input_dim: int) -> list[ExtractorSpec]:
        return [ExtractorSpec(tuple(z.hidden), input_dim, z.d_rep) for z in self.model_zoo]

    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.algorithm}_s{self.seed}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["algo_params"]["lambda"] = d["algo_params"].pop("lam")
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with top-level or dotted-path overrides, re-validated."""
        d = self.to_dict()
        for key, value in changes.items():
            _set_dotted(d, key.replace("__", "."), value)
        return from_dict(d)

    def validate(self) -> "ExperimentConfig":
        self.algorithm = canonical_algorithm(self.algorithm)
        checks = [
            ("S", self.S >= 2, "must be >= 2"),
            ("N", self.N >= 1, "must be >= 1"),
            ("C", 0 < self.C <= 1, "must lie in (0, 1]"),
            ("T", self.T >= 0, "must be >= 0"),
            ("E", self.E >= 0, "must be >= 0"),
            ("B", self.B >= 1, "must be >= 1"),
            ("eta", self.eta > 0 and math.isfinite(self.eta), "must be positive"),
            ("classes_per_client", 1 <= self.classes_per_client <= self.S,
             f"must lie in [1, {self.S}]"),
            ("model_zoo", len(self.model_zoo) >= 1, "needs at least one extractor"),
            ("algo_params.mu0", 0 < self.algo_params.mu0 <= 1, "must lie in (0, 1]"),
            ("algo_params.T_stable", self.algo_params.T_stable >= 0, "must be >= 0"),
            ("algo_params.lambda", self.algo_params.lam >= 0, "must be >= 0"),
            ("algo_params.fusion", self.algo_params.fusion in FUSIONS,
             f"must be one of {', '.join(FUSIONS)}"),
            ("dataset.kind", self.dataset.kind in ("blobs", "idx"), "must be blobs or idx"),
            ("checkpoint_every", self.checkpoint_every >= 0, "must be >= 0"),
            ("target_accuracy", 0 <= self.target_accuracy <= 1, "must lie in [0, 1]"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(msg, key)
        for z in self.model_zoo:
            if not z.hidden or min(z.hidden) <= 0 or z.d_rep <= 0:
                raise ConfigError("widths must be positive and non-empty", "model_zoo")
        if len({z.d_rep for z in self.model_zoo}) != 1:
            raise ConfigError("all extractors must share d_rep", "model_zoo")
        if self.algorithm == "fedavg_homo" and len({tuple(z.hidden) for z in self.model_zoo}) != 1:
            raise ConfigError("fedavg_homo needs a single-architecture zoo", "model_zoo")
        if self.dataset.kind == "blobs":
            if self.dataset.per_class_n < 10:
                raise ConfigError("must be >= 10", "dataset.per_class_n")
            if self.dataset.d_in < 1:
                raise ConfigError("must be >= 1", "dataset.d_in")
            if self.dataset.spread < 0:
                raise ConfigError("must be >= 0", "dataset.spread")
        elif not (self.dataset.images and self.dataset.labels):
            raise ConfigError("idx datasets need images and labels paths", "dataset")
        return self


# -- parsing -----------------------------------------------------------------

def _coerce(key: str, value: Any, typ: Any) -> Any:
    if typ is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"expected a boolean, got {value!r}", key)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return int(value)
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
        return value
    if typ == "str|None":
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"expected a string or null, got {value!r}", key)
        return value
    raise AssertionError(typ)


_TYPES = {"int": int, "float": float, "str": str, "bool": bool,
          "str | None": "str|None"}


def _build(cls, data: dict, prefix: str, renames: dict[str, str] | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a table, got {data!r}", prefix.rstrip(".") or None)
    renames = renames or {}
    known = {renames.get(f.name, f.name): f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError("unknown key", prefix + key)
        f = known[key]
        kwargs[f.name] = _coerce(prefix + key, value, _TYPES[f.type])
    return cls(**kwargs)


def _zoo(value, key="model_zoo") -> list[ZooEntry]:
    if not isinstance(value, list):
        raise ConfigError("expected a list of extractor specs", key)
    out = []
    for i, item in enumerate(value):
        if isinstance(item, list):
            item = {"hidden": item}
        if not isinstance(item, dict):
            raise ConfigError(f"entry {i} must be a table or list of widths", key)
        unknown = set(item) - {"hidden", "d_rep"}
        if unknown:
            raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in entry {i}", key)
        hidden = item.get("hidden")
        if not isinstance(hidden, list) or not all(isinstance(w, int) and not isinstance(w, bool)
                                                   for w in hidden):
            raise ConfigError(f"entry {i}: hidden must be a list of integers", key)
        out.append(ZooEntry(list(hidden), _coerce(key, item.get("d_rep", 64), int)))
    return out


def from_dict(data: dict) -> ExperimentConfig:
    data = copy.deepcopy(data)
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    kwargs: dict[str, Any] = {}
    scalar = {f.name: f for f in fields(ExperimentConfig)}
    for key, value in data.items():
        if key == "dataset":
            if isinstance(value, str):
                value = {"kind": value}
            kwargs["dataset"] = _build(DatasetConfig, value, "dataset.")
        elif key == "algo_params":
            kwargs["algo_params"] = _build(AlgoParams, value, "algo_params.", {"lam": "lambda"})
        elif key == "model_zoo":
            kwargs["model_zoo"] = _zoo(value)
        elif key in scalar:
            kwargs[key] = _coerce(key, value, _TYPES[scalar[key].type])
        else:
            raise ConfigError("unknown key", key)
    return ExperimentConfig(**kwargs).validate()


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _set_dotted(d: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = d
    for part in parts[:-1]:
        child = node.get(part)
        if isinstance(child, str) and part == "dataset":
            child = {"kind": child}
        if child is None:
            child = {}
        if not isinstance(child, dict):
            raise ConfigError("cannot set a nested key under a scalar", dotted)
        node[part] = child
        node = child
    node[parts[-1]] = value


def parse_overrides(args: list[str]) -> dict[str, Any]:
    """Turn ``["--N", "20", "--algo_params.mu0", "0.3"]`` into a dotted-key dict."""
    out: dict[str, Any] = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--"):
            raise ConfigError(f"expected --key, got {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError("missing value", key)
            raw = args[i + 1]
            i += 2
        out[key] = _parse_value(raw)
    return out


def parse_config(path: str | Path | None = None,
                 overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Load a JSON config (or start from defaults) and apply dotted overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}", str(path)) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", str(path)) from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object", str(path))
    for key, value in (overrides or {}).items():
        _set_dotted(data, key, value)
    return from_dict(data)
