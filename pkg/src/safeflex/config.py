"""Experiment configuration: defaults, file loading and environment overrides.

Any key can be overridden from the environment with the ``SAFEFLEX_`` prefix
and ``__`` between nesting levels, e.g. ``SAFEFLEX_TRAINING__EPISODES=200``.
Values are parsed as JSON when possible and kept as strings otherwise.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .env import EnvConfig
from .grid import _read_structured, bundled_network_path
from .marl import TrainingConfig
from .profiles import SyntheticProfileSpec, spec_from_dict, spec_to_dict

ENV_PREFIX = "SAFEFLEX_"


@dataclass(frozen=True)
class RegressorConfig:
    n_scenarios: int = 5000
    ridge_lambda: float = 1e-6
    folds: int = 5
    perturbation: tuple[float, float] = (0.6, 1.4)

    def to_dict(self) -> dict:
        return {**self.__dict__, "perturbation": list(self.perturbation)}


@dataclass(frozen=True)
class ExperimentConfig:
    network: str = str(bundled_network_path("ieee33"))
    fleet: str = str(bundled_network_path("fleet"))
    profiles_dir: str | None = None
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    v_min_pu: float = 0.95
    v_max_pu: float = 1.05
    margin_pu: float = 0.005
    out: str = "runs"
    env: EnvConfig = field(default_factory=EnvConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    profiles: SyntheticProfileSpec = field(default_factory=SyntheticProfileSpec)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)

    @property
    def profile_path(self) -> Path:
        return Path(self.profiles_dir) if self.profiles_dir else Path(self.out) / "profiles"

    def to_dict(self) -> dict:
        return {
            "network": self.network,
            "fleet": self.fleet,
            "profiles_dir": self.profiles_dir,
            "seed": self.seed,
            "seeds": list(self.seeds),
            "v_min_pu": self.v_min_pu,
            "v_max_pu": self.v_max_pu,
            "margin_pu": self.margin_pu,
            "out": self.out,
            "env": dict(self.env.__dict__),
            "training": self.training.to_dict(),
            "profiles": spec_to_dict(self.profiles),
            "regressor": self.regressor.to_dict(),
        }

    def digest(self) -> str:
        """Hash of every setting that influences results (the output path excluded)."""
        doc = self.to_dict()
        doc.pop("out")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _merge(base: dict, extra: Mapping[str, Any]) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    doc: dict = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX) :].split("__") if p]
        if not path:
            continue
        node = doc
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = _parse_value(value)
    return doc


def _build(cls, doc: Mapping[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return cls(**doc)


def config_from_dict(doc: Mapping[str, Any]) -> ExperimentConfig:
    doc = dict(doc)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
    if "env" in doc:
        doc["env"] = _build(EnvConfig, doc["env"], "env")
    if "training" in doc:
        t = dict(doc["training"])
        _build(TrainingConfig, {k: v for k, v in t.items() if k != "hidden"}, "training")
        doc["training"] = TrainingConfig.from_dict(t)
    if "profiles" in doc:
        doc["profiles"] = spec_from_dict(doc["profiles"])
    if "regressor" in doc:
        r = dict(doc["regressor"])
        if "perturbation" in r:
            r["perturbation"] = tuple(float(v) for v in r["perturbation"])
        doc["regressor"] = _build(RegressorConfig, r, "regressor")
    if "seeds" in doc:
        doc["seeds"] = tuple(int(s) for s in doc["seeds"])
    return ExperimentConfig(**doc)


def load_config(path: str | Path | None = None, environ: Mapping[str, str] | None = None, **cli: Any) -> ExperimentConfig:
    """Defaults, then the config file, then ``SAFEFLEX_*`` variables, then explicit CLI values."""
    doc: dict = ExperimentConfig().to_dict()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        doc = _merge(doc, _read_structured(p))
    doc = _merge(doc, env_overrides(environ))
    doc = _merge(doc, {k: v for k, v in cli.items() if v is not None})
    return config_from_dict(doc)
