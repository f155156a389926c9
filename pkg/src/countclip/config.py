"""Run configuration files (YAML) for the command line."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .trainer import TrainingConfig

TOP_LEVEL_KEYS = {"name", "backend", "data", "cache_dir", "training"}
DATA_KEYS = {
    "synthetic",
    "counting_manifest",
    "general_manifest",
    "validation_manifest",
    "frequencies",
}
SYNTHETIC_KEYS = {
    "n_train_per_class", "n_val_per_class", "n_general", "n_distractors", "signal", "noise", "seed",
}
BUNDLED_PREFIX = "bundled:"


def default_cache_dir() -> str:
    return os.environ.get("COUNTCLIP_CACHE_DIR") or str(Path.home() / ".cache" / "countclip")


@dataclass
class RunConfig:
    name: str = "run"
    backend: dict = field(default_factory=lambda: {"kind": "toy"})
    data: dict = field(default_factory=lambda: {"synthetic": {}})
    cache_dir: str = field(default_factory=default_cache_dir)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "backend": dict(self.backend),
            "data": dict(self.data),
            "cache_dir": self.cache_dir,
            "training": self.training.to_dict(),
        }


def _check_keys(section: str, data: dict, allowed: set) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown key(s) in {section}: {sorted(unknown)}")


def parse_run_config(data: dict, overrides: dict | None = None) -> RunConfig:
    """Validate a config mapping; ``overrides`` use dotted keys like ``training.seed``."""
    data = dict(data or {})
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    _check_keys("config", data, TOP_LEVEL_KEYS)
    data_section = dict(data.get("data") or {"synthetic": {}})
    _check_keys("data", data_section, DATA_KEYS)
    if "synthetic" in data_section:
        _check_keys("data.synthetic", data_section["synthetic"] or {}, SYNTHETIC_KEYS)
    elif "counting_manifest" not in data_section:
        raise ValueError("data needs either `synthetic` or `counting_manifest`")
    backend = dict(data.get("backend") or {"kind": "toy"})
    if backend.get("kind") not in ("toy", "clip"):
        raise ValueError(f"backend.kind must be 'toy' or 'clip', got {backend.get('kind')!r}")
    training = data.get("training") or {}
    _check_keys("training", training, {f.name for f in fields(TrainingConfig)})
    return RunConfig(
        name=str(data.get("name", "run")),
        backend=backend,
        data=data_section,
        cache_dir=str(data.get("cache_dir") or default_cache_dir()),
        training=TrainingConfig(**training),
    )


def bundled_configs() -> list[str]:
    root = resources.files("countclip") / "data" / "configs"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def read_config_text(ref: str) -> str:
    if ref.startswith(BUNDLED_PREFIX):
        name = ref[len(BUNDLED_PREFIX):]
        path = resources.files("countclip") / "data" / "configs" / f"{name}.yaml"
        if not path.is_file():
            raise FileNotFoundError(f"no bundled config {name!r}; available: {bundled_configs()}")
        return path.read_text(encoding="utf-8")
    return Path(ref).read_text(encoding="utf-8")


def load_run_config(ref: str, overrides: dict | None = None) -> RunConfig:
    return parse_run_config(yaml.safe_load(read_config_text(ref)) or {}, overrides)
