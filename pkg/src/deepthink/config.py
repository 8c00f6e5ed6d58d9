"""Flat ``key = value`` run configuration shared by all CLI subcommands."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError

DATASETS = ("synthetic", "cifar10", "cifar100", "dtc1")


@dataclass
class RunConfig:
    # network
    cell_kind: str = "ligru"
    channels: int = 128
    t_train: int = 30
    t_test: int = 100
    num_classes: Optional[int] = None
    downsample: str = "none"
    recall_depth: int = 2
    ff_depth: int = 4
    # optimisation
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 2e-4
    batch_size: int = 32
    sigma_noise: float = 0.04
    train_fraction: float = 0.8
    target_train_acc: Optional[float] = None
    # evaluation corruption (0 = clean)
    severity: int = 0
    # adaptive computation time
    act: bool = False
    tau: float = 0.5
    epsilon_act: float = 0.01
    # data
    dataset: str = "synthetic"
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    checkpoint: Optional[str] = None
    synth_classes: int = 2
    synth_size: int = 16
    synth_samples: int = 256
    synth_test_samples: int = 512
    synth_margin: float = 0.5
    synth_gradient: float = 0.3
    # run
    seed: int = 0
    output_dir: str = "out"
    workers: int = 1
    heatmap_iters: str = "0,1,2,4,8"
    dump_states: bool = False
    dump_aux_likelihood: bool = False

    def canonical_text(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def heatmap_list(self) -> list[int]:
        try:
            return [int(x) for x in self.heatmap_iters.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"heatmap_iters must be comma-separated integers, got {self.heatmap_iters!r}") from None

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if not 0 <= self.severity <= 5:
            raise ConfigError(f"severity must be 0..5, got {self.severity}")
        if self.batch_size < 1 or self.epochs < 0 or self.workers < 1:
            raise ConfigError("batch_size and workers must be >= 1, epochs >= 0")

    def require_path(self, key: str) -> Path:
        value = getattr(self, key)
        if not value:
            raise ConfigError(f"missing required path: {key}")
        path = Path(value)
        if not path.exists():
            raise ConfigError(f"{key}: no such file: {value}")
        return path


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    optional = kind.startswith("Optional")
    if optional and raw in ("", "none", "None"):
        return None
    base = kind.removeprefix("Optional[").removesuffix("]")
    try:
        if base == "bool":
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_run_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Read ``path`` (if given) and apply ``overrides``; overrides win."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(p.read_text(), str(p)))
    for key, raw in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
