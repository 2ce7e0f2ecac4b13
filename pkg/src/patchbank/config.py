"""Pipeline configuration: one JSON file, strict keys, CLI overrides.

The file has sections paths / patch / similarity / train / bank /
scoring / eval. Unknown keys anywhere are rejected so a typo cannot
silently fall back to a default. Every CLI flag of the form
``--section.key value`` overrides the corresponding path in the file.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, DomainError
from .repr_learning import TrainConfig
from .similarity import SimilarityConfig


@dataclass
class PathsConfig:
    manifest: str
    workdir: str


@dataclass
class PatchConfig:
    levels: list = field(default_factory=lambda: ["2", "3"])
    s: int = 3


@dataclass
class BankConfig:
    fraction: float = 0.01
    seed: int = 0


@dataclass
class ScoringConfig:
    b: int = 5
    smooth_sigma: float = 4.0
    write_maps: bool = True


@dataclass
class EvalConfig:
    pixel: bool = False


@dataclass
class PipelineConfig:
    paths: PathsConfig
    patch: PatchConfig
    train: TrainConfig  # train.sim carries the similarity section
    bank: BankConfig
    scoring: ScoringConfig
    eval: EvalConfig

    def validate(self):
        if not self.paths.manifest:
            raise ConfigError("paths.manifest must be set")
        if not self.paths.workdir:
            raise ConfigError("paths.workdir must be set")
        if not self.patch.levels:
            raise ConfigError("patch.levels must be nonempty")
        if (not isinstance(self.patch.s, int) or self.patch.s < 1
                or self.patch.s % 2 == 0):
            raise ConfigError(
                f"patch.s must be a positive odd integer, got {self.patch.s}")
        try:
            self.train.validate()
        except DomainError as exc:  # similarity/margin range problems
            raise ConfigError(str(exc)) from exc
        if not 0.0 < self.bank.fraction <= 1.0:
            raise ConfigError(
                f"bank.fraction must be in (0, 1], got {self.bank.fraction}")
        if not isinstance(self.scoring.b, int) or self.scoring.b < 2:
            raise ConfigError(
                f"scoring.b must be an integer >= 2, got {self.scoring.b}")
        if self.scoring.smooth_sigma < 0:
            raise ConfigError(
                f"scoring.smooth_sigma must be >= 0, "
                f"got {self.scoring.smooth_sigma}")


_SCHEMA = {
    "paths": {"manifest": str, "workdir": str},
    "patch": {"levels": list, "s": int},
    "similarity": {"sigma": float, "k": int, "alpha": float},
    "train": {"epochs": int, "batch_size": int, "lr": float,
              "weight_decay": float, "margin": float, "gamma": float,
              "d_f": int, "d_g": int, "seed": int},
    "bank": {"fraction": float, "seed": int},
    "scoring": {"b": int, "smooth_sigma": float, "write_maps": bool},
    "eval": {"pixel": bool},
}


def _typed(value, want, where):
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if want is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if want is list:
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{where}: expected a nonempty list")
        return [str(v) for v in value]
    raise AssertionError(f"unhandled schema type {want}")


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    schema = _SCHEMA[name]
    unknown = set(sec) - set(schema)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {sorted(unknown)}")
    return {k: _typed(v, schema[k], f"{name}.{k}") for k, v in sec.items()}


def build_config(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    paths = _section(raw, "paths")
    for key in ("manifest", "workdir"):
        if key not in paths:
            raise ConfigError(f"paths.{key} is required")
    cfg = PipelineConfig(
        paths=PathsConfig(**paths),
        patch=PatchConfig(**_section(raw, "patch")),
        train=TrainConfig(sim=SimilarityConfig(**_section(raw, "similarity")),
                          **_section(raw, "train")),
        bank=BankConfig(**_section(raw, "bank")),
        scoring=ScoringConfig(**_section(raw, "scoring")),
        eval=EvalConfig(**_section(raw, "eval")),
    )
    cfg.validate()
    return cfg


def load_config(path, overrides=()) -> PipelineConfig:
    """Read the JSON file, apply dotted overrides, build and validate."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    for dotted, value in overrides:
        apply_override(raw, dotted, value)
    return build_config(raw)


def apply_override(raw: dict, dotted: str, value: str) -> None:
    """Set raw[a][b]... = parsed value for an override ``a.b...``.

    Values are parsed as JSON when possible (numbers, booleans, lists);
    anything unparseable is kept as a plain string.
    """
    parts = dotted.split(".")
    if len(parts) < 2 or not all(parts):
        raise ConfigError(f"override {dotted!r} must look like section.key")
    node = raw
    for part in parts[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {dotted!r} descends into a value")
        node = nxt
    try:
        node[parts[-1]] = json.loads(value)
    except json.JSONDecodeError:
        node[parts[-1]] = value
