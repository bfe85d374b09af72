"""Pipeline configuration file (YAML) and its fingerprint."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from cdisrad import __version__
from cdisrad.cdis import MixingConfig
from cdisrad.cohort import TASKS
from cdisrad.net import NetworkConfig, TrainConfig
from cdisrad.pipeline import parse_modality

CACHE_ENV = "CDISRAD_CACHE_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    manifest: Path | None = None
    cache_dir: Path = Path("cache")
    output_dir: Path = Path("results")
    task: str = "grading"
    modalities: tuple[str, ...] = ("CDIs",)
    seed: int = 0
    jobs: int = 1
    mixing: MixingConfig = field(default_factory=MixingConfig)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        try:
            mods = tuple(parse_modality(m).name for m in self.modalities)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not mods:
            raise ConfigError("at least one modality is required")
        object.__setattr__(self, "modalities", mods)
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def experiment_dict(self) -> dict:
        """Everything that affects results (paths and worker count excluded)."""
        return {
            "task": self.task,
            "modalities": list(self.modalities),
            "seed": self.seed,
            "mixing": self.mixing.to_dict(),
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
        }

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.experiment_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        return {"config_fingerprint": self.fingerprint, "tool_version": __version__}


def _net(d):
    d = dict(d or {})
    if "stage_blocks" in d:
        d["stage_blocks"] = tuple(d["stage_blocks"])
    if d.pop("miniature", False):
        base = NetworkConfig.miniature(base_width=d.pop("base_width", 4))
        return replace(base, **d)
    return NetworkConfig(**d)


def from_mapping(d: dict, base_dir=Path(".")) -> PipelineConfig:
    d = dict(d or {})
    known = {"manifest", "cache_dir", "output_dir", "task", "modalities", "seed", "jobs", "mixing", "net", "train"}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    base_dir = Path(base_dir)
    kwargs = {}
    for key in ("manifest", "cache_dir", "output_dir"):
        if d.get(key) is not None:
            kwargs[key] = base_dir / d[key]
    for key in ("task", "seed", "jobs"):
        if key in d:
            kwargs[key] = d[key]
    if "modalities" in d:
        mods = d["modalities"]
        kwargs["modalities"] = (mods,) if isinstance(mods, str) else tuple(mods)
    try:
        kwargs["mixing"] = MixingConfig.from_dict(d.get("mixing"))
        kwargs["net"] = _net(d.get("net"))
        kwargs["train"] = TrainConfig(**(d.get("train") or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return PipelineConfig(**kwargs)


def load_config(path=None, overrides=None, env=None) -> PipelineConfig:
    """Read a YAML config; ``overrides`` (flags) beat the environment, which beats the file."""
    env = os.environ if env is None else env
    data, base_dir = {}, Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base_dir = path.parent
    config = from_mapping(data, base_dir)
    if env.get(CACHE_ENV):
        config = replace(config, cache_dir=Path(env[CACHE_ENV]))
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "epochs" in overrides:
        config = replace(config, train=replace(config.train, epochs=overrides.pop("epochs")))
    if "modalities" in overrides:
        overrides["modalities"] = tuple(overrides["modalities"])
    for key in ("manifest", "cache_dir", "output_dir"):
        if key in overrides:
            overrides[key] = Path(overrides[key])
    try:
        return replace(config, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
