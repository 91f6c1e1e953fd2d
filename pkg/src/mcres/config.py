"""Run configuration: synthetic task + meta-training settings, stored as JSON."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .metatrain import MetaConfig
from .synthetic import SyntheticConfig

MODES = ("mcres", "baseline", "no-meta", "merged", "random", "no-curriculum")


class ConfigError(ValueError):
    pass


def _build(cls, data: dict[str, Any], where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


@dataclass(frozen=True)
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    mode: str = "mcres"
    seed: int = 0
    dataset: str | None = None
    out: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def hash(self) -> str:
        """Stable across key order: hashes the canonical sorted-key encoding."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - top)
        if unknown:
            raise ConfigError(f"unknown key(s) in run config: {', '.join(unknown)}")
        kwargs = {k: v for k, v in data.items() if k not in ("synthetic", "meta")}
        kwargs["synthetic"] = _build(SyntheticConfig, data.get("synthetic", {}), "synthetic")
        kwargs["meta"] = _build(MetaConfig, data.get("meta", {}), "meta")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_overrides(self, **changes) -> RunConfig:
        meta_changes = changes.pop("meta", {})
        cfg = dataclasses.replace(self, **changes)
        if "seed" in changes:
            meta_changes.setdefault("seed", changes["seed"])
        if meta_changes:
            cfg = dataclasses.replace(cfg, meta=dataclasses.replace(cfg.meta, **meta_changes))
        return cfg

    def effective_meta(self) -> MetaConfig:
        """MetaConfig with the mode's ablation switches applied."""
        m = dataclasses.replace(self.meta, seed=self.seed)
        if self.mode == "no-meta":
            return dataclasses.replace(m, meta=False)
        if self.mode == "merged":
            return dataclasses.replace(m, testing_set_mode="merged")
        if self.mode == "random":
            return dataclasses.replace(m, testing_set_mode="random")
        if self.mode == "no-curriculum":
            return dataclasses.replace(m, curriculum=False)
        return m
