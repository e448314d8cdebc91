"""Run configuration: one JSON file, one master seed."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SynthConfig
from .model import ModelConfig
from .train import TrainConfig

# master seed + offset -> stage seed
SEED_OFFSETS = {"data": 0, "split": 1, "init": 2, "train": 3, "bootstrap": 4}
# experiment replicate k runs with master seed + SEED_STRIDE * k
SEED_STRIDE = 10


class ConfigError(ValueError):
    pass


@dataclass
class SplitOptions:
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    stratify: bool = True


@dataclass
class AuditOptions:
    n_bootstrap: int = 1000
    ci_level: float = 0.95
    metrics_unit: str = "trial"
    attention_unit: str = "trial"
    threshold: float = 0.5
    neglect_threshold: float = 0.05
    dominance_threshold: float = 0.50
    bilateral_pairs: list[list[str]] = field(default_factory=lambda: [["LF", "RF"]])


@dataclass
class ExperimentOptions:
    n_seeds: int = 5
    confound_laterality: float = 1.0
    control_laterality: float = 0.5
    # per-seed pass rules for the summary
    min_rf_attention: float = 0.50
    max_lf_ci_high: float = 0.10
    min_roc_auc: float = 0.85
    min_foot_attention_control: float = 0.15
    min_passing_seeds: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitOptions = field(default_factory=SplitOptions)
    audit: AuditOptions = field(default_factory=AuditOptions)
    experiment: ExperimentOptions = field(default_factory=ExperimentOptions)

    def stage_seed(self, stage: str) -> int:
        return self.seed + SEED_OFFSETS[stage]

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with a new master seed propagated to every stage."""
        cfg = replace(self, seed=seed)
        cfg.synth = replace(self.synth, seed=seed + SEED_OFFSETS["data"])
        cfg.train = replace(self.train, seed=seed + SEED_OFFSETS["train"])
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"]["ratios"] = list(self.split.ratios)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        sections = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig,
                    "split": SplitOptions, "audit": AuditOptions, "experiment": ExperimentOptions}
        kwargs = {}
        try:
            for name, typ in sections.items():
                sub = dict(d.get(name, {}))
                if name == "split" and "ratios" in sub:
                    sub["ratios"] = tuple(sub["ratios"])
                kwargs[name] = typ(**sub)
            cfg = cls(seed=int(d.get("seed", 0)), **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        return cfg.with_seed(cfg.seed)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
