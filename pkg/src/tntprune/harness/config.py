"""JSON experiment configuration with dotted-path overrides.

Schema (every section optional; omitted keys take the defaults below)::

    {
      "model":     {ModelConfig fields},
      "data":      {DatasetSpec fields} | {"container": path, "test_container": path},
      "eval_samples": int | null,        # held-out images scored by the sweep
      "backbone":  {"lr", "momentum", "epochs", "batch"},
      "allocator": {"kind", "hidden", "noised_layers", "beta", "lr", "epochs", "batch", "train_samples"},
      "schedule":  {"mode", "locations", "rates", "s", "partition", "action",
                    "pre_block_similarity", "multi_layer_locations", "multi_layer_s"},
      "sweep":     {"methods", "keep_counts", "keep_rates", "throughput", "batch", "history_samples"},
      "seeds": [int, ...], "eval_seed": int, "out": path
    }
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..allocator import DEFAULT_ALLOCATOR_EPOCHS, DEFAULT_BETA, default_noised_layers
from ..data import DatasetSpec
from ..errors import ConfigError
from ..pruning import (
    DEFAULT_MULTI_LAYER_LOCATIONS, DEFAULT_MULTI_LAYER_S, DEFAULT_S_DEIT, DEFAULT_S_VIT, PruneSchedule, SimilarityConfig,
    keep_count_for_rate,
)
from ..vit import ModelConfig

METHODS = ("tnt", "tnt_no_sim", "tnt_seq", "tnt_merge", "random", "cls_topk")

# Published fixed parameters, recorded verbatim in every run manifest.
PUBLISHED_DEFAULTS = {
    "beta": DEFAULT_BETA,
    "allocator_epochs": DEFAULT_ALLOCATOR_EPOCHS,
    "multi_layer_locations": list(DEFAULT_MULTI_LAYER_LOCATIONS),
    "multi_layer_s": DEFAULT_MULTI_LAYER_S,
    "single_layer_location_vit": 2,
    "single_layer_location_deit": 3,
    "s_deit": DEFAULT_S_DEIT,
    "s_vit": DEFAULT_S_VIT,
}

# s for a 196-token ViT scaled to the 64-token toy grid: floor(64 * 30 / 196).
TOY_S = 9


@dataclass
class BackboneSection:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch: int = 64


@dataclass
class AllocatorSection:
    kind: str = "linear"
    hidden: int | None = None
    noised_layers: list[int] | None = None  # None: blocks 0-4 clipped to the depth
    beta: float = DEFAULT_BETA
    lr: float = 1e-2
    epochs: int = DEFAULT_ALLOCATOR_EPOCHS
    batch: int = 64
    train_samples: int | None = None  # None: the full training split


@dataclass
class ScheduleSection:
    mode: str = "single_layer"
    locations: list[int] = field(default_factory=lambda: [2])
    rates: list[float] = field(default_factory=lambda: [0.5])
    s: int = TOY_S
    partition: str = "random"
    action: str = "drop"
    pre_block_similarity: bool = False
    multi_layer_locations: list[int] = field(default_factory=lambda: list(DEFAULT_MULTI_LAYER_LOCATIONS))
    multi_layer_s: int = DEFAULT_MULTI_LAYER_S


@dataclass
class SweepSection:
    methods: list[str] = field(default_factory=lambda: ["tnt", "tnt_no_sim", "random", "cls_topk"])
    keep_counts: list[int] | None = None
    keep_rates: list[float] = field(default_factory=lambda: [1.0, 0.75, 0.5, 0.25])
    throughput: bool = False
    batch: int = 256
    history_samples: int = 8


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DatasetSpec | dict = field(default_factory=DatasetSpec)
    eval_samples: int | None = None
    backbone: BackboneSection = field(default_factory=BackboneSection)
    allocator: AllocatorSection = field(default_factory=AllocatorSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_seed: int = 0
    out: str = "runs/default"

    # ------------------------------------------------------------ (de)serialisation

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, DatasetSpec):
                v = v.to_dict()
            elif dataclasses.is_dataclass(v):
                v = dataclasses.asdict(v)
            d[f.name] = copy.deepcopy(v)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kw: dict[str, Any] = {}
        sections = {"backbone": BackboneSection, "allocator": AllocatorSection,
                    "schedule": ScheduleSection, "sweep": SweepSection}
        for name, typ in sections.items():
            if name in raw:
                kw[name] = _build(typ, raw[name], name)
        if "model" in raw:
            kw["model"] = _build(ModelConfig, raw["model"], "model")
        if "data" in raw:
            d = raw["data"]
            if isinstance(d, dict) and "container" in d:
                extra = sorted(set(d) - {"container", "test_container"})
                if extra:
                    raise ConfigError(f"data: container configs take only container/test_container, got {extra}")
                kw["data"] = dict(d)
            else:
                d = dict(d)
                if "informative_mask" in d:
                    d["informative_mask"] = tuple(d["informative_mask"])
                kw["data"] = _build(DatasetSpec, d, "data")
        for name in ("eval_samples", "eval_seed", "out"):
            if name in raw:
                kw[name] = raw[name]
        if "seeds" in raw:
            seeds = raw["seeds"]
            if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
                raise ConfigError("seeds must be a nonempty list of nonnegative integers")
            kw["seeds"] = list(seeds)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def with_overrides(self, overrides: list[str]) -> ExperimentConfig:
        """Apply ``section.key=value`` overrides; values parse as JSON, else as plain strings."""
        raw = self.to_dict()
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                parsed = value
            node = raw
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"override {key!r}: {p!r} is not a config section")
                node = node[p]
            node[parts[-1]] = parsed
        return ExperimentConfig.from_dict(raw)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    # ------------------------------------------------------------ derived objects

    def validate(self) -> None:
        m = self.model
        a = self.allocator
        if a.kind not in ("linear", "mlp"):
            raise ConfigError(f"allocator.kind must be 'linear' or 'mlp', got {a.kind!r}")
        if a.beta < 0:
            raise ConfigError("allocator.beta must be nonnegative")
        layers = self.noised_layers
        bad = [l for l in layers if not 0 <= l < m.depth]
        if bad:
            raise ConfigError(f"allocator.noised_layers {bad} outside [0, {m.depth})")
        if isinstance(self.data, DatasetSpec):
            for f in ("image_size", "patch_size", "channels", "num_classes"):
                if getattr(self.data, f) != getattr(m, f):
                    raise ConfigError(f"data.{f}={getattr(self.data, f)} does not match model.{f}={getattr(m, f)}")
        for meth in self.sweep.methods:
            if meth not in METHODS:
                raise ConfigError(f"unknown sweep method {meth!r}; choose from {list(METHODS)}")
        sched = self.prune_schedule()
        sched.validate(m.depth)
        missing = [l for l in sched.locations if l - 1 not in layers]
        if missing:
            raise ConfigError(f"schedule locations {missing} have no allocator head (noised_layers={layers})")
        for k in self.keep_counts():
            if not 1 <= k <= m.num_patches:
                raise ConfigError(f"keep count {k} outside [1, {m.num_patches}]")
        if self.eval_samples is not None and self.eval_samples < 1:
            raise ConfigError("eval_samples must be positive")

    @property
    def noised_layers(self) -> tuple[int, ...]:
        if self.allocator.noised_layers is None:
            return default_noised_layers(self.model.depth)
        return tuple(sorted(set(int(l) for l in self.allocator.noised_layers)))

    def prune_schedule(self, keep_count: int | None = None, *, partition=None, action=None, s=None) -> PruneSchedule:
        sc = self.schedule
        sim = SimilarityConfig(partition=partition or sc.partition, action=action or sc.action)
        if sc.mode == "multi_layer":
            return PruneSchedule(
                mode="multi_layer",
                locations=tuple(sc.multi_layer_locations),
                rates=tuple(sc.rates),
                s=sc.multi_layer_s if s is None else s,
                similarity=sim,
                pre_block_similarity=sc.pre_block_similarity,
            )
        return PruneSchedule(
            mode="single_layer",
            locations=tuple(sc.locations),
            rates=tuple(sc.rates),
            s=sc.s if s is None else s,
            similarity=sim,
            keep_counts=None if keep_count is None else (keep_count,),
        )

    def keep_counts(self) -> list[int]:
        """Sweep keep points as absolute counts (rates convert with floor)."""
        if self.sweep.keep_counts:
            counts = [int(k) for k in self.sweep.keep_counts]
        else:
            counts = [keep_count_for_rate(self.model.num_patches, r) for r in self.sweep.keep_rates]
        return sorted(set(counts), reverse=True)


def _build(typ, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return typ(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
