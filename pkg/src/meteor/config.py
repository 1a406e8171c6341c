"""JSON run configuration shared by every CLI subcommand.

A run config has these sections, all optional except ``seed``::

    {
      "seed": 0,
      "tokenizer": {"k_tor": 10, "strategy": "even"},
      "vision":    {"height": 16, "width": 16, "channels": 3, "patch": 4, "d_vis": 32, "seed": 1234},
      "embedder":  {"enabled": true, "d_emb": 64, "n_layers": 2, "d_state": 16, "expansion": 2,
                    "conv_kernel": 4, "architecture": "ssm", "n_heads": 4, "max_len": 4096},
      "backbone":  {"d_mlm": 64, "n_layers": 2, "n_heads": 4, "max_len": 512},
      "training":  {"stage0": {...}, "stage1": {...}, "stage2": {...}},
      "data":      {"train": "train.jsonl", "test": "test.jsonl", "pretrain": "pre.jsonl"}
                or {"synthetic": {"task": "mixed", "n": 2000, "test_fraction": 0.1, "pretrain_n": 2000}}
    }

Stage sections take :class:`~meteor.training.StagePlan` fields except ``stage``.
Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .embedder import EmbedderConfig
from .model import MeteorConfig
from .numerics import ContractError
from .training import StagePlan
from .vision import VisionConfig


class ConfigError(ValueError):
    pass


# desk-scale defaults; the trained-model acceptance runs use these
DEFAULT_EMBEDDER = EmbedderConfig(d_emb=64, n_layers=2, d_state=16)
DEFAULT_BACKBONE = BackboneConfig(d_mlm=64, n_layers=2, n_heads=4, max_len=512)
DEFAULT_STAGES = {
    0: StagePlan(stage=0, steps=400, peak_lr=3e-3, floor_lr=3e-5),
    1: StagePlan(stage=1, steps=300, peak_lr=3e-3, floor_lr=3e-5),
    2: StagePlan(stage=2, steps=1000, peak_lr=3e-3, floor_lr=3e-5),
}


@dataclass(frozen=True)
class SyntheticSpec:
    task: str = "mixed"
    n: int = 2000
    test_fraction: float = 0.1
    pretrain_n: int = 2000

    def __post_init__(self) -> None:
        if self.task not in ("arith", "count", "mixed"):
            raise ConfigError(f"unknown synthetic task {self.task!r}")
        if self.n < 2 or not 0 < self.test_fraction < 1 or self.pretrain_n < 0:
            raise ConfigError("synthetic spec needs n >= 2, 0 < test_fraction < 1 and pretrain_n >= 0")


@dataclass(frozen=True)
class DataSpec:
    train: str | None = None
    test: str | None = None
    pretrain: str | None = None
    synthetic: SyntheticSpec | None = None

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return d


@dataclass(frozen=True)
class RunConfig:
    seed: int
    model: MeteorConfig = field(default_factory=lambda: MeteorConfig(embedder=DEFAULT_EMBEDDER, backbone=DEFAULT_BACKBONE))
    stages: dict = field(default_factory=lambda: dict(DEFAULT_STAGES))
    data: DataSpec = field(default_factory=lambda: DataSpec(synthetic=SyntheticSpec()))

    def plan(self, stage: int, **overrides) -> StagePlan:
        return replace(self.stages[stage], seed=self.seed, **overrides)

    def to_dict(self) -> dict:
        m = self.model
        emb = asdict(m.embedder)
        emb = {"enabled": m.use_embedder, **emb}
        return {
            "seed": self.seed,
            "tokenizer": {"k_tor": m.k_tor, "strategy": m.strategy},
            "vision": asdict(m.vision),
            "embedder": emb,
            "backbone": asdict(m.backbone),
            "training": {f"stage{s}": _plan_dict(p) for s, p in sorted(self.stages.items())},
            "data": self.data.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, *, seed: int | None = None, k_tor: int | None = None, strategy: str | None = None,
                       arch: str | None = None) -> "RunConfig":
        m = self.model
        if k_tor is not None:
            m = replace(m, k_tor=k_tor)
        if strategy is not None:
            m = replace(m, strategy=strategy)
        if arch is not None:
            m = replace(m, embedder=replace(m.embedder, architecture=arch))
        return replace(self, model=m, seed=self.seed if seed is None else seed)


def _plan_dict(p: StagePlan) -> dict:
    d = p.to_dict()
    d.pop("stage")
    d.pop("seed")
    return d


def _check_keys(section: str, got: dict, allowed) -> None:
    if not isinstance(got, dict):
        raise ConfigError(f"{section}: expected an object, got {type(got).__name__}")
    unknown = sorted(set(got) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")


def _names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def parse_run_config(doc: dict[str, Any]) -> RunConfig:
    _check_keys("config", doc, ["seed", "tokenizer", "vision", "embedder", "backbone", "training", "data"])
    if "seed" not in doc:
        raise ConfigError("config: 'seed' is mandatory")
    seed = doc["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("config: 'seed' must be an integer")
    try:
        tok = doc.get("tokenizer", {})
        _check_keys("tokenizer", tok, ["k_tor", "strategy"])
        vis = doc.get("vision", {})
        _check_keys("vision", vis, _names(VisionConfig))
        emb = dict(doc.get("embedder", {}))
        _check_keys("embedder", emb, ["enabled"] + _names(EmbedderConfig))
        enabled = emb.pop("enabled", True)
        bb = doc.get("backbone", {})
        _check_keys("backbone", bb, _names(BackboneConfig))
        model = MeteorConfig(
            vision=VisionConfig(**vis),
            embedder=replace(DEFAULT_EMBEDDER, **emb),
            backbone=replace(DEFAULT_BACKBONE, **bb),
            use_embedder=bool(enabled),
            **tok,
        )
        tr = doc.get("training", {})
        _check_keys("training", tr, ["stage0", "stage1", "stage2"])
        stages = dict(DEFAULT_STAGES)
        plan_keys = [n for n in _names(StagePlan) if n not in ("stage", "seed")]
        for s in (0, 1, 2):
            sec = tr.get(f"stage{s}", {})
            _check_keys(f"training.stage{s}", sec, plan_keys)
            if "betas" in sec:
                sec = {**sec, "betas": tuple(sec["betas"])}
            stages[s] = replace(DEFAULT_STAGES[s], **sec)
        data = doc.get("data")
        if data is None:
            spec = DataSpec(synthetic=SyntheticSpec())
        else:
            _check_keys("data", data, ["train", "test", "pretrain", "synthetic"])
            syn = data.get("synthetic")
            if syn is not None:
                _check_keys("data.synthetic", syn, _names(SyntheticSpec))
                syn = SyntheticSpec(**syn)
            spec = DataSpec(data.get("train"), data.get("test"), data.get("pretrain"), syn)
    except (TypeError, ContractError) as e:
        raise ConfigError(str(e)) from e
    return RunConfig(seed, model, stages, spec)


def load_run_config(path: str | Path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_run_config(doc)
