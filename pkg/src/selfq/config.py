"""Run configuration read from one TOML file.

Example (every key optional; omitted keys take the defaults shown by
``RunConfig().to_json()``)::

    seed = 0

    [model.vision]
    image_size = 32
    [model.lm]
    d_model = 64
    [model.adapters]
    llm_rank = 128

    [data]
    conversations = "convs.json"
    image_dir = "images"
    records = "out/finetune.rec"
    pretrain_records = "out/pretrain.rec"
    delta = 0.5

    [train.pretrain]
    epochs = 1
    [train.finetune]
    lr_groups = { adapters = 2e-4, proto = 2e-5, projector = 2e-5 }

    [io]
    checkpoint_dir = "ckpt"
    metrics = "metrics.jsonl"

The single ``seed`` drives model and adapter init, turn-kind draws and data
order.  Unknown keys are rejected.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SqPolicy
from .language import LMConfig
from .model import AdapterSettings, ModelConfig
from .trainer import FINETUNE, PRETRAIN, TrainPlan
from .vision import VisionConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    conversations: str = "conversations.json"
    image_dir: str = "."
    records: str = "finetune.rec"
    pretrain_records: str = "pretrain.rec"
    delta: float = 0.5
    max_len: int | None = None


@dataclass
class IOSection:
    checkpoint_dir: str = "checkpoints"
    metrics: str = "metrics.jsonl"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSection = field(default_factory=DataSection)
    pretrain: TrainPlan = field(default_factory=TrainPlan.pretrain)
    finetune: TrainPlan = field(default_factory=TrainPlan.finetune)
    io: IOSection = field(default_factory=IOSection)
    base_dir: Path = field(default=Path("."), repr=False)

    def policy(self) -> SqPolicy:
        return SqPolicy(self.data.delta, self.seed)

    def plan(self, stage: str) -> TrainPlan:
        return self.pretrain if stage == PRETRAIN else self.finetune

    def path(self, p: str) -> Path:
        """Relative paths in the file resolve against the file's directory."""
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    def with_seed(self, seed: int) -> "RunConfig":
        self.seed = seed
        self.model.init_seed = seed
        self.pretrain.seed = seed
        self.finetune.seed = seed
        return self

    def to_json(self) -> dict:
        return {"seed": self.seed, "model": self.model.to_json(), "data": asdict(self.data),
                "train": {PRETRAIN: self.pretrain.to_json(), FINETUNE: self.finetune.to_json()},
                "io": asdict(self.io)}


def _take(cls, obj, where: str, skip: tuple[str, ...] = ()):
    if not isinstance(obj, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name for f in fields(cls)} - set(skip)
    extra = sorted(set(obj) - known)
    if extra:
        raise ConfigError(f"unknown key {extra[0]!r} in [{where}]")
    return obj


def _build(cls, obj, where: str, skip: tuple[str, ...] = (), **fixed):
    try:
        return cls(**_take(cls, obj, where, skip), **fixed)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"[{where}]: {e}") from None


def from_dict(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    top = {"seed", "model", "data", "train", "io"}
    extra = sorted(set(raw) - top)
    if extra:
        raise ConfigError(f"unknown top-level key {extra[0]!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    m = raw.get("model", {})
    if set(m) - {"vision", "lm", "adapters"}:
        raise ConfigError(f"unknown key {sorted(set(m) - {'vision', 'lm', 'adapters'})[0]!r} in [model]")
    try:
        model = ModelConfig(_build(VisionConfig, m.get("vision", {}), "model.vision"),
                            _build(LMConfig, m.get("lm", {}), "model.lm"),
                            _build(AdapterSettings, m.get("adapters", {}), "model.adapters"), seed)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"[model]: {e}") from None
    t = raw.get("train", {})
    if set(t) - {PRETRAIN, FINETUNE}:
        raise ConfigError(f"unknown key {sorted(set(t) - {PRETRAIN, FINETUNE})[0]!r} in [train]")
    plans = {}
    for stage, ctor in ((PRETRAIN, TrainPlan.pretrain), (FINETUNE, TrainPlan.finetune)):
        obj = dict(_take(TrainPlan, t.get(stage, {}), f"train.{stage}", ("stage", "seed")))
        try:
            plans[stage] = ctor(seed=seed, **obj)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[train.{stage}]: {e}") from None
    data = _build(DataSection, raw.get("data", {}), "data")
    if not 0.0 <= data.delta <= 1.0:
        raise ConfigError(f"[data]: delta must lie in [0, 1], got {data.delta}")
    return RunConfig(seed, model, data, plans[PRETRAIN], plans[FINETUNE],
                     _build(IOSection, raw.get("io", {}), "io"), base_dir)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None
    return from_dict(raw, p.parent)
