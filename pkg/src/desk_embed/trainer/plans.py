"""Stage descriptors, their published defaults, and learning-rate schedules."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class Stage(str, enum.Enum):
    MLM = "mlm"
    CONTRASTIVE_PRETRAIN = "contrastive_pretrain"
    FINETUNE = "finetune"

    @classmethod
    def parse(cls, text: str) -> "Stage":
        aliases = {"pretrain": cls.CONTRASTIVE_PRETRAIN, "contrastive": cls.CONTRASTIVE_PRETRAIN}
        return aliases.get(text) or cls(text)


class Schedule(str, enum.Enum):
    LINEAR_DECAY = "linear_decay"
    INVERSE_SQRT = "inverse_sqrt"
    LINEAR_COOLDOWN = "linear_cooldown"


@dataclass(frozen=True)
class TrainPlan:
    stage: Stage
    lr: float
    beta1: float
    beta2: float
    weight_decay: float
    grad_clip: float | None
    schedule: Schedule
    warmup_fraction: float | None = None
    warmup_steps: int | None = None
    batch_size: int = 64
    max_seq: int = 128
    epochs: int = 1
    max_steps: int | None = None
    hard_negatives: int = 0
    mask_rate: float = 0.30
    temperature: float = 0.05
    bidirectional: bool = False
    accumulation_steps: int = 1
    gradcache_chunk: int | None = None
    eps: float = 1e-8
    log_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        if (self.warmup_fraction is None) == (self.warmup_steps is None):
            raise ValueError("set exactly one of warmup_fraction / warmup_steps")
        if self.batch_size < 1 or self.accumulation_steps < 1:
            raise ValueError("batch_size and accumulation_steps must be >= 1")

    def warmup_for(self, total_steps: int) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(self.warmup_fraction * total_steps))

    def override(self, **changes) -> "TrainPlan":
        if "warmup_steps" in changes and "warmup_fraction" not in changes:
            changes["warmup_fraction"] = None
        if "warmup_fraction" in changes and "warmup_steps" not in changes:
            changes["warmup_steps"] = None
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        d["schedule"] = self.schedule.value
        return d


PUBLISHED_DEFAULTS: dict[Stage, TrainPlan] = {
    Stage.MLM: TrainPlan(
        stage=Stage.MLM, lr=5e-4, beta1=0.9, beta2=0.98, weight_decay=1e-5, grad_clip=None,
        schedule=Schedule.LINEAR_DECAY, warmup_fraction=0.06, batch_size=4096, max_seq=2048,
        mask_rate=0.30, accumulation_steps=8,
    ),
    Stage.CONTRASTIVE_PRETRAIN: TrainPlan(
        stage=Stage.CONTRASTIVE_PRETRAIN, lr=2e-4, beta1=0.9, beta2=0.999, weight_decay=0.01, grad_clip=1.0,
        schedule=Schedule.INVERSE_SQRT, warmup_steps=700, batch_size=16384, max_seq=2048, epochs=1,
    ),
    Stage.FINETUNE: TrainPlan(
        stage=Stage.FINETUNE, lr=2e-5, beta1=0.9, beta2=0.999, weight_decay=0.01, grad_clip=1.0,
        schedule=Schedule.LINEAR_COOLDOWN, warmup_steps=400, batch_size=256, max_seq=2048, epochs=1,
        hard_negatives=7,
    ),
}

# CPU-sized overrides; optimizer betas, decay, clipping and schedule shapes are kept.
DESK_OVERRIDES: dict[Stage, dict] = {
    Stage.MLM: dict(batch_size=64, max_seq=128, accumulation_steps=1),
    Stage.CONTRASTIVE_PRETRAIN: dict(batch_size=128, max_seq=128, warmup_steps=30),
    Stage.FINETUNE: dict(batch_size=32, max_seq=128, warmup_steps=10),
}


def published_plan(stage: Stage | str) -> TrainPlan:
    return PUBLISHED_DEFAULTS[Stage.parse(stage) if isinstance(stage, str) else stage]


def desk_plan(stage: Stage | str, **changes) -> TrainPlan:
    stage = Stage.parse(stage) if isinstance(stage, str) else stage
    merged = {**DESK_OVERRIDES[stage], **changes}
    return published_plan(stage).override(**merged)


def lr_at(plan: TrainPlan, step: int, total_steps: int) -> float:
    """Learning rate for optimizer step ``step`` of ``total_steps``."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = plan.warmup_for(total_steps)
    if warm > 0 and step < warm:
        return plan.lr * step / warm
    if plan.schedule is Schedule.INVERSE_SQRT:
        return plan.lr * math.sqrt(max(warm, 1) / max(step, warm, 1))
    span = total_steps - warm
    if span <= 0:
        return plan.lr
    return plan.lr * (total_steps - step) / span


def _coerce(plan: TrainPlan, key: str, value):
    known = {f.name: f for f in fields(TrainPlan)}
    if key not in known:
        raise KeyError(f"unknown plan key {key!r}")
    if isinstance(value, str):
        low = value.lower()
        if low in ("none", "null"):
            return None
        if low in ("true", "false"):
            return low == "true"
        current = getattr(plan, key)
        if isinstance(current, bool):
            raise ValueError(f"{key} expects true/false")
        if isinstance(current, int) or key in ("warmup_steps", "max_steps", "gradcache_chunk"):
            try:
                return int(value)
            except ValueError:
                pass
        try:
            return float(value)
        except ValueError:
            return value
    return value


def apply_overrides(plan: TrainPlan, overrides: dict) -> TrainPlan:
    return plan.override(**{k: _coerce(plan, k, v) for k, v in overrides.items()})


def load_plan(stage: Stage | str, config_path=None, overrides: dict | None = None,
              profile: str = "desk") -> TrainPlan:
    """Resolve a plan: profile defaults, then the config file's stage section, then CLI overrides.

    The config file is TOML with one table per stage (``[mlm]``,
    ``[contrastive_pretrain]``, ``[finetune]``).
    """
    stage = Stage.parse(stage) if isinstance(stage, str) else stage
    plan = desk_plan(stage) if profile == "desk" else published_plan(stage)
    if config_path is not None:
        with open(Path(config_path), "rb") as fh:
            doc = tomllib.load(fh)
        section = doc.get(stage.value) or doc.get("pretrain" if stage is Stage.CONTRASTIVE_PRETRAIN else "", {})
        plan = apply_overrides(plan, section)
    if overrides:
        plan = apply_overrides(plan, overrides)
    return plan
