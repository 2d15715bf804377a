"""Experiment configuration: one canonical JSON schema, hashed into every
ledger row so runs are reconstructible."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

from ..backends.base import ConfigError
from ..maskgen import MaskConstraints
from ..poisoner import PoisonPlan, Trigger


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 40
    batch: int = 64
    learning_rate: float = 2e-3
    personalize_epochs: int = 10


@dataclass(frozen=True)
class EvalParams:
    prompt_file: str = ""
    tau: float = 0.5
    images_per_epoch: int = 4
    n_lir_prompts: int = 100


@dataclass(frozen=True)
class BackendParams:
    kind: str = "toy"
    resolution: int = 32
    schedule_steps: int = 200
    draws_per_sample: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    seed: int = 0
    dataset: str = ""           # manifest path; empty -> synthesize
    corpus_size: int = 512
    logo: str = "toy-glyph"     # logo spec path or the bundled glyph name
    backend: BackendParams = field(default_factory=BackendParams)
    plan: PoisonPlan = field(default_factory=PoisonPlan)
    constraints: MaskConstraints = field(default_factory=lambda: MaskConstraints(
        max_area_fraction=0.25))
    train: TrainParams = field(default_factory=TrainParams)
    eval: EvalParams = field(default_factory=EvalParams)

    def to_dict(self) -> dict:
        d = asdict(self)
        # masks inside constraints are not config-file material
        d["constraints"] = {
            "max_area_fraction": self.constraints.max_area_fraction,
            "dilation": self.constraints.dilation,
        }
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        d = json.load(f)
    plan_d = d.get("plan", {})
    trigger = Trigger(**plan_d.pop("trigger")) if "trigger" in plan_d else Trigger()
    return ExperimentConfig(
        experiment_id=d["experiment_id"],
        seed=d.get("seed", 0),
        dataset=d.get("dataset", ""),
        corpus_size=d.get("corpus_size", 512),
        logo=d.get("logo", "toy-glyph"),
        backend=BackendParams(**d.get("backend", {})),
        plan=PoisonPlan(trigger=trigger, **plan_d),
        constraints=MaskConstraints(**d.get("constraints", {})),
        train=TrainParams(**d.get("train", {})),
        eval=EvalParams(**d.get("eval", {})),
    )


def save_config(config: ExperimentConfig, path: str) -> None:
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
