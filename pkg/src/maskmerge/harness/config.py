"""Experiment configuration: JSON loading, schema validation, seed derivation."""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from ..errors import ContractError
from ..merge import LAYER_WISE
from ..metalearn import BINARIZED, MetaConfig, TtaConfig
from ..nn import MlpSpec, TrainConfig
from .datagen import TaskFamilyConfig

SCHEMA_PATH = Path(__file__).with_name("config_schema.json")
SEED_ENV_VAR = "CF_SEED"

DEFAULT_METHODS = (
    "individual",
    "weight_average",
    "task_arithmetic",
    "ties_merging",
    "adamerging_task_wise",
    "adamerging_layer_wise",
    "concrete_task_arithmetic",
    "concrete_adamerging",
)


def load_schema() -> dict:
    with open(SCHEMA_PATH) as f:
        return json.load(f)


def derive_seed(base_seed: int, stage: str) -> int:
    """Stable per-stage integer seed derived from the experiment seed."""
    seq = np.random.SeedSequence([base_seed, zlib.crc32(stage.encode())])
    return int(seq.generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    model: MlpSpec
    family: TaskFamilyConfig
    methods: tuple[str, ...]
    pretrain: TrainConfig
    finetune: TrainConfig
    scaling_coeff: float = 0.3
    ties_trim_fraction: float = 0.5
    tta: TtaConfig = field(default_factory=TtaConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    unseen_tasks: tuple[str, ...] = ()
    output_dir: str = "out"
    config_hash: str = ""

    def __post_init__(self):
        if self.model.layer_sizes[0] != self.family.input_dim:
            raise ContractError("model input size must equal the family input dimension")
        if self.model.layer_sizes[-1] != self.family.class_count:
            raise ContractError("model output size must equal the family class count")


def _canonical_hash(payload: dict) -> str:
    return hashlib.sha1(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def config_from_dict(payload: dict, source: str = "<dict>",
                     seed_override: int | None = None) -> ExperimentConfig:
    """Validate a raw config mapping and build the typed configuration.

    ``CF_SEED`` in the environment overrides the configured seed; an explicit
    ``seed_override`` (the CLI flag) wins over both.
    """
    try:
        jsonschema.validate(payload, load_schema())
    except jsonschema.ValidationError as e:
        raise ContractError(f"{source}: invalid config: {e.message}") from e

    payload = dict(payload)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            payload["seed"] = int(env_seed)
        except ValueError as e:
            raise ContractError(f"{SEED_ENV_VAR} must be an integer, got '{env_seed}'") from e
    if seed_override is not None:
        payload["seed"] = int(seed_override)
    seed = int(payload["seed"])

    model_raw = dict(payload["model"])
    model_raw.setdefault("seed", derive_seed(seed, "model-init"))
    model = MlpSpec(
        layer_sizes=tuple(model_raw["layer_sizes"]),
        activation=model_raw.get("activation", "relu"),
        seed=model_raw["seed"],
    )
    family = TaskFamilyConfig(**payload.get("family", {}))
    methods = tuple(payload.get("methods", DEFAULT_METHODS))

    pretrain_raw = payload.get("pretrain", {})
    finetune_raw = payload.get("finetune", {})
    pretrain = TrainConfig(
        epochs=pretrain_raw.get("epochs", 30),
        batch_size=pretrain_raw.get("batch_size", 64),
        learning_rate=pretrain_raw.get("learning_rate", 1e-2),
        seed=derive_seed(seed, "pretrain"),
    )
    finetune = TrainConfig(
        epochs=finetune_raw.get("epochs", 100),
        batch_size=finetune_raw.get("batch_size", 64),
        learning_rate=finetune_raw.get("learning_rate", 1e-3),
        seed=derive_seed(seed, "finetune"),
    )

    merge_raw = payload.get("merge", {})
    tta_raw = payload.get("tta", {})
    tta = TtaConfig(
        steps=tta_raw.get("steps", 100),
        lr=tta_raw.get("lr", 1e-3),
        kind=tta_raw.get("kind", LAYER_WISE),
        batch_size=tta_raw.get("batch_size", 64),
        seed=derive_seed(seed, "tta"),
    )
    meta_raw = payload.get("meta", {})
    meta = MetaConfig(
        outer_steps=meta_raw.get("outer_steps", 300),
        alpha=meta_raw.get("alpha", 1.0),
        beta=meta_raw.get("beta", 1e-3),
        temperature=meta_raw.get("temperature", 0.5),
        adamerging_kind=meta_raw.get("adamerging_kind", LAYER_WISE),
        weight_init=meta_raw.get("weight_init", 0.3),
        batch_size=meta_raw.get("batch_size", 64),
        seed=derive_seed(seed, "meta"),
        eval_mask_mode=meta_raw.get("eval_mask_mode", BINARIZED),
    )

    effective = dict(payload)
    effective["seed"] = seed
    return ExperimentConfig(
        seed=seed,
        model=model,
        family=family,
        methods=methods,
        pretrain=pretrain,
        finetune=finetune,
        scaling_coeff=merge_raw.get("scaling_coeff", 0.3),
        ties_trim_fraction=merge_raw.get("ties_trim_fraction", 0.5),
        tta=tta,
        meta=meta,
        unseen_tasks=tuple(payload.get("unseen_tasks", ())),
        output_dir=payload.get("output_dir", "out"),
        config_hash=_canonical_hash(effective),
    )


def load_config(path: str | Path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ContractError(f"{path}: not valid JSON: {e}") from e
    return config_from_dict(payload, source=str(path), seed_override=seed_override)
