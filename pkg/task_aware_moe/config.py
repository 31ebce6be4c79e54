"""Configuration loader for task-aware MoE experiments."""

import logging
import os
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional, Tuple

from task_aware_moe.errors import ConfigError
from task_aware_moe.lora import DEFAULT_TARGETS
from task_aware_moe.moe_layer import MoEConfig
from task_aware_moe.synth_tasks import TaskConfig
from task_aware_moe.training import TrainingConfig
from task_aware_moe.transformer import ModelConfig

logger = logging.getLogger("task_aware_moe.config")

REQUIRED = object()
STRATEGIES = ("two_stage", "single_stage")


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_list(value: str) -> Tuple[str, ...]:
    return tuple(part.strip() for part in value.split(",") if part.strip())


def _parse_ratios(value: str) -> Tuple[Tuple[int, int], ...]:
    pairs = []
    for part in _parse_list(value):
        g, _, s = part.partition(":")
        pairs.append((int(g), int(s)))
    if not pairs:
        raise ValueError("empty ratio list")
    return tuple(pairs)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ",".join(f"{g}:{s}" for g, s in value)
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


# key: (parser, default, description)
SCHEMA: Dict[str, Tuple[Callable[[str], Any], Any, str]] = {
    "seed": (int, REQUIRED, "base seed for every random stream"),
    "out_dir": (str, "runs/default", "directory for reports, curves and checkpoints"),

    "model.vocab_size": (int, 36, "token vocabulary, 32 symbols + 4 specials"),
    "model.max_len": (int, 32, "maximum sequence length"),
    "model.d_model": (int, 64, "residual width d"),
    "model.d_hidden": (int, 128, "FFN / expert hidden width h"),
    "model.n_layers": (int, 4, "transformer blocks"),
    "model.n_heads": (int, 2, "attention heads"),
    "model.init_std": (float, 0.02, "Gaussian init std"),

    "moe.experts_per_group": (int, 2, "experts per task group e"),
    "moe.shared_experts": (int, 1, "always-on shared experts"),
    "moe.top_k": (int, 1, "experts kept per token inside a group"),
    "moe.alpha_init": (float, 0.2, "initial shared-expert scale α"),
    "moe.task_router": (_parse_bool, True, "task-aware router + group loss; false = flat pool"),
    "moe.gate_full_softmax": (_parse_bool, False, "weight k=1 outputs by the raw softmax score"),
    "moe.force_group_by_label": (_parse_bool, False, "route by ground-truth group instead of the router"),
    "moe.perturb_scale": (float, 0.01, "σ of expert-copy noise, relative to per-matrix RMS"),

    "loss.lambda_und": (float, 0.3, "λ1"),
    "loss.lambda_gen": (float, 0.3, "λ2"),
    "loss.gamma": (float, 0.1, "γ, group-loss weight"),

    "pretrain.steps": (int, 0, "joint dense pretraining of the skeleton; 0 = random skeleton"),
    "pretrain.lr": (float, 1e-3, "pretraining learning rate"),
    "pretrain.batch_size": (int, 16, "pretraining batch size"),

    "stage1.steps": (int, 200, "stage-1 steps per task"),
    "stage1.lr": (float, 1e-4, "stage-1 learning rate"),
    "stage1.batch_size": (int, 2, "stage-1 batch size"),
    "stage1.weight_decay": (float, 0.0, "stage-1 decoupled weight decay"),
    "stage1.schedule": (str, "cosine", "cosine or constant"),

    "stage2.steps": (int, 400, "stage-2 steps"),
    "stage2.lr": (float, 2e-5, "stage-2 learning rate"),
    "stage2.batch_size": (int, 2, "stage-2 batch size"),
    "stage2.weight_decay": (float, 0.0, "stage-2 decoupled weight decay"),
    "stage2.schedule": (str, "cosine", "cosine or constant"),

    "train.strategy": (str, "two_stage", "two_stage, or single_stage (MoE trained from scratch)"),

    "eval.every": (int, 0, "evaluate every N steps; 0 = only at the end"),
    "eval.samples": (int, 256, "validation samples per evaluation"),
    "eval.convergence_target": (float, 0.9, "joint accuracy threshold for epochs-to-convergence"),

    "lora.rank": (int, 8, "adapter rank r"),
    "lora.alpha": (float, 16.0, "adapter scale numerator"),
    "lora.targets": (_parse_list, tuple(DEFAULT_TARGETS), "comma-separated glob patterns"),

    "task.min_len": (int, 4, "shortest content"),
    "task.max_len": (int, 12, "longest content"),
    "task.mix_prob": (float, 0.5, "probability a mixed sample is understanding"),
    "task.train_size": (int, 2048, "training samples per task"),
    "task.val_size": (int, 512, "validation samples per task"),
    "task.mse_mode": (_parse_bool, False, "regression targets for generation samples"),

    "expert_load.samples": (int, 100, "instances averaged by the expert-load report"),
    "sweep.ratios": (_parse_ratios, ((1, 0), (0, 1), (1, 1), (2, 1), (3, 1)),
                     "(experts per group : shared experts) pairs"),
}


def read_key_values(filepath: str) -> Dict[str, str]:
    """Read ``key = value`` lines, skipping blanks and # comments."""
    values: Dict[str, str] = {}
    try:
        with open(filepath, 'r') as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                # Skip comments and empty lines
                if not line or line.startswith('#'):
                    continue
                # Split on the first equals sign
                if '=' not in line:
                    raise ConfigError(f"{filepath}:{line_no}: expected key = value, got {line!r}")
                key, value = line.split('=', 1)
                values[key.strip()] = value.strip()
    except OSError as e:
        logger.error(f"Error reading config file {filepath}: {e}")
        raise ConfigError(f"cannot read config file {filepath}: {e}") from e
    return values


class ExperimentConfig:
    """Every schema key resolved to a typed value."""

    def __init__(self, values: Dict[str, Any]):
        self.values = values

    @classmethod
    def from_strings(cls, raw: Dict[str, str]) -> "ExperimentConfig":
        unknown = sorted(k for k in raw if k not in SCHEMA)
        if unknown:
            raise ConfigError("unknown config keys", keys=unknown)
        values: Dict[str, Any] = {}
        missing: List[str] = []
        invalid: List[str] = []
        for key, (parse, default, _) in SCHEMA.items():
            if key in raw:
                try:
                    values[key] = parse(raw[key])
                except ValueError:
                    invalid.append(f"{key}={raw[key]!r}")
            elif default is REQUIRED:
                missing.append(key)
            else:
                values[key] = default
        if missing:
            raise ConfigError("missing required config keys", keys=missing)
        if invalid:
            raise ConfigError("unparsable config values", keys=invalid)
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def defaults(cls, seed: int = 0) -> "ExperimentConfig":
        return cls.from_strings({"seed": str(seed)})

    def validate(self) -> None:
        self.model_config().validate()
        self.moe_config().validate()
        self.task_config().validate()
        for stage in (1, 2):
            self.training_config(stage).validate()
        if self["train.strategy"] not in STRATEGIES:
            raise ConfigError(f"train.strategy must be one of {STRATEGIES}", keys=["train.strategy"])
        if self["lora.rank"] < 1:
            raise ConfigError("lora.rank must be >= 1", keys=["lora.rank"])
        longest = 2 * self["task.max_len"] + 1
        if longest > self["model.max_len"]:
            raise ConfigError(f"task.max_len={self['task.max_len']} needs model.max_len >= {longest}",
                              keys=["task.max_len", "model.max_len"])

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, **dotted: Any) -> "ExperimentConfig":
        """Copy with some keys replaced; keys use ``__`` for dots (stage1__lr)."""
        values = dict(self.values)
        for name, value in dotted.items():
            key = name.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError("unknown config keys", keys=[key])
            values[key] = value
        cfg = ExperimentConfig(values)
        cfg.validate()
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return {k: _format(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}

    def to_text(self) -> str:
        lines = []
        for key, (_, _, description) in SCHEMA.items():
            lines.append(f"# {description}")
            lines.append(f"{key} = {_format(self.values[key])}")
        return "\n".join(lines) + "\n"

    # ------------------------------------------------------------------
    # Typed views

    @property
    def seed(self) -> int:
        return self["seed"]

    def model_config(self, regression_head: Optional[bool] = None) -> ModelConfig:
        return ModelConfig(vocab_size=self["model.vocab_size"], max_len=self["model.max_len"],
                           d_model=self["model.d_model"], d_hidden=self["model.d_hidden"],
                           n_layers=self["model.n_layers"], n_heads=self["model.n_heads"],
                           init_std=self["model.init_std"],
                           regression_head=self["task.mse_mode"] if regression_head is None else regression_head)

    def moe_config(self) -> MoEConfig:
        return MoEConfig(experts_per_group=self["moe.experts_per_group"], shared_experts=self["moe.shared_experts"],
                         top_k=self["moe.top_k"], alpha_init=self["moe.alpha_init"],
                         task_router=self["moe.task_router"], gate_full_softmax=self["moe.gate_full_softmax"],
                         force_group_by_label=self["moe.force_group_by_label"],
                         router_init_std=self["model.init_std"], perturb_scale=self["moe.perturb_scale"])

    def task_config(self) -> TaskConfig:
        return TaskConfig(min_len=self["task.min_len"], max_len=self["task.max_len"], mix_prob=self["task.mix_prob"],
                          train_size=self["task.train_size"], val_size=self["task.val_size"],
                          mse_mode=self["task.mse_mode"])

    def training_config(self, stage: int) -> TrainingConfig:
        prefix = f"stage{stage}"
        return TrainingConfig(stage=stage, batch_size=self[f"{prefix}.batch_size"], lr=self[f"{prefix}.lr"],
                              weight_decay=self[f"{prefix}.weight_decay"], schedule=self[f"{prefix}.schedule"],
                              steps=self[f"{prefix}.steps"], lambda_und=self["loss.lambda_und"],
                              lambda_gen=self["loss.lambda_gen"], gamma=self["loss.gamma"],
                              alpha_init=self["moe.alpha_init"], seed=self.seed,
                              eval_every=self["eval.every"], eval_samples=self["eval.samples"])

    def pretrain_config(self) -> TrainingConfig:
        base = self.training_config(1)
        return replace(base, steps=max(1, self["pretrain.steps"]), lr=self["pretrain.lr"],
                       batch_size=self["pretrain.batch_size"], eval_every=0)


def load_config(filepath: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """
    Load an experiment config file and apply string overrides.

    Args:
        filepath: ``key = value`` file; None uses only defaults and overrides
        overrides: dotted keys to raw string values (from CLI flags)

    Returns:
        ExperimentConfig
    """
    raw: Dict[str, str] = {}
    if filepath is not None:
        if not os.path.exists(filepath):
            raise ConfigError(f"config file not found: {filepath}")
        raw = read_key_values(filepath)
        logger.info(f"Loaded {len(raw)} config keys from {filepath}")
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = str(value)
    return ExperimentConfig.from_strings(raw)


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> Dict[str, Tuple[Any, Any]]:
    """Keys whose values differ, sorted"""
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in sorted(da) if da[k] != db[k]}
