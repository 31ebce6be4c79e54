#!/usr/bin/env python3
"""
Training Strategies

Stage 1 trains one dense model per task from a shared random skeleton with
only the FFNs unfrozen. Stage 2 turns the two FFN stacks into task-aware MoE
layers, attaches LoRA adapters and fine-tunes on mixed data with

    L_total = λ1·L_und + λ2·L_gen + γ·L_group

The joint dense and single-stage MoE baselines reuse the same Trainer.
"""

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from task_aware_moe import functional as F
from task_aware_moe.errors import ConfigError, ContractError, NumericError
from task_aware_moe.lora import DEFAULT_LORA_ALPHA, DEFAULT_RANK, DEFAULT_TARGETS, attach_lora, merge_all
from task_aware_moe.moe_layer import ExpertFFN, MoEConfig, build_moe_from_ffn, init_moe
from task_aware_moe.optim import AdamW, cosine_lr
from task_aware_moe.params import copy_tree
from task_aware_moe.router import TaskGroup, broadcast_labels, group_loss
from task_aware_moe.synth_tasks import SyntheticDataset, TaskBatch, TaskMetrics, eval_task_accuracy
from task_aware_moe.tensor import Tensor
from task_aware_moe.transformer import ModelParams, ar_loss, forward

logger = logging.getLogger("task_aware_moe.training")

SCHEDULES = ("cosine", "constant")
CONVERGENCE_PATIENCE = 2


@dataclass
class TrainingConfig:
    """One training run; defaults are the stage-1 column of the hyperparameter table"""
    stage: int = 1
    batch_size: int = 2
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    schedule: str = "cosine"
    steps: int = 200
    lambda_und: float = 0.3
    lambda_gen: float = 0.3
    gamma: float = 0.1
    alpha_init: float = 0.2
    seed: int = 0
    eval_every: int = 0
    eval_samples: int = 256

    @classmethod
    def stage1(cls, **overrides) -> "TrainingConfig":
        return cls(**{"stage": 1, "lr": 1e-4, "steps": 200, "batch_size": 2, **overrides})

    @classmethod
    def stage2(cls, **overrides) -> "TrainingConfig":
        return cls(**{"stage": 2, "lr": 2e-5, "steps": 400, "batch_size": 2, **overrides})

    def validate(self) -> None:
        bad = [k for k in ("lambda_und", "lambda_gen", "gamma") if getattr(self, k) < 0]
        if bad:
            raise ConfigError("loss weights must be non-negative", keys=bad)
        if self.steps < 1:
            raise ConfigError("steps must be >= 1", keys=["steps"])
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", keys=["batch_size"])
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}", keys=["stage"])
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}", keys=["schedule"])


@dataclass
class StepRecord:
    step: int
    epoch: float
    lr: float
    l_und: Optional[float]
    l_gen: Optional[float]
    l_group: Optional[float]
    l_total: float


@dataclass
class EvalRecord:
    step: int
    epoch: float
    metrics: TaskMetrics

    @property
    def joint(self) -> float:
        """min over the task scores that were measured"""
        scores = [s for s in (self.metrics.understanding_accuracy, self.metrics.generation_exact_match) if s is not None]
        return min(scores) if scores else 0.0


@dataclass
class TrainingHistory:
    steps: List[StepRecord] = field(default_factory=list)
    evals: List[EvalRecord] = field(default_factory=list)

    CSV_COLUMNS = ("step", "epoch", "lr", "l_und", "l_gen", "l_group", "l_total")

    def record(self, entry: StepRecord) -> None:
        if self.steps and entry.step <= self.steps[-1].step:
            raise ContractError(f"step {entry.step} does not follow step {self.steps[-1].step}")
        self.steps.append(entry)

    def series(self, column: str) -> np.ndarray:
        return np.array([np.nan if getattr(s, column) is None else getattr(s, column) for s in self.steps])

    def save_csv(self, path: str) -> None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.CSV_COLUMNS)
            for s in self.steps:
                writer.writerow(["" if getattr(s, c) is None else repr(getattr(s, c)) for c in self.CSV_COLUMNS])

    def final_metrics(self) -> Optional[TaskMetrics]:
        return self.evals[-1].metrics if self.evals else None

    def summary(self) -> Dict:
        last = self.steps[-1] if self.steps else None
        return {
            "steps": len(self.steps),
            "final_loss": None if last is None else last.l_total,
            "evals": [{"step": e.step, "epoch": e.epoch, **e.metrics.to_dict()} for e in self.evals],
        }


# ----------------------------------------------------------------------
# Losses

def total_loss(l_und: Optional[Tensor], l_gen: Optional[Tensor], l_group: Optional[Tensor],
               cfg: TrainingConfig) -> Tensor:
    """λ1·L_und + λ2·L_gen + γ·L_group; absent terms contribute 0"""
    weights = {"lambda_und": cfg.lambda_und, "lambda_gen": cfg.lambda_gen, "gamma": cfg.gamma}
    bad = [k for k, w in weights.items() if w < 0]
    if bad:
        raise ConfigError("loss weights must be non-negative", keys=bad)
    total: Tensor = Tensor(0.0)
    for loss, weight in ((l_und, cfg.lambda_und), (l_gen, cfg.lambda_gen), (l_group, cfg.gamma)):
        if loss is not None:
            total = F.add(total, F.mul(loss, weight))
    return total


def loss_delta_correlation(history: TrainingHistory) -> Optional[float]:
    """
    Pearson correlation of step-to-step changes in L_und and L_gen.

    Negative values mean one loss tends to rise while the other falls.
    None when fewer than three steps carry both losses.
    """
    und, gen = history.series("l_und"), history.series("l_gen")
    both = ~(np.isnan(und) | np.isnan(gen))
    if both.sum() < 3:
        return None
    du, dg = np.diff(und[both]), np.diff(gen[both])
    if du.std() == 0 or dg.std() == 0:
        return None
    return float(np.corrcoef(du, dg)[0, 1])


def epochs_to_convergence(history: TrainingHistory, target: float,
                          patience: int = CONVERGENCE_PATIENCE) -> Optional[int]:
    """
    First epoch (rounded up) at which the joint score reaches ``target`` and
    stays there for ``patience`` consecutive evaluations; None if never.
    """
    run = 0
    for i, record in enumerate(history.evals):
        run = run + 1 if record.joint >= target else 0
        if run >= patience:
            first = history.evals[i - patience + 1]
            return max(1, int(math.ceil(first.epoch - 1e-9)))
    return None


# ----------------------------------------------------------------------
# Trainer

class Trainer:
    """
    Owns the optimizer, the data order and the history of one run.

    Args:
        model: parameters; ``trainable`` (if given) decides what is updated
        cfg: optimizer, schedule and loss weights
        train_set: fixed training samples, iterated in seeded shuffled epochs
        val_set: evaluated every ``cfg.eval_every`` steps and at the end
        objective: "single" for one masked CE over every answer token,
            "weighted" for the λ/γ combination
        use_group_loss: add L_group when the model has task routers
        regression: score generation samples with MSE on the regression head
    """

    def __init__(self, model: ModelParams, cfg: TrainingConfig, train_set: SyntheticDataset,
                 val_set: Optional[SyntheticDataset] = None, trainable: Optional[Callable[[str], bool]] = None,
                 objective: str = "single", use_group_loss: bool = True, regression: bool = False,
                 name: str = "run"):
        cfg.validate()
        if objective not in ("single", "weighted"):
            raise ConfigError(f"unknown objective {objective!r}", keys=["objective"])
        if regression and model.regression_head is None:
            raise ContractError("MSE-mode training needs a model with a regression head")
        if len(train_set) == 0:
            raise ContractError("training set is empty")
        self.model = model
        self.cfg = cfg
        self.train_set = train_set
        self.val_set = val_set.subset(cfg.eval_samples) if val_set is not None else None
        self.objective = objective
        self.use_group_loss = use_group_loss
        self.regression = regression
        self.name = name
        if trainable is not None:
            model.set_trainable(trainable)
        params = model.trainable_parameters()
        if not params:
            raise ContractError("no trainable parameters")
        self.optimizer = AdamW(params, betas=cfg.betas, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 0x5EED])
        self.history = TrainingHistory()
        self.samples_seen = 0

    @property
    def epoch(self) -> float:
        return self.samples_seen / len(self.train_set)

    def batches(self) -> Iterator[TaskBatch]:
        while True:
            yield from self.train_set.epoch_batches(self.cfg.batch_size, self.rng)

    def lr_at(self, step: int) -> float:
        if self.cfg.schedule == "constant":
            return self.cfg.lr
        return cosine_lr(step, self.cfg.steps, self.cfg.lr)

    def compute_losses(self, batch: TaskBatch) -> Tuple[Optional[Tensor], Optional[Tensor], Optional[Tensor], Tensor]:
        """(L_und, L_gen, L_group, L_total) for one batch"""
        samples = batch.samples
        out = forward(self.model, batch.sequences, [s.g_star for s in samples], route_by_label=True)
        targets = np.concatenate([s.shifted_targets for s in samples])
        mask = np.concatenate([s.answer_mask for s in samples])
        labels = broadcast_labels(out.lengths, [s.g_star for s in samples])
        und_mask = mask * (labels == TaskGroup.UNDERSTANDING)
        gen_mask = mask * (labels == TaskGroup.GENERATION)

        l_und = ar_loss(out.logits, targets, und_mask) if und_mask.any() else None
        l_gen = None
        if gen_mask.any():
            if self.regression:
                l_gen = self._regression_loss(out.regression, samples, gen_mask)
            else:
                l_gen = ar_loss(out.logits, targets, gen_mask)

        l_group = None
        assignments = out.group_assignments()
        if self.use_group_loss and assignments:
            l_group = group_loss(assignments, labels)

        if self.objective == "weighted":
            total = total_loss(l_und, l_gen, l_group, self.cfg)
        elif self.regression:
            total = total_loss(l_und, l_gen, None, TrainingConfig(lambda_und=1.0, lambda_gen=1.0, gamma=0.0))
        else:
            total = ar_loss(out.logits, targets, mask)
        return l_und, l_gen, l_group, total

    @staticmethod
    def _regression_loss(regression: Tensor, samples, gen_mask: np.ndarray) -> Tensor:
        rows = np.flatnonzero(gen_mask > 0)
        values = np.concatenate([s.regression_target for s in samples if not s.is_understanding])
        if values.shape[0] != rows.shape[0]:
            raise ContractError("generation samples need a regression target per answer token")
        picked = F.take_rows(regression, rows)
        return F.mse(picked, values.reshape(-1, 1))

    def evaluate(self, step: int) -> Optional[EvalRecord]:
        if self.val_set is None:
            return None
        metrics = eval_task_accuracy(self.model, self.val_set)
        record = EvalRecord(step=step, epoch=self.epoch, metrics=metrics)
        self.history.evals.append(record)
        logger.info(f"[{self.name}] step {step} epoch {self.epoch:.2f}: und={metrics.understanding_accuracy} "
                    f"gen={metrics.generation_exact_match} tok={metrics.token_accuracy:.3f}")
        return record

    def train(self) -> TrainingHistory:
        cfg = self.cfg
        logger.info(f"[{self.name}] training {len(self.optimizer.params)} tensors "
                    f"({self.model.num_parameters(trainable_only=True)} values) for {cfg.steps} steps")
        batches = self.batches()
        for step in range(1, cfg.steps + 1):
            batch = next(batches)
            self.optimizer.zero_grad()
            l_und, l_gen, l_group, total = self.compute_losses(batch)
            value = total.item()
            if not math.isfinite(value):
                raise NumericError(f"[{self.name}] non-finite loss {value} at step {step}")
            total.backward()
            lr = self.lr_at(step - 1)
            self.optimizer.step(lr)
            self.samples_seen += len(batch)
            self.history.record(StepRecord(step=step, epoch=self.epoch, lr=lr,
                                           l_und=None if l_und is None else l_und.item(),
                                           l_gen=None if l_gen is None else l_gen.item(),
                                           l_group=None if l_group is None else l_group.item(),
                                           l_total=value))
            if cfg.eval_every and step % cfg.eval_every == 0 and step != cfg.steps:
                self.evaluate(step)
            elif step % 50 == 0:
                logger.debug(f"[{self.name}] step {step}: loss {value:.4f} lr {lr:.2e}")
        self.evaluate(cfg.steps)
        return self.history


# ----------------------------------------------------------------------
# Strategies

@dataclass
class Stage1Result:
    task: int
    model: ModelParams
    ffns: List[ExpertFFN]
    history: TrainingHistory


@dataclass
class Stage2Result:
    model: ModelParams
    history: TrainingHistory
    lora_slots: List[str] = field(default_factory=list)


def _is_ffn(name: str) -> bool:
    return ".ffn." in name


def stage2_trainable(name: str) -> bool:
    """LoRA factors, routers, α and shared experts"""
    if name.endswith(".base"):
        return False
    return (name.endswith(".lora_a") or name.endswith(".lora_b") or ".task_router." in name
            or ".score_matrices." in name or ".shared_experts." in name or name.endswith(".alpha"))


def pretrain_base(skeleton: ModelParams, train_set: SyntheticDataset, cfg: TrainingConfig) -> TrainingHistory:
    """Joint dense training of every parameter, in place"""
    trainer = Trainer(skeleton, cfg, train_set, trainable=lambda name: True, objective="single", name="pretrain")
    history = trainer.train()
    logger.info(f"Pretrained skeleton for {cfg.steps} steps, final loss {history.steps[-1].l_total:.4f}")
    return history


def train_stage1(task: int, skeleton: ModelParams, train_set: SyntheticDataset, cfg: TrainingConfig,
                 val_set: Optional[SyntheticDataset] = None) -> Stage1Result:
    """
    Train the FFNs of a copy of ``skeleton`` on one task.

    Attention, embeddings, norms and heads stay bit-identical to the skeleton.
    """
    if skeleton.sublayer_kind != "dense":
        raise ContractError("stage 1 needs a model with dense FFN sublayers")
    if task not in (TaskGroup.UNDERSTANDING, TaskGroup.GENERATION):
        raise ContractError(f"task must be 1 or 2, got {task}")
    model = copy_tree(skeleton)
    name = f"stage1-{TaskGroup(task).name.lower()}"
    trainer = Trainer(model, cfg, train_set, val_set, trainable=_is_ffn, objective="single", name=name)
    history = trainer.train()
    return Stage1Result(task=int(task), model=model, ffns=model.ffns(), history=history)


def assemble_moe_model(skeleton: ModelParams, und_ffns: Sequence[ExpertFFN], gen_ffns: Sequence[ExpertFFN],
                       moe_cfg: MoEConfig, rng: np.random.Generator) -> ModelParams:
    """Copy of ``skeleton`` with each dense FFN replaced by an MoE layer built from the stage-1 FFNs"""
    if skeleton.sublayer_kind != "dense":
        raise ContractError("MoE assembly starts from a dense skeleton")
    if not len(und_ffns) == len(gen_ffns) == skeleton.n_layers:
        raise ContractError(f"stage-1 FFN stacks ({len(und_ffns)}, {len(gen_ffns)}) do not match "
                            f"{skeleton.n_layers} layers")
    model = copy_tree(skeleton)
    for block, und, gen in zip(model.blocks, und_ffns, gen_ffns):
        block.moe = build_moe_from_ffn(und, gen, moe_cfg, rng)
        block.ffn = None
    return model


def train_stage2(skeleton: ModelParams, und_ffns: Sequence[ExpertFFN], gen_ffns: Sequence[ExpertFFN],
                 train_set: SyntheticDataset, cfg: TrainingConfig, moe_cfg: MoEConfig,
                 val_set: Optional[SyntheticDataset] = None, lora_targets: Sequence[str] = DEFAULT_TARGETS,
                 lora_rank: int = DEFAULT_RANK, lora_alpha: float = DEFAULT_LORA_ALPHA) -> Stage2Result:
    """
    Assemble the task-aware MoE model and fine-tune it with LoRA on mixed data.

    Args:
        skeleton: the model stage 1 started from (attention and embeddings)
        und_ffns, gen_ffns: per-layer stage-1 FFNs
        train_set: mixed samples
        cfg: stage-2 settings
        moe_cfg: layer layout
        lora_targets: glob patterns; patterns matching nothing are skipped
            only when they are the defaults

    Returns:
        Stage2Result with the adapted (unmerged) model
    """
    rng = np.random.default_rng([cfg.seed, 2])
    moe_cfg = replace(moe_cfg, alpha_init=cfg.alpha_init)
    model = assemble_moe_model(skeleton, und_ffns, gen_ffns, moe_cfg, rng)
    strict = tuple(lora_targets) != tuple(DEFAULT_TARGETS)
    slots = attach_lora(model, lora_targets, lora_rank, lora_alpha, rng, strict=strict)
    trainer = Trainer(model, cfg, train_set, val_set, trainable=stage2_trainable, objective="weighted",
                      use_group_loss=moe_cfg.task_router, name="stage2")
    history = trainer.train()
    return Stage2Result(model=model, history=history, lora_slots=slots)


def train_moe_from_scratch(skeleton: ModelParams, moe_cfg: MoEConfig, train_set: SyntheticDataset,
                           cfg: TrainingConfig, val_set: Optional[SyntheticDataset] = None) -> Stage2Result:
    """Single-stage MoE: the skeleton's FFNs become freshly initialized MoE layers, every parameter trained"""
    if skeleton.sublayer_kind != "dense":
        raise ContractError("MoE assembly starts from a dense skeleton")
    moe_cfg = replace(moe_cfg, alpha_init=cfg.alpha_init)
    rng = np.random.default_rng([cfg.seed, 3])
    model = copy_tree(skeleton)
    for block in model.blocks:
        block.moe = init_moe(block.ffn.d_model, block.ffn.d_hidden, moe_cfg, rng, skeleton.config.init_std)
        block.ffn = None
    trainer = Trainer(model, cfg, train_set, val_set, trainable=lambda name: True, objective="weighted",
                      use_group_loss=moe_cfg.task_router, name="single-stage-moe")
    return Stage2Result(model=model, history=trainer.train())


def train_joint_dense(skeleton: ModelParams, train_set: SyntheticDataset, cfg: TrainingConfig,
                      val_set: Optional[SyntheticDataset] = None, regression: bool = False,
                      name: str = "joint-dense") -> Tuple[ModelParams, TrainingHistory]:
    """Dense multi-task training of a copy of ``skeleton``, every parameter updated"""
    model = copy_tree(skeleton)
    trainer = Trainer(model, cfg, train_set, val_set, trainable=lambda n: True, objective="weighted",
                      use_group_loss=False, regression=regression, name=name)
    return model, trainer.train()


def train_single_task_dense(skeleton: ModelParams, train_set: SyntheticDataset, cfg: TrainingConfig,
                            val_set: Optional[SyntheticDataset] = None,
                            name: str = "single-task-dense") -> Tuple[ModelParams, TrainingHistory]:
    """Dense training of a copy of ``skeleton`` on one task, every parameter updated"""
    model = copy_tree(skeleton)
    trainer = Trainer(model, cfg, train_set, val_set, trainable=lambda n: True, objective="single", name=name)
    return model, trainer.train()


def merged_copy(model: ModelParams) -> ModelParams:
    """Copy with every LoRA adapter folded into its dense weight"""
    clone = copy_tree(model)
    merge_all(clone)
    return clone


def config_echo(cfg: TrainingConfig) -> Dict:
    data = asdict(cfg)
    data["betas"] = list(cfg.betas)
    return data
