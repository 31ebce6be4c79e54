#!/usr/bin/env python3
"""
Experiment Runner

End-to-end pipelines behind the CLI: the two-stage run, the task-conflict
validation, the router/shared-expert ablations, the group:shared ratio sweep,
the expert-load report and the gradient-check suite. Every pipeline is a
pure function of its ExperimentConfig; reports are written with sorted keys
and the wall-clock time kept in its own field.
"""

import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from task_aware_moe import functional as F
from task_aware_moe.checkpoint import load_checkpoint, save_checkpoint
from task_aware_moe.config import ExperimentConfig, config_diff
from task_aware_moe.errors import CheckpointError
from task_aware_moe.gradcheck import grad_check
from task_aware_moe.lora import adapter_state
from task_aware_moe.moe_layer import ExpertLoadStats, MoEConfig, expert_load_stats, init_moe, moe_forward
from task_aware_moe.reports import (
    render_load_bars,
    render_table,
    write_expert_load_csv,
    write_json,
    write_layer_summary_csv,
    write_loss_dynamics_csv,
)
from task_aware_moe.router import TaskGroup, group_loss
from task_aware_moe.synth_tasks import SyntheticDataset, TaskMetrics, build_dataset, eval_task_accuracy
from task_aware_moe.tensor import Tensor, no_grad
from task_aware_moe.training import (
    Stage1Result,
    Stage2Result,
    config_echo,
    epochs_to_convergence,
    loss_delta_correlation,
    merged_copy,
    pretrain_base,
    train_joint_dense,
    train_moe_from_scratch,
    train_single_task_dense,
    train_stage1,
    train_stage2,
)
from task_aware_moe.transformer import EVAL_CHUNK, ModelConfig, ModelParams, ar_loss, forward, init_model

logger = logging.getLogger("task_aware_moe.experiments")

SHARED_ONLY_NOTE = ("zero experts per group: the routed term is empty, so each MoE layer outputs "
                    "alpha * SharedExpert(x) alone")
GRADCHECK_TOLERANCE = 1e-4


@dataclass
class TaskData:
    und_train: SyntheticDataset
    gen_train: SyntheticDataset
    mixed_train: SyntheticDataset
    und_val: SyntheticDataset
    gen_val: SyntheticDataset

    @property
    def mixed_val(self) -> SyntheticDataset:
        samples = [s for pair in zip(self.und_val.samples, self.gen_val.samples) for s in pair]
        return SyntheticDataset(samples, kind="mixed", seed=self.und_val.seed, split="val")


@dataclass
class ExperimentReport:
    name: str
    config: Dict
    seed: int
    metrics: Dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> Dict:
        return {"experiment": self.name, "config": self.config, "seed": self.seed, "metrics": self.metrics,
                "wall_clock_seconds": self.wall_clock_seconds}

    def save(self, out_dir: str) -> str:
        path = os.path.join(out_dir, "report.json")
        write_json(path, self.to_dict())
        return path


# ----------------------------------------------------------------------
# Shared building blocks

def build_task_data(cfg: ExperimentConfig, mse_mode: Optional[bool] = None) -> TaskData:
    task_cfg = cfg.task_config()
    if mse_mode is not None:
        task_cfg = replace(task_cfg, mse_mode=mse_mode)
    seed = cfg.seed
    return TaskData(
        und_train=build_dataset("understanding", task_cfg.train_size, seed, "train", task_cfg),
        gen_train=build_dataset("generation", task_cfg.train_size, seed, "train", task_cfg),
        mixed_train=build_dataset("mixed", 2 * task_cfg.train_size, seed, "train", task_cfg),
        und_val=build_dataset("understanding", task_cfg.val_size, seed, "val", task_cfg),
        gen_val=build_dataset("generation", task_cfg.val_size, seed, "val", task_cfg),
    )


def build_skeleton(cfg: ExperimentConfig, data: TaskData, model_cfg: Optional[ModelConfig] = None) -> ModelParams:
    """Random dense model, optionally pretrained jointly before stage 1"""
    skeleton = init_model(model_cfg or cfg.model_config(), np.random.default_rng([cfg.seed, 1]))
    if cfg["pretrain.steps"] > 0:
        pretrain_base(skeleton, data.mixed_train, cfg.pretrain_config())
    return skeleton


def run_stage1_pair(cfg: ExperimentConfig, skeleton: ModelParams, data: TaskData) -> Dict[int, Stage1Result]:
    stage1_cfg = cfg.training_config(1)
    results = {}
    for task, train_set, val_set in ((TaskGroup.UNDERSTANDING, data.und_train, data.und_val),
                                     (TaskGroup.GENERATION, data.gen_train, data.gen_val)):
        results[int(task)] = train_stage1(task, skeleton, train_set, stage1_cfg, val_set)
    return results


def _stage2_moe_config(cfg: ExperimentConfig) -> MoEConfig:
    moe_cfg = cfg.moe_config()
    e = moe_cfg.experts_per_group
    pool = e if moe_cfg.task_router else 2 * e
    if e and moe_cfg.top_k > pool:
        logger.warning(f"top_k={moe_cfg.top_k} exceeds the {pool} experts available; clamping")
        moe_cfg = replace(moe_cfg, top_k=pool)
    return moe_cfg


def _eval_cfg(cfg: ExperimentConfig, stage: int):
    tc = cfg.training_config(stage)
    if tc.eval_every == 0:
        tc = replace(tc, eval_every=max(1, tc.steps // 10))
    return tc


def run_moe_variant(cfg: ExperimentConfig, skeleton: ModelParams, stage1: Dict[int, Stage1Result],
                    data: TaskData) -> Stage2Result:
    """Stage 2 (or single-stage training) for one MoE configuration"""
    moe_cfg = _stage2_moe_config(cfg)
    if cfg["train.strategy"] == "single_stage":
        budget = 2 * cfg["stage1.steps"] + cfg["stage2.steps"]
        tc = replace(cfg.training_config(2), steps=budget, lr=cfg["stage1.lr"],
                     eval_every=cfg["eval.every"] or max(1, budget // 10))
        return train_moe_from_scratch(skeleton, moe_cfg, data.mixed_train, tc, data.mixed_val)
    return train_stage2(skeleton, stage1[1].ffns, stage1[2].ffns, data.mixed_train, _eval_cfg(cfg, 2), moe_cfg,
                        data.mixed_val, cfg["lora.targets"], cfg["lora.rank"], cfg["lora.alpha"])


def collect_routing(model: ModelParams, samples, chunk: int = EVAL_CHUNK):
    records = []
    with no_grad():
        for start in range(0, len(samples), chunk):
            part = samples[start:start + chunk]
            out = forward(model, [s.model_input for s in part], [s.g_star for s in part])
            records.extend(out.routing)
    return records


def report_expert_load(model: ModelParams, dataset: SyntheticDataset, samples: int = 100,
                       task_filter: Optional[int] = None) -> ExpertLoadStats:
    """Average routing over the first ``samples`` instances (optionally one task's)"""
    if model.sublayer_kind != "moe":
        raise CheckpointError("expert-load needs a model with MoE sublayers")
    pool = [s for s in dataset if task_filter is None or s.g_star == task_filter][:samples]
    return expert_load_stats(collect_routing(model, pool), task_filter)


def load_stats_summary(stats: ExpertLoadStats) -> Dict:
    e = stats.experts_per_group
    summary = {"loads": stats.loads, "layers": stats.layers, "shared_ratio": stats.shared_ratio}
    if stats.routing_accuracy is not None:
        summary["routing_accuracy"] = stats.routing_accuracy
    if e and stats.loads.shape[1] == 2 * e:
        summary["understanding_group_load"] = stats.group_load(TaskGroup.UNDERSTANDING)
        summary["generation_group_load"] = stats.group_load(TaskGroup.GENERATION)
    return summary


def _metrics(m: TaskMetrics) -> Dict:
    return m.to_dict()


def _evaluate(model, data: TaskData) -> TaskMetrics:
    return eval_task_accuracy(model, data.mixed_val)


def _stage1_reports(stage1: Dict[int, Stage1Result], data: TaskData) -> Dict:
    return {"understanding": _metrics(eval_task_accuracy(stage1[1].model, data.und_val)),
            "generation": _metrics(eval_task_accuracy(stage1[2].model, data.gen_val))}


def save_model(path: str, model: ModelParams) -> None:
    save_checkpoint(path, merged_copy(model).state_dict())


def load_model(path: str, cfg: ExperimentConfig, moe: bool = True) -> ModelParams:
    """Rebuild the architecture from ``cfg`` and load weights from ``path``"""
    state = load_checkpoint(path)
    moe_cfg = _stage2_moe_config(cfg) if moe else None
    model = init_model(cfg.model_config(), np.random.default_rng(0), moe_cfg)
    model.load_state_dict(state)
    return model


# ----------------------------------------------------------------------
# Pipelines

def run_stage1_only(cfg: ExperimentConfig, out_dir: str) -> ExperimentReport:
    start = time.time()
    data = build_task_data(cfg)
    skeleton = build_skeleton(cfg, data)
    stage1 = run_stage1_pair(cfg, skeleton, data)
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, "skeleton.tamo"), skeleton.state_dict())
    for task, name in ((1, "und"), (2, "gen")):
        save_checkpoint(os.path.join(out_dir, f"stage1_{name}.tamo"), stage1[task].model.state_dict())
        stage1[task].history.save_csv(os.path.join(out_dir, f"history_stage1_{name}.csv"))
    report = ExperimentReport("stage1", cfg.to_dict(), cfg.seed,
                              metrics={"stage1": _stage1_reports(stage1, data)},
                              wall_clock_seconds=time.time() - start)
    report.save(out_dir)
    return report


def _load_stage1(cfg: ExperimentConfig, out_dir: str, data: TaskData) -> Tuple[ModelParams, Dict[int, Stage1Result]]:
    skeleton = init_model(cfg.model_config(), np.random.default_rng(0))
    skeleton.load_state_dict(load_checkpoint(os.path.join(out_dir, "skeleton.tamo")))
    stage1 = {}
    for task, name in ((1, "und"), (2, "gen")):
        model = init_model(cfg.model_config(), np.random.default_rng(0))
        model.load_state_dict(load_checkpoint(os.path.join(out_dir, f"stage1_{name}.tamo")))
        stage1[task] = Stage1Result(task=task, model=model, ffns=model.ffns(), history=None)
    return skeleton, stage1


def _finish_moe_run(name: str, cfg: ExperimentConfig, result: Stage2Result, data: TaskData, out_dir: str,
                    extra: Dict, start: float) -> ExperimentReport:
    os.makedirs(out_dir, exist_ok=True)
    result.history.save_csv(os.path.join(out_dir, "history.csv"))
    save_model(os.path.join(out_dir, "model.tamo"), result.model)
    adapters = adapter_state(result.model)
    if adapters:
        save_checkpoint(os.path.join(out_dir, "adapters.tamo"), adapters)
    with open(os.path.join(out_dir, "config.cfg"), "w") as f:
        f.write(cfg.to_text())

    samples = cfg["expert_load.samples"]
    und_load = report_expert_load(result.model, data.und_val, samples, TaskGroup.UNDERSTANDING)
    gen_load = report_expert_load(result.model, data.gen_val, samples, TaskGroup.GENERATION)
    write_expert_load_csv(os.path.join(out_dir, "expert_load.csv"), und_load)
    write_layer_summary_csv(os.path.join(out_dir, "expert_load_layers.csv"), und_load)

    final = _evaluate(result.model, data)
    metrics = {
        **extra,
        "final": _metrics(final),
        "convergence_epoch": epochs_to_convergence(result.history, cfg["eval.convergence_target"]),
        "training": result.history.summary(),
        "expert_load": {"understanding": load_stats_summary(und_load), "generation": load_stats_summary(gen_load)},
    }
    if cfg["moe.experts_per_group"] == 0:
        metrics["note"] = SHARED_ONLY_NOTE
    report = ExperimentReport(name, cfg.to_dict(), cfg.seed, metrics=metrics, wall_clock_seconds=time.time() - start)
    report.save(out_dir)
    logger.info(f"{name}: und={final.understanding_accuracy} gen={final.generation_exact_match}")
    return report


def run_stage2_only(cfg: ExperimentConfig, out_dir: str) -> ExperimentReport:
    """Stage 2 from the stage-1 checkpoints found in ``out_dir``"""
    start = time.time()
    data = build_task_data(cfg)
    skeleton, stage1 = _load_stage1(cfg, out_dir, data)
    result = run_moe_variant(cfg.with_overrides(train__strategy="two_stage"), skeleton, stage1, data)
    return _finish_moe_run("stage2", cfg, result, data, out_dir, {}, start)


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> ExperimentReport:
    """Stage 1 on both tasks, stage 2 on mixed data, evaluation and reports"""
    start = time.time()
    out_dir = out_dir or cfg["out_dir"]
    data = build_task_data(cfg)
    skeleton = build_skeleton(cfg, data)
    extra = {}
    stage1 = {}
    if cfg["train.strategy"] == "two_stage":
        stage1 = run_stage1_pair(cfg, skeleton, data)
        extra["stage1"] = _stage1_reports(stage1, data)
        extra["stage2_config"] = config_echo(_eval_cfg(cfg, 2))
    result = run_moe_variant(cfg, skeleton, stage1, data)
    return _finish_moe_run("run", cfg, result, data, out_dir, extra, start)


def run_conflict_validation(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> ExperimentReport:
    """
    Single-task vs joint dense training under one step budget.

    Rows: (a) understanding only, (b) generation only, (c) joint. The Δ
    columns of (c) are joint minus single-task. A second joint run with MSE
    generation loss records the loss dynamics.
    """
    start = time.time()
    out_dir = out_dir or cfg["out_dir"]
    data = build_task_data(cfg)
    skeleton = build_skeleton(cfg, data)
    tc = cfg.training_config(1)

    model_a, _ = train_single_task_dense(skeleton, data.und_train, tc, name="conflict-a")
    model_b, _ = train_single_task_dense(skeleton, data.gen_train, tc, name="conflict-b")
    model_c, _ = train_joint_dense(skeleton, data.mixed_train, tc, name="conflict-c")
    und_a = eval_task_accuracy(model_a, data.und_val).understanding_accuracy
    gen_b = eval_task_accuracy(model_b, data.gen_val).generation_exact_match
    joint = eval_task_accuracy(model_c, data.mixed_val)
    rows = [
        {"model": "(a) understanding only", "und": und_a, "gen": None, "delta_und": None, "delta_gen": None},
        {"model": "(b) generation only", "und": None, "gen": gen_b, "delta_und": None, "delta_gen": None},
        {"model": "(c) joint", "und": joint.understanding_accuracy, "gen": joint.generation_exact_match,
         "delta_und": joint.understanding_accuracy - und_a, "delta_gen": joint.generation_exact_match - gen_b},
    ]

    mse_data = build_task_data(cfg, mse_mode=True)
    mse_skeleton = build_skeleton(cfg, mse_data, cfg.model_config(regression_head=True))
    _, dynamics = train_joint_dense(mse_skeleton, mse_data.mixed_train, tc, regression=True, name="loss-dynamics")
    os.makedirs(out_dir, exist_ok=True)
    write_loss_dynamics_csv(os.path.join(out_dir, "loss_dynamics.csv"), dynamics)

    table = render_table(rows, ["model", "und", "gen", "delta_und", "delta_gen"], title="Task objective conflict")
    logger.info("\n" + table)
    metrics = {"rows": rows, "loss_delta_correlation": loss_delta_correlation(dynamics), "table": table}
    report = ExperimentReport("conflict", cfg.to_dict(), cfg.seed, metrics=metrics,
                              wall_clock_seconds=time.time() - start)
    report.save(out_dir)
    return report


def ablation_configs(cfg: ExperimentConfig) -> List[Tuple[str, ExperimentConfig]]:
    """Models A..E; each differs from the previous one by one component"""
    a = cfg.with_overrides(moe__task_router=False, moe__shared_experts=0, train__strategy="two_stage")
    b = a.with_overrides(moe__task_router=True)
    c = b.with_overrides(moe__shared_experts=max(1, cfg["moe.shared_experts"]))
    d = c.with_overrides(train__strategy="single_stage")
    e = d.with_overrides(train__strategy="two_stage")
    return [("A", a), ("B", b), ("C", c), ("D", d), ("E", e)]


def run_ablation_suite(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> ExperimentReport:
    start = time.time()
    out_dir = out_dir or cfg["out_dir"]
    data = build_task_data(cfg)
    skeleton = build_skeleton(cfg, data)
    stage1 = run_stage1_pair(cfg, skeleton, data)
    rows = []
    results: Dict[str, Tuple[TaskMetrics, Optional[int]]] = {}
    previous = None
    for letter, variant in ablation_configs(cfg):
        key = str(sorted(variant.to_dict().items()))
        if key in results:
            # same configuration as an earlier row, so the same deterministic result
            final, epochs = results[key]
        else:
            result = run_moe_variant(variant, skeleton, stage1, data)
            final = _evaluate(result.model, data)
            epochs = epochs_to_convergence(result.history, cfg["eval.convergence_target"])
            results[key] = (final, epochs)
        diff = {} if previous is None else {k: list(v) for k, v in config_diff(previous, variant).items()}
        rows.append({"model": letter, "und": final.understanding_accuracy, "gen": final.generation_exact_match,
                     "joint": final.joint, "convergence_epoch": epochs, "config_diff": diff})
        previous = variant
    table = render_table(rows, ["model", "und", "gen", "joint", "convergence_epoch"], title="Ablations")
    logger.info("\n" + table)
    report = ExperimentReport("ablate", cfg.to_dict(), cfg.seed, metrics={"rows": rows, "table": table},
                              wall_clock_seconds=time.time() - start)
    report.save(out_dir)
    return report


def run_ratio_sweep(cfg: ExperimentConfig, out_dir: Optional[str] = None,
                    ratios: Optional[List[Tuple[int, int]]] = None) -> ExperimentReport:
    """Two-stage runs over (experts per group, shared experts) pairs"""
    start = time.time()
    out_dir = out_dir or cfg["out_dir"]
    ratios = list(ratios or cfg["sweep.ratios"])
    variants = [(g, s, cfg.with_overrides(moe__experts_per_group=g, moe__shared_experts=s,
                                          train__strategy="two_stage")) for g, s in ratios]
    data = build_task_data(cfg)
    skeleton = build_skeleton(cfg, data)
    stage1 = run_stage1_pair(cfg, skeleton, data)
    rows = []
    for g, s, variant in variants:
        result = run_moe_variant(variant, skeleton, stage1, data)
        final = _evaluate(result.model, data)
        row = {"ratio": f"{g}:{s}", "experts_per_group": g, "shared_experts": s,
               "und": final.understanding_accuracy, "gen": final.generation_exact_match, "joint": final.joint}
        if g == 0:
            row["note"] = SHARED_ONLY_NOTE
        rows.append(row)
    table = render_table(rows, ["ratio", "und", "gen", "joint"], title="Group:shared expert ratios")
    logger.info("\n" + table)
    report = ExperimentReport("ratio-sweep", cfg.to_dict(), cfg.seed, metrics={"rows": rows, "table": table},
                              wall_clock_seconds=time.time() - start)
    report.save(out_dir)
    return report


def run_expert_load(cfg: ExperimentConfig, checkpoint: str, out_dir: Optional[str] = None,
                    task_filter: Optional[int] = None, samples: Optional[int] = None) -> Tuple[ExpertLoadStats, str]:
    """Load a trained MoE checkpoint and report routing over validation samples"""
    out_dir = out_dir or cfg["out_dir"]
    model = load_model(checkpoint, cfg, moe=True)
    task_cfg = cfg.task_config()
    dataset = build_dataset("mixed", 2 * task_cfg.val_size, cfg.seed, "val", task_cfg)
    stats = report_expert_load(model, dataset, samples or cfg["expert_load.samples"], task_filter)
    write_expert_load_csv(os.path.join(out_dir, "expert_load.csv"), stats)
    write_layer_summary_csv(os.path.join(out_dir, "expert_load_layers.csv"), stats)
    return stats, render_load_bars(stats)


# ----------------------------------------------------------------------
# Gradient checks

def grad_check_suite(seed: int, eps: float = 1e-5) -> Dict[str, float]:
    """
    Max relative gradient error of softmax + cross-entropy, one MoE layer and
    a two-block transformer, for one seed.
    """
    rng = np.random.default_rng([seed, 99])

    logits = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
    targets = rng.integers(7, size=5)
    weights = Tensor(rng.normal(size=(5, 7)))
    ce = grad_check(lambda: F.add(F.cross_entropy(logits, targets),
                                  F.sum_all(F.mul(F.softmax(logits, axis=1), weights))), [logits], eps)

    moe_cfg = MoEConfig(experts_per_group=2, shared_experts=1, top_k=2)
    layer = init_moe(6, 8, moe_cfg, rng, std=0.3)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    probe = Tensor(rng.normal(size=(4, 6)))
    labels = rng.integers(1, 3, size=4)

    def moe_loss():
        y, record = moe_forward(x, layer, labels)
        return F.add(F.sum_all(F.mul(y, probe)), group_loss([record.assignment], labels))

    moe = grad_check(moe_loss, [x] + layer.parameters(), eps)

    model_cfg = ModelConfig(vocab_size=12, max_len=8, d_model=16, d_hidden=16, n_layers=2, n_heads=2, init_std=0.3)
    model = init_model(model_cfg, rng)
    sequences = [list(rng.integers(12, size=5)), list(rng.integers(12, size=3))]
    inputs = [s[:-1] for s in sequences]
    shifted = np.concatenate([s[1:] for s in sequences])
    mask = np.ones(shifted.shape[0])

    def model_loss():
        return ar_loss(forward(model, inputs).logits, shifted, mask)

    end_to_end = grad_check(model_loss, model.parameters(), eps)
    return {"softmax_ce": ce, "moe_layer": moe, "transformer": end_to_end}
