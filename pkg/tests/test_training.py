#!/usr/bin/env python3
"""
Tests for the training strategies
"""

import csv

import numpy as np
import pytest

from task_aware_moe.errors import ConfigError, ContractError, NumericError
from task_aware_moe.moe_layer import MoEConfig
from task_aware_moe.synth_tasks import TaskConfig, TaskMetrics, build_dataset
from task_aware_moe.tensor import Tensor, no_grad
from task_aware_moe.training import (
    EvalRecord,
    StepRecord,
    Trainer,
    TrainingConfig,
    TrainingHistory,
    assemble_moe_model,
    config_echo,
    epochs_to_convergence,
    loss_delta_correlation,
    merged_copy,
    pretrain_base,
    stage2_trainable,
    total_loss,
    train_joint_dense,
    train_stage1,
    train_stage2,
)
from task_aware_moe.transformer import ar_loss, forward, init_model

TASKS = TaskConfig(min_len=3, max_len=5, train_size=8, val_size=4)


@pytest.fixture
def skeleton(rng, tiny_model_cfg):
    return init_model(tiny_model_cfg, rng)


@pytest.fixture
def mixed_set():
    return build_dataset("mixed", 8, seed=0, cfg=TASKS)


@pytest.fixture
def und_set():
    return build_dataset("understanding", 8, seed=0, cfg=TASKS)


@pytest.fixture
def gen_set():
    return build_dataset("generation", 8, seed=0, cfg=TASKS)


def quick(stage=1, **overrides):
    factory = TrainingConfig.stage1 if stage == 1 else TrainingConfig.stage2
    return factory(**{"steps": 3, "batch_size": 4, "lr": 1e-3, **overrides})


def eval_record(step, epoch, und, gen):
    return EvalRecord(step=step, epoch=epoch,
                      metrics=TaskMetrics(understanding_accuracy=und, generation_exact_match=gen))


def task_loss(model, dataset):
    samples = list(dataset)
    with no_grad():
        out = forward(model, [s.model_input for s in samples])
        targets = np.concatenate([s.shifted_targets for s in samples])
        mask = np.concatenate([s.answer_mask for s in samples])
        return ar_loss(out.logits, targets, mask).item()


# ============================================================================
# Losses and bookkeeping
# ============================================================================

@pytest.mark.unit
class TestLossHelpers:
    """total_loss, convergence and loss dynamics"""

    def test_total_loss_default_weights(self):
        """0.3·1 + 0.3·1 + 0.1·1"""
        one = Tensor(1.0)
        assert total_loss(one, one, one, TrainingConfig()).item() == pytest.approx(0.7, abs=1e-12)

    def test_gamma_zero_drops_group_term(self, rng):
        values = rng.uniform(0.1, 3.0, size=(5, 3))
        cfg = TrainingConfig(gamma=0.0)
        for und, gen, grp in values:
            got = total_loss(Tensor(und), Tensor(gen), Tensor(grp), cfg).item()
            assert got == pytest.approx(0.3 * und + 0.3 * gen, abs=1e-12)

    def test_random_weights(self, rng):
        for _ in range(5):
            l1, l2, l3, g = rng.uniform(0.0, 2.0, size=4)
            cfg = TrainingConfig(lambda_und=l1, lambda_gen=l2, gamma=g)
            got = total_loss(Tensor(1.5), Tensor(0.5), Tensor(2.0), cfg).item()
            assert got == pytest.approx(l1 * 1.5 + l2 * 0.5 + g * 2.0, abs=1e-12)

    def test_missing_terms_contribute_nothing(self):
        assert total_loss(None, Tensor(2.0), None, TrainingConfig()).item() == pytest.approx(0.6)

    def test_negative_weights(self):
        with pytest.raises(ConfigError) as exc:
            total_loss(Tensor(1.0), Tensor(1.0), None, TrainingConfig(lambda_gen=-0.1))
        assert "lambda_gen" in str(exc.value)
        with pytest.raises(ConfigError):
            TrainingConfig(gamma=-1.0).validate()

    def test_stage_presets(self):
        """Hyperparameter table defaults are echoed verbatim"""
        s1 = config_echo(TrainingConfig.stage1())
        s2 = config_echo(TrainingConfig.stage2())
        assert (s1["lr"], s1["steps"], s1["batch_size"]) == (1e-4, 200, 2)
        assert (s2["lr"], s2["steps"], s2["batch_size"]) == (2e-5, 400, 2)
        assert s1["betas"] == [0.9, 0.95]
        assert s2["schedule"] == "cosine"

    def test_convergence_never_reached(self):
        history = TrainingHistory(evals=[eval_record(10, 1.0, 0.2, 0.1), eval_record(20, 2.0, 0.3, 0.2)])
        assert epochs_to_convergence(history, target=0.9) is None

    def test_convergence_zero_target(self):
        """Any score meets 0, so the first evaluation's epoch is reported"""
        history = TrainingHistory(evals=[eval_record(5, 0.5, 0.0, 0.0), eval_record(10, 1.0, 0.0, 0.0)])
        assert epochs_to_convergence(history, target=0.0) == 1

    def test_convergence_needs_to_stay(self):
        history = TrainingHistory(evals=[
            eval_record(1, 1.0, 0.9, 0.9), eval_record(2, 2.0, 0.1, 0.9),
            eval_record(3, 3.0, 0.95, 0.9), eval_record(4, 4.0, 0.92, 0.91)])
        assert epochs_to_convergence(history, target=0.9) == 3

    def test_loss_delta_correlation(self):
        """One loss falling while the other rises correlates at -1"""
        history = TrainingHistory()
        for step, (und, gen) in enumerate([(2.0, 1.0), (1.5, 1.2), (1.2, 1.5), (0.8, 1.9)], start=1):
            history.record(StepRecord(step, step / 4, 1e-3, und, gen, None, und + gen))
        assert loss_delta_correlation(history) == pytest.approx(-1.0, abs=1e-9)

    def test_loss_delta_correlation_needs_both(self):
        history = TrainingHistory()
        for step in range(1, 6):
            history.record(StepRecord(step, 0.0, 1e-3, 1.0 / step, None, None, 1.0))
        assert loss_delta_correlation(history) is None

    def test_history_rejects_out_of_order_steps(self):
        history = TrainingHistory()
        history.record(StepRecord(2, 0.0, 0.0, None, None, None, 1.0))
        with pytest.raises(ContractError):
            history.record(StepRecord(2, 0.0, 0.0, None, None, None, 1.0))


# ============================================================================
# Trainer
# ============================================================================

@pytest.mark.integration
class TestTrainer:
    """Trainer loop behavior"""

    def test_history_csv(self, tmp_path, skeleton, mixed_set):
        model, history = train_joint_dense(skeleton, mixed_set, quick(), val_set=mixed_set)
        path = tmp_path / "history.csv"
        history.save_csv(str(path))
        with open(path) as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == TrainingHistory.CSV_COLUMNS
        assert len(rows) == 1 + 3
        assert [r.step for r in history.steps] == [1, 2, 3]
        assert history.final_metrics() is not None

    def test_constant_schedule(self, skeleton, mixed_set):
        _, history = train_joint_dense(skeleton, mixed_set, quick(schedule="constant"))
        assert {s.lr for s in history.steps} == {1e-3}

    def test_cosine_schedule_starts_at_lr0(self, skeleton, mixed_set):
        _, history = train_joint_dense(skeleton, mixed_set, quick())
        assert history.steps[0].lr == pytest.approx(1e-3)
        assert history.steps[-1].lr < history.steps[0].lr

    def test_non_finite_loss(self, mocker, skeleton, mixed_set):
        trainer = Trainer(skeleton, quick(), mixed_set, trainable=lambda name: True)
        nan = Tensor(float("nan"), requires_grad=True)
        mocker.patch.object(trainer, "compute_losses", return_value=(None, None, None, nan))
        with pytest.raises(NumericError):
            trainer.train()

    def test_empty_training_set(self, skeleton):
        empty = build_dataset("mixed", 8, seed=0, cfg=TASKS).subset(0)
        with pytest.raises(ContractError):
            Trainer(skeleton, quick(), empty)

    def test_unknown_objective(self, skeleton, mixed_set):
        with pytest.raises(ConfigError):
            Trainer(skeleton, quick(), mixed_set, objective="other")

    def test_pretrain_base_trains_every_parameter_in_place(self, skeleton, mixed_set):
        """Joint dense pretraining updates attention, FFNs and embeddings of the skeleton itself"""
        snapshot = {name: p.data.copy() for name, p in skeleton.named_parameters()}
        history = pretrain_base(skeleton, mixed_set, quick(steps=3))
        assert [s.step for s in history.steps] == [1, 2, 3]
        assert all(s.l_group is None for s in history.steps)
        current = dict(skeleton.named_parameters())
        for name in ("token_embedding", "blocks.0.attn.wq", "blocks.0.ffn.w1", "lm_head"):
            assert not np.array_equal(current[name].data, snapshot[name]), name
        assert skeleton.sublayer_kind == "dense"

    def test_group_loss_off_leaves_router_untouched(self, rng, skeleton, mixed_set, und_set):
        """With γ = 0 and label-forced routing nothing reaches the router"""
        stage1 = train_stage1(1, skeleton, und_set, quick())
        moe_cfg = MoEConfig(force_group_by_label=True)
        model = assemble_moe_model(skeleton, stage1.ffns, stage1.ffns, moe_cfg, rng)
        trainer = Trainer(model, quick(stage=2, gamma=0.0), mixed_set, objective="weighted")
        batch = next(trainer.batches())
        model.zero_grad()
        _, _, l_group, total = trainer.compute_losses(batch)
        assert l_group is not None
        total.backward()
        for block in model.blocks:
            for p in (block.moe.task_router.weight, block.moe.task_router.bias):
                assert p.grad is None or not np.any(p.grad)


# ============================================================================
# Two-stage strategy
# ============================================================================

@pytest.mark.integration
class TestTwoStage:
    """Stage 1 FFN specialization and stage 2 assembly"""

    def test_stage1_freezes_everything_but_ffns(self, skeleton, und_set):
        result = train_stage1(1, skeleton, und_set, quick())
        before = dict(skeleton.named_parameters())
        changed = []
        for name, p in result.model.named_parameters():
            if ".ffn." in name:
                changed.append(not np.array_equal(p.data, before[name].data))
            else:
                np.testing.assert_array_equal(p.data, before[name].data, err_msg=name)
        assert any(changed)
        assert len(result.ffns) == skeleton.n_layers

    def test_stage1_leaves_skeleton_alone(self, skeleton, gen_set):
        snapshot = {name: p.data.copy() for name, p in skeleton.named_parameters()}
        train_stage1(2, skeleton, gen_set, quick())
        for name, p in skeleton.named_parameters():
            np.testing.assert_array_equal(p.data, snapshot[name], err_msg=name)

    def test_stage1_rejects_bad_task(self, skeleton, mixed_set):
        with pytest.raises(ContractError):
            train_stage1(3, skeleton, mixed_set, quick())

    def test_assembly_checks_layer_count(self, rng, skeleton):
        with pytest.raises(ContractError):
            assemble_moe_model(skeleton, skeleton.ffns()[:1], skeleton.ffns(), MoEConfig(), rng)

    def test_assembled_model_starts_near_stage1_losses(self, rng, skeleton, und_set, gen_set):
        """Before any stage-2 update each task's loss stays within 1.5x of its stage-1 loss"""
        und = train_stage1(1, skeleton, und_set, quick(steps=8, lr=3e-3))
        gen = train_stage1(2, skeleton, gen_set, quick(steps=8, lr=3e-3))
        model = assemble_moe_model(skeleton, und.ffns, gen.ffns, MoEConfig(), rng)
        assert task_loss(model, und_set) < 1.5 * task_loss(und.model, und_set)
        assert task_loss(model, gen_set) < 1.5 * task_loss(gen.model, gen_set)

    def test_stage2_trainable_set(self, skeleton, mixed_set, und_set, gen_set):
        und = train_stage1(1, skeleton, und_set, quick())
        gen = train_stage1(2, skeleton, gen_set, quick())
        result = train_stage2(skeleton, und.ffns, gen.ffns, mixed_set, quick(stage=2), MoEConfig(), lora_rank=2)
        trainable = result.model.trainable_parameters()
        assert trainable
        assert all(stage2_trainable(name) for name in trainable)
        assert any(name.endswith(".lora_b") for name in trainable)
        assert not any(name.endswith(".base") for name in trainable)
        assert "blocks.0.moe.alpha" in trainable
        assert len(result.lora_slots) == skeleton.n_layers * (4 + 8)

    def test_stage2_merge_preserves_outputs(self, skeleton, mixed_set, und_set, gen_set):
        und = train_stage1(1, skeleton, und_set, quick())
        gen = train_stage1(2, skeleton, gen_set, quick())
        result = train_stage2(skeleton, und.ffns, gen.ffns, mixed_set, quick(stage=2), MoEConfig(), lora_rank=2)
        seqs = [mixed_set[0].model_input]
        merged = merged_copy(result.model)
        np.testing.assert_allclose(forward(merged, seqs).logits.data, forward(result.model, seqs).logits.data,
                                   atol=1e-10)
