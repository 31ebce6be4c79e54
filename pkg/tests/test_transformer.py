#!/usr/bin/env python3
"""
Tests for the toy transformer
"""

import math

import numpy as np
import pytest

from task_aware_moe import functional as F
from task_aware_moe.errors import ConfigError, ContractError, TokenRangeError
from task_aware_moe.moe_layer import MoEConfig, MoEParams, copy_ffn
from task_aware_moe.optim import AdamW
from task_aware_moe.params import copy_tree
from task_aware_moe.tensor import Tensor
from task_aware_moe.transformer import (
    AttentionParams,
    ModelConfig,
    ar_loss,
    block_causal_mask,
    causal_attention,
    forward,
    generate,
    init_model,
    next_token_argmax,
)


@pytest.mark.unit
class TestForward:
    """Shapes, causality and batching"""

    def test_single_token_shape(self, rng, tiny_model_cfg):
        model = init_model(tiny_model_cfg, rng)
        out = forward(model, [[5]])
        assert out.logits.shape == (1, tiny_model_cfg.vocab_size)

    def test_future_tokens_do_not_leak(self, rng, tiny_model_cfg):
        """Changing tokens after position i leaves logits up to i unchanged"""
        model = init_model(tiny_model_cfg, rng)
        a = forward(model, [[1, 2, 3, 4, 5]]).logits.data
        b = forward(model, [[1, 2, 3, 30, 9]]).logits.data
        np.testing.assert_allclose(a[:3], b[:3], atol=1e-12)
        assert not np.allclose(a[3], b[3])

    def test_batching_matches_single_sequences(self, rng, tiny_model_cfg):
        """The block-causal mask keeps sequences of a batch independent"""
        model = init_model(tiny_model_cfg, rng, MoEConfig())
        seqs = [[1, 2, 3], [4, 5, 6, 7, 8], [9]]
        batched = forward(model, seqs)
        offsets = batched.offsets
        for i, seq in enumerate(seqs):
            alone = forward(model, [seq]).logits.data
            np.testing.assert_allclose(batched.logits.data[offsets[i]:offsets[i + 1]], alone, atol=1e-12)

    def test_dense_equals_single_expert_moe(self, rng, tiny_model_cfg):
        """One flat group with one expert and no shared expert is the dense FFN"""
        dense = init_model(tiny_model_cfg, rng)
        moe = copy_tree(dense)
        for block in moe.blocks:
            block.moe = MoEParams(task_router=None, score_matrices=[Tensor(np.zeros((1, tiny_model_cfg.d_model)))],
                                  group_experts=[[copy_ffn(block.ffn)]], shared_experts=[], alpha=Tensor(0.2))
            block.ffn = None
        seqs = [[1, 2, 3, 4], [7, 8]]
        np.testing.assert_allclose(forward(dense, seqs).logits.data, forward(moe, seqs).logits.data, atol=1e-12)

    def test_moe_model_records_every_layer(self, rng, tiny_model_cfg):
        model = init_model(tiny_model_cfg, rng, MoEConfig())
        out = forward(model, [[1, 2, 3], [4, 5]], group_labels=[1, 2])
        assert [r.layer for r in out.routing] == [0, 1]
        assert out.routing[0].labels.tolist() == [1, 1, 1, 2, 2]
        assert len(out.group_assignments()) == 2

    def test_labels_steer_routing_only_in_training_forward(self, rng, tiny_model_cfg):
        """Evaluation self-routes even when the layers force routing by label"""
        model = init_model(tiny_model_cfg, rng, MoEConfig(force_group_by_label=True))
        for block in model.blocks:
            block.moe.task_router.weight.data = rng.normal(size=block.moe.task_router.weight.shape)
        seqs = [[1, 2, 3], [4, 5], [6, 7, 8, 9]]
        labels = [1, 2, 2]
        free = forward(model, seqs)
        labelled = forward(model, seqs, labels)
        np.testing.assert_array_equal(labelled.logits.data, free.logits.data)
        for a, b in zip(labelled.routing, free.routing):
            np.testing.assert_array_equal(a.groups, b.groups)
        forced = forward(model, seqs, labels, route_by_label=True)
        for record in forced.routing:
            assert record.groups.tolist() == [1, 1, 1, 2, 2, 2, 2, 2, 2]
        preds_labelled = next_token_argmax(model, seqs, labels)
        preds_free = next_token_argmax(model, seqs)
        for a, b in zip(preds_labelled, preds_free):
            np.testing.assert_array_equal(a, b)

    def test_errors(self, rng, tiny_model_cfg):
        model = init_model(tiny_model_cfg, rng)
        with pytest.raises(ContractError):
            forward(model, [])
        with pytest.raises(ContractError):
            forward(model, [list(range(tiny_model_cfg.max_len + 1))])
        with pytest.raises(TokenRangeError):
            forward(model, [[tiny_model_cfg.vocab_size]])

    def test_head_count_must_divide_width(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=3).validate()

    def test_regression_head(self, rng, tiny_model_cfg):
        cfg = ModelConfig(**{**tiny_model_cfg.__dict__, "regression_head": True})
        out = forward(init_model(cfg, rng), [[1, 2, 3]])
        assert out.regression.shape == (3, 1)


@pytest.mark.unit
class TestAttention:
    """Causal self-attention"""

    def test_single_token_is_value_projection(self, rng):
        params = AttentionParams.init(4, rng, std=0.5)
        x = rng.normal(size=(1, 4))
        out = causal_attention(Tensor(x), params)
        np.testing.assert_allclose(out.data, x @ params.wv.data @ params.wo.data, atol=1e-12)

    def test_zero_queries_attend_uniformly(self, rng):
        """Uniform scores spread attention evenly over the prefix"""
        params = AttentionParams.init(4, rng)
        params.wq = Tensor(np.zeros((4, 4)))
        _, weights = causal_attention(Tensor(rng.normal(size=(3, 4))), params, return_weights=True)
        expected = np.array([[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]])
        np.testing.assert_allclose(weights[0], expected, atol=1e-12)

    def test_hand_computed_three_tokens(self, rng):
        params = AttentionParams.init(2, rng, std=0.7)
        x = rng.normal(size=(3, 2))
        out = causal_attention(Tensor(x), params).data
        q, k, v = x @ params.wq.data, x @ params.wk.data, x @ params.wv.data
        for i in range(3):
            scores = np.array([q[i] @ k[j] / math.sqrt(2) for j in range(i + 1)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            expected = sum(w[j] * v[j] for j in range(i + 1)) @ params.wo.data
            np.testing.assert_allclose(out[i], expected, atol=1e-12)

    def test_block_causal_mask(self):
        mask = block_causal_mask([2, 1])
        expected = np.array([[1, 0, 0], [1, 1, 0], [0, 0, 1]], dtype=bool)
        np.testing.assert_array_equal(mask, expected)


@pytest.mark.unit
class TestLossAndDecoding:
    """AR loss, teacher-forced argmax and greedy generation"""

    def test_uniform_logits_cost_log_vocab(self):
        loss = ar_loss(Tensor(np.zeros((4, 36))), [0, 5, 9, 35], [1, 1, 1, 1])
        assert loss.item() == pytest.approx(math.log(36), abs=1e-12)

    def test_confident_logits(self):
        logits = np.zeros((2, 36))
        logits[0, 3] = logits[1, 7] = 30.0
        assert ar_loss(Tensor(logits), [3, 7], [1, 1]).item() < 1e-8

    def test_matches_cross_entropy_on_masked_rows(self, rng):
        logits = rng.normal(size=(5, 36))
        targets = rng.integers(36, size=5)
        mask = np.array([0, 1, 1, 0, 1])
        keep = mask > 0
        expected = F.cross_entropy(Tensor(logits[keep]), targets[keep]).item()
        assert ar_loss(Tensor(logits), targets, mask).item() == pytest.approx(expected, abs=1e-12)

    def test_generate_zero_new_tokens(self, rng, tiny_model_cfg):
        model = init_model(tiny_model_cfg, rng)
        assert generate(model, [1, 2, 3], 0) == [1, 2, 3]

    def test_generate_is_deterministic(self, rng, tiny_model_cfg):
        model = init_model(tiny_model_cfg, rng)
        assert generate(model, [1, 2], 4) == generate(model, [1, 2], 4)

    def test_generate_overflow(self, rng, tiny_model_cfg):
        model = init_model(tiny_model_cfg, rng)
        with pytest.raises(ContractError):
            generate(model, [1] * tiny_model_cfg.max_len, 1)

    def test_teacher_forced_argmax_matches_forward(self, rng, tiny_model_cfg):
        model = init_model(tiny_model_cfg, rng)
        seqs = [[1, 2, 3], [4, 5]]
        preds = next_token_argmax(model, seqs, chunk=1)
        logits = forward(model, seqs).logits.data
        np.testing.assert_array_equal(np.concatenate(preds), np.argmax(logits, axis=1))

    def test_memorizes_one_pair(self, rng):
        """Overfitting a single sequence reproduces its continuation greedily"""
        cfg = ModelConfig(vocab_size=12, max_len=8, d_model=16, d_hidden=32, n_layers=1, n_heads=2, init_std=0.1)
        model = init_model(cfg, rng)
        sequence = [10, 3, 7, 1, 4]
        optimizer = AdamW(model.trainable_parameters())
        for _ in range(150):
            optimizer.zero_grad()
            ar_loss(forward(model, [sequence[:-1]]).logits, sequence[1:], [1, 1, 1, 1]).backward()
            optimizer.step(1e-2)
        assert generate(model, sequence[:1], 4) == sequence
