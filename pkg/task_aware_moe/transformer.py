#!/usr/bin/env python3
"""
Toy Autoregressive Transformer

Pre-norm residual blocks (x + Attn(LN(x)), then x + Sublayer(LN(x))) with
learned absolute position embeddings. The sublayer is either a dense
ExpertFFN or a task-aware MoE layer, uniformly across blocks.

Batches are not padded: the token sequences are concatenated and attention
uses a block-causal mask, so a position sees only earlier positions of its
own sequence.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from task_aware_moe import functional as F
from task_aware_moe.errors import ConfigError, ContractError, DimensionError, TokenRangeError
from task_aware_moe.lora import Weight, resolve_weight
from task_aware_moe.moe_layer import ExpertFFN, MoEConfig, MoEParams, RoutingRecord, init_moe, moe_forward
from task_aware_moe.params import ParameterTree, static_field
from task_aware_moe.router import GroupAssignment, broadcast_labels
from task_aware_moe.tensor import Tensor, no_grad, randn

logger = logging.getLogger("task_aware_moe.transformer")

EVAL_CHUNK = 32

TokenSequence = Sequence[int]


@dataclass
class ModelConfig:
    """Toy transformer dimensions"""
    vocab_size: int = 36
    max_len: int = 32
    d_model: int = 64
    d_hidden: int = 128
    n_layers: int = 4
    n_heads: int = 2
    init_std: float = 0.02
    regression_head: bool = False

    def validate(self) -> None:
        for key in ("vocab_size", "max_len", "d_model", "d_hidden", "n_layers", "n_heads"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", keys=[f"model.{key}"])
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}",
                              keys=["model.d_model", "model.n_heads"])


@dataclass
class AttentionParams(ParameterTree):
    """Projections applied as x·W, each W: [d×d]"""
    wq: Weight
    wk: Weight
    wv: Weight
    wo: Weight

    @classmethod
    def init(cls, d_model: int, rng: np.random.Generator, std: float = 0.02) -> "AttentionParams":
        return cls(*(randn(rng, (d_model, d_model), std) for _ in range(4)))


@dataclass
class Block(ParameterTree):
    """One residual block; exactly one of ``ffn`` / ``moe`` is set"""
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn: Optional[ExpertFFN] = None
    moe: Optional[MoEParams] = None

    @property
    def kind(self) -> str:
        return "moe" if self.moe is not None else "dense"


@dataclass
class ModelParams(ParameterTree):
    token_embedding: Tensor                 # [V×d]
    position_embedding: Tensor              # [L_max×d]
    blocks: List[Block]
    lnf_gain: Tensor
    lnf_bias: Tensor
    lm_head: Tensor                         # [d×V]
    regression_head: Optional[Tensor] = None    # [d×1]
    config: ModelConfig = static_field(default_factory=ModelConfig)

    def __post_init__(self):
        kinds = {b.kind for b in self.blocks}
        if len(kinds) > 1:
            raise ConfigError("every block must use the same sublayer kind", keys=["model.sublayer"])
        widths = {b.ln1_gain.shape[0] for b in self.blocks} | {self.token_embedding.shape[1]}
        if len(widths) > 1:
            raise DimensionError("all blocks must share d_model", shapes=[(w,) for w in sorted(widths)])

    @property
    def sublayer_kind(self) -> str:
        return self.blocks[0].kind if self.blocks else "dense"

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def ffns(self) -> List[ExpertFFN]:
        """Dense FFN per layer"""
        if self.sublayer_kind != "dense":
            raise ContractError("model has MoE sublayers, not dense FFNs")
        return [b.ffn for b in self.blocks]

    def next_token_argmax(self, sequences: Sequence[TokenSequence],
                          group_labels: Optional[Sequence[int]] = None) -> List[np.ndarray]:
        return next_token_argmax(self, sequences, group_labels)


@dataclass
class ForwardOutput:
    logits: Tensor                          # [n×V], n = total tokens over the batch
    routing: List[RoutingRecord]
    regression: Optional[Tensor] = None     # [n×1]
    lengths: List[int] = field(default_factory=list)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)]).astype(np.int64)

    def group_assignments(self) -> List[GroupAssignment]:
        return [r.assignment for r in self.routing if r.assignment is not None]


def _block(cfg: ModelConfig, rng: np.random.Generator, moe_cfg: Optional[MoEConfig]) -> Block:
    d = cfg.d_model
    attn = AttentionParams.init(d, rng, cfg.init_std)
    block = Block(ln1_gain=Tensor(np.ones(d), requires_grad=True), ln1_bias=Tensor(np.zeros(d), requires_grad=True),
                  attn=attn,
                  ln2_gain=Tensor(np.ones(d), requires_grad=True), ln2_bias=Tensor(np.zeros(d), requires_grad=True))
    if moe_cfg is None:
        block.ffn = ExpertFFN.init(d, cfg.d_hidden, rng, cfg.init_std)
    else:
        block.moe = init_moe(d, cfg.d_hidden, moe_cfg, rng, cfg.init_std)
    return block


def init_model(cfg: ModelConfig, rng: np.random.Generator, moe_cfg: Optional[MoEConfig] = None) -> ModelParams:
    """
    Random Gaussian(0, init_std) model.

    Args:
        cfg: dimensions
        rng: seeded generator
        moe_cfg: when given every block gets a freshly initialized MoE sublayer

    Returns:
        ModelParams with every parameter trainable
    """
    cfg.validate()
    blocks = [_block(cfg, rng, moe_cfg) for _ in range(cfg.n_layers)]
    model = ModelParams(token_embedding=randn(rng, (cfg.vocab_size, cfg.d_model), cfg.init_std),
                        position_embedding=randn(rng, (cfg.max_len, cfg.d_model), cfg.init_std),
                        blocks=blocks,
                        lnf_gain=Tensor(np.ones(cfg.d_model), requires_grad=True),
                        lnf_bias=Tensor(np.zeros(cfg.d_model), requires_grad=True),
                        lm_head=randn(rng, (cfg.d_model, cfg.vocab_size), cfg.init_std),
                        regression_head=randn(rng, (cfg.d_model, 1), cfg.init_std) if cfg.regression_head else None,
                        config=cfg)
    logger.debug(f"Initialized {model.sublayer_kind} model with {model.num_parameters()} parameters")
    return model


def block_causal_mask(lengths: Sequence[int]) -> np.ndarray:
    """mask[i, j] is True when j belongs to i's sequence and j <= i"""
    seq = np.repeat(np.arange(len(lengths)), lengths)
    idx = np.arange(seq.size)
    return (seq[:, None] == seq[None, :]) & (idx[None, :] <= idx[:, None])


def causal_attention(x: Tensor, params: AttentionParams, n_heads: int = 1, mask: Optional[np.ndarray] = None,
                     return_weights: bool = False):
    """
    Multi-head scaled dot-product self-attention.

    Args:
        x: Tensor[n×d]
        params: projections
        n_heads: heads; d must be divisible by it
        mask: bool[n×n] of visible (query, key) pairs; lower-triangular by default
        return_weights: also return the per-head attention matrices

    Returns:
        Tensor[n×d], or (Tensor[n×d], list of float[n×n]) with ``return_weights``
    """
    n, d = x.shape
    if d % n_heads:
        raise ConfigError(f"width {d} is not divisible by {n_heads} heads", keys=["model.n_heads"])
    if mask is None:
        mask = np.tril(np.ones((n, n), dtype=bool))
    dh = d // n_heads
    q = F.matmul(x, resolve_weight(params.wq))
    k = F.matmul(x, resolve_weight(params.wk))
    v = F.matmul(x, resolve_weight(params.wv))
    heads = []
    weights = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = F.slice_cols(q, lo, hi), F.slice_cols(k, lo, hi), F.slice_cols(v, lo, hi)
        scores = F.mul(F.matmul(qh, F.transpose(kh)), 1.0 / math.sqrt(dh))
        attn = F.masked_softmax(scores, mask)
        weights.append(attn.data)
        heads.append(F.matmul(attn, vh))
    merged = heads[0] if n_heads == 1 else F.concat(heads, axis=1)
    out = F.matmul(merged, resolve_weight(params.wo))
    if return_weights:
        return out, weights
    return out


def _check_tokens(model: ModelParams, sequences: Sequence[TokenSequence]) -> Tuple[np.ndarray, List[int]]:
    if not sequences:
        raise ContractError("forward needs at least one sequence")
    vocab, max_len = model.token_embedding.shape[0], model.position_embedding.shape[0]
    lengths = []
    for seq in sequences:
        if len(seq) == 0:
            raise ContractError("token sequences must be non-empty")
        if len(seq) > max_len:
            raise ContractError(f"sequence of length {len(seq)} exceeds max_len={max_len}")
        lengths.append(len(seq))
    tokens = np.concatenate([np.asarray(s, dtype=np.int64) for s in sequences])
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise TokenRangeError(f"token id outside [0, {vocab})")
    return tokens, lengths


def forward(model: ModelParams, sequences: Sequence[TokenSequence],
            group_labels: Optional[Sequence[int]] = None, route_by_label: bool = False) -> ForwardOutput:
    """
    Run the batch through every block.

    Args:
        model: parameters
        sequences: token sequences, each of length in [1, max_len]
        group_labels: optional ground-truth task group per sequence; carried
            into the routing records
        route_by_label: let ``force_group_by_label`` layers route by those
            labels; only the trainer sets it, inference always self-routes

    Returns:
        ForwardOutput with logits for every position of every sequence
    """
    tokens, lengths = _check_tokens(model, sequences)
    if group_labels is not None and len(group_labels) != len(sequences):
        raise DimensionError("group_labels needs one entry per sequence", shapes=[(len(sequences),), (len(group_labels),)])
    token_labels = None if group_labels is None else broadcast_labels(lengths, group_labels)
    positions = np.concatenate([np.arange(n) for n in lengths])
    mask = block_causal_mask(lengths)
    n_heads = model.config.n_heads

    x = F.add(F.take_rows(model.token_embedding, tokens), F.take_rows(model.position_embedding, positions))
    routing: List[RoutingRecord] = []
    for i, block in enumerate(model.blocks):
        x = F.add(x, causal_attention(F.layer_norm(x, block.ln1_gain, block.ln1_bias), block.attn, n_heads, mask))
        hidden = F.layer_norm(x, block.ln2_gain, block.ln2_bias)
        if block.moe is not None:
            out, record = moe_forward(hidden, block.moe, token_labels, layer=i, route_by_label=route_by_label)
            routing.append(record)
        else:
            out = block.ffn.forward(hidden)
        x = F.add(x, out)
    final = F.layer_norm(x, model.lnf_gain, model.lnf_bias)
    logits = F.matmul(final, model.lm_head)
    regression = F.matmul(final, model.regression_head) if model.regression_head is not None else None
    return ForwardOutput(logits=logits, routing=routing, regression=regression, lengths=lengths)


def ar_loss(logits: Tensor, targets: Sequence[int], mask: Sequence[float]) -> Tensor:
    """Masked mean next-token cross-entropy; ``targets`` are already shifted by one"""
    return F.cross_entropy(logits, targets, mask)


def next_token_argmax(model: ModelParams, sequences: Sequence[TokenSequence],
                      group_labels: Optional[Sequence[int]] = None, chunk: int = EVAL_CHUNK) -> List[np.ndarray]:
    """
    Teacher-forced greedy prediction at every position.

    Returns:
        One int array per sequence; entry i is the argmax of position i's logits
    """
    predictions: List[np.ndarray] = []
    with no_grad():
        for start in range(0, len(sequences), chunk):
            part = sequences[start:start + chunk]
            labels = None if group_labels is None else group_labels[start:start + chunk]
            out = forward(model, part, labels)
            best = np.argmax(out.logits.data, axis=1)
            offsets = out.offsets
            predictions.extend(best[offsets[i]:offsets[i + 1]] for i in range(len(part)))
    return predictions


def generate(model: ModelParams, prompt: TokenSequence, max_new: int, group_label: Optional[int] = None) -> List[int]:
    """
    Greedy decoding; ties go to the lower token id.

    Raises:
        ContractError: if prompt length + max_new exceeds max_len
    """
    max_len = model.position_embedding.shape[0]
    if len(prompt) + max_new > max_len:
        raise ContractError(f"prompt ({len(prompt)}) + max_new ({max_new}) exceeds max_len={max_len}")
    tokens = [int(t) for t in prompt]
    labels = None if group_label is None else [group_label]
    with no_grad():
        for _ in range(max_new):
            out = forward(model, [tokens], labels)
            tokens.append(int(np.argmax(out.logits.data[-1])))
    return tokens
