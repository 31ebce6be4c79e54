#!/usr/bin/env python3
"""
Synthetic Dual-Task Benchmark

Two token tasks pull a shared representation in opposite directions:

* understanding: name the majority symbol of the content (compressive,
  order-invariant);
* generation: write the content back reversed (expansive, order-sensitive).

Every sample is a pure function of (seed, stream, index), so datasets are
reproducible and can be built in any order.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from task_aware_moe.errors import ConfigError, ContractError, EmptyReductionError
from task_aware_moe.router import TaskGroup

logger = logging.getLogger("task_aware_moe.synth_tasks")

KINDS = ("understanding", "generation", "mixed")
SPLITS = ("train", "val")


@dataclass(frozen=True)
class VocabSpec:
    """Content symbols 0..n_symbols-1 followed by the four specials"""
    n_symbols: int = 32

    @property
    def und(self) -> int:
        return self.n_symbols

    @property
    def gen(self) -> int:
        return self.n_symbols + 1

    @property
    def sep(self) -> int:
        return self.n_symbols + 2

    @property
    def pad(self) -> int:
        return self.n_symbols + 3

    @property
    def vocab_size(self) -> int:
        return self.n_symbols + 4

    def is_content(self, token: int) -> bool:
        return 0 <= token < self.n_symbols


VOCAB = VocabSpec()


@dataclass
class TaskConfig:
    min_len: int = 4
    max_len: int = 12
    mix_prob: float = 0.5
    train_size: int = 2048
    val_size: int = 512
    mse_mode: bool = False

    def validate(self) -> None:
        if self.min_len < 3 or self.max_len < self.min_len:
            raise ConfigError("content lengths need 3 <= min_len <= max_len", keys=["task.min_len", "task.max_len"])
        if not 0.0 <= self.mix_prob <= 1.0:
            raise ConfigError("mix_prob must lie in [0, 1]", keys=["task.mix_prob"])
        if self.train_size < 1 or self.val_size < 1:
            raise ConfigError("dataset sizes must be >= 1", keys=["task.train_size", "task.val_size"])


@dataclass
class TaskSample:
    """
    One prompt/answer pair.

    ``loss_mask`` has one entry per target token. The model reads
    ``input_tokens + target_tokens`` shifted by one; see ``model_input``.
    """
    input_tokens: List[int]
    target_tokens: List[int]
    loss_mask: List[float]
    g_star: int
    regression_target: Optional[List[float]] = None

    @property
    def is_understanding(self) -> bool:
        return self.g_star == TaskGroup.UNDERSTANDING

    @property
    def sequence(self) -> List[int]:
        return self.input_tokens + self.target_tokens

    @property
    def model_input(self) -> List[int]:
        return self.sequence[:-1]

    @property
    def shifted_targets(self) -> List[int]:
        return self.sequence[1:]

    @property
    def answer_mask(self) -> List[float]:
        """Loss mask over ``model_input`` positions"""
        return [0.0] * (len(self.input_tokens) - 1) + list(self.loss_mask)

    @property
    def answer_positions(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.answer_mask) > 0)


@dataclass
class TaskBatch:
    """Samples plus their PAD-padded matrices"""
    samples: List[TaskSample]
    tokens: np.ndarray          # int[B×T] model inputs, PAD filled
    targets: np.ndarray         # int[B×T]
    mask: np.ndarray            # float[B×T], 0 on prompt and PAD positions
    g_star: np.ndarray          # int[B]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def sequences(self) -> List[List[int]]:
        return [s.model_input for s in self.samples]


def sample_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def _check_len(length: int, minimum: int, task: str) -> None:
    if length < minimum:
        raise ContractError(f"{task} samples need L >= {minimum}, got {length}")


def majority_symbol(content: Sequence[int]) -> int:
    """Most frequent symbol; ties go to the lowest"""
    if len(content) == 0:
        raise EmptyReductionError("majority of an empty sequence")
    values, counts = np.unique(np.asarray(content, dtype=np.int64), return_counts=True)
    return int(values[np.argmax(counts)])


def understanding_sample(content: Sequence[int], vocab: VocabSpec = VOCAB) -> TaskSample:
    content = [int(t) for t in content]
    return TaskSample(input_tokens=[vocab.und] + content + [vocab.sep],
                      target_tokens=[majority_symbol(content)],
                      loss_mask=[1.0],
                      g_star=int(TaskGroup.UNDERSTANDING))


def generation_sample(content: Sequence[int], vocab: VocabSpec = VOCAB, mse_mode: bool = False) -> TaskSample:
    content = [int(t) for t in content]
    reversed_content = content[::-1]
    regression = [t / (vocab.n_symbols - 1) for t in reversed_content] if mse_mode else None
    return TaskSample(input_tokens=[vocab.gen] + content + [vocab.sep],
                      target_tokens=reversed_content,
                      loss_mask=[1.0] * len(content),
                      g_star=int(TaskGroup.GENERATION),
                      regression_target=regression)


def make_understanding_sample(rng: np.random.Generator, length: int, vocab: VocabSpec = VOCAB) -> TaskSample:
    """Content with one symbol repeated at least ⌈L/2⌉+1 times"""
    _check_len(length, 3, "understanding")
    winner = int(rng.integers(vocab.n_symbols))
    repeats = int(rng.integers(math.ceil(length / 2) + 1, length + 1))
    others = rng.integers(vocab.n_symbols - 1, size=length - repeats)
    others = np.where(others >= winner, others + 1, others)
    content = np.concatenate([np.full(repeats, winner), others])
    rng.shuffle(content)
    return understanding_sample(content, vocab)


def make_generation_sample(rng: np.random.Generator, length: int, vocab: VocabSpec = VOCAB,
                           mse_mode: bool = False) -> TaskSample:
    _check_len(length, 2, "generation")
    return generation_sample(rng.integers(vocab.n_symbols, size=length), vocab, mse_mode)


def draw_sample(rng: np.random.Generator, kind: str, cfg: TaskConfig, vocab: VocabSpec = VOCAB) -> TaskSample:
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    if kind == "mixed":
        kind = "understanding" if rng.random() < cfg.mix_prob else "generation"
    if kind == "understanding":
        return make_understanding_sample(rng, length, vocab)
    if kind == "generation":
        return make_generation_sample(rng, length, vocab, cfg.mse_mode)
    raise ConfigError(f"unknown task kind {kind!r}", keys=["task.kind"])


def collate(samples: Sequence[TaskSample], vocab: VocabSpec = VOCAB) -> TaskBatch:
    """Pad model inputs with PAD; padded positions carry mask 0"""
    if not samples:
        raise ContractError("a batch needs at least one sample")
    width = max(len(s.model_input) for s in samples)
    tokens = np.full((len(samples), width), vocab.pad, dtype=np.int64)
    targets = np.full((len(samples), width), vocab.pad, dtype=np.int64)
    mask = np.zeros((len(samples), width))
    for i, s in enumerate(samples):
        n = len(s.model_input)
        tokens[i, :n] = s.model_input
        targets[i, :n] = s.shifted_targets
        mask[i, :n] = s.answer_mask
    g_star = np.array([s.g_star for s in samples], dtype=np.int64)
    return TaskBatch(samples=list(samples), tokens=tokens, targets=targets, mask=mask, g_star=g_star)


def make_mixed_batch(rng: np.random.Generator, cfg: TaskConfig, batch_size: int, vocab: VocabSpec = VOCAB) -> TaskBatch:
    """Each sample is understanding with probability ``cfg.mix_prob``"""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1", keys=["batch_size"])
    return collate([draw_sample(rng, "mixed", cfg, vocab) for _ in range(batch_size)], vocab)


class SyntheticDataset:
    """A fixed, seeded list of samples"""

    def __init__(self, samples: List[TaskSample], kind: str = "mixed", seed: int = 0, split: str = "train"):
        self.samples = samples
        self.kind = kind
        self.seed = seed
        self.split = split

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> TaskSample:
        return self.samples[index]

    def __iter__(self) -> Iterator[TaskSample]:
        return iter(self.samples)

    def by_group(self, g: int) -> "SyntheticDataset":
        return SyntheticDataset([s for s in self.samples if s.g_star == g], self.kind, self.seed, self.split)

    def subset(self, count: int) -> "SyntheticDataset":
        return SyntheticDataset(self.samples[:count], self.kind, self.seed, self.split)

    def epoch_batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[TaskBatch]:
        """One shuffled pass; the last batch may be short"""
        order = rng.permutation(len(self.samples))
        for start in range(0, len(order), batch_size):
            yield collate([self.samples[i] for i in order[start:start + batch_size]])

    def group_counts(self) -> Dict[int, int]:
        counts = {int(TaskGroup.UNDERSTANDING): 0, int(TaskGroup.GENERATION): 0}
        for s in self.samples:
            counts[s.g_star] += 1
        return counts


def build_dataset(kind: str, n: int, seed: int, split: str = "train", cfg: Optional[TaskConfig] = None,
                  vocab: VocabSpec = VOCAB) -> SyntheticDataset:
    """
    Build ``n`` samples of one kind.

    Args:
        kind: "understanding", "generation" or "mixed"
        n: sample count
        seed: base seed
        split: "train" or "val"; each (kind, split) pair draws from its own stream
        cfg: lengths, mixing probability and MSE mode

    Returns:
        SyntheticDataset
    """
    cfg = cfg or TaskConfig()
    cfg.validate()
    if kind not in KINDS:
        raise ConfigError(f"unknown task kind {kind!r}", keys=["task.kind"])
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}", keys=["task.split"])
    stream = SPLITS.index(split) * len(KINDS) + KINDS.index(kind)
    samples = [draw_sample(sample_rng(seed, stream, i), kind, cfg, vocab) for i in range(n)]
    logger.debug(f"Built {split} dataset: {n} {kind} samples (seed={seed})")
    return SyntheticDataset(samples, kind=kind, seed=seed, split=split)


# ----------------------------------------------------------------------
# JSONL exchange

def save_jsonl(path: str, samples: Sequence[TaskSample]) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        for s in samples:
            record = {"tokens": s.input_tokens, "target": s.target_tokens, "mask": s.loss_mask, "g_star": s.g_star}
            if s.regression_target is not None:
                record["regression"] = s.regression_target
            f.write(json.dumps(record) + "\n")
    logger.info(f"Wrote {len(samples)} samples to {path}")


def load_jsonl(path: str) -> List[TaskSample]:
    samples = []
    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                samples.append(TaskSample(input_tokens=[int(t) for t in record["tokens"]],
                                          target_tokens=[int(t) for t in record["target"]],
                                          loss_mask=[float(m) for m in record["mask"]],
                                          g_star=int(record["g_star"]),
                                          regression_target=record.get("regression")))
            except (KeyError, TypeError, ValueError) as e:
                raise ContractError(f"{path}:{line_no}: malformed sample record ({e})") from e
    return samples


# ----------------------------------------------------------------------
# Evaluation

@dataclass
class TaskMetrics:
    understanding_accuracy: Optional[float] = None
    generation_exact_match: Optional[float] = None
    token_accuracy: float = 0.0
    n_understanding: int = 0
    n_generation: int = 0
    extras: Dict[str, float] = field(default_factory=dict)

    @property
    def joint(self) -> Optional[float]:
        """min of the two task scores; None unless both were measured"""
        if self.understanding_accuracy is None or self.generation_exact_match is None:
            return None
        return min(self.understanding_accuracy, self.generation_exact_match)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["joint"] = self.joint
        return data


def eval_task_accuracy(model, dataset: Sequence[TaskSample]) -> TaskMetrics:
    """
    Greedy accuracy per task.

    ``model`` is anything with ``next_token_argmax(sequences, group_labels)``.
    A generation sample counts only when the whole reversal is right, which
    under teacher forcing means every answer position is predicted.
    """
    samples = list(dataset)
    if not samples:
        raise EmptyReductionError("eval_task_accuracy over an empty dataset")
    predictions = model.next_token_argmax([s.model_input for s in samples], [s.g_star for s in samples])
    und_hits, gen_hits, token_hits, token_total = 0, 0, 0, 0
    n_und = n_gen = 0
    for sample, pred in zip(samples, predictions):
        positions = sample.answer_positions
        expected = np.asarray(sample.shifted_targets)[positions]
        correct = np.asarray(pred)[positions] == expected
        token_hits += int(correct.sum())
        token_total += int(correct.size)
        if sample.is_understanding:
            n_und += 1
            und_hits += int(correct.all())
        else:
            n_gen += 1
            gen_hits += int(correct.all())
    return TaskMetrics(understanding_accuracy=und_hits / n_und if n_und else None,
                       generation_exact_match=gen_hits / n_gen if n_gen else None,
                       token_accuracy=token_hits / token_total if token_total else 0.0,
                       n_understanding=n_und,
                       n_generation=n_gen)
