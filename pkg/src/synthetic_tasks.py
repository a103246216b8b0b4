"""Synthetic classification tasks for multi-task training

Each task draws token sequences from a small alphabet and labels them by a fixed
rule, so every label can be recomputed from its input:

- majority: the most frequent token (ties go to the smallest id)
- token_at_position: the token at ``position``
- parity: count of token ``target`` modulo 2
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ContractError
from .split_model import TaskHeadSpec

TASK_KINDS = ("majority", "token_at_position", "parity")

# share of positions overwritten with the planted majority token
_MAJORITY_PLANT_RATE = 0.5
_PARITY_ALPHABET = 4


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_id: str
    kind: str
    num_classes: int
    seq_len: int = 64
    seed: int = 0
    position: int = 0
    target: int = 0
    alphabet: Optional[int] = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"task kind must be one of {TASK_KINDS}, got '{self.kind}'", "kind")
        if self.seq_len < 1:
            raise ConfigurationError(f"seq_len must be >= 1, got {self.seq_len}", "seq_len")
        if self.kind == "parity" and self.num_classes != 2:
            raise ConfigurationError("parity tasks have exactly 2 classes", "num_classes")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}", "num_classes")
        if self.kind == "token_at_position" and not 0 <= self.position < self.seq_len:
            raise ConfigurationError(
                f"position {self.position} outside sequence of length {self.seq_len}", "position"
            )
        if self.kind in ("majority", "token_at_position") and self.token_range > self.num_classes:
            raise ConfigurationError(
                f"alphabet {self.token_range} exceeds num_classes {self.num_classes}; labels are token ids",
                "alphabet",
            )
        if self.kind == "parity" and not 0 <= self.target < self.token_range:
            raise ConfigurationError(f"parity target {self.target} outside alphabet", "target")
        if self.token_range < 1:
            raise ConfigurationError(f"alphabet must be >= 1, got {self.token_range}", "alphabet")

    @property
    def token_range(self) -> int:
        """Tokens are drawn from [0, token_range)"""
        if self.alphabet is not None:
            return self.alphabet
        return _PARITY_ALPHABET if self.kind == "parity" else self.num_classes

    def head_spec(self) -> TaskHeadSpec:
        return TaskHeadSpec(self.task_id, self.num_classes)


def label_for(task: SyntheticTaskSpec, tokens: Sequence[int]) -> int:
    """Apply the task's labelling rule to one sequence"""
    tokens = np.asarray(tokens, dtype=np.int64)
    if task.kind == "majority":
        counts = np.bincount(tokens, minlength=task.num_classes)
        return int(np.argmax(counts))
    if task.kind == "token_at_position":
        return int(tokens[task.position])
    return int(np.count_nonzero(tokens == task.target) % 2)


def generate_batch(
    task: SyntheticTaskSpec, batch_size: int, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic batch of (B×T) token ids and their (B,) labels"""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng([task.seed, seed])
    shape = (batch_size, task.seq_len)
    tokens = rng.integers(0, task.token_range, size=shape, dtype=np.int64)
    if task.kind == "majority":
        planted = rng.integers(0, task.token_range, size=(batch_size, 1), dtype=np.int64)
        mask = rng.random(shape) < _MAJORITY_PLANT_RATE
        tokens = np.where(mask, planted, tokens)
    labels = np.array([label_for(task, row) for row in tokens], dtype=np.int64)
    return tokens, labels
