"""Multi-task trainer with gradient-magnitude balancing

Each step samples one batch per task, back-propagates every task loss separately
to read its gradient norm on a shared trunk parameter, combines the per-task
gradients with the current task weights and applies an Adam update. The weights
then move towards targets derived from each task's relative training progress:

    r_i  = (L_i / L_i(0)) / mean_j(L_j / L_j(0))
    G*_i = mean(g) · r_i^alpha
    w_i <- w_i · (G*_i / g_i)^beta,  clipped to [clip_lo, clip_hi], renormalised to sum K

where g_i is the norm of the weighted gradient w_i·∇L_i.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ConfigurationError, ContractError, TrainingDivergedError
from .seeding import derive_seed
from .split_model import SplitModel, monolithic_forward
from .synthetic_tasks import SyntheticTaskSpec, generate_batch
from .tensor import Tensor, backward, concat, cross_entropy

logger = logging.getLogger(__name__)

GRAD_NORM_FLOOR = 1e-8

Batch = Tuple[np.ndarray, np.ndarray]


# === Loss weighting ===


@dataclass(frozen=True)
class GradNormState:
    weights: np.ndarray
    initial_losses: Optional[np.ndarray] = None
    alpha: float = 1.5
    beta: float = 0.1
    clip_lo: float = 0.01
    clip_hi: float = 100.0

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", weights)
        if weights.ndim != 1 or weights.size == 0:
            raise ConfigurationError("GradNorm weights must be a non-empty vector", "weights")
        if np.any(weights <= 0):
            raise ConfigurationError(f"GradNorm weights must be positive, got {weights}", "weights")
        if not 0 < self.clip_lo <= self.clip_hi:
            raise ConfigurationError(
                f"need 0 < clip_lo <= clip_hi, got [{self.clip_lo}, {self.clip_hi}]", "clip_lo"
            )
        if self.beta < 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}", "beta")

    @classmethod
    def create(cls, num_tasks: int, **hyperparameters: float) -> "GradNormState":
        return cls(weights=np.ones(num_tasks), **hyperparameters)

    @property
    def num_tasks(self) -> int:
        return int(self.weights.size)


def multitask_loss(
    per_task_losses: Sequence[Union[float, Tensor]], weights: Sequence[float]
) -> Union[float, Tensor]:
    """Σ w_i · L_i; differentiable when the losses are tensors"""
    weights = np.asarray(weights, dtype=np.float64)
    if len(per_task_losses) != weights.size:
        raise ContractError(
            f"{len(per_task_losses)} losses but {weights.size} weights"
        )
    if np.any(weights < 0):
        raise ContractError(f"task weights must be nonnegative, got {weights}")
    if all(isinstance(loss, Tensor) for loss in per_task_losses):
        total = per_task_losses[0] * float(weights[0])
        for loss, w in zip(per_task_losses[1:], weights[1:]):
            total = total + loss * float(w)
        return total
    losses = np.asarray([float(l.item() if isinstance(l, Tensor) else l) for l in per_task_losses])
    return float(np.dot(weights, losses))


def gradnorm_update(
    state: GradNormState,
    grad_norms: Sequence[float],
    current_losses: Sequence[float],
) -> GradNormState:
    """One multiplicative balancing step; returns a new state.

    The first call records ``current_losses`` as the initial losses. When every
    gradient norm is zero the state is returned unchanged. Zero initial losses
    are floored at GRAD_NORM_FLOOR; when every current loss is zero all tasks
    count as equally far along.
    """
    g = np.asarray(grad_norms, dtype=np.float64)
    losses = np.asarray(current_losses, dtype=np.float64)
    if g.shape != state.weights.shape or losses.shape != state.weights.shape:
        raise ContractError(
            f"expected {state.num_tasks} norms and losses, got {g.size} and {losses.size}"
        )
    if np.any(g < 0):
        raise ContractError(f"gradient norms must be nonnegative, got {g}")
    if state.initial_losses is None:
        state = replace(state, initial_losses=losses.copy())
    if not np.any(g > 0):
        logger.warning("all shared gradient norms are zero; task weights left unchanged")
        return state

    # zero losses must not reach a denominator
    ratios = losses / np.maximum(state.initial_losses, GRAD_NORM_FLOOR)
    mean_ratio = ratios.mean()
    if mean_ratio > 0:
        inverse_rates = ratios / mean_ratio
    else:
        inverse_rates = np.ones_like(ratios)
    targets = g.mean() * inverse_rates**state.alpha
    weights = state.weights * (targets / np.maximum(g, GRAD_NORM_FLOOR)) ** state.beta
    clipped = np.clip(weights, state.clip_lo, state.clip_hi)
    if not np.array_equal(clipped, weights):
        logger.warning(f"task weights clipped to [{state.clip_lo}, {state.clip_hi}]: {weights}")
    weights = clipped * state.num_tasks / clipped.sum()
    logger.debug(f"gradnorm: norms={g} inverse_rates={inverse_rates} weights={weights}")
    return replace(state, weights=weights)


# === Per-task gradients ===


def batch_logits(model: SplitModel, task_id: str, tokens: np.ndarray) -> Tensor:
    """(B×C) logits, one monolithic forward per sequence"""
    rows = [monolithic_forward(seq, task_id, model).reshape(1, -1) for seq in tokens]
    return rows[0] if len(rows) == 1 else concat(rows, axis=0)


def task_loss(model: SplitModel, task_id: str, tokens: np.ndarray, labels: np.ndarray) -> Tensor:
    """Batch-mean softmax cross-entropy of one task"""
    return cross_entropy(batch_logits(model, task_id, tokens), labels)


def _task_gradients(
    model: SplitModel,
    task_id: str,
    batch: Batch,
    shared: Tensor,
    scale: float = 1.0,
) -> Tuple[float, Dict[str, Optional[np.ndarray]], float]:
    model.zero_grad()
    loss = task_loss(model, task_id, *batch)
    if scale != 1.0:
        loss = loss * scale
    value = loss.item()
    if not np.isfinite(value):
        return value, {}, 0.0
    backward(loss)
    grads = {name: (None if p.grad is None else p.grad.copy()) for name, p in model.named_parameters()}
    norm = 0.0 if shared.grad is None else float(np.linalg.norm(shared.grad.astype(np.float64)))
    return value, grads, norm


def measure_shared_grad_norms(
    model: SplitModel,
    batches: Mapping[str, Batch],
    balance_at: str = "cloud",
    loss_scales: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """L2 norm of ∇L_i on the designated shared parameter, one entry per task.

    Args:
        model: model to differentiate
        batches: task_id → (tokens, labels), in task order
        balance_at: "cloud" or "device" (see SplitModel.shared_parameter)
        loss_scales: optional per-task multipliers applied to L_i before backward
    """
    shared = model.shared_parameter(balance_at)
    scales = [1.0] * len(batches) if loss_scales is None else list(loss_scales)
    if len(scales) != len(batches):
        raise ContractError(f"{len(scales)} loss scales for {len(batches)} tasks")
    norms = []
    for (task_id, batch), scale in zip(batches.items(), scales):
        norms.append(_task_gradients(model, task_id, batch, shared, scale)[2])
    model.zero_grad()
    return np.asarray(norms, dtype=np.float64)


# === Optimiser ===


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[str, np.ndarray] = field(default_factory=dict)


class AdamOptimizer:
    """Adam over named parameters; parameters without a gradient are left alone"""

    def __init__(
        self,
        named_parameters: Sequence[Tuple[str, Tensor]],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr < 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {lr}", "lr")
        self.params = list(named_parameters)
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params:
            self.state.first_moments[name] = np.zeros_like(p.data)
            self.state.second_moments[name] = np.zeros_like(p.data)

    def step(self) -> None:
        s = self.state
        s.step += 1
        correction1 = 1.0 - s.beta1**s.step
        correction2 = 1.0 - s.beta2**s.step
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            m = s.first_moments[name] = s.beta1 * s.first_moments[name] + (1.0 - s.beta1) * g
            v = s.second_moments[name] = s.beta2 * s.second_moments[name] + (1.0 - s.beta2) * g * g
            update = (m / correction1) / (np.sqrt(v / correction2) + s.eps)
            p.data = (p.data - s.lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


# === Training loop ===


@dataclass(frozen=True)
class StepRecord:
    step: int
    losses: Tuple[float, ...]
    weights: Tuple[float, ...]
    total_loss: float


@dataclass
class TrainingReport:
    task_ids: List[str]
    records: List[StepRecord] = field(default_factory=list)
    final_weights: Optional[np.ndarray] = None

    @property
    def initial_losses(self) -> Dict[str, float]:
        return dict(zip(self.task_ids, self.records[0].losses)) if self.records else {}

    @property
    def final_losses(self) -> Dict[str, float]:
        return dict(zip(self.task_ids, self.records[-1].losses)) if self.records else {}

    def loss_curve(self, task_id: str) -> List[float]:
        i = self.task_ids.index(task_id)
        return [r.losses[i] for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = {"step": r.step}
            row.update({f"loss_{t}": l for t, l in zip(self.task_ids, r.losses)})
            row.update({f"weight_{t}": w for t, w in zip(self.task_ids, r.weights)})
            row["total_loss"] = r.total_loss
            rows.append(row)
        columns = (
            ["step"]
            + [f"loss_{t}" for t in self.task_ids]
            + [f"weight_{t}" for t in self.task_ids]
            + ["total_loss"]
        )
        return pd.DataFrame(rows, columns=columns)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
        return path


def train(
    model: SplitModel,
    tasks: Sequence[SyntheticTaskSpec],
    steps: int,
    optimizer: AdamOptimizer,
    gradnorm: Optional[GradNormState] = None,
    batch_size: int = 8,
    seed: int = 0,
    balance_at: str = "cloud",
    log_every: int = 50,
) -> TrainingReport:
    """Run ``steps`` multi-task updates.

    Args:
        model: model to train in place
        tasks: one synthetic task per decoder head
        steps: number of updates, >= 1
        optimizer: Adam over ``model.named_parameters()``
        gradnorm: balancing state, or None for fixed unit weights
        batch_size: sequences per task per step
        seed: data seed; batches depend only on (seed, step, task seed)
        balance_at: side of the split whose shared parameter is measured
        log_every: INFO progress interval in steps

    Raises:
        TrainingDivergedError: a task loss became NaN or infinite
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if gradnorm is not None and gradnorm.num_tasks != len(tasks):
        raise ContractError(f"GradNorm tracks {gradnorm.num_tasks} tasks, training has {len(tasks)}")
    enc = model.encoder_config
    for task in tasks:
        model.head(task.task_id)
        if task.seq_len > enc.max_seq_len or task.token_range > enc.vocab_size:
            raise ConfigurationError(
                f"task '{task.task_id}' (seq_len {task.seq_len}, alphabet {task.token_range}) "
                f"does not fit the encoder (max_seq_len {enc.max_seq_len}, vocab {enc.vocab_size})",
                "tasks",
            )

    shared = model.shared_parameter(balance_at)
    task_ids = [t.task_id for t in tasks]
    report = TrainingReport(task_ids=task_ids)
    named = list(model.named_parameters())
    logger.info(f"training {len(tasks)} task(s) for {steps} steps, gradnorm={'on' if gradnorm else 'off'}")

    for step in range(steps):
        batch_seed = derive_seed(seed, f"batch-{step}")
        losses = np.zeros(len(tasks))
        norms = np.zeros(len(tasks))
        per_task = []
        for i, task in enumerate(tasks):
            batch = generate_batch(task, batch_size, batch_seed)
            losses[i], grads, norms[i] = _task_gradients(model, task.task_id, batch, shared)
            if not np.isfinite(losses[i]):
                raise TrainingDivergedError(step, task.task_id, float(losses[i]))
            per_task.append(grads)

        weights = gradnorm.weights if gradnorm is not None else np.ones(len(tasks))
        total = multitask_loss(losses, weights)
        for name, p in named:
            parts = [w * g[name] for w, g in zip(weights, per_task) if g[name] is not None]
            p.grad = None if not parts else np.sum(parts, axis=0).astype(p.data.dtype)
        optimizer.step()
        model.zero_grad()

        report.records.append(
            StepRecord(step, tuple(float(l) for l in losses), tuple(float(w) for w in weights), total)
        )
        if gradnorm is not None:
            gradnorm = gradnorm_update(gradnorm, weights * norms, losses)
        if log_every and (step % log_every == 0 or step == steps - 1):
            summary = ", ".join(f"{t}={l:.4f}" for t, l in zip(task_ids, losses))
            logger.info(f"step {step}: total={total:.4f} {summary}")

    report.final_weights = gradnorm.weights.copy() if gradnorm is not None else np.ones(len(tasks))
    return report
