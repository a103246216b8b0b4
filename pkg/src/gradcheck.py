"""Gradient Check - finite-difference verification of every differentiable block

Each check builds a scalar loss ``sum(block(...) ∘ direction)`` with a fixed random
direction, back-propagates it, and compares the analytic gradients of the input and
every parameter against float64 central differences. The reported error is the
norm-wise relative error over all checked gradients of the block, concatenated.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .pooling import PooledBlockParams, PoolingConfig, pool, pooled_attention_block
from .seeding import make_rng
from .split_model import SplitModel, monolithic_forward
from .tensor import (
    ParameterGroup,
    Tensor,
    backward,
    cross_entropy,
    finite_difference_gradient,
    gelu,
    matmul,
    relative_error,
    softmax_rows,
)
from .transformer import (
    init_attention,
    init_ffn,
    init_layer_norm,
    init_transformer_layer,
    layer_norm,
    position_wise_ffn,
    self_attention,
    transformer_layer,
)

logger = logging.getLogger(__name__)

NamedTensors = Sequence[Tuple[str, Tensor]]


@dataclass(frozen=True)
class CheckResult:
    block: str
    relative_error: float
    tolerance: float
    num_values: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.relative_error)) and self.relative_error <= self.tolerance

    def as_dict(self) -> Dict[str, object]:
        return {
            "block": self.block,
            "relative_error": self.relative_error,
            "tolerance": self.tolerance,
            "num_values": self.num_values,
            "passed": self.passed,
        }


def check_gradients(
    block: str,
    loss_fn: Callable[[], Tensor],
    tensors: NamedTensors,
    epsilon: float = 1e-4,
    tolerance: float = 1e-3,
) -> CheckResult:
    """Compare backward() against finite differences for every tensor in ``tensors``.

    Args:
        block: name reported in the result
        loss_fn: rebuilds the scalar loss from the current tensor values
        tensors: inputs and parameters the loss depends on
        epsilon: central-difference step
        tolerance: largest accepted relative error
    """
    for _, t in tensors:
        t.grad = None
    backward(loss_fn())

    analytic, numeric = [], []
    for name, t in tensors:
        grad = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        estimate = finite_difference_gradient(lambda _: loss_fn(), t, epsilon).data
        logger.debug(f"{block}/{name}: relative error {relative_error(grad, estimate):.3e}")
        analytic.append(grad.reshape(-1))
        numeric.append(estimate.reshape(-1))
    for _, t in tensors:
        t.grad = None

    a, n = np.concatenate(analytic), np.concatenate(numeric)
    result = CheckResult(block, relative_error(a, n), tolerance, int(a.size))
    logger.debug(f"{block}: {result.relative_error:.3e} over {result.num_values} values")
    return result


def _uniform(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def _perturb_vectors(group: ParameterGroup, rng: np.random.Generator) -> None:
    """Move biases, gammas and betas off their initial constants"""
    for name, p in group.named_parameters():
        if p.ndim == 1:
            offset = 1.0 if name.endswith("gamma") else 0.0
            p.data = (offset + 0.1 * rng.uniform(-1.0, 1.0, size=p.shape)).astype(np.float32)


def _projected_loss(f: Callable[[], Tensor], direction: np.ndarray) -> Callable[[], Tensor]:
    weights = Tensor(direction)
    return lambda: (f() * weights).sum()


def _named(prefix: str, group: ParameterGroup) -> List[Tuple[str, Tensor]]:
    return list(group.named_parameters(prefix))


def run_suite(
    seq_len: int,
    width: int,
    heads: int,
    model: SplitModel,
    seed: int = 0,
    epsilon: float = 1e-4,
    tolerance: float = 1e-3,
) -> List[CheckResult]:
    """Run every block check plus the end-to-end split model.

    Args:
        seq_len: sequence length T of block inputs
        width: model width D of block inputs
        heads: attention heads H
        model: tiny split model for the end-to-end check
        seed: root seed for inputs and projection directions
        epsilon: central-difference step
        tolerance: largest accepted relative error
    """
    rng = make_rng(seed, "gradcheck")
    results: List[CheckResult] = []

    def check(block: str, forward: Callable[[], Tensor], tensors: NamedTensors, out_shape) -> None:
        direction = rng.uniform(-1.0, 1.0, size=out_shape)
        loss = _projected_loss(forward, direction)
        results.append(check_gradients(block, loss, tensors, epsilon, tolerance))

    T, D = seq_len, width
    a, b = _uniform(rng, T, D), _uniform(rng, D, D)
    check("matmul", lambda: matmul(a, b), [("a", a), ("b", b)], (T, D))

    x = _uniform(rng, T, T, scale=2.0)
    check("softmax_rows", lambda: softmax_rows(x), [("x", x)], (T, T))

    x = _uniform(rng, T, D, scale=2.0)
    check("gelu", lambda: gelu(x), [("x", x)], (T, D))

    h = _uniform(rng, T, D)
    norm = init_layer_norm(D)
    _perturb_vectors(norm, rng)
    check("layer_norm", lambda: layer_norm(h, norm), [("h", h)] + _named("norm.", norm), (T, D))

    h = _uniform(rng, T, D)
    attention = init_attention(D, heads, rng)
    check(
        "self_attention",
        lambda: self_attention(h, attention),
        [("h", h)] + _named("attention.", attention),
        (T, D),
    )

    h = _uniform(rng, T, D)
    ffn = init_ffn(D, 4, rng)
    _perturb_vectors(ffn, rng)
    check("position_wise_ffn", lambda: position_wise_ffn(h, ffn), [("h", h)] + _named("ffn.", ffn), (T, D))

    h = _uniform(rng, T, D)
    layer = init_transformer_layer(D, heads, rng)
    _perturb_vectors(layer, rng)
    check("transformer_layer", lambda: transformer_layer(h, layer), [("h", h)] + _named("layer.", layer), (T, D))

    # odd length so the trailing single-row window is covered
    odd = max(T - 1, 1) if T % 2 == 0 else T
    h = _uniform(rng, odd, D)
    pooling = PoolingConfig()
    check("pool", lambda: pool(h, pooling), [("h", h)], (-(-odd // 2), D))

    h = _uniform(rng, T, D)
    base = init_transformer_layer(D, heads, rng)
    block = PooledBlockParams(base.attention, base.ffn, base.norm_1, base.norm_2, pooling=pooling)
    _perturb_vectors(block, rng)
    check(
        "pooled_attention_block",
        lambda: pooled_attention_block(h, block),
        [("h", h)] + _named("block.", block),
        (-(-T // 2), D),
    )

    enc = model.encoder_config
    tokens = rng.integers(0, enc.vocab_size, size=min(T, enc.max_seq_len))
    labels = {
        spec.task_id: int(rng.integers(0, spec.num_classes)) for spec in model.decoder_config.tasks
    }

    def split_model_loss() -> Tensor:
        total = None
        for task_id, label in labels.items():
            logits = monolithic_forward(tokens, task_id, model)
            loss = cross_entropy(logits.reshape(1, -1), [label])
            total = loss if total is None else total + loss
        return total

    results.append(
        check_gradients("split_model", split_model_loss, list(model.named_parameters()), epsilon, tolerance)
    )
    return results


def run_gradcheck(config: RunConfig) -> List[CheckResult]:
    """Suite on the tiny model described by ``config.gradcheck``"""
    g = config.gradcheck
    model = SplitModel.initialize(*config.gradcheck_model_configs())
    logger.info(
        f"gradient check: T={g.seq_len}, D={g.width}, H={g.heads}, "
        f"{model.num_parameters()} model parameters, epsilon={g.epsilon}"
    )
    return run_suite(g.seq_len, g.width, g.heads, model, config.seed, g.epsilon, g.tolerance)
