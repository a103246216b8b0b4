"""Transformer Blocks - post-norm multi-head self-attention and position-wise FFN

One layer applies, in order:

    h   <- LayerNorm(h + S-Attn(Q, K, V = h))
    h_i <- LayerNorm(h_i + P-FFN(h_i))   for every position i

Attention is bidirectional (no mask) and scaled by 1/sqrt(head_dim).
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import ParameterGroup, Tensor, concat, gelu, layer_norm_rows, softmax_rows

logger = logging.getLogger(__name__)

DEFAULT_FFN_RATIO = 4
DEFAULT_LAYER_NORM_EPS = 1e-5


@dataclass(eq=False)
class LayerNormParams(ParameterGroup):
    """Scale/shift vectors of one LayerNorm"""

    gamma: Tensor
    beta: Tensor
    eps: float = DEFAULT_LAYER_NORM_EPS

    def __post_init__(self):
        if self.gamma.ndim != 1 or self.gamma.shape != self.beta.shape:
            raise DimensionError(
                f"LayerNorm gamma {self.gamma.shape} and beta {self.beta.shape} must be equal-length vectors"
            )
        # eps = 0 is allowed for exact-arithmetic checks
        if self.eps < 0:
            raise ConfigurationError(f"LayerNorm eps must be >= 0, got {self.eps}", "eps")

    @property
    def width(self) -> int:
        return self.gamma.shape[0]


@dataclass(eq=False)
class AttentionParams(ParameterGroup):
    """Q/K/V/output projections (each D×D) of multi-head self-attention"""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    num_heads: int

    def __post_init__(self):
        width = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            matrix = getattr(self, name)
            if matrix.shape != (width, width):
                raise DimensionError(f"attention {name} must be {width}x{width}, got {matrix.shape}")
        if self.num_heads < 1 or width % self.num_heads != 0:
            raise ConfigurationError(
                f"width {width} is not divisible by num_heads {self.num_heads}", "num_heads"
            )

    @property
    def width(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.width // self.num_heads


@dataclass(eq=False)
class FfnParams(ParameterGroup):
    """Two-layer position-wise feed-forward network, hidden width r·D"""

    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor

    def __post_init__(self):
        width, hidden = self.w_1.shape
        if (
            self.b_1.shape != (hidden,)
            or self.w_2.shape != (hidden, width)
            or self.b_2.shape != (width,)
        ):
            raise DimensionError(
                f"FFN shapes inconsistent: w_1 {self.w_1.shape}, b_1 {self.b_1.shape}, "
                f"w_2 {self.w_2.shape}, b_2 {self.b_2.shape}"
            )
        if hidden < width:
            raise ConfigurationError(f"FFN expansion ratio must be >= 1 (hidden {hidden} < width {width})", "ffn_ratio")

    @property
    def width(self) -> int:
        return self.w_1.shape[0]

    @property
    def ratio(self) -> float:
        return self.w_1.shape[1] / self.w_1.shape[0]


@dataclass(eq=False)
class TransformerLayerParams(ParameterGroup):
    attention: AttentionParams
    ffn: FfnParams
    norm_1: LayerNormParams
    norm_2: LayerNormParams

    def __post_init__(self):
        widths = {
            "attention": self.attention.width,
            "ffn": self.ffn.width,
            "norm_1": self.norm_1.width,
            "norm_2": self.norm_2.width,
        }
        if len(set(widths.values())) != 1:
            raise DimensionError(f"layer sub-parameter widths disagree: {widths}")

    @property
    def width(self) -> int:
        return self.attention.width


def _check_width(h: Tensor, width: int, what: str) -> None:
    if h.ndim != 2 or h.shape[1] != width:
        raise DimensionError(f"{what}: expected a (T, {width}) hidden sequence, got {h.shape}")


def layer_norm(h: Tensor, p: LayerNormParams) -> Tensor:
    _check_width(h, p.width, "layer_norm")
    return layer_norm_rows(h, p.gamma, p.beta, p.eps)


def _attend(h: Tensor, p: AttentionParams) -> Tuple[List[Tensor], Tensor]:
    _check_width(h, p.width, "self_attention")
    q = h @ p.w_q
    k = h @ p.w_k
    v = h @ p.w_v
    scale = 1.0 / math.sqrt(p.head_dim)
    weights, heads = [], []
    for head in range(p.num_heads):
        cols = slice(head * p.head_dim, (head + 1) * p.head_dim)
        w = softmax_rows((q[:, cols] @ k[:, cols].T) * scale)
        weights.append(w)
        heads.append(w @ v[:, cols])
    merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    return weights, merged @ p.w_o


def attention_weights(h: Tensor, p: AttentionParams) -> List[Tensor]:
    """Per-head (T×T) attention weight matrices"""
    return _attend(h, p)[0]


def self_attention(h: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head softmax(QKᵀ/√d_h)·V with Q, K, V all projected from ``h``.

    Output has the same length T as the input.
    """
    return _attend(h, p)[1]


def position_wise_ffn(h: Tensor, p: FfnParams) -> Tensor:
    """gelu(h_i·W_1 + b_1)·W_2 + b_2, independently for every row"""
    _check_width(h, p.width, "position_wise_ffn")
    return gelu(h @ p.w_1 + p.b_1) @ p.w_2 + p.b_2


def transformer_layer(h: Tensor, p: TransformerLayerParams) -> Tensor:
    h = layer_norm(h + self_attention(h, p.attention), p.norm_1)
    return layer_norm(h + position_wise_ffn(h, p.ffn), p.norm_2)


# === Initialisation ===


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    values = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
    return Tensor(values, requires_grad=True)


def embedding_table(rng: np.random.Generator, rows: int, width: int) -> Tensor:
    """Uniform rows with std 1/sqrt(width), independent of the row count"""
    bound = math.sqrt(3.0 / width)
    values = rng.uniform(-bound, bound, size=(rows, width)).astype(np.float32)
    return Tensor(values, requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def init_layer_norm(width: int, eps: float = DEFAULT_LAYER_NORM_EPS) -> LayerNormParams:
    return LayerNormParams(gamma=ones(width), beta=zeros(width), eps=eps)


def init_attention(
    width: int, num_heads: int, rng: np.random.Generator, output_gain: float = 1.0
) -> AttentionParams:
    if num_heads < 1 or width % num_heads != 0:
        raise ConfigurationError(f"width {width} is not divisible by heads {num_heads}", "heads")
    return AttentionParams(
        w_q=xavier_uniform(rng, width, width),
        w_k=xavier_uniform(rng, width, width),
        w_v=xavier_uniform(rng, width, width),
        w_o=xavier_uniform(rng, width, width, output_gain),
        num_heads=num_heads,
    )


def init_ffn(width: int, ratio: int, rng: np.random.Generator, output_gain: float = 1.0) -> FfnParams:
    if ratio < 1:
        raise ConfigurationError(f"FFN expansion ratio must be >= 1, got {ratio}", "ffn_ratio")
    hidden = ratio * width
    return FfnParams(
        w_1=xavier_uniform(rng, width, hidden),
        b_1=zeros(hidden),
        w_2=xavier_uniform(rng, hidden, width, output_gain),
        b_2=zeros(width),
    )


def init_transformer_layer(
    width: int,
    num_heads: int,
    rng: np.random.Generator,
    ffn_ratio: int = DEFAULT_FFN_RATIO,
    eps: float = DEFAULT_LAYER_NORM_EPS,
    residual_gain: float = 1.0,
) -> TransformerLayerParams:
    """Seeded layer: Xavier-uniform matrices, zero biases/beta, unit gamma.

    ``residual_gain`` scales the init bound of the two matrices that write into
    the residual stream (attention w_o and FFN w_2).
    """
    return TransformerLayerParams(
        attention=init_attention(width, num_heads, rng, residual_gain),
        ffn=init_ffn(width, ffn_ratio, rng, residual_gain),
        norm_1=init_layer_norm(width, eps),
        norm_2=init_layer_norm(width, eps),
    )


def layer_parameter_count(width: int, ffn_ratio: int = DEFAULT_FFN_RATIO) -> int:
    """Scalar parameters in one standard layer (attention + FFN + two LayerNorms)"""
    hidden = ffn_ratio * width
    attention = 4 * width * width
    ffn = width * hidden + hidden + hidden * width + width
    norms = 2 * 2 * width
    return attention + ffn + norms
