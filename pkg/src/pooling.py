"""Pooling Compression - sequence-length reduction and the pooled attention block

A pooled block first merges neighbouring hidden states along the sequence
dimension, h' = Pooling(h), then runs a standard post-norm layer on h' with Q, K
and V all taken from h' and the residual taken from h':

    h <- LayerNorm(h' + S-Attn(Q, K, V = h'))
    h_i <- LayerNorm(h_i + P-FFN(h_i))

With the default window = stride = 2 the sequence is halved (ceil for odd T).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor
from .transformer import TransformerLayerParams, transformer_layer

logger = logging.getLogger(__name__)

POOLING_KINDS = ("mean", "max")


@dataclass(frozen=True)
class PoolingConfig:
    kind: str = "mean"
    window: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.kind not in POOLING_KINDS:
            raise ConfigurationError(f"pooling kind must be one of {POOLING_KINDS}, got '{self.kind}'", "kind")
        if self.window < 1:
            raise ConfigurationError(f"pooling window must be >= 1, got {self.window}", "window")
        if self.stride < 1:
            raise ConfigurationError(f"pooling stride must be >= 1, got {self.stride}", "stride")
        if self.window > self.stride:
            # overlapping windows are not supported
            raise ConfigurationError(
                f"pooling window {self.window} exceeds stride {self.stride}", "window"
            )


IDENTITY_POOLING = PoolingConfig(kind="mean", window=1, stride=1)


@dataclass(eq=False)
class PooledBlockParams(TransformerLayerParams):
    """A standard layer applied after pooling its input"""

    pooling: PoolingConfig = field(default_factory=PoolingConfig)


def pooled_length(length: int, stride: int = 2, stages: int = 1) -> int:
    """ceil applied ``stages`` times: length of a sequence after repeated pooling"""
    for _ in range(stages):
        length = math.ceil(length / stride)
    return length


def _windows(length: int, c: PoolingConfig) -> List[slice]:
    return [slice(start, min(start + c.window, length)) for start in range(0, length, c.stride)]


def pool(h: Tensor, c: PoolingConfig = PoolingConfig()) -> Tensor:
    """Reduce a (T×D) sequence to (ceil(T/stride)×D).

    Output row j summarises input rows [j·stride, min(j·stride + window, T)); a short
    trailing window passes through on its own.
    """
    if h.ndim != 2:
        raise DimensionError(f"pool needs a (T, D) sequence, got {h.shape}")
    windows = _windows(h.shape[0], c)

    if c.kind == "mean":
        out = np.stack([h.data[w].mean(axis=0) for w in windows])

        def _backward(g: np.ndarray):
            full = np.zeros_like(h.data, dtype=g.dtype)
            for j, w in enumerate(windows):
                full[w] = g[j] / (w.stop - w.start)
            return (full,)

    else:
        # first maximum wins at ties
        picks = [w.start + np.argmax(h.data[w], axis=0) for w in windows]
        cols = np.arange(h.shape[1])
        out = np.stack([h.data[rows, cols] for rows in picks])

        def _backward(g: np.ndarray):
            full = np.zeros_like(h.data, dtype=g.dtype)
            for j, rows in enumerate(picks):
                full[rows, cols] += g[j]
            return (full,)

    return Tensor.from_op(out, (h,), _backward, f"pool_{c.kind}")


def pooled_attention_block(h: Tensor, p: PooledBlockParams) -> Tensor:
    """pool, then the standard attention + FFN updates on the pooled sequence"""
    return transformer_layer(pool(h, p.pooling), p)


def attention_flops(length: int, width: int) -> int:
    """Self-attention cost, multiply-add counted as two operations.

    Q/K/V and output projections: 8·T·D². Logits and weighted sum: 4·T²·D.
    """
    if length < 1 or width < 1:
        raise ConfigurationError(f"attention_flops needs T, D >= 1, got T={length}, D={width}")
    return 8 * length * width * width + 4 * length * length * width


def ffn_flops(length: int, width: int, ratio: int = 4) -> int:
    """Position-wise FFN cost: two (D × r·D) products per row"""
    return 4 * ratio * length * width * width


def total_attention_flops(lengths: Iterable[int], width: int) -> int:
    return sum(attention_flops(length, width) for length in lengths)
