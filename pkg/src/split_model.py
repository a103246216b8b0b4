"""Split Model - device encoder + cloud decoder with per-task heads

The device encoder embeds tokens, runs ``pre_pool_layers`` standard layers and then
``pooling_stages`` pooled blocks, each followed by ``post_pool_layers`` standard
layers. Its output, the compressed representation, crosses the device/cloud
boundary. The cloud decoder runs its own standard layers, averages over the
remaining positions and applies the task's linear head.

The transformer trunk is shared by every task; only the heads are task specific.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError, TaskNotFoundError
from .pooling import PooledBlockParams, PoolingConfig, pooled_attention_block, pooled_length
from .tensor import ParameterGroup, Tensor, take_rows
from .transformer import (
    DEFAULT_FFN_RATIO,
    DEFAULT_LAYER_NORM_EPS,
    TransformerLayerParams,
    embedding_table,
    init_transformer_layer,
    layer_parameter_count,
    transformer_layer,
    xavier_uniform,
    zeros,
)
from .wire_protocol import decode_message, encode_message

logger = logging.getLogger(__name__)

BALANCE_TARGETS = ("cloud", "device")


@dataclass(frozen=True)
class TaskHeadSpec:
    task_id: str
    num_classes: int

    def __post_init__(self):
        if not self.task_id:
            raise ConfigurationError("task_id must be non-empty", "task_id")
        if self.num_classes < 2:
            raise ConfigurationError(
                f"task '{self.task_id}' needs num_classes >= 2, got {self.num_classes}", "num_classes"
            )


@dataclass(frozen=True)
class DeviceEncoderConfig:
    """Shape of the on-device encoder; ``seed`` drives parameter initialisation"""

    vocab_size: int = 256
    max_seq_len: int = 64
    width: int = 32
    heads: int = 4
    pre_pool_layers: int = 2
    pooling_stages: int = 2
    post_pool_layers: int = 1
    ffn_ratio: int = DEFAULT_FFN_RATIO
    layer_norm_eps: float = DEFAULT_LAYER_NORM_EPS
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    seed: int = 0

    def __post_init__(self):
        positive = ("vocab_size", "max_seq_len", "width", "heads", "ffn_ratio")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}", name)
        for name in ("pre_pool_layers", "pooling_stages", "post_pool_layers"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}", name)
        if self.width % self.heads != 0:
            raise ConfigurationError(
                f"width {self.width} is not divisible by heads {self.heads}", "heads"
            )
        if self.max_seq_len < self.pooling.stride**self.pooling_stages:
            logger.warning(
                f"max_seq_len {self.max_seq_len} < {self.pooling.stride}^{self.pooling_stages}: "
                "later pooling stages will see length-1 sequences"
            )

    def output_length(self, length: int) -> int:
        return pooled_length(length, self.pooling.stride, self.pooling_stages)

    @property
    def num_layers(self) -> int:
        """Attention layers on the device, pooled blocks included"""
        return self.pre_pool_layers + self.pooling_stages * (1 + self.post_pool_layers)


@dataclass(frozen=True)
class CloudDecoderConfig:
    num_layers: int = 2
    width: int = 32
    tasks: Tuple[TaskHeadSpec, ...] = (TaskHeadSpec("majority", 4), TaskHeadSpec("position", 4))
    task_heads_on_device: bool = False

    def __post_init__(self):
        if self.num_layers < 0:
            raise ConfigurationError(f"num_layers must be >= 0, got {self.num_layers}", "num_layers")
        if not self.tasks:
            raise ConfigurationError("the decoder needs at least one task head", "tasks")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"task ids must be unique, got {ids}", "tasks")

    def task(self, task_id: str) -> TaskHeadSpec:
        for spec in self.tasks:
            if spec.task_id == task_id:
                return spec
        raise TaskNotFoundError(f"unknown task_id '{task_id}'")

    @property
    def task_ids(self) -> List[str]:
        return [t.task_id for t in self.tasks]


@dataclass(eq=False)
class TaskHeadParams(ParameterGroup):
    weight: Tensor
    bias: Tensor


@dataclass(eq=False)
class EncoderParams(ParameterGroup):
    token_table: Tensor
    position_table: Tensor
    pre_pool: List[TransformerLayerParams]
    pooled_blocks: List[PooledBlockParams]
    post_pool: List[List[TransformerLayerParams]]


@dataclass(eq=False)
class DecoderParams(ParameterGroup):
    layers: List[TransformerLayerParams]
    heads: Dict[str, TaskHeadParams]


def residual_init_gain(num_layers: int) -> float:
    """1/sqrt(2 · num_layers); 1 for a model without layers"""
    return 1.0 if num_layers < 1 else (2.0 * num_layers) ** -0.5


def _pooled_block(
    width: int,
    heads: int,
    rng: np.random.Generator,
    ratio: int,
    eps: float,
    pooling: PoolingConfig,
    residual_gain: float,
) -> PooledBlockParams:
    layer = init_transformer_layer(width, heads, rng, ffn_ratio=ratio, eps=eps, residual_gain=residual_gain)
    return PooledBlockParams(
        attention=layer.attention,
        ffn=layer.ffn,
        norm_1=layer.norm_1,
        norm_2=layer.norm_2,
        pooling=pooling,
    )


class SplitModel:
    """Encoder and decoder parameters plus the configs that shaped them"""

    def __init__(
        self,
        encoder_config: DeviceEncoderConfig,
        decoder_config: CloudDecoderConfig,
        encoder: EncoderParams,
        decoder: DecoderParams,
    ):
        if decoder_config.width != encoder_config.width:
            raise ConfigurationError(
                f"decoder width {decoder_config.width} != encoder width {encoder_config.width}",
                "decoder.width",
            )
        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self.encoder = encoder
        self.decoder = decoder

    @classmethod
    def initialize(
        cls, encoder_config: DeviceEncoderConfig, decoder_config: CloudDecoderConfig
    ) -> "SplitModel":
        """Build a seeded model; the same configs always give identical parameters.

        Token and position tables share one scale. Residual output projections are
        scaled by 1/sqrt(2 · layers) so the untrained stack stays close to identity
        and the rows of the final hidden state stay input dependent.
        """
        c = encoder_config
        rng = np.random.default_rng(c.seed)
        residual_gain = residual_init_gain(c.num_layers + decoder_config.num_layers)

        def layer() -> TransformerLayerParams:
            return init_transformer_layer(
                c.width, c.heads, rng, c.ffn_ratio, c.layer_norm_eps, residual_gain
            )

        token_table = embedding_table(rng, c.vocab_size, c.width)
        position_table = embedding_table(rng, c.max_seq_len, c.width)
        pre_pool = [layer() for _ in range(c.pre_pool_layers)]
        pooled_blocks, post_pool = [], []
        for _ in range(c.pooling_stages):
            pooled_blocks.append(
                _pooled_block(
                    c.width, c.heads, rng, c.ffn_ratio, c.layer_norm_eps, c.pooling, residual_gain
                )
            )
            post_pool.append([layer() for _ in range(c.post_pool_layers)])
        encoder = EncoderParams(token_table, position_table, pre_pool, pooled_blocks, post_pool)

        decoder_layers = [layer() for _ in range(decoder_config.num_layers)]
        heads = {
            spec.task_id: TaskHeadParams(
                weight=xavier_uniform(rng, c.width, spec.num_classes),
                bias=zeros(spec.num_classes),
            )
            for spec in decoder_config.tasks
        }
        model = cls(encoder_config, decoder_config, encoder, DecoderParams(decoder_layers, heads))
        logger.debug(f"initialised split model with {model.num_parameters()} parameters")
        return model

    # --- parameter access ---

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.encoder.named_parameters(prefix="encoder.")
        yield from self.decoder.named_parameters(prefix="decoder.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def head(self, task_id: str) -> TaskHeadParams:
        try:
            return self.decoder.heads[task_id]
        except KeyError:
            raise TaskNotFoundError(f"unknown task_id '{task_id}'")

    def encoder_layers(self) -> List[TransformerLayerParams]:
        """Device attention layers in execution order"""
        layers: List[TransformerLayerParams] = list(self.encoder.pre_pool)
        for block, post in zip(self.encoder.pooled_blocks, self.encoder.post_pool):
            layers.append(block)
            layers.extend(post)
        return layers

    def shared_parameter(self, balance_at: str = "cloud") -> Tensor:
        """Output projection of the last shared trunk layer on the chosen side.

        "cloud" picks the last decoder layer (falling back to the encoder when the
        decoder has none); "device" picks the last encoder layer.
        """
        if balance_at not in BALANCE_TARGETS:
            raise ConfigurationError(
                f"balance_at must be one of {BALANCE_TARGETS}, got '{balance_at}'", "balance_at"
            )
        candidates = self.encoder_layers()
        if balance_at == "cloud" and self.decoder.layers:
            candidates = self.decoder.layers
        if not candidates:
            raise ConfigurationError("model has no shared transformer layer to balance on", "balance_at")
        return candidates[-1].attention.w_o


def _check_tokens(tokens: Sequence[int], config: DeviceEncoderConfig) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError(f"tokens must be a non-empty 1-D sequence, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"tokens must be integers, got dtype {ids.dtype}")
    if ids.size > config.max_seq_len:
        raise InputError(f"sequence length {ids.size} exceeds max_seq_len {config.max_seq_len}")
    bad = (ids < 0) | (ids >= config.vocab_size)
    if bad.any():
        position = int(np.flatnonzero(bad)[0])
        raise InputError(
            f"token id {int(ids[position])} at position {position} outside vocabulary of {config.vocab_size}"
        )
    return ids.astype(np.int64)


def embed(tokens: Sequence[int], model: SplitModel) -> Tensor:
    """token_table[tokens] + position_table[:T]"""
    ids = _check_tokens(tokens, model.encoder_config)
    positions = model.encoder.position_table[0 : ids.size]
    return take_rows(model.encoder.token_table, ids) + positions


def device_encode(tokens: Sequence[int], model: SplitModel) -> Tensor:
    """Embed and compress a token sequence to (ceil-iterated T/2^k × D)"""
    h = embed(tokens, model)
    for layer in model.encoder.pre_pool:
        h = transformer_layer(h, layer)
    for block, post in zip(model.encoder.pooled_blocks, model.encoder.post_pool):
        h = pooled_attention_block(h, block)
        for layer in post:
            h = transformer_layer(h, layer)
    return h


def cloud_decode(h_compressed: Tensor, task_id: str, model: SplitModel) -> Tensor:
    """Decoder layers, mean over positions, then the task head.

    Returns:
        logits vector of length num_classes for ``task_id``
    """
    width = model.decoder_config.width
    if h_compressed.ndim != 2 or h_compressed.shape[1] != width:
        raise DimensionError(f"cloud_decode expects (T', {width}), got {h_compressed.shape}")
    head = model.head(task_id)
    h = h_compressed
    for layer in model.decoder.layers:
        h = transformer_layer(h, layer)
    summary = h.mean(axis=0, keepdims=True)
    logits = summary @ head.weight + head.bias
    return logits.reshape(head.bias.shape[0])


def monolithic_forward(tokens: Sequence[int], task_id: str, model: SplitModel) -> Tensor:
    """Reference path: encoder and decoder in one process, no serialisation"""
    return cloud_decode(device_encode(tokens, model), task_id, model)


def split_forward(tokens: Sequence[int], task_id: str, model: SplitModel) -> Tuple[Tensor, bytes]:
    """Device encode, serialise, deserialise, cloud decode.

    Returns:
        (logits, the uplink message bytes)
    """
    message = encode_message(device_encode(tokens, model))
    return cloud_decode(decode_message(message), task_id, model), message


def parameter_count(model: SplitModel) -> Tuple[int, int]:
    """Exact scalar parameter counts on the (device, cloud) sides of the split"""
    enc, dec = model.encoder_config, model.decoder_config
    per_layer = layer_parameter_count(enc.width, enc.ffn_ratio)
    device = (enc.vocab_size + enc.max_seq_len) * enc.width + enc.num_layers * per_layer
    cloud = dec.num_layers * per_layer
    heads = sum((enc.width + 1) * spec.num_classes for spec in dec.tasks)
    if dec.task_heads_on_device:
        device += heads
    else:
        cloud += heads
    return device, cloud
