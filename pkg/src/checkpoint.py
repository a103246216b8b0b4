"""Model checkpoints: YAML config followed by named parameter tensors

    b"DVTC" | version u8 | u32 config_len | config YAML (utf-8)
    | u32 parameter_count
    | per parameter: u16 name_len | name (utf-8) | u64 message_len | DVTN message

Vectors are stored as 1×N messages and reshaped on load.
"""

import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import yaml

from .errors import ContractError, MagicError, TruncationError, VersionError
from .pooling import PoolingConfig
from .split_model import CloudDecoderConfig, DeviceEncoderConfig, SplitModel, TaskHeadSpec
from .wire_protocol import decode_message, encode_message
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DVTC"
CHECKPOINT_VERSION = 1


def configs_to_dict(encoder: DeviceEncoderConfig, decoder: CloudDecoderConfig) -> Dict[str, Any]:
    return {
        "encoder": {
            "vocab_size": encoder.vocab_size,
            "max_seq_len": encoder.max_seq_len,
            "width": encoder.width,
            "heads": encoder.heads,
            "pre_pool_layers": encoder.pre_pool_layers,
            "pooling_stages": encoder.pooling_stages,
            "post_pool_layers": encoder.post_pool_layers,
            "ffn_ratio": encoder.ffn_ratio,
            "layer_norm_eps": encoder.layer_norm_eps,
            "pooling": {
                "kind": encoder.pooling.kind,
                "window": encoder.pooling.window,
                "stride": encoder.pooling.stride,
            },
            "seed": encoder.seed,
        },
        "decoder": {
            "num_layers": decoder.num_layers,
            "width": decoder.width,
            "tasks": [{"task_id": t.task_id, "num_classes": t.num_classes} for t in decoder.tasks],
            "task_heads_on_device": decoder.task_heads_on_device,
        },
    }


def configs_from_dict(data: Dict[str, Any]) -> Tuple[DeviceEncoderConfig, CloudDecoderConfig]:
    enc = dict(data["encoder"])
    enc["pooling"] = PoolingConfig(**enc["pooling"])
    dec = dict(data["decoder"])
    dec["tasks"] = tuple(TaskHeadSpec(**t) for t in dec["tasks"])
    return DeviceEncoderConfig(**enc), CloudDecoderConfig(**dec)


def serialize_checkpoint(model: SplitModel) -> bytes:
    config_text = yaml.safe_dump(
        configs_to_dict(model.encoder_config, model.decoder_config), sort_keys=True
    ).encode("utf-8")
    params = list(model.named_parameters())
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<BI", CHECKPOINT_VERSION, len(config_text)),
        config_text,
        struct.pack("<I", len(params)),
    ]
    for name, tensor in params:
        encoded_name = name.encode("utf-8")
        matrix = tensor.data.reshape(1, -1) if tensor.ndim == 1 else tensor.data
        message = encode_message(Tensor(matrix))
        chunks.append(struct.pack("<H", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<Q", len(message)))
        chunks.append(message)
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, size: int, field: str) -> bytes:
        if self.offset + size > len(self.blob):
            raise TruncationError(
                f"checkpoint ends before {field} ({size} bytes needed)", field=field, offset=self.offset
            )
        chunk = self.blob[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, field: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def deserialize_checkpoint(blob: bytes) -> SplitModel:
    reader = _Reader(blob)
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise MagicError("not a checkpoint file", field="magic", offset=0)
    version, config_len = reader.unpack("<BI", "version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}", field="version", offset=4)
    config = yaml.safe_load(reader.take(config_len, "config").decode("utf-8"))
    model = SplitModel.initialize(*configs_from_dict(config))

    expected = dict(model.named_parameters())
    (count,) = reader.unpack("<I", "parameter_count")
    if count != len(expected):
        raise ContractError(f"checkpoint holds {count} parameters, model expects {len(expected)}")
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name_len")
        name = reader.take(name_len, "name").decode("utf-8")
        (message_len,) = reader.unpack("<Q", "message_len")
        values = decode_message(reader.take(message_len, "message"))
        if name not in expected:
            raise ContractError(f"checkpoint parameter '{name}' does not exist in the model")
        target = expected[name]
        if values.size != target.size:
            raise ContractError(f"parameter '{name}' has {values.size} values, expected {target.size}")
        target.data = values.data.reshape(target.shape).astype(np.float32)
    return model


def save_checkpoint(model: SplitModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(serialize_checkpoint(model))
    logger.info(f"wrote checkpoint with {model.num_parameters()} parameters to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> SplitModel:
    return deserialize_checkpoint(Path(path).read_bytes())
