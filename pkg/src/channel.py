"""Channel - device→cloud link model and split-inference cost report

The link is a linear bandwidth + propagation model:

    latency = rtt / 2 + (message_len + per_message_overhead) / bandwidth
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

from .errors import ConfigurationError
from .pooling import pooled_length, total_attention_flops
from .split_model import CloudDecoderConfig, DeviceEncoderConfig
from .wire_protocol import message_size

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelModel:
    bandwidth: float = 1.25e6  # bytes/s, 10 Mbit/s uplink
    rtt: float = 0.05  # seconds
    per_message_overhead: int = 40  # bytes, e.g. IP + TCP headers

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ConfigurationError(f"bandwidth must be > 0, got {self.bandwidth}", "bandwidth")
        if self.rtt < 0:
            raise ConfigurationError(f"rtt must be >= 0, got {self.rtt}", "rtt")
        if self.per_message_overhead < 0:
            raise ConfigurationError(
                f"per_message_overhead must be >= 0, got {self.per_message_overhead}",
                "per_message_overhead",
            )


def channel_transfer(message_len: int, c: ChannelModel) -> float:
    """One-way latency in seconds for a message of ``message_len`` bytes"""
    return c.rtt / 2 + (message_len + c.per_message_overhead) / c.bandwidth


def device_attention_lengths(
    config: DeviceEncoderConfig, length: int, active_stages: Optional[int] = None
) -> Tuple[List[int], int]:
    """Sequence length seen by every device attention layer, in execution order.

    Only the first ``active_stages`` pooled blocks actually pool; the remaining
    blocks run at their input length, so the layer stack keeps its depth.

    Returns:
        (per-layer lengths, length of the encoder output)
    """
    active = config.pooling_stages if active_stages is None else active_stages
    if not 0 <= active <= config.pooling_stages:
        raise ConfigurationError(
            f"active_stages must be in [0, {config.pooling_stages}], got {active}", "active_stages"
        )
    lengths = [length] * config.pre_pool_layers
    current = length
    for stage in range(config.pooling_stages):
        if stage < active:
            current = pooled_length(current, config.pooling.stride, 1)
        lengths.append(current)
        lengths.extend([current] * config.post_pool_layers)
    return lengths, current


@dataclass(frozen=True)
class SplitInferenceReport:
    """Per-inference compute and uplink cost, next to the unpooled baseline"""

    length: int
    stages: int
    compressed_length: int
    uplink_bytes: int
    uplink_latency: float
    device_flops: int
    cloud_flops: int
    baseline_compressed_length: int
    baseline_uplink_bytes: int
    baseline_uplink_latency: float
    baseline_device_flops: int
    baseline_cloud_flops: int

    @property
    def total_flops(self) -> int:
        return self.device_flops + self.cloud_flops

    @property
    def baseline_total_flops(self) -> int:
        return self.baseline_device_flops + self.baseline_cloud_flops

    @property
    def byte_ratio(self) -> float:
        return self.baseline_uplink_bytes / self.uplink_bytes

    def as_dict(self) -> Dict[str, float]:
        row = asdict(self)
        row["byte_ratio"] = self.byte_ratio
        return row


def _side_costs(
    encoder: DeviceEncoderConfig,
    decoder: CloudDecoderConfig,
    channel: ChannelModel,
    length: int,
    active_stages: int,
) -> Tuple[int, int, float, int, int]:
    lengths, compressed = device_attention_lengths(encoder, length, active_stages)
    uplink = message_size(compressed, encoder.width)
    device = total_attention_flops(lengths, encoder.width)
    cloud = total_attention_flops([compressed] * decoder.num_layers, decoder.width)
    return compressed, uplink, channel_transfer(uplink, channel), device, cloud


def simulate_split_inference(
    encoder: DeviceEncoderConfig,
    decoder: CloudDecoderConfig,
    channel: ChannelModel,
    length: int,
    active_stages: Optional[int] = None,
) -> SplitInferenceReport:
    """Analytic cost of one split inference of a length-T input.

    Args:
        encoder: device encoder shape
        decoder: cloud decoder shape
        channel: uplink model
        length: input sequence length T
        active_stages: pooled blocks that pool (default: all of them)
    """
    if length < 1:
        raise ConfigurationError(f"input length must be >= 1, got {length}", "length")
    active = encoder.pooling_stages if active_stages is None else active_stages
    compressed, uplink, latency, device, cloud = _side_costs(encoder, decoder, channel, length, active)
    b_compressed, b_uplink, b_latency, b_device, b_cloud = _side_costs(
        encoder, decoder, channel, length, 0
    )
    report = SplitInferenceReport(
        length=length,
        stages=active,
        compressed_length=compressed,
        uplink_bytes=uplink,
        uplink_latency=latency,
        device_flops=device,
        cloud_flops=cloud,
        baseline_compressed_length=b_compressed,
        baseline_uplink_bytes=b_uplink,
        baseline_uplink_latency=b_latency,
        baseline_device_flops=b_device,
        baseline_cloud_flops=b_cloud,
    )
    logger.debug(f"simulated split inference: {report}")
    return report
