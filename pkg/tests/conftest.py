"""Pytest configuration and shared fixtures"""

from pathlib import Path

import numpy as np
import pytest

from src.split_model import CloudDecoderConfig, DeviceEncoderConfig, SplitModel, TaskHeadSpec

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng():
    """Seeded generator for test inputs"""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_encoder_config():
    """Encoder used by the end-to-end gradient checks: T=8, D=8, H=2, k=1"""
    return DeviceEncoderConfig(
        vocab_size=16,
        max_seq_len=8,
        width=8,
        heads=2,
        pre_pool_layers=1,
        pooling_stages=1,
        post_pool_layers=0,
        seed=7,
    )


@pytest.fixture
def tiny_decoder_config():
    """One decoder layer, two task heads"""
    return CloudDecoderConfig(
        num_layers=1,
        width=8,
        tasks=(TaskHeadSpec("alpha", 3), TaskHeadSpec("beta", 2)),
    )


@pytest.fixture
def tiny_model(tiny_encoder_config, tiny_decoder_config):
    """Seeded tiny split model"""
    return SplitModel.initialize(tiny_encoder_config, tiny_decoder_config)


def read_hex_fixture(name: str) -> bytes:
    lines = (FIXTURES / name).read_text().splitlines()
    return bytes.fromhex(" ".join(line for line in lines if not line.startswith("#")))


@pytest.fixture
def golden_2x3():
    """Golden message for [[0, 1, 2], [3, 4, 5]]"""
    return read_hex_fixture("golden_2x3_counting.hex")


@pytest.fixture
def golden_1x1():
    """Golden message for [[0.0]]"""
    return read_hex_fixture("golden_1x1_zero.hex")
