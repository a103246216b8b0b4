"""Tests for split_model module"""

import numpy as np
import pytest

from src.errors import ConfigurationError, DimensionError, InputError, TaskNotFoundError
from src.split_model import (
    CloudDecoderConfig,
    DeviceEncoderConfig,
    SplitModel,
    TaskHeadSpec,
    cloud_decode,
    device_encode,
    embed,
    monolithic_forward,
    parameter_count,
    residual_init_gain,
    split_forward,
)
from src.tensor import Tensor, backward, cross_entropy, finite_difference_gradient, relative_error
from src.transformer import layer_parameter_count, transformer_layer
from src.wire_protocol import decode_message, encode_message


def _model(pooling_stages=1, decoder_layers=1, max_seq_len=16, seed=3, **decoder_kwargs):
    encoder = DeviceEncoderConfig(
        vocab_size=16,
        max_seq_len=max_seq_len,
        width=8,
        heads=2,
        pre_pool_layers=1,
        pooling_stages=pooling_stages,
        post_pool_layers=0,
        seed=seed,
    )
    decoder = CloudDecoderConfig(
        num_layers=decoder_layers,
        width=8,
        tasks=(TaskHeadSpec("alpha", 3), TaskHeadSpec("beta", 2)),
        **decoder_kwargs,
    )
    return SplitModel.initialize(encoder, decoder)


class TestConfigs:
    def test_heads_must_divide_width(self):
        """Test D not divisible by H is rejected"""
        with pytest.raises(ConfigurationError):
            DeviceEncoderConfig(width=30, heads=4)

    def test_needs_a_task(self):
        """Test a decoder without task heads is rejected"""
        with pytest.raises(ConfigurationError):
            CloudDecoderConfig(tasks=())

    def test_duplicate_task_ids(self):
        """Test task ids must be unique"""
        with pytest.raises(ConfigurationError):
            CloudDecoderConfig(tasks=(TaskHeadSpec("a", 2), TaskHeadSpec("a", 3)))

    def test_head_needs_two_classes(self):
        """Test num_classes >= 2"""
        with pytest.raises(ConfigurationError):
            TaskHeadSpec("a", 1)

    def test_width_mismatch(self, tiny_encoder_config):
        """Test decoder width must equal encoder width"""
        with pytest.raises(ConfigurationError):
            SplitModel.initialize(tiny_encoder_config, CloudDecoderConfig(width=16))

    def test_desk_defaults(self):
        """Test the desk-scale default shape"""
        enc = DeviceEncoderConfig()
        assert (enc.vocab_size, enc.max_seq_len, enc.width, enc.heads) == (256, 64, 32, 4)
        assert (enc.pre_pool_layers, enc.pooling_stages, enc.post_pool_layers) == (2, 2, 1)
        assert enc.output_length(64) == 16
        assert CloudDecoderConfig().num_layers == 2


class TestEmbed:
    def test_zero_tables(self, tiny_model):
        """Test zeroed embeddings give zeros"""
        tiny_model.encoder.token_table.data[:] = 0
        tiny_model.encoder.position_table.data[:] = 0
        np.testing.assert_array_equal(embed([1, 2, 3], tiny_model).data, np.zeros((3, 8)))

    def test_same_token_differs_by_position(self, tiny_model):
        """Test repeated tokens differ only by their positional rows"""
        out = embed([5, 5], tiny_model).data
        pos = tiny_model.encoder.position_table.data
        np.testing.assert_allclose(out[1] - out[0], pos[1] - pos[0], atol=1e-6)

    def test_table_lookup(self, tiny_model):
        """Test row 0 of embed([3, 1, 4]) is token_table[3] + position_table[0]"""
        out = embed([3, 1, 4], tiny_model).data
        expected = tiny_model.encoder.token_table.data[3] + tiny_model.encoder.position_table.data[0]
        np.testing.assert_array_equal(out[0], expected)

    def test_token_out_of_range(self, tiny_model):
        """Test token ids >= vocab_size are input errors"""
        with pytest.raises(InputError):
            embed([1, 16], tiny_model)

    def test_sequence_too_long(self, tiny_model):
        """Test sequences beyond max_seq_len are input errors"""
        with pytest.raises(InputError):
            embed([0] * 9, tiny_model)

    def test_negative_token(self, tiny_model):
        """Test negative ids are input errors"""
        with pytest.raises(InputError):
            embed([-1], tiny_model)


class TestDeviceEncode:
    def test_two_stages_quarter_length(self):
        """Test k = 2 on T = 64 gives 16 rows"""
        model = _model(pooling_stages=2, max_seq_len=64)
        assert device_encode(np.arange(64) % 16, model).shape == (16, 8)

    def test_no_stages_keeps_length(self):
        """Test k = 0 leaves the length unchanged"""
        model = _model(pooling_stages=0)
        assert device_encode([1, 2, 3, 4, 5], model).shape == (5, 8)

    def test_odd_length_ceil(self):
        """Test k = 1 on T = 7 gives 4 rows"""
        assert device_encode([1, 2, 3, 4, 5, 6, 7], _model()).shape == (4, 8)

    def test_exact_compression_factor(self):
        """Test T a multiple of 2^k compresses by exactly 2^k"""
        model = _model(pooling_stages=3, max_seq_len=32)
        for length in (8, 16, 24, 32):
            assert device_encode(np.arange(length) % 16, model).shape[0] == length // 8


class TestCloudDecode:
    def test_single_row_without_layers(self):
        """Test T' = 1 with no decoder layers gives row W + b"""
        model = _model(decoder_layers=0)
        head = model.head("alpha")
        head.bias.data = np.array([0.5, -1.0, 2.0], dtype=np.float32)
        h = Tensor(np.linspace(-1, 1, 8).reshape(1, 8))
        expected = h.data @ head.weight.data + head.bias.data
        np.testing.assert_allclose(cloud_decode(h, "alpha", model).data, expected[0], rtol=1e-6)

    def test_zero_head_gives_bias(self, tiny_model, rng):
        """Test zero head weights leave the bias"""
        head = tiny_model.head("beta")
        head.weight.data[:] = 0
        head.bias.data = np.array([0.25, -0.75], dtype=np.float32)
        logits = cloud_decode(Tensor(rng.uniform(-1, 1, size=(3, 8))), "beta", tiny_model)
        np.testing.assert_array_equal(logits.data, [0.25, -0.75])

    def test_manual_composition(self, tiny_model, rng):
        """Test decoder layers, mean and head applied by hand, bit-exact"""
        h = Tensor(rng.uniform(-1, 1, size=(4, 8)))
        x = h
        for layer in tiny_model.decoder.layers:
            x = transformer_layer(x, layer)
        head = tiny_model.head("alpha")
        expected = (x.mean(axis=0, keepdims=True) @ head.weight + head.bias).data.reshape(-1)
        np.testing.assert_array_equal(cloud_decode(h, "alpha", tiny_model).data, expected)

    def test_unknown_task(self, tiny_model):
        """Test unknown task ids raise a lookup error"""
        with pytest.raises(TaskNotFoundError):
            cloud_decode(Tensor(np.ones((2, 8))), "gamma", tiny_model)
        with pytest.raises(KeyError):
            tiny_model.head("gamma")

    def test_width_mismatch(self, tiny_model):
        """Test wrong width is a dimension error"""
        with pytest.raises(DimensionError):
            cloud_decode(Tensor(np.ones((2, 4))), "alpha", tiny_model)


class TestSplitEquivalence:
    def test_monolithic_is_composition(self, tiny_model):
        """Test monolithic_forward equals device_encode then cloud_decode"""
        tokens = [3, 1, 4, 1, 5, 9, 2, 6]
        composed = cloud_decode(device_encode(tokens, tiny_model), "alpha", tiny_model)
        np.testing.assert_array_equal(monolithic_forward(tokens, "alpha", tiny_model).data, composed.data)

    def test_logits_length(self, tiny_model):
        """Test logits have num_classes entries"""
        assert monolithic_forward([1, 2], "alpha", tiny_model).shape == (3,)
        assert monolithic_forward([1, 2], "beta", tiny_model).shape == (2,)

    def test_serialised_path_bit_exact(self):
        """Test 100 seeded (model, input) pairs through the wire format"""
        rng = np.random.default_rng(42)
        for seed in range(100):
            model = _model(seed=seed, max_seq_len=8)
            tokens = rng.integers(0, 16, size=int(rng.integers(1, 9)))
            task = ("alpha", "beta")[seed % 2]
            h = device_encode(tokens, model)
            decoded = cloud_decode(decode_message(encode_message(h)), task, model)
            np.testing.assert_array_equal(decoded.data, monolithic_forward(tokens, task, model).data)

    def test_split_forward_returns_message(self, tiny_model):
        """Test split_forward returns logits and the uplink bytes"""
        tokens = [0, 1, 2, 3, 4, 5]
        logits, message = split_forward(tokens, "beta", tiny_model)
        np.testing.assert_array_equal(logits.data, monolithic_forward(tokens, "beta", tiny_model).data)
        assert len(message) == 22 + 3 * 8 * 4


class TestParameters:
    def test_count_matches_allocation(self, tiny_model):
        """Test device + cloud counts equal the allocated scalars"""
        device, cloud = parameter_count(tiny_model)
        assert device + cloud == tiny_model.num_parameters()

    def test_embedding_contribution(self):
        """Test embeddings add (vocab + max_seq_len) * D to the device side"""
        a, b = _model(max_seq_len=8), _model(max_seq_len=16)
        assert parameter_count(b)[0] - parameter_count(a)[0] == 8 * 8

    def test_decoder_layers_additive(self):
        """Test doubling decoder layers adds num_layers * per-layer count"""
        one, two = _model(decoder_layers=2), _model(decoder_layers=4)
        assert parameter_count(two)[1] - parameter_count(one)[1] == 2 * layer_parameter_count(8)

    def test_heads_on_device_flag(self):
        """Test the flag moves head parameters across the split"""
        cloud_side = parameter_count(_model())
        device_side = parameter_count(_model(task_heads_on_device=True))
        heads = 9 * 3 + 9 * 2
        assert device_side[0] == cloud_side[0] + heads
        assert device_side[1] == cloud_side[1] - heads

    def test_named_parameters_prefixes(self, tiny_model):
        """Test parameters are named by side of the split"""
        names = [name for name, _ in tiny_model.named_parameters()]
        assert "encoder.token_table" in names
        assert "decoder.heads.alpha.weight" in names
        assert all(n.startswith(("encoder.", "decoder.")) for n in names)
        assert len(names) == len(set(names))

    def test_initialisation_deterministic(self, tiny_encoder_config, tiny_decoder_config):
        """Test identical configs give identical parameters"""
        a = SplitModel.initialize(tiny_encoder_config, tiny_decoder_config)
        b = SplitModel.initialize(tiny_encoder_config, tiny_decoder_config)
        for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(x.data, y.data)

    def test_residual_projections_start_small(self):
        """Test w_o and w_2 of every default layer start at gain 1/sqrt(2 * 8)"""
        model = SplitModel.initialize(DeviceEncoderConfig(), CloudDecoderConfig())
        assert residual_init_gain(8) == pytest.approx(0.25)
        layers = model.encoder_layers() + model.decoder.layers
        assert len(layers) == 8
        for layer in layers:
            assert np.abs(layer.attention.w_o.data).max() <= 0.25 * np.sqrt(6 / 64) + 1e-7
            assert np.abs(layer.ffn.w_2.data).max() <= 0.25 * np.sqrt(6 / 160) + 1e-7
            assert np.abs(layer.attention.w_q.data).max() > 0.25 * np.sqrt(6 / 64)

    def test_embedding_tables_share_scale(self):
        """Test token and position rows both have std 1/sqrt(D)"""
        model = SplitModel.initialize(DeviceEncoderConfig(), CloudDecoderConfig())
        for table in (model.encoder.token_table, model.encoder.position_table):
            assert table.data.std() == pytest.approx(32**-0.5, rel=0.1)

    def test_residual_gain_without_layers(self):
        """Test a layerless model keeps gain 1"""
        assert residual_init_gain(0) == 1.0


class TestMultiTaskSharing:
    def test_loss_on_one_task_leaves_other_head_alone(self, tiny_model):
        """Test task A's loss produces no gradient on task B's head"""
        loss = cross_entropy(monolithic_forward([1, 2, 3, 4], "alpha", tiny_model).reshape(1, -1), [2])
        backward(loss)
        beta = tiny_model.head("beta")
        assert beta.weight.grad is None and beta.bias.grad is None
        assert tiny_model.head("alpha").weight.grad is not None
        assert tiny_model.encoder.token_table.grad is not None

    def test_shared_parameter_choice(self, tiny_model):
        """Test the balancing target on each side of the split"""
        assert tiny_model.shared_parameter("cloud") is tiny_model.decoder.layers[-1].attention.w_o
        assert tiny_model.shared_parameter("device") is tiny_model.encoder_layers()[-1].attention.w_o
        with pytest.raises(ConfigurationError):
            tiny_model.shared_parameter("edge")

    def test_shared_parameter_falls_back_to_encoder(self):
        """Test a decoder without layers balances on the encoder"""
        model = _model(decoder_layers=0)
        assert model.shared_parameter("cloud") is model.encoder_layers()[-1].attention.w_o


def test_end_to_end_gradients(tiny_model):
    """Test the tiny split model's gradients against finite differences"""
    tokens = [3, 7, 1, 0, 15, 2, 9, 4]

    def loss():
        a = cross_entropy(monolithic_forward(tokens, "alpha", tiny_model).reshape(1, -1), [1])
        b = cross_entropy(monolithic_forward(tokens, "beta", tiny_model).reshape(1, -1), [0])
        return a + b

    backward(loss())
    checked = [
        tiny_model.encoder.position_table,
        tiny_model.encoder.pre_pool[0].attention.w_q,
        tiny_model.encoder.pooled_blocks[0].ffn.w_1,
        tiny_model.decoder.layers[0].norm_1.gamma,
        tiny_model.head("beta").weight,
    ]
    for t in checked:
        estimate = finite_difference_gradient(lambda _: loss(), t)
        assert relative_error(t.grad, estimate) < 1e-3
