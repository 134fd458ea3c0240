"""Architecture assembly, parameter accounting, and forward semantics."""

import numpy as np
import pytest

from swirsynth.model import (
    ModelConfig,
    build_model,
    count_layers,
    count_parameters,
    forward,
    load_parameters,
    parameter_shapes,
    predict_patch,
)
from swirsynth.tensor import finite_diff_check, mae_loss

# published operating points: (blocks, channels) -> (total conv layers,
# parameter count in millions)
OPERATING_POINTS = [
    (6, 128, 15, 1.77e6),
    (12, 128, 27, 3.54e6),
    (16, 128, 35, 4.72e6),
    (24, 128, 51, 7.08e6),
    (24, 256, 51, 28.3e6),
]


class TestCounts:
    @pytest.mark.parametrize("blocks,channels,layers,params", OPERATING_POINTS)
    def test_parameter_count_within_one_percent(self, blocks, channels, layers, params):
        got = count_parameters(ModelConfig(blocks, channels))
        assert abs(got - params) / params < 0.01

    @pytest.mark.parametrize("blocks,channels,layers,params", OPERATING_POINTS)
    def test_layer_count(self, blocks, channels, layers, params):
        assert count_layers(ModelConfig(blocks, channels)) == layers

    def test_minimal_config_has_five_layers(self):
        assert count_layers(ModelConfig(1, 1)) == 5

    def test_count_matches_actual_parameters(self):
        cfg = ModelConfig(2, 6, init_seed=9)
        model = build_model(cfg)
        total = sum(p.data.size for p in model.parameters())
        assert total == count_parameters(cfg)

    def test_shapes_cover_all_layers(self):
        cfg = ModelConfig(3, 4)
        shapes = parameter_shapes(cfg)
        # kernel+bias per conv layer
        assert len(shapes) == 2 * count_layers(cfg)


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        cfg = ModelConfig(2, 8, init_seed=42)
        a = build_model(cfg)
        b = build_model(cfg)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a = build_model(ModelConfig(1, 4, init_seed=0))
        b = build_model(ModelConfig(1, 4, init_seed=1))
        assert any(
            not np.array_equal(pa.data, pb.data)
            for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_biases_start_at_zero(self):
        model = build_model(ModelConfig(2, 4, init_seed=3))
        for shape, p in zip(parameter_shapes(model.config), model.parameters()):
            if len(shape) == 1:
                assert np.all(p.data == 0)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(0, 4).validate()
        with pytest.raises(ValueError):
            ModelConfig(1, 4, kernel_size=4).validate()
        with pytest.raises(ValueError):
            ModelConfig(1, 4, residual_scaling=1.5).validate()

    def test_load_parameters_roundtrip(self):
        model = build_model(ModelConfig(1, 4, init_seed=5))
        arrays = [p.data.copy() * 2 for p in model.parameters()]
        load_parameters(model, arrays)
        for p, a in zip(model.parameters(), arrays):
            assert np.array_equal(p.data, a)

    def test_load_parameters_shape_mismatch(self):
        model = build_model(ModelConfig(1, 4, init_seed=5))
        arrays = [p.data.copy() for p in model.parameters()]
        arrays[0] = arrays[0][..., :2]
        with pytest.raises(ValueError, match="shape"):
            load_parameters(model, arrays)


def _zeroed_model(cfg):
    model = build_model(cfg)
    for p in model.parameters():
        p.data[...] = 0
    return model


class TestForward:
    def test_output_shape_matches_input(self):
        model = build_model(ModelConfig(2, 4, init_seed=1))
        out = forward(model, np.random.rand(32, 32, 3).astype(np.float32))
        assert out.shape == (32, 32, 1)

    @pytest.mark.parametrize("h,w", [(8, 8), (11, 17), (32, 48)])
    def test_spatial_equivariance(self, h, w):
        model = build_model(ModelConfig(1, 3, init_seed=2))
        out = forward(model, np.random.rand(h, w, 3).astype(np.float32))
        assert out.shape == (h, w, 1)

    def test_zero_network_maps_to_zero(self):
        model = _zeroed_model(ModelConfig(2, 4))
        out = forward(model, np.random.rand(16, 16, 3).astype(np.float32) * 1000)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_skip_only_linear_combination(self):
        # zero everything except the 1x1 skip kernel: the network reduces
        # to out[y, x] = a*G + b*R + c*NIR
        model = _zeroed_model(ModelConfig(2, 4))
        a, b, c = 0.5, 0.3, 0.2
        model.skip.kernel.data[0, 0, :, 0] = [a, b, c]
        x = np.random.default_rng(3).uniform(0, 1023, (12, 12, 3)).astype(np.float32)
        out = forward(model, x).data[..., 0]
        expected = a * x[..., 0] + b * x[..., 1] + c * x[..., 2]
        np.testing.assert_allclose(out, expected, rtol=1e-5)

    def test_channel_mismatch(self):
        model = build_model(ModelConfig(1, 4))
        with pytest.raises(ValueError, match="channel"):
            forward(model, np.zeros((8, 8, 4), np.float32))

    def test_forward_is_pure(self):
        model = build_model(ModelConfig(2, 4, init_seed=8))
        x = np.random.rand(16, 16, 3).astype(np.float32)
        a = forward(model, x).data
        b = forward(model, x).data
        assert np.array_equal(a, b)

    def test_zero_scaling_ignores_block_parameters(self):
        cfg = ModelConfig(2, 4, residual_scaling=0.0, init_seed=6)
        model = build_model(cfg)
        x = np.random.rand(10, 10, 3).astype(np.float32)
        base = forward(model, x).data
        for block in model.blocks:
            block.conv1.kernel.data[...] = 17.0
            block.conv2.kernel.data[...] = -4.0
        np.testing.assert_array_equal(forward(model, x).data, base)

    def test_normalize_flag_rescales(self):
        # skip-only model: normalize divides inputs by 1023 and rescales
        # the output, so a pure linear map is unchanged
        cfg = ModelConfig(1, 2, normalize=True)
        model = _zeroed_model(cfg)
        model.skip.kernel.data[0, 0, :, 0] = [0.5, 0.25, 0.25]
        x = np.random.default_rng(4).uniform(0, 1023, (8, 8, 3)).astype(np.float32)
        out = forward(model, x).data[..., 0]
        expected = 0.5 * x[..., 0] + 0.25 * x[..., 1] + 0.25 * x[..., 2]
        np.testing.assert_allclose(out, expected, rtol=1e-4)


class TestPredictPatch:
    def _linear_model(self, bias):
        model = _zeroed_model(ModelConfig(1, 2))
        model.skip.bias.data[0] = bias
        return model

    def test_clamps_low(self):
        out = predict_patch(self._linear_model(-3.2), np.zeros((4, 4, 3)))
        assert out.dtype == np.uint16
        np.testing.assert_array_equal(out, 0)

    def test_clamps_high(self):
        out = predict_patch(self._linear_model(1500.0), np.zeros((4, 4, 3)))
        np.testing.assert_array_equal(out, 1023)

    def test_rounds_half_to_even(self):
        out = predict_patch(self._linear_model(512.5), np.zeros((4, 4, 3)))
        np.testing.assert_array_equal(out, 512)
        out = predict_patch(self._linear_model(511.5), np.zeros((4, 4, 3)))
        np.testing.assert_array_equal(out, 512)


@pytest.mark.parametrize("seed", range(20))
def test_full_model_gradient_check(seed):
    """The composed network passes finite differences on small inputs."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_res_blocks=1, feature_size=3, init_seed=seed)
    model = build_model(cfg, dtype=np.float64)
    x = rng.standard_normal((6, 6, 3))
    tgt = rng.standard_normal((6, 6, 1))

    def f():
        return mae_loss(forward(model, x), tgt)

    err = finite_diff_check(f, model.parameters())
    assert err < 1e-4, f"model gradient check failed at seed {seed}: {err}"
