"""Architecture tests: parameter layout, module wiring, end-to-end gradients,
and checkpoint round-trips.

The parameter-count oracle recomputes the expected tensor sizes from the
architecture definition with independent arithmetic, so a silent change in
the layout (a dropped norm, a wrong channel count) fails loudly.
"""

import numpy as np
import pytest

from voxelseg.autodiff import Tensor
from voxelseg.errors import CheckpointError, ConfigError, ShapeMismatch
from voxelseg.network import (NetworkConfig, context_module, forward,
                              init_parameters, load_checkpoint,
                              localization_module, parameter_count,
                              parameter_shapes, save_checkpoint,
                              upsample_module)
from voxelseg.rng import RngStream


def expected_parameter_count(levels, base, in_ch=4, classes=4):
    """Independent recount of every weight tensor in the architecture."""
    def f(l):
        return base * 2 ** l

    def conv(cin, cout, k):
        return cout * cin * k ** 3 + cout

    def norm(ch):
        return 2 * ch

    def context(ch):
        return 2 * norm(ch) + 2 * conv(ch, ch, 3)

    total = conv(in_ch, f(0), 3) + context(f(0))
    for l in range(1, levels):
        total += conv(f(l - 1), f(l), 3) + context(f(l))
    for l in range(levels - 1):
        total += conv(2 * f(l), f(l), 3) + norm(f(l))      # upsample conv
        total += conv(2 * f(l), 2 * f(l), 3) + norm(2 * f(l))  # loc 3x3x3
        total += conv(2 * f(l), f(l), 1) + norm(f(l))      # loc 1x1x1
    ds = [l for l in (0, 1, 2) if l <= levels - 2]
    for l in ds:
        total += conv(f(l), classes, 1)
    return total


class TestConfig:
    def test_defaults(self):
        c = NetworkConfig()
        assert c.levels == 5
        assert c.base_filters == 16
        assert c.filters(3) == 128
        assert c.spatial_divisor == 16
        assert c.deep_supervision_levels == (0, 1, 2)

    def test_adaptive_deep_supervision(self):
        assert NetworkConfig(levels=3, base_filters=4).deep_supervision_levels == (0, 1)
        assert NetworkConfig(levels=2, base_filters=4).deep_supervision_levels == (0,)

    def test_roundtrip_dict(self):
        c = NetworkConfig(levels=3, base_filters=8, dropout_p=0.1)
        assert NetworkConfig.from_dict(c.to_dict()) == c

    def test_rejects_bad_levels(self):
        with pytest.raises(ConfigError):
            NetworkConfig(levels=1)

    def test_rejects_out_of_range_supervision(self):
        with pytest.raises(ConfigError):
            NetworkConfig(levels=3, deep_supervision_levels=(0, 5))


class TestParameterLayout:
    @pytest.mark.parametrize("levels,base", [(2, 4), (3, 8), (5, 16)])
    def test_count_matches_oracle(self, levels, base):
        config = NetworkConfig(levels=levels, base_filters=base)
        params = init_parameters(config, RngStream(0))
        assert parameter_count(params) == expected_parameter_count(levels, base)

    def test_shapes_order_is_stable(self):
        config = NetworkConfig(levels=2, base_filters=4)
        names = list(parameter_shapes(config))
        assert names[0] == "enc0.in.w"
        assert names[-1] == "seg0.b"

    def test_init_deterministic(self):
        config = NetworkConfig(levels=2, base_filters=4)
        a = init_parameters(config, RngStream(9))
        b = init_parameters(config, RngStream(9))
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_init_statistics(self):
        # He fan-in: conv weight std ~ sqrt(2 / fan_in)
        config = NetworkConfig(levels=2, base_filters=8)
        params = init_parameters(config, RngStream(3))
        w = params["enc0.ctx.conv1.w"].data
        fan_in = w.shape[1] * 27
        assert abs(w.std() / np.sqrt(2.0 / fan_in) - 1.0) < 0.1
        np.testing.assert_array_equal(params["enc0.ctx.norm1.g"].data, 1.0)
        np.testing.assert_array_equal(params["enc0.in.b"].data, 0.0)


class TestModules:
    def _ctx_setup(self, ch=4, size=6):
        config = NetworkConfig(levels=2, base_filters=ch, dropout_p=0.0)
        params = init_parameters(config, RngStream(1), dtype=np.float64)
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(1, ch, size, size, size)))
        return config, params, x

    def test_context_module_residual_identity(self):
        # zeroed convolutions reduce the block to the identity skip path
        config, params, x = self._ctx_setup()
        for n in ("enc0.ctx.conv1", "enc0.ctx.conv2"):
            params[f"{n}.w"].data[:] = 0.0
            params[f"{n}.b"].data[:] = 0.0
        out = context_module(x, params, "enc0.ctx", config, False, None)
        np.testing.assert_array_equal(out.data, x.data)

    def test_context_module_preserves_shape(self):
        config, params, x = self._ctx_setup()
        out = context_module(x, params, "enc0.ctx", config, False, None)
        assert out.shape == x.shape

    def test_upsample_module_doubles_spatial(self):
        config = NetworkConfig(levels=2, base_filters=4)
        params = init_parameters(config, RngStream(4), dtype=np.float64)
        x = Tensor(np.random.default_rng(5).normal(size=(1, 8, 3, 3, 3)))
        out = upsample_module(x, params, "dec0", config)
        assert out.shape == (1, 4, 6, 6, 6)

    def test_localization_module_halves_channels(self):
        config = NetworkConfig(levels=2, base_filters=4)
        params = init_parameters(config, RngStream(6), dtype=np.float64)
        x = Tensor(np.random.default_rng(7).normal(size=(1, 8, 4, 4, 4)))
        out = localization_module(x, params, "dec0", config)
        assert out.shape == (1, 4, 4, 4, 4)


class TestForward:
    @pytest.mark.parametrize("levels,size", [(2, 8), (3, 8)])
    def test_output_shapes(self, levels, size):
        config = NetworkConfig(levels=levels, base_filters=4)
        params = init_parameters(config, RngStream(0))
        x = np.random.default_rng(1).normal(size=(2, 4, size, size, size)).astype(np.float32)
        logits, soft = forward(config, params, x)
        assert logits.shape == (2, 4, size, size, size)
        np.testing.assert_allclose(soft.data.sum(axis=1), 1.0, atol=1e-5)

    def test_eval_deterministic(self):
        config = NetworkConfig(levels=2, base_filters=4)
        params = init_parameters(config, RngStream(0))
        x = np.random.default_rng(2).normal(size=(1, 4, 8, 8, 8)).astype(np.float32)
        a = forward(config, params, x)[0].data
        b = forward(config, params, x)[0].data
        np.testing.assert_array_equal(a, b)

    def test_dropout_modes(self):
        config = NetworkConfig(levels=2, base_filters=4, dropout_p=0.3)
        params = init_parameters(config, RngStream(0))
        x = np.random.default_rng(3).normal(size=(1, 4, 8, 8, 8)).astype(np.float32)
        same1 = forward(config, params, x, mode="mc_dropout", rng=RngStream(5))[0].data
        same2 = forward(config, params, x, mode="mc_dropout", rng=RngStream(5))[0].data
        other = forward(config, params, x, mode="mc_dropout", rng=RngStream(6))[0].data
        np.testing.assert_array_equal(same1, same2)
        assert not np.array_equal(same1, other)

    def test_rejects_bad_inputs(self):
        config = NetworkConfig(levels=2, base_filters=4)
        params = init_parameters(config, RngStream(0))
        with pytest.raises(ShapeMismatch):
            forward(config, params, np.zeros((1, 3, 8, 8, 8), np.float32))
        with pytest.raises(ShapeMismatch):
            forward(config, params, np.zeros((1, 4, 7, 8, 8), np.float32))
        with pytest.raises(ConfigError):
            forward(config, params, np.zeros((1, 4, 8, 8, 8), np.float32), mode="banana")
        with pytest.raises(ConfigError):
            forward(config, params, np.zeros((1, 4, 8, 8, 8), np.float32), mode="train")


class TestFullNetworkGradients:
    def test_spot_checked_parameter_gradients(self):
        """Backprop through the whole net vs central differences (float64)."""
        config = NetworkConfig(levels=2, base_filters=2, dropout_p=0.0)
        params = init_parameters(config, RngStream(11), dtype=np.float64)
        gen = np.random.default_rng(12)
        x = Tensor(gen.normal(size=(1, 4, 4, 4, 4)), requires_grad=True)
        target = gen.uniform(size=(1, 4, 4, 4, 4))

        def loss_tensor():
            _, soft = forward(config, params, x)
            return (soft * target).mean()

        loss = loss_tensor()
        loss.backward()
        grads = {name: p.grad.copy() for name, p in params.items()}
        xgrad = x.grad.copy()

        h = 1e-5
        checked = 0
        for name in sorted(params):
            flat = params[name].data.reshape(-1)
            for idx in gen.choice(flat.size, size=min(3, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                fp = float(loss_tensor().data)
                flat[idx] = orig - h
                fm = float(loss_tensor().data)
                flat[idx] = orig
                want = (fp - fm) / (2 * h)
                got = grads[name].reshape(-1)[idx]
                scale = max(abs(want), 1e-7)
                assert abs(got - want) / scale < 1e-4, (
                    f"{name}[{idx}]: ad {got:.3e} vs fd {want:.3e}")
                checked += 1
        assert checked > 50

        # input gradient, a few coordinates
        xflat = x.data.reshape(-1)
        for idx in gen.choice(xflat.size, size=5, replace=False):
            orig = xflat[idx]
            xflat[idx] = orig + h
            fp = float(loss_tensor().data)
            xflat[idx] = orig - h
            fm = float(loss_tensor().data)
            xflat[idx] = orig
            want = (fp - fm) / (2 * h)
            got = xgrad.reshape(-1)[idx]
            assert abs(got - want) / max(abs(want), 1e-7) < 1e-4


class TestCheckpoints:
    def test_roundtrip_bit_exact(self, tmp_path):
        config = NetworkConfig(levels=2, base_filters=4, dropout_p=0.2)
        params = init_parameters(config, RngStream(21))
        base = str(tmp_path / "ckpt")
        save_checkpoint(base, config, params)
        config2, params2 = load_checkpoint(base)
        assert config2 == config
        assert list(params2) == list(params)
        for name in params:
            np.testing.assert_array_equal(params2[name].data, params[name].data)

    def test_rewrite_is_byte_identical(self, tmp_path):
        config = NetworkConfig(levels=2, base_filters=4)
        params = init_parameters(config, RngStream(22))
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        save_checkpoint(a, config, params)
        save_checkpoint(b, config, params)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "nope"))

    def test_truncated_blob_raises(self, tmp_path):
        config = NetworkConfig(levels=2, base_filters=4)
        params = init_parameters(config, RngStream(23))
        base = str(tmp_path / "ckpt")
        save_checkpoint(base, config, params)
        blob = (tmp_path / "ckpt.bin").read_bytes()
        (tmp_path / "ckpt.bin").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(base)

    def test_loaded_model_forward_matches(self, tmp_path):
        config = NetworkConfig(levels=2, base_filters=4)
        params = init_parameters(config, RngStream(24))
        base = str(tmp_path / "ckpt")
        save_checkpoint(base, config, params)
        config2, params2 = load_checkpoint(base)
        x = np.random.default_rng(25).normal(size=(1, 4, 8, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(
            forward(config, params, x)[1].data,
            forward(config2, params2, x)[1].data)
