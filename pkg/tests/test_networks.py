"""Shape contracts, determinism and finiteness of the network stack."""

import pytest
import torch

from daefuse.errors import ShapeError
from daefuse.fusion import AttentionConfig
from daefuse.networks import (
    DaeFuseModel,
    NetworkConfig,
    init_parameters,
)


def small_config(seed=0, channels=16):
    return NetworkConfig(
        base_channels=channels,
        se_blocks=1,
        dhe_blocks=1,
        dle_blocks=1,
        dle_heads=2,
        dle_token_patch=8,
        disc_layers=2,
        weight_init_seed=seed,
    )


def small_model(seed=0, channels=16):
    return DaeFuseModel(
        small_config(seed, channels), AttentionConfig(d_k=8, heads=1, token_patch=8)
    )


class TestConfigValidation:
    def test_odd_base_channels_rejected(self):
        with pytest.raises(ValueError):
            NetworkConfig(base_channels=15)

    def test_zero_blocks_rejected(self):
        with pytest.raises(ValueError):
            NetworkConfig(se_blocks=0)

    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            NetworkConfig(base_channels=6, dle_heads=5)


class TestShallowEncoder:
    def test_output_shape(self):
        model = small_model()
        out = model.shallow_encode(torch.rand(1, 1, 16, 16))
        assert out.shape == (1, 16, 16, 16)

    def test_deterministic(self):
        model = small_model()
        x = torch.rand(1, 1, 16, 16)
        assert torch.equal(model.shallow_encode(x), model.shallow_encode(x))

    def test_zero_input_finite(self):
        model = small_model()
        out = model.shallow_encode(torch.zeros(1, 1, 16, 16))
        assert torch.isfinite(out).all()


class TestEncode:
    def test_combined_is_high_then_low(self):
        model = small_model()
        emb = model.encode(torch.rand(2, 1, 16, 16))
        c_h = emb.high.shape[1]
        assert torch.equal(emb.combined[:, :c_h], emb.high)
        assert torch.equal(emb.combined[:, c_h:], emb.low)

    def test_shapes(self):
        model = small_model()
        emb = model.encode(torch.rand(1, 1, 16, 16))
        assert emb.high.shape == (1, 8, 16, 16)
        assert emb.low.shape == (1, 8, 16, 16)
        assert emb.combined.shape == (1, 16, 16, 16)

    def test_deterministic(self):
        model = small_model()
        x = torch.rand(1, 1, 16, 16)
        e1, e2 = model.encode(x), model.encode(x)
        assert torch.equal(e1.combined, e2.combined)


class TestDecode:
    def test_output_in_unit_range(self):
        model = small_model()
        emb = torch.randn(1, 16, 16, 16)
        out = model.decode(emb)
        assert out.shape == (1, 1, 16, 16)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_channel_mismatch(self):
        model = small_model()
        with pytest.raises(ShapeError):
            model.decode(torch.randn(1, 8, 16, 16))

    def test_fused_width_accepted(self):
        model = small_model()
        out = model.decode(torch.randn(1, 32, 16, 16))
        assert out.shape == (1, 1, 16, 16)


class TestDiscriminator:
    def test_score_strictly_inside_unit_interval(self):
        model = small_model()
        model.eval()
        for x in (torch.zeros(1, 1, 32, 32), torch.ones(1, 1, 32, 32),
                  torch.rand(3, 1, 32, 32)):
            for which in ("dm1", "dm2"):
                s = model.discriminate(x, which)
                assert torch.all(s > 0.0) and torch.all(s < 1.0)
                assert torch.isfinite(s).all()

    def test_deterministic_in_eval(self):
        model = small_model()
        model.eval()
        x = torch.rand(2, 1, 32, 32)
        assert torch.equal(model.discriminate(x, "dm1"), model.discriminate(x, "dm1"))


class TestRoundTripShapes:
    @pytest.mark.parametrize("size", [16, 32, 48])
    def test_encode_decode_preserves_size(self, size):
        model = small_model()
        x = torch.rand(1, 1, size, size)
        out = model.decode(model.encode(x).combined)
        assert out.shape == x.shape


class TestInitDeterminism:
    def test_same_seed_bitwise_equal(self):
        m1, m2 = small_model(seed=5), small_model(seed=5)
        for (k1, p1), (k2, p2) in zip(
            m1.state_dict().items(), m2.state_dict().items()
        ):
            assert k1 == k2 and torch.equal(p1, p2)

    def test_different_seed_differs(self):
        m1, m2 = small_model(seed=5), small_model(seed=6)
        assert any(
            not torch.equal(p1, p2)
            for p1, p2 in zip(m1.state_dict().values(), m2.state_dict().values())
        )

    def test_reinit_is_idempotent_per_seed(self):
        m = small_model(seed=7)
        before = {k: v.clone() for k, v in m.state_dict().items()}
        init_parameters(m, 7)
        for k, v in m.state_dict().items():
            assert torch.equal(before[k], v)
