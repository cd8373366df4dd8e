import math

import numpy as np
import pytest

import oracles
from armsearch.arm import (VARIANTS, ArmBlock, ArmConfig, ArmLayout, ArmParams, UsageError,
                           ablation_variant, arm_forward, broadcast_spatial, channel_attention,
                           channel_mix, channel_mixer, spatial_attention, spatial_mixer,
                           spatio_channel_attention, token_mix)
from armsearch.tensor import DimensionError, Tensor, precision

SIG_HALF = 1.0 / (1.0 + math.exp(-0.5))


@pytest.fixture(autouse=True)
def float64():
    with precision(np.float64):
        yield


def make(config=None, seed=0, layout=ArmLayout(), random_expand=True):
    config = config or ArmConfig(channels_in=64, roi_size=6)
    rng = np.random.default_rng(seed)
    params = ArmParams(config, rng, layout)
    if random_expand and layout.enabled:
        params.expand.weight.data[:] = rng.normal(size=params.expand.weight.shape) * 0.1
    return config, params, rng


class TestSpatialAttention:
    def test_zero_conv_gives_half(self):
        _, p, rng = make()
        p.spatial_attn.weight.data[:] = 0
        p.spatial_attn.bias.data[:] = 0
        m = spatial_attention(Tensor(rng.normal(size=(16, 6, 6))), p)
        np.testing.assert_array_equal(m.data, np.full((1, 6, 6), 0.5))

    def test_zero_input_gives_sigmoid_bias(self):
        _, p, _ = make()
        p.spatial_attn.bias.data[:] = 0.7
        m = spatial_attention(Tensor(np.zeros((16, 6, 6))), p)
        np.testing.assert_allclose(m.data, oracles.sigmoid(0.7), atol=1e-15)

    def test_shape(self):
        _, p, rng = make(ArmConfig(channels_in=256, roi_size=14))
        assert spatial_attention(Tensor(rng.normal(size=(64, 14, 14))), p).shape == (1, 14, 14)


class TestBroadcastSpatial:
    def test_ones(self):
        np.testing.assert_array_equal(broadcast_spatial(Tensor(np.ones((1, 2, 2))), 3).data, np.ones((3, 2, 2)))

    def test_copy_semantics(self):
        m = np.random.default_rng(0).uniform(size=(1, 14, 14))
        out = broadcast_spatial(Tensor(m), 64).data
        assert out.shape == (64, 14, 14)
        np.testing.assert_array_equal(out[0], out[63])
        np.testing.assert_array_equal(out[0], m[0])


def _silence_mlp(mlp):
    mlp.fc2.weight.data[:] = 0
    mlp.fc2.bias.data[:] = 0


class TestSpatialMixer:
    def test_saturated_gate_and_zero_mlp_is_identity(self):
        _, p, rng = make()
        p.spatial_attn.weight.data[:] = 0
        p.spatial_attn.bias.data[:] = 20
        _silence_mlp(p.mlp1)
        f = rng.normal(size=(16, 6, 6))
        np.testing.assert_allclose(spatial_mixer(Tensor(f), p).data, f, atol=1e-8)

    def test_channel_permutation_equivariance(self):
        _, p, rng = make()
        f = rng.normal(size=(16, 6, 6))
        perm = rng.permutation(16)
        a = spatial_mixer(Tensor(f[perm]), p).data
        b = spatial_mixer(Tensor(f), p).data[perm]
        assert np.abs(a - b).max() <= 1e-6

    def test_token_mix_channel_permutation(self):
        # F'' injected directly into the token-mixing step
        _, p, rng = make()
        f = rng.normal(size=(16, 6, 6))
        perm = rng.permutation(16)
        np.testing.assert_array_equal(token_mix(Tensor(f[perm]), p).data, token_mix(Tensor(f), p).data[perm])

    def test_naive_oracle(self):
        cfg, p, rng = make(seed=3)
        f = rng.normal(size=(16, 6, 6))
        got = spatial_mixer(Tensor(f), p).data
        np.testing.assert_allclose(got, naive_spatial_mixer(f, p, cfg), atol=1e-6)


class TestChannelAttention:
    def test_zero_fc_gives_half(self):
        _, p, rng = make()
        p.channel_attn.weight.data[:] = 0
        p.channel_attn.bias.data[:] = 0
        m = channel_attention(Tensor(rng.normal(size=(16, 6, 6))), p)
        np.testing.assert_array_equal(m.data, np.full((16, 1), 0.5))

    def test_identity_fc_on_constant_channels(self):
        _, p, _ = make()
        p.channel_attn.weight.data[:] = np.eye(16)
        p.channel_attn.bias.data[:] = 0
        consts = np.linspace(-2, 2, 16)
        m = channel_attention(Tensor(np.broadcast_to(consts[:, None, None], (16, 6, 6)).copy()), p)
        np.testing.assert_allclose(m.data[:, 0], [oracles.sigmoid(v) for v in consts], atol=1e-15)

    def test_shape(self):
        _, p, rng = make(ArmConfig(channels_in=256, roi_size=14))
        assert channel_attention(Tensor(rng.normal(size=(64, 14, 14))), p).shape == (64, 1)


class TestChannelMixer:
    def test_token_permutation_equivariance(self):
        _, p, rng = make()
        q = rng.normal(size=(16, 36))
        perm = rng.permutation(36)
        a = channel_mixer(Tensor(q[:, perm].reshape(16, 6, 6)), p).data.reshape(16, 36)
        b = channel_mixer(Tensor(q.reshape(16, 6, 6)), p).data.reshape(16, 36)[:, perm]
        assert np.abs(a - b).max() <= 1e-6

    def test_channel_mix_token_permutation(self):
        _, p, rng = make()
        q = rng.normal(size=(16, 36))
        perm = rng.permutation(36)
        a = channel_mix(Tensor(q[:, perm].reshape(16, 6, 6)), p).data.reshape(16, 36)
        b = channel_mix(Tensor(q.reshape(16, 6, 6)), p).data.reshape(16, 36)[:, perm]
        np.testing.assert_array_equal(a, b)

    def test_saturated_gate_and_zero_mlp_is_identity(self):
        _, p, rng = make()
        p.channel_attn.weight.data[:] = 0
        p.channel_attn.bias.data[:] = 20
        _silence_mlp(p.mlp2)
        q = rng.normal(size=(16, 6, 6))
        np.testing.assert_allclose(channel_mixer(Tensor(q), p).data, q, atol=1e-8)

    def test_naive_oracle(self):
        cfg, p, rng = make(seed=4)
        q = rng.normal(size=(16, 6, 6))
        np.testing.assert_allclose(channel_mixer(Tensor(q), p).data, naive_channel_mixer(q, p), atol=1e-6)

    def test_dropout_only_in_training(self):
        _, p, rng = make()
        q = Tensor(rng.normal(size=(16, 6, 6)))
        a = channel_mixer(q, p, training=False, dropout_rate=0.5).data
        b = channel_mixer(q, p, training=True, rng=np.random.default_rng(1), dropout_rate=0.5).data
        assert not np.allclose(a, b)


class TestSpatioChannelAttention:
    def test_constant_channel_closed_form(self):
        x = np.full((3, 4, 4), 2.5)
        x[1] = -1.0
        out = spatio_channel_attention(Tensor(x)).data
        assert np.abs(out / x - SIG_HALF).max() <= 1e-9
        assert abs(SIG_HALF - 0.62246) < 1e-5

    def test_two_by_two_example(self):
        lam = 1e-4
        v = [1.0, 0.0, 0.0, 0.0]
        mu = sum(v) / 4
        var = sum((t - mu) ** 2 for t in v) / 4
        assert (mu, var) == (0.25, 0.1875)
        gates = [oracles.sigmoid((t - mu) ** 2 / (4 * (var + lam)) + 0.5) for t in v]
        out = spatio_channel_attention(Tensor(np.array(v).reshape(1, 2, 2)), lam).data.reshape(4)
        np.testing.assert_allclose(out, [t * g for t, g in zip(v, gates)], atol=1e-9)
        assert abs(gates[0] - 0.777) < 1e-3

    def test_shape(self):
        x = np.random.default_rng(0).normal(size=(64, 14, 14))
        assert spatio_channel_attention(Tensor(x)).shape == (64, 14, 14)

    def test_single_position_rejected(self):
        with pytest.raises(ValueError):
            spatio_channel_attention(Tensor(np.ones((3, 1, 1))))

    def test_gate_in_open_interval(self):
        x = np.random.default_rng(1).normal(size=(8, 5, 5)) * 3
        gate = spatio_channel_attention(Tensor(x)).data / x
        assert gate.min() > 0.5 and gate.max() < 1.0


class TestArmForward:
    @pytest.mark.parametrize("variant", [v for v in VARIANTS if v != "baseline"])
    def test_zero_expand_is_exact_identity(self, variant):
        cfg, p, rng = make(layout=VARIANTS[variant], random_expand=False)
        f = rng.normal(size=(64, 6, 6))
        np.testing.assert_array_equal(arm_forward(Tensor(f), p, cfg, layout=VARIANTS[variant]).data, f)

    def test_shape_contract(self):
        cfg, p, rng = make(ArmConfig())
        f = Tensor(rng.normal(size=(256, 14, 14)).astype(np.float32), dtype=np.float32)
        assert arm_forward(f, p, cfg).shape == (256, 14, 14)

    def test_batched_matches_single(self):
        cfg, p, rng = make()
        f = rng.normal(size=(3, 64, 6, 6))
        batched = arm_forward(Tensor(f), p, cfg).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], arm_forward(Tensor(f[i]), p, cfg).data, atol=1e-12)

    def test_shape_mismatch(self):
        cfg, p, _ = make()
        with pytest.raises(DimensionError):
            arm_forward(Tensor(np.zeros((64, 7, 7))), p, cfg)

    def test_full_naive_oracle(self):
        cfg, p, rng = make(seed=5)
        f = rng.normal(size=(64, 6, 6))
        reduce = lambda x: oracles.conv2d(x[None], p.reduce.weight.data, p.reduce.bias.data)[0]  # noqa: E731
        fp = reduce(f)
        k = naive_channel_mixer(naive_spatial_mixer(fp, p, cfg), p)
        s = spatio_channel_attention(Tensor(fp), cfg.simam_lambda).data
        expected = f + oracles.conv2d((k + s)[None], p.expand.weight.data, p.expand.bias.data)[0]
        np.testing.assert_allclose(arm_forward(Tensor(f), p, cfg).data, expected, atol=1e-6)


class TestVariants:
    def test_baseline_is_identity(self):
        block = ArmBlock(ArmConfig(channels_in=64, roi_size=6), np.random.default_rng(0), "baseline")
        f = Tensor(np.random.default_rng(1).normal(size=(64, 6, 6)))
        assert block(f) is f
        assert block.parameters() == []

    def test_unknown_variant(self):
        with pytest.raises(UsageError):
            ablation_variant("transformer")

    def test_full_minus_relation_mixer_is_routed_gate(self):
        # huge lambda pins the energy gate at sigmoid(0.5)
        cfg = ArmConfig(channels_in=64, roi_size=6, simam_lambda=1e12)
        _, p, rng = make(cfg)
        f = Tensor(rng.normal(size=(64, 6, 6)))
        diff = arm_forward(f, p, cfg).data - arm_forward(f, p, cfg, layout=VARIANTS["relation_mixer"]).data
        fp = p.reduce(f).data
        routed = oracles.conv2d((SIG_HALF * fp)[None], p.expand.weight.data, np.zeros(64))[0]
        np.testing.assert_allclose(diff, routed, atol=1e-9)

    def test_mixer_only_is_plain_mixer(self):
        cfg, p, rng = make()
        f = Tensor(rng.normal(size=(64, 6, 6)))
        got = arm_forward(f, p, cfg, layout=VARIANTS["mixer_only"]).data
        k = channel_mix(token_mix(p.reduce(f), p), p)
        np.testing.assert_allclose(got, (f + p.expand(k)).data, atol=1e-12)

    def test_layout_owns_only_used_parameters(self):
        rng = np.random.default_rng(0)
        cfg = ArmConfig(channels_in=64, roi_size=6)
        names = lambda v: {n for n, _ in ArmParams(cfg, rng, VARIANTS[v]).named_parameters()}  # noqa: E731
        assert not any(n.startswith("mlp") for n in names("sca_only"))
        assert not any(n.startswith("spatial_attn") for n in names("mix_ca"))
        assert not any(n.startswith("channel_attn") for n in names("sa_mix"))

    def test_attention_maps_in_open_interval(self):
        _, p, rng = make()
        for scale in (0.1, 1.0, 5.0):
            q = Tensor(rng.normal(size=(16, 6, 6)) * scale)
            for m in (spatial_attention(q, p).data, channel_attention(q, p).data,
                      spatio_channel_attention(q).data / q.data):
                assert m.min() > 0 and m.max() < 1


# -- naive loop re-implementations -----------------------------------------

def _mlp_args(mlp):
    return (mlp.norm.weight.data, mlp.norm.bias.data, mlp.fc1.weight.data, mlp.fc1.bias.data,
            mlp.fc2.weight.data, mlp.fc2.bias.data)


def naive_spatial_mixer(fp, p, cfg):
    c, h, w = fp.shape
    pooled = np.zeros((1, 2, h, w))
    for i in range(h):
        for j in range(w):
            col = [fp[ch, i, j] for ch in range(c)]
            pooled[0, 0, i, j] = sum(col) / c
            pooled[0, 1, i, j] = max(col)
    logits = oracles.conv2d(pooled, p.spatial_attn.weight.data, p.spatial_attn.bias.data,
                            padding=cfg.spatial_attn_kernel // 2)[0, 0]
    gate = [[oracles.sigmoid(logits[i, j]) for j in range(w)] for i in range(h)]
    out = np.zeros_like(fp)
    for ch in range(c):
        tokens = [fp[ch, i, j] * gate[i][j] for i in range(h) for j in range(w)]
        mixed = oracles.mlp_vec(tokens, *_mlp_args(p.mlp1))
        out[ch] = np.array([t + m for t, m in zip(tokens, mixed)]).reshape(h, w)
    return out


def naive_channel_mixer(q, p):
    c, h, w = q.shape
    means = [sum(q[ch].reshape(-1)) / (h * w) for ch in range(c)]
    wt, b = p.channel_attn.weight.data, p.channel_attn.bias.data
    gate = [oracles.sigmoid(sum(means[i] * wt[i][j] for i in range(c)) + b[j]) for j in range(c)]
    out = np.zeros_like(q)
    for i in range(h):
        for j in range(w):
            vec = [q[ch, i, j] * gate[ch] for ch in range(c)]
            mixed = oracles.mlp_vec(vec, *_mlp_args(p.mlp2))
            out[:, i, j] = [v + m for v, m in zip(vec, mixed)]
    return out
