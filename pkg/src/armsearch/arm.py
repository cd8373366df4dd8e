"""Attention-aware relation mixer.

Given an RoI feature ``f`` of shape [C, H, W] (or a batch [N, C, H, W]) the
block computes::

    f'  = reduce_1x1(f)                                  # C -> c = C/4
    f'' = f' * broadcast(sigmoid(conv_kxk([mean_c f', max_c f'])))
    q   = f'' + MLP1(LN_tokens(f''))                     # token mixing
    qa  = q * sigmoid(fc(mean_hw q))
    k   = qa + dropout(MLP2(LN_channels(qa)))            # channel mixing
    s   = f' * sigmoid((f' - mu)^2 / (4 (var + lambda)) + 0.5)
    h   = f + expand_1x1(k + s)

``ArmLayout`` switches sub-blocks on and off to build the ablation variants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Conv2d, LayerNorm, Linear, Module
from .tensor import DimensionError, Tensor, broadcast_to, concat


@dataclass
class ArmConfig:
    channels_in: int = 256
    reduction: int = 4
    roi_size: int = 14
    token_mlp_hidden: int | None = None
    channel_mlp_hidden: int | None = None
    spatial_attn_kernel: int = 7
    simam_lambda: float = 1e-4
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.channels_in <= 0 or self.channels_in % self.reduction:
            raise ValueError(f"channels_in={self.channels_in} must be a positive multiple of {self.reduction}")
        if self.roi_size < 2:
            raise ValueError("roi_size must be at least 2")
        if self.spatial_attn_kernel % 2 != 1:
            raise ValueError("spatial_attn_kernel must be odd")
        if self.simam_lambda <= 0:
            raise ValueError("simam_lambda must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.token_mlp_hidden is None:
            self.token_mlp_hidden = 2 * self.tokens
        if self.channel_mlp_hidden is None:
            self.channel_mlp_hidden = 2 * self.reduced

    @property
    def reduced(self) -> int:
        return self.channels_in // self.reduction

    @property
    def tokens(self) -> int:
        return self.roi_size * self.roi_size


@dataclass(frozen=True)
class ArmLayout:
    """Which sub-blocks are live. ``enabled=False`` bypasses the module."""
    enabled: bool = True
    mixer: bool = True
    spatial_gate: bool = True
    channel_gate: bool = True
    spatio_channel: bool = True


VARIANTS: dict[str, ArmLayout] = {
    "baseline": ArmLayout(enabled=False, mixer=False, spatial_gate=False,
                          channel_gate=False, spatio_channel=False),
    "mixer_only": ArmLayout(spatial_gate=False, channel_gate=False, spatio_channel=False),
    "sca_only": ArmLayout(mixer=False, spatial_gate=False, channel_gate=False),
    "mix_ca": ArmLayout(spatial_gate=False, spatio_channel=False),
    "sa_mix": ArmLayout(channel_gate=False, spatio_channel=False),
    "relation_mixer": ArmLayout(spatio_channel=False),
    "full_arm": ArmLayout(),
}


class UsageError(ValueError):
    """Bad command-line or API usage (unknown names, empty selections)."""


def ablation_variant(variant: str) -> ArmLayout:
    try:
        return VARIANTS[variant]
    except KeyError:
        raise UsageError(f"unknown ARM variant {variant!r}; choose from {', '.join(VARIANTS)}") from None


class TokenMlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(self.norm(x))))


class ArmParams(Module):
    """Learnable weights of one ARM instance. Only sub-blocks enabled by the
    layout own parameters."""

    def __init__(self, config: ArmConfig, rng: np.random.Generator, layout: ArmLayout = ArmLayout()):
        c = config.reduced
        if not layout.enabled:
            return
        self.reduce = Conv2d(config.channels_in, c, 1, rng)
        self.expand = Conv2d(c, config.channels_in, 1, rng, zero=True)
        if layout.spatial_gate:
            self.spatial_attn = Conv2d(2, 1, config.spatial_attn_kernel, rng)
        if layout.channel_gate:
            self.channel_attn = Linear(c, c, rng)
        if layout.mixer:
            self.mlp1 = TokenMlp(config.tokens, config.token_mlp_hidden, rng)
            self.mlp2 = TokenMlp(c, config.channel_mlp_hidden, rng)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected [c,H,W] or [N,c,H,W], got {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return x.reshape(x.shape[1:]) if squeeze else x


def spatial_attention(f_prime: Tensor, params: ArmParams) -> Tensor:
    """[c,H,W] -> [1,H,W] gate from channel-wise mean and max pooling."""
    x, squeeze = _batched(f_prime)
    pooled = concat([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
    return _unbatch(F.sigmoid(params.spatial_attn(pooled)), squeeze)


def broadcast_spatial(m_s: Tensor, c: int) -> Tensor:
    """Copy a [1,H,W] (or [N,1,H,W]) map across ``c`` channels."""
    shape = list(m_s.shape)
    shape[-3] = c
    return broadcast_to(m_s, tuple(shape))


def token_mix(f_dd: Tensor, params: ArmParams) -> Tensor:
    """Residual token-mixing MLP shared by every channel."""
    x, squeeze = _batched(f_dd)
    n, c, h, w = x.shape
    tokens = x.reshape(n, c, h * w)
    q = tokens + params.mlp1(tokens)
    return _unbatch(q.reshape(n, c, h, w), squeeze)


def spatial_mixer(f_prime: Tensor, params: ArmParams, layout: ArmLayout = ArmLayout()) -> Tensor:
    x, squeeze = _batched(f_prime)
    if layout.spatial_gate:
        x = x * broadcast_spatial(spatial_attention(x, params), x.shape[1])
    return _unbatch(token_mix(x, params), squeeze)


def channel_attention(q: Tensor, params: ArmParams) -> Tensor:
    """[c,H,W] -> [c,1] gate from spatial mean pooling and one fc layer."""
    x, squeeze = _batched(q)
    m_c = F.sigmoid(params.channel_attn(x.mean(axis=(2, 3))))
    m_c = m_c.reshape(m_c.shape + (1,))
    return _unbatch(m_c, squeeze)


def channel_mix(q_att: Tensor, params: ArmParams, training: bool = False,
                rng: np.random.Generator | None = None, dropout_rate: float = 0.0) -> Tensor:
    """Residual channel-mixing MLP shared by every spatial position."""
    x, squeeze = _batched(q_att)
    n, c, h, w = x.shape
    per_token = x.reshape(n, c, h * w).transpose(0, 2, 1)
    mixed = F.dropout(params.mlp2(per_token), dropout_rate, rng, training)
    k = (per_token + mixed).transpose(0, 2, 1).reshape(n, c, h, w)
    return _unbatch(k, squeeze)


def channel_mixer(q: Tensor, params: ArmParams, layout: ArmLayout = ArmLayout(),
                  training: bool = False, rng: np.random.Generator | None = None,
                  dropout_rate: float = 0.0) -> Tensor:
    x, squeeze = _batched(q)
    if layout.channel_gate:
        x = x * channel_attention(x, params).reshape(x.shape[:2] + (1, 1))
    return _unbatch(channel_mix(x, params, training, rng, dropout_rate), squeeze)


def spatio_channel_attention(f_prime: Tensor, lam: float = 1e-4) -> Tensor:
    """Parameter-free energy gate. Per channel, with mean ``mu`` and population
    variance ``var`` over the spatial positions, each element ``t`` is scaled
    by ``sigmoid((t - mu)^2 / (4 (var + lam)) + 0.5)``."""
    if f_prime.shape[-1] * f_prime.shape[-2] < 2:
        raise ValueError("spatio_channel_attention needs at least 2 spatial positions")
    mu = f_prime.mean(axis=(-2, -1), keepdims=True)
    d = f_prime - mu
    d2 = d * d
    var = d2.mean(axis=(-2, -1), keepdims=True)
    energy = d2 / ((var + lam) * 4.0) + 0.5
    return f_prime * F.sigmoid(energy)


def arm_forward(f: Tensor, params: ArmParams, config: ArmConfig, training: bool = False,
                layout: ArmLayout = ArmLayout(), rng: np.random.Generator | None = None) -> Tensor:
    x, squeeze = _batched(f)
    expect = (config.channels_in, config.roi_size, config.roi_size)
    if tuple(x.shape[1:]) != expect:
        raise DimensionError(f"ARM input shape {tuple(f.shape)} does not match config {expect}")
    if not layout.enabled:
        return f
    f_prime = params.reduce(x)
    branches = []
    if layout.mixer:
        q = spatial_mixer(f_prime, params, layout)
        branches.append(channel_mixer(q, params, layout, training, rng, config.dropout_rate))
    if layout.spatio_channel:
        branches.append(spatio_channel_attention(f_prime, config.simam_lambda))
    if not branches:
        raise UsageError("layout enables neither the mixer nor the spatio-channel branch")
    o = branches[0] if len(branches) == 1 else branches[0] + branches[1]
    return _unbatch(x + params.expand(o), squeeze)


class ArmBlock(Module):
    """One ARM instance: config, layout and parameters bundled for use inside
    a larger model."""

    def __init__(self, config: ArmConfig, rng: np.random.Generator, variant: str = "full_arm"):
        self.config = config
        self.variant = variant
        self.layout = ablation_variant(variant)
        self.params = ArmParams(config, rng, self.layout)

    def named_parameters(self, prefix: str = ""):
        # parameters sit directly under the block prefix, e.g. det.arm.reduce.weight
        return self.params.named_parameters(prefix)

    def named_buffers(self, prefix: str = ""):
        return iter(())

    def __call__(self, f: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return arm_forward(f, self.params, self.config, self.training, self.layout, rng)

