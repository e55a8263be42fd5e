"""Encoder stack, reconstruction decoder and per-modality discriminators.

The stack follows a parallel CNN/transformer split at configurable toy scale:
a channel-transformer shallow encoder feeds a residual-conv high-frequency
branch and a token-attention low-frequency branch whose outputs are channel
concatenated (high first, then low). The decoder mirrors the shallow encoder
and squashes to [0, 1]; discriminators are conv/LeakyReLU/BatchNorm stacks
with a fully connected sigmoid head.

All parameters are initialized from an explicit seeded generator so two
models built from the same config are bitwise identical.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalError, ShapeError
from .fusion import patchify, unpatchify


@dataclass
class NetworkConfig:
    """Widths and depths of the toy-scale stack.

    ``base_channels`` is the combined embedding width; the high and low
    frequency branches each carry half of it.
    """

    base_channels: int = 32
    se_blocks: int = 2
    dhe_blocks: int = 2
    dle_blocks: int = 2
    dle_heads: int = 4
    dle_token_patch: int = 8
    disc_layers: int = 3
    weight_init_seed: int = 0

    def __post_init__(self):
        counts = {
            "base_channels": self.base_channels,
            "se_blocks": self.se_blocks,
            "dhe_blocks": self.dhe_blocks,
            "dle_blocks": self.dle_blocks,
            "dle_heads": self.dle_heads,
            "dle_token_patch": self.dle_token_patch,
            "disc_layers": self.disc_layers,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.base_channels % 2 != 0:
            raise ValueError("base_channels must be even (split across branches)")
        if (4 * self.base_channels) % self.dle_heads != 0:
            raise ValueError("token width 4*base_channels must be divisible by dle_heads")

    @property
    def branch_channels(self):
        return self.base_channels // 2

    @property
    def dle_model_dim(self):
        return 4 * self.base_channels


@dataclass
class FeatureEmbedding:
    """Encoder outputs for one batch: shallow map, branch maps and their concat.

    ``combined`` is always cat(high, low) along channels, and the branch
    tensors are the exact ones consumed by the correlation decomposition
    loss (no recomputation).
    """

    shallow: torch.Tensor
    high: torch.Tensor
    low: torch.Tensor
    combined: torch.Tensor

    @property
    def spatial_size(self):
        return self.combined.shape[-2], self.combined.shape[-1]


def image_to_tensor(img):
    """Image -> float32 tensor of shape (1, 1, H, W)."""
    return torch.from_numpy(np.ascontiguousarray(img.pixels)).reshape(
        1, 1, img.height, img.width
    )


def tensor_to_array(t):
    """(..., H, W) tensor -> 2-D float32 array clipped to [0, 1]."""
    arr = t.detach().cpu().numpy()
    arr = arr.reshape(arr.shape[-2], arr.shape[-1])
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def _ensure_finite(t, what):
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite activations in {what}")
    return t


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel dimension of a (B, C, H, W) map."""

    def __init__(self, channels):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        xn = (x - mu) / torch.sqrt(var + 1e-5)
        return xn * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class ChannelAttention(nn.Module):
    """Attention across channels: C x C affinity over flattened spatial vectors."""

    def __init__(self, channels):
        super().__init__()
        self.qkv = nn.Conv2d(channels, channels * 3, kernel_size=1, bias=False)
        self.qkv_dw = nn.Conv2d(
            channels * 3, channels * 3, kernel_size=3, padding=1,
            groups=channels * 3, bias=False,
        )
        self.temperature = nn.Parameter(torch.ones(1))
        self.proj = nn.Conv2d(channels, channels, kernel_size=1, bias=False)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q = F.normalize(q.reshape(b, c, h * w), dim=-1)
        k = F.normalize(k.reshape(b, c, h * w), dim=-1)
        v = v.reshape(b, c, h * w)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.temperature, dim=-1)
        out = (attn @ v).reshape(b, c, h, w)
        return self.proj(out)


class GatedFeedForward(nn.Module):
    def __init__(self, channels, expansion=2):
        super().__init__()
        hidden = channels * expansion
        self.project_in = nn.Conv2d(channels, hidden * 2, kernel_size=1, bias=False)
        self.dwconv = nn.Conv2d(
            hidden * 2, hidden * 2, kernel_size=3, padding=1, groups=hidden * 2, bias=False
        )
        self.project_out = nn.Conv2d(hidden, channels, kernel_size=1, bias=False)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class ChannelTransformerBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm1 = ChannelLayerNorm(channels)
        self.attn = ChannelAttention(channels)
        self.norm2 = ChannelLayerNorm(channels)
        self.ffn = GatedFeedForward(channels)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class ShallowEncoder(nn.Module):
    """Conv stem plus a stack of channel-transformer blocks, spatial-preserving."""

    def __init__(self, config):
        super().__init__()
        c = config.base_channels
        self.stem = nn.Conv2d(1, c, kernel_size=3, padding=1, padding_mode="reflect")
        self.blocks = nn.Sequential(
            *[ChannelTransformerBlock(c) for _ in range(config.se_blocks)]
        )

    def forward(self, x):
        return self.blocks(self.stem(x))


class ResidualConvBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect")

    def forward(self, x):
        out = self.conv2(F.relu(self.conv1(x)))
        return F.relu(x + out)


class DeepHighFreqEncoder(nn.Module):
    """Residual conv branch: sensitive to local, high-frequency structure."""

    def __init__(self, config):
        super().__init__()
        self.entry = nn.Conv2d(config.base_channels, config.branch_channels, kernel_size=1)
        self.blocks = nn.Sequential(
            *[ResidualConvBlock(config.branch_channels) for _ in range(config.dhe_blocks)]
        )

    def forward(self, x):
        return self.blocks(self.entry(x))


class TokenSelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, dim * 3, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, x):
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def split(z):
            return z.reshape(b, t, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim**0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class TokenTransformerBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = TokenSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim)
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DeepLowFreqEncoder(nn.Module):
    """Token self-attention branch over non-overlapping patches.

    Learned positional embeddings live on a fixed base grid and are
    bilinearly resampled to the actual token grid, so the branch accepts any
    spatial size divisible by the token patch.
    """

    BASE_TOKEN_GRID = 16

    def __init__(self, config):
        super().__init__()
        self.patch = config.dle_token_patch
        dim = config.dle_model_dim
        token_in = config.base_channels * self.patch * self.patch
        token_out = config.branch_channels * self.patch * self.patch
        self.embed = nn.Linear(token_in, dim)
        self.pos_embed = nn.Parameter(
            torch.zeros(1, dim, self.BASE_TOKEN_GRID, self.BASE_TOKEN_GRID)
        )
        self.blocks = nn.Sequential(
            *[TokenTransformerBlock(dim, config.dle_heads) for _ in range(config.dle_blocks)]
        )
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, token_out)
        self.out_channels = config.branch_channels

    def _positional(self, gh, gw, dtype):
        pe = self.pos_embed
        if (gh, gw) != (self.BASE_TOKEN_GRID, self.BASE_TOKEN_GRID):
            pe = F.interpolate(pe, size=(gh, gw), mode="bilinear", align_corners=False)
        return pe.reshape(1, pe.shape[1], gh * gw).transpose(1, 2).to(dtype)

    def forward(self, x):
        h, w = x.shape[-2], x.shape[-1]
        tokens = patchify(x, self.patch)
        gh, gw = h // self.patch, w // self.patch
        z = self.embed(tokens) + self._positional(gh, gw, tokens.dtype)
        z = self.head(self.norm(self.blocks(z)))
        return unpatchify(z, self.out_channels, h, w, self.patch)


class ReconstructionDecoder(nn.Module):
    """Mirror of the shallow encoder with a sigmoid-bounded single-channel output.

    Accepts either a single-modality embedding (base width) through
    ``proj_single`` or the concatenation of two attended embeddings (double
    width) through ``proj_fused``.
    """

    def __init__(self, config):
        super().__init__()
        c = config.base_channels
        self.proj_single = nn.Conv2d(c, c, kernel_size=1)
        self.proj_fused = nn.Conv2d(2 * c, c, kernel_size=1)
        self.blocks = nn.Sequential(
            *[ChannelTransformerBlock(c) for _ in range(config.se_blocks)]
        )
        self.out = nn.Conv2d(c, 1, kernel_size=3, padding=1, padding_mode="reflect")
        self.width = c

    def forward(self, emb):
        if emb.shape[1] == self.width:
            x = self.proj_single(emb)
        elif emb.shape[1] == 2 * self.width:
            x = self.proj_fused(emb)
        else:
            raise ShapeError(
                f"decoder expects {self.width} or {2 * self.width} channels, "
                f"got {emb.shape[1]}"
            )
        return torch.sigmoid(self.out(self.blocks(x)))


class Discriminator(nn.Module):
    """Conv2d-LeakyReLU-BatchNorm stack, global pooling and a sigmoid head.

    The last block carries no BatchNorm: normalizing immediately before the
    global average would cancel the pooled statistics and make the score
    input-independent.
    """

    def __init__(self, config):
        super().__init__()
        layers = []
        in_c = 1
        out_c = config.base_channels
        for i in range(config.disc_layers):
            layers += [
                nn.Conv2d(in_c, out_c, kernel_size=3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
            ]
            if i < config.disc_layers - 1:
                layers.append(nn.BatchNorm2d(out_c))
            in_c, out_c = out_c, out_c * 2
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(in_c, 1)

    def forward(self, x):
        feat = self.features(x)
        pooled = feat.mean(dim=(-2, -1))
        score = torch.sigmoid(self.fc(pooled)).reshape(-1)
        # Keep the contract strict even when float32 rounds the sigmoid.
        return torch.clamp(score, 1e-7, 1.0 - 1e-7)


def init_parameters(module, seed):
    """Seeded deterministic init: He-uniform matrices, zeros/ones for biases/norms.

    Attention value projections start at identity so a fresh cross-attention
    pass is pure token mixing rather than a random re-projection of the
    pretrained embeddings.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("pos_embed"):
                p.normal_(0.0, 0.02, generator=gen)
            elif name.endswith("temperature"):
                p.fill_(1.0)
            elif name.endswith("w_v.weight"):
                p.copy_(torch.eye(p.shape[0], p.shape[1]))
            elif p.ndim >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                bound = (6.0 / max(fan_in, 1)) ** 0.5
                p.uniform_(-bound, bound, generator=gen)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.fill_(1.0)
    return module


class DaeFuseModel(nn.Module):
    """Full toy-scale model: shared encoders, decoder, discriminators, attention.

    ``phase_tag`` records which training phase produced the current weights
    (0 = freshly initialized, then 1 or 2).
    """

    def __init__(self, config, attention_config=None, attention_residual=False):
        super().__init__()
        from .fusion import AttentionConfig, CrossAttentionFusion

        self.config = config
        self.attention_config = attention_config or AttentionConfig()
        self.se = ShallowEncoder(config)
        self.dhe = DeepHighFreqEncoder(config)
        self.dle = DeepLowFreqEncoder(config)
        self.rd = ReconstructionDecoder(config)
        self.dm1 = Discriminator(config)
        self.dm2 = Discriminator(config)
        self.cross_attention = CrossAttentionFusion(
            channels=config.base_channels,
            config=self.attention_config,
            residual=attention_residual,
        )
        self.phase_tag = 0
        init_parameters(self, config.weight_init_seed)

    def shallow_encode(self, x):
        return _ensure_finite(self.se(x), "shallow encoder")

    def encode(self, x, shallow=None):
        """Encode (B, 1, H, W) images into a FeatureEmbedding.

        ``shallow`` lets callers substitute a temporally smoothed shallow map
        while keeping the branch computation identical.
        """
        s = self.shallow_encode(x) if shallow is None else shallow
        high = self.dhe(s)
        low = self.dle(s)
        combined = torch.cat([high, low], dim=1)
        _ensure_finite(combined, "deep encoders")
        return FeatureEmbedding(shallow=s, high=high, low=low, combined=combined)

    def decode(self, emb):
        return _ensure_finite(self.rd(emb), "decoder")

    def reconstruct(self, x):
        return self.decode(self.encode(x).combined)

    def discriminate(self, x, which):
        if which not in ("dm1", "dm2"):
            raise ValueError(f"unknown discriminator '{which}'")
        disc = self.dm1 if which == "dm1" else self.dm2
        return _ensure_finite(disc(x), f"discriminator {which}")

    def fuse_embeddings(self, emb_a, emb_b):
        """Cross-attend both directions, concatenate, decode to a fused image."""
        attended_a, attended_b = self.cross_attention(emb_a.combined, emb_b.combined)
        return self.decode(torch.cat([attended_a, attended_b], dim=1))

    def fuse_concat_only(self, emb_a, emb_b):
        """Ablation path: plain channel concatenation, no attention reads."""
        return self.decode(torch.cat([emb_a.combined, emb_b.combined], dim=1))

    def ae_parameters(self):
        """Encoder/decoder parameters (phase-1 trainables)."""
        for m in (self.se, self.dhe, self.dle, self.rd):
            yield from m.parameters()

    def disc_parameters(self):
        for m in (self.dm1, self.dm2):
            yield from m.parameters()

    def attention_parameters(self):
        return self.cross_attention.parameters()
