"""Attention-guided cross-modality fusion over encoder embeddings.

Embeddings are partitioned into non-overlapping square spatial tokens;
one modality's tokens act as queries into the other's key/value tokens,
in both directions with independent projection weights. With a single
head the computation is exactly softmax(Q K^T / sqrt(d_k)) W_v tokens;
multiple heads split the score dimension (and the value channels) and
concatenate head outputs.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError


@dataclass
class AttentionConfig:
    d_k: int = 64
    heads: int = 1
    token_patch: int = 8

    def __post_init__(self):
        if self.d_k < 1 or self.heads < 1 or self.token_patch < 1:
            raise ValueError("d_k, heads and token_patch must all be >= 1")


def patchify(x, patch):
    """(B, C, H, W) -> (B, T, C*patch*patch) tokens, channel-major per token."""
    b, c, h, w = x.shape
    if h % patch != 0 or w % patch != 0:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by token patch {patch}")
    gh, gw = h // patch, w // patch
    t = x.reshape(b, c, gh, patch, gw, patch)
    return t.permute(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch * patch)


def unpatchify(tokens, channels, h, w, patch):
    """Inverse of patchify back to a (B, C, H, W) map."""
    b = tokens.shape[0]
    gh, gw = h // patch, w // patch
    t = tokens.reshape(b, gh, gw, channels, patch, patch)
    return t.permute(0, 3, 1, 4, 2, 5).reshape(b, channels, h, w)


def attention_core(q, k, v):
    """softmax(q k^T / sqrt(d_k)) v with d_k taken from q's last dimension.

    Returns (output, attention weights); every weight row sums to 1.
    """
    d_k = q.shape[-1]
    scores = q @ k.transpose(-2, -1) / d_k**0.5
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class CrossAttention(nn.Module):
    """One attention direction: query embedding attends into key/value embedding.

    The value projection preserves the token width so the attended tokens
    reshape back onto the key/value embedding's spatial layout; queries and
    keys project to heads * d_k score dimensions.
    """

    def __init__(self, channels, config, residual=False):
        super().__init__()
        self.config = config
        self.residual = residual
        token_dim = channels * config.token_patch * config.token_patch
        if token_dim % config.heads != 0:
            raise ShapeError(
                f"token width {token_dim} not divisible by {config.heads} heads"
            )
        self.channels = channels
        self.token_dim = token_dim
        self.w_q = nn.Linear(token_dim, config.heads * config.d_k, bias=False)
        self.w_k = nn.Linear(token_dim, config.heads * config.d_k, bias=False)
        self.w_v = nn.Linear(token_dim, token_dim, bias=False)

    def forward(self, query_emb, kv_emb, return_weights=False):
        if query_emb.shape != kv_emb.shape:
            raise ShapeError(
                f"embedding shapes differ: {tuple(query_emb.shape)} vs {tuple(kv_emb.shape)}"
            )
        if query_emb.shape[1] != self.channels:
            raise ShapeError(
                f"expected {self.channels} embedding channels, got {query_emb.shape[1]}"
            )
        patch = self.config.token_patch
        heads = self.config.heads
        h, w = kv_emb.shape[-2], kv_emb.shape[-1]
        tq = patchify(query_emb, patch)
        tkv = patchify(kv_emb, patch)
        b, t, _ = tq.shape

        def split(z, dim_per_head):
            return z.reshape(b, t, heads, dim_per_head).transpose(1, 2)

        q = split(self.w_q(tq), self.config.d_k)
        k = split(self.w_k(tkv), self.config.d_k)
        v = split(self.w_v(tkv), self.token_dim // heads)
        out, weights = attention_core(q, k, v)
        out = out.transpose(1, 2).reshape(b, t, self.token_dim)
        if self.residual:
            out = out + tkv
        attended = unpatchify(out, self.channels, h, w, patch)
        if return_weights:
            return attended, weights
        return attended


class CrossAttentionFusion(nn.Module):
    """Both attention directions with independent weight sets.

    ``attend_a`` produces the attended embedding of modality A (B queries
    into A's tokens) and ``attend_b`` the mirrored product, so the decoder
    receives cat(attended_a, attended_b).
    """

    def __init__(self, channels, config, residual=False):
        super().__init__()
        self.attend_a = CrossAttention(channels, config, residual=residual)
        self.attend_b = CrossAttention(channels, config, residual=residual)

    def forward(self, combined_a, combined_b):
        attended_a = self.attend_a(combined_b, combined_a)
        attended_b = self.attend_b(combined_a, combined_b)
        return attended_a, attended_b


def fuse_embeddings(emb_a, emb_b, fusion_module, decoder):
    """Fused image from two embeddings: attend both ways, concat, decode."""
    attended_a, attended_b = fusion_module(emb_a.combined, emb_b.combined)
    return decoder(torch.cat([attended_a, attended_b], dim=1))
