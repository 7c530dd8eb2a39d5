"""Pre-norm attention blocks shared by the VAE and the denoiser."""
import math

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from meshmotion.config import InvalidArgument


def modulate(x, shift, scale):
    """adaLN: x * (1 + scale) + shift, conditioning broadcast over tokens"""
    while shift.dim() < x.dim():
        shift = shift.unsqueeze(-2)
        scale = scale.unsqueeze(-2)
    return x * (1 + scale) + shift


class Attention(nn.Module):
    """Multi-head attention, keys and values taken from ``context``"""

    def __init__(self, dim, heads=4, context_dim=None):
        super().__init__()
        if dim % heads:
            raise InvalidArgument(f'dim {dim} is not divisible by heads '
                                  f'{heads}')
        context_dim = context_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_kv = nn.Linear(context_dim, 2 * dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        q = self.to_q(x)
        k, v = self.to_kv(context).chunk(2, dim=-1)
        q, k, v = (rearrange(t, 'b n (h d) -> b h n d', h=self.heads)
                   for t in (q, k, v))
        out = F.scaled_dot_product_attention(q, k, v)
        return self.to_out(rearrange(out, 'b h n d -> b n (h d)'))


class FeedForward(nn.Module):
    def __init__(self, dim, mult=4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(),
                                 nn.Linear(dim * mult, dim))

    def forward(self, x):
        return self.net(x)


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim, heads=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class CrossAttentionBlock(nn.Module):
    """Queries attend to a context only, never to each other"""

    def __init__(self, dim, heads=4, context_dim=None):
        super().__init__()
        context_dim = context_dim or dim
        self.norm_q = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(context_dim)
        self.attn = Attention(dim, heads, context_dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, context):
        x = x + self.attn(self.norm_q(x), self.norm_ctx(context))
        return x + self.ff(self.norm_ff(x))


def get_1d_sincos_pos_embed_from_grid(embed_dim, pos):
    if embed_dim % 2:
        raise InvalidArgument('embed_dim must be even')
    omega = np.arange(embed_dim // 2, dtype=np.float64) / (embed_dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.einsum('m,d->md', pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def get_2d_sincos_pos_embed(embed_dim, grid_h, grid_w):
    """(grid_h * grid_w) x embed_dim row-major patch position table"""
    if embed_dim % 4:
        raise InvalidArgument('embed_dim must be divisible by 4')
    rows, cols = np.meshgrid(np.arange(grid_h, dtype=np.float64),
                             np.arange(grid_w, dtype=np.float64),
                             indexing='ij')
    emb_h = get_1d_sincos_pos_embed_from_grid(embed_dim // 2, rows)
    emb_w = get_1d_sincos_pos_embed_from_grid(embed_dim // 2, cols)
    return np.concatenate([emb_h, emb_w], axis=1).astype(np.float32)


def sinusoidal_embedding(values, dim, max_period=10000):
    """Sinusoidal features of a batch of scalars, B -> B x dim"""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period)
                      * torch.arange(half, dtype=values.dtype,
                                     device=values.device) / half)
    args = values.reshape(-1, 1) * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class NoiseEmbedder(nn.Module):
    """c_noise -> sinusoidal features -> two-layer MLP"""

    def __init__(self, dim, frequency_dim=256):
        super().__init__()
        self.frequency_dim = frequency_dim
        self.mlp = nn.Sequential(nn.Linear(frequency_dim, dim), nn.SiLU(),
                                 nn.Linear(dim, dim))

    def forward(self, c_noise):
        return self.mlp(sinusoidal_embedding(c_noise, self.frequency_dim))
