"""
Transformer VAE over latent sets: geometry and multi-view appearance go in,
per-point deformations come out of a query decoder.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from einops import rearrange
from torch import nn

from meshmotion import logger
from meshmotion.config import VaeConfig, InvalidArgument, NumericError
from meshmotion.geomcore import PointEmbed, farthest_point_sample
from meshmotion.layers import SelfAttentionBlock, CrossAttentionBlock, \
    get_2d_sincos_pos_embed

LOGVAR_RANGE = (-30.0, 20.0)
PIXEL_CHANNELS = 9
QUERY_CHUNK = 4096


@dataclass
class CompressedLatent:
    z: torch.Tensor
    mu: torch.Tensor
    logvar: torch.Tensor

    @property
    def sigma(self):
        return torch.exp(0.5 * self.logvar)


@dataclass
class ImageTokens:
    """Pixel-shuffled tokens (width C/2) and fused tokens (width C)"""
    upsampled: torch.Tensor
    fused: torch.Tensor
    grid: tuple


@dataclass
class VaeBatch:
    """
    p1 and pt are corresponded B x N x 3 samples at rest and at frame t,
    images B x v x H x W x 3 and rays B x v x H x W x 6 belong to frame t.
    """
    p1: torch.Tensor
    pt: torch.Tensor
    images: torch.Tensor
    rays: torch.Tensor

    def to(self, device):
        return VaeBatch(*(x.to(device) for x in (self.p1, self.pt,
                                                self.images, self.rays)))


@dataclass
class StepLosses:
    deformation: float
    regularization: float
    total: float


def _batched(x: torch.Tensor, ndim: int) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == ndim - 1 else x


def _check_finite(name, tensor, step=None):
    if not torch.isfinite(tensor).all():
        where = f' at step {step}' if step is not None else ''
        raise NumericError(f'Non-finite values in {name}{where}')


class GeometryEncoder(nn.Module):
    """Cross-attention from embedded anchors to the embedded full cloud"""

    def __init__(self, width, heads, n_octaves=8):
        super().__init__()
        self.embed = PointEmbed(width, n_octaves)
        self.cross = CrossAttentionBlock(width, heads)

    def forward(self, points, anchors):
        return self.cross(self.embed(anchors), self.embed(points))


class MultiViewEncoder(nn.Module):
    """
    Per-view ViT over 9-channel pixels (rgb, ray direction, ray moment),
    pixel shuffle to twice the patch grid, then self-attention over the
    tokens of all views. Views share weights and carry no index embedding.
    """

    def __init__(self, width, heads, patch_size=8, depth=4):
        super().__init__()
        if width % 2:
            raise InvalidArgument('width must be even for pixel shuffle')
        self.width = width
        self.patch_size = patch_size
        self.patch_embed = nn.Conv2d(PIXEL_CHANNELS, width,
                                     kernel_size=patch_size,
                                     stride=patch_size)
        self.blocks = nn.ModuleList([SelfAttentionBlock(width, heads)
                                     for _ in range(depth)])
        self.norm = nn.LayerNorm(width)
        self.expand = nn.Linear(width, 2 * width)
        self.shuffle = nn.PixelShuffle(2)
        self.lift = nn.Linear(width // 2, width)
        self.fusion = SelfAttentionBlock(width, heads)

    def forward(self, pixels) -> ImageTokens:
        n_batch, n_views, height, width, channels = pixels.shape
        if channels != PIXEL_CHANNELS:
            raise InvalidArgument(f'Expected {PIXEL_CHANNELS} channels per '
                                  f'pixel, Got {channels}')
        if height % self.patch_size or width % self.patch_size:
            raise InvalidArgument(f'Image size {height}x{width} is not a '
                                  f'multiple of patch {self.patch_size}')
        x = rearrange(pixels, 'b v h w c -> (b v) c h w')
        x = self.patch_embed(x)
        grid_h, grid_w = x.shape[-2:]
        x = rearrange(x, 'n c h w -> n (h w) c')
        pos = get_2d_sincos_pos_embed(self.width, grid_h, grid_w)
        x = x + torch.from_numpy(pos).to(x)
        for block in self.blocks:
            x = block(x)
        x = self.expand(self.norm(x))
        x = rearrange(x, 'n (h w) c -> n c h w', h=grid_h, w=grid_w)
        x = self.shuffle(x)
        upsampled = rearrange(x, '(b v) c h w -> b (v h w) c', b=n_batch,
                              v=n_views)
        fused = self.fusion(self.lift(upsampled))
        return ImageTokens(upsampled=upsampled, fused=fused,
                           grid=(grid_h, grid_w))


class KLBlock(nn.Module):
    """Linear maps to mean and log-variance plus reparameterized sampling"""

    def __init__(self, width, latent_channels):
        super().__init__()
        self.mu = nn.Linear(width, latent_channels)
        self.logvar = nn.Linear(width, latent_channels)

    def forward(self, latents, generator: torch.Generator = None,
                deterministic: bool = False) -> CompressedLatent:
        mu = self.mu(latents)
        logvar = self.logvar(latents).clamp(*LOGVAR_RANGE)
        _check_finite('latent mean', mu)
        _check_finite('latent log-variance', logvar)
        if deterministic:
            return CompressedLatent(z=mu, mu=mu, logvar=logvar)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype,
                          device=mu.device)
        return CompressedLatent(z=mu + torch.exp(0.5 * logvar) * eps,
                                mu=mu, logvar=logvar)


class MotionDecoder(nn.Module):
    """
    Lifts z to width C, refines it with self-attention, then lets every
    query point attend to the latent tokens and predicts its offset.
    """

    def __init__(self, width, latent_channels, heads, depth, n_octaves=8):
        super().__init__()
        self.lift = nn.Linear(latent_channels, width)
        self.blocks = nn.ModuleList([SelfAttentionBlock(width, heads)
                                     for _ in range(depth)])
        self.embed = PointEmbed(width, n_octaves)
        self.cross = CrossAttentionBlock(width, heads)
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, 3)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def latents(self, z):
        x = self.lift(z)
        for block in self.blocks:
            x = block(x)
        return x

    def query(self, latents, queries):
        x = self.cross(self.embed(queries), latents)
        return queries + self.head(self.norm(x))

    def forward(self, z, queries):
        return self.query(self.latents(z), queries)


class MotionVAE(nn.Module):
    def __init__(self, config: VaeConfig = None):
        super().__init__()
        config = (config or VaeConfig()).validate()
        self.config = config
        width, heads = config.width, config.heads
        self.geometry = GeometryEncoder(width, heads, config.n_octaves)
        self.multiview = MultiViewEncoder(width, heads, config.patch_size,
                                          config.vit_depth)
        self.fuse = CrossAttentionBlock(width, heads)
        self.blocks = nn.ModuleList([SelfAttentionBlock(width, heads)
                                     for _ in range(config.depth)])
        self.kl = KLBlock(width, config.latent_channels)
        self.decoder = MotionDecoder(width, config.latent_channels, heads,
                                     config.depth, config.n_octaves)

    def anchors(self, points: torch.Tensor) -> torch.Tensor:
        """Farthest point subsample of M points per batch element"""
        n_latents = self.config.n_latents
        if points.shape[1] < n_latents:
            raise InvalidArgument(f'Need at least {n_latents} points, '
                                  f'Got {points.shape[1]}')
        cloud = points.detach().cpu().double().numpy()
        index = np.stack([farthest_point_sample(c, n_latents)
                          for c in cloud])
        index = torch.from_numpy(index).to(points.device)
        return torch.gather(points, 1, index[..., None].expand(-1, -1, 3))

    def encode_geometry(self, points, anchors=None):
        """
        Latent set of the rest geometry.

        Parameters
        ----------
        points : torch.Tensor
            (B, N, 3) or (N, 3) samples of the rest shape, N >= M
        anchors : torch.Tensor, optional
            (B, M, 3) queries, the farthest point subsample when omitted

        Returns
        -------
        torch.Tensor
            (B, M, C)
        """
        points = _batched(points, 3)
        if anchors is None:
            anchors = self.anchors(points)
        return self.geometry(points, _batched(anchors, 3))

    def encode_multiview(self, images, rays) -> ImageTokens:
        """Tokens of B x v x H x W x 3 images with their B x v x H x W x 6
        Plücker rays"""
        images, rays = _batched(images, 5), _batched(rays, 5)
        if images.shape[:-1] != rays.shape[:-1]:
            raise InvalidArgument('Images and rays must share B, v, H, W')
        pixels = torch.cat([images, rays], dim=-1)
        if pixels.shape[-1] != PIXEL_CHANNELS:
            raise InvalidArgument(f'Expected {PIXEL_CHANNELS} channels per '
                                  f'pixel, Got {pixels.shape[-1]}')
        return self.multiview(pixels)

    def encode_motion(self, points, images, rays, anchors=None):
        """Geometry tokens attend to image tokens, then self-attention"""
        geometry = self.encode_geometry(points, anchors)
        tokens = self.encode_multiview(images, rays).fused
        x = self.fuse(geometry, tokens)
        for block in self.blocks:
            x = block(x)
        return x

    def kl_compress(self, latents, generator: torch.Generator = None,
                    deterministic: bool = False) -> CompressedLatent:
        return self.kl(latents, generator=generator,
                       deterministic=deterministic)

    def decode_queries(self, z, queries, chunk: int = QUERY_CHUNK):
        """
        Deformed positions of query points. Queries never attend to each
        other, so they are processed in chunks.
        """
        z, queries = _batched(z, 3), _batched(queries, 3)
        if queries.shape[-1] != 3:
            raise InvalidArgument(f'Expected (B, Q, 3) queries, '
                                  f'Got {tuple(queries.shape)}')
        if queries.shape[0] != z.shape[0]:
            raise InvalidArgument('z and queries disagree on batch size')
        latents = self.decoder.latents(z)
        parts = [self.decoder.query(latents, queries[:, s:s + chunk])
                 for s in range(0, queries.shape[1], chunk)]
        return torch.cat(parts, dim=1)

    def forward(self, batch: VaeBatch, generator=None, deterministic=False):
        latents = self.encode_motion(batch.p1, batch.images, batch.rays)
        compressed = self.kl_compress(latents, generator, deterministic)
        return self.decode_queries(compressed.z, batch.p1), compressed


def deformation_loss(pred, gt, dis_weight: float = 0.1,
                     mse_weight: float = 1.0):
    """
    ``mse_weight`` x mean squared error over points and coordinates plus
    ``dis_weight`` x mean Euclidean distance over points.

    Raises
    ------
    InvalidArgument
        If the shapes differ
    """
    if pred.shape != gt.shape:
        raise InvalidArgument(f'Prediction {tuple(pred.shape)} and target '
                              f'{tuple(gt.shape)} differ in shape')
    diff = pred - gt
    mse = diff.pow(2).mean()
    sq = diff.pow(2).sum(dim=-1)
    tiny = torch.finfo(sq.dtype).tiny
    dist = torch.where(sq > 0, sq.clamp_min(tiny).sqrt(),
                       torch.zeros_like(sq))
    return mse_weight * mse + dis_weight * dist.mean()


def kl_loss(mu, sigma):
    """
    Mean of 0.5 (mu^2 + sigma^2 - log sigma^2) over all elements.

    Raises
    ------
    InvalidArgument
        If any sigma is not strictly positive
    """
    if not torch.all(sigma > 0):
        raise InvalidArgument('sigma must be strictly positive')
    var = sigma.pow(2)
    return 0.5 * (mu.pow(2) + var - torch.log(var)).mean()


def kl_loss_from_logvar(mu, logvar):
    """kl_loss written in terms of log-variance"""
    return 0.5 * (mu.pow(2) + torch.exp(logvar) - logvar).mean()


def vae_training_step(batch: VaeBatch, model: MotionVAE,
                      optimizer: torch.optim.Optimizer,
                      generator: Optional[torch.Generator] = None,
                      kl_weight: float = None, dis_weight: float = None,
                      mse_weight: float = None, step: int = None):
    """
    One gradient step on deformation loss + kl_weight x regularization.

    Returns
    -------
    StepLosses
        deformation, regularization and total loss before the update

    Raises
    ------
    InvalidArgument
        If p1 and pt differ in shape
    NumericError
        If the loss is not finite, nothing is updated in that case
    """
    cfg = model.config
    kl_weight = cfg.kl_weight if kl_weight is None else kl_weight
    dis_weight = cfg.dis_weight if dis_weight is None else dis_weight
    mse_weight = cfg.mse_weight if mse_weight is None else mse_weight
    if batch.p1.shape != batch.pt.shape:
        raise InvalidArgument('p1 and pt must share their shape')

    model.train()
    optimizer.zero_grad(set_to_none=True)
    pred, compressed = model(batch, generator=generator)
    l_def = deformation_loss(pred, batch.pt, dis_weight, mse_weight)
    l_reg = kl_loss_from_logvar(compressed.mu, compressed.logvar)
    total = l_def + kl_weight * l_reg
    if not torch.isfinite(total):
        logger.error(f'Non-finite VAE loss at step {step}: '
                     f'def={l_def.item()} reg={l_reg.item()}')
        raise NumericError(f'Non-finite VAE loss at step {step}: '
                           f'deformation={l_def.item()}, '
                           f'regularization={l_reg.item()}')
    total.backward()
    optimizer.step()
    return StepLosses(deformation=l_def.item(), regularization=l_reg.item(),
                      total=total.item())
