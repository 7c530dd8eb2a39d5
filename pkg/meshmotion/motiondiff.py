"""
Spatiotemporal latent diffusion: EDM preconditioning, the denoiser
transformer, its training objective and a deterministic Heun sampler.
"""
import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import torch
from einops import rearrange
from torch import nn

from meshmotion import logger
from meshmotion.config import DiffusionConfig, InvalidArgument, NumericError
from meshmotion.layers import Attention, FeedForward, NoiseEmbedder, modulate


@dataclass
class NoiseLevel:
    sigma: float
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


def edm_precondition(sigma: float, sigma_data: float = 0.5) -> NoiseLevel:
    """
    EDM preconditioners of a noise level.

    Raises
    ------
    InvalidArgument
        If sigma or sigma_data is not strictly positive
    """
    sigma = float(sigma)
    if not sigma > 0:
        raise InvalidArgument(f'sigma must be positive, Got {sigma}')
    if not sigma_data > 0:
        raise InvalidArgument(f'sigma_data must be positive, Got {sigma_data}')
    total = sigma ** 2 + sigma_data ** 2
    return NoiseLevel(sigma=sigma,
                      c_skip=sigma_data ** 2 / total,
                      c_out=sigma * sigma_data / math.sqrt(total),
                      c_in=1.0 / math.sqrt(total),
                      c_noise=0.25 * math.log(sigma))


def loss_weight(sigma, sigma_data: float = 0.5):
    """(sigma^2 + sigma_data^2) / (sigma sigma_data)^2"""
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


def assign_frames(n_video: int, n_slots: int) -> np.ndarray:
    """
    Video frame index for every latent slot. A video shorter than
    ``n_slots`` is stretched by nearest-timestamp assignment, a longer one
    keeps every frame and the slot count grows to match.
    """
    if n_video < 1 or n_slots < 1:
        raise InvalidArgument(f'Need at least one frame and one slot, Got '
                              f'{n_video} frames, {n_slots} slots')
    if n_video >= n_slots:
        return np.arange(n_video)
    logger.warning(f'Video has {n_video} frames for {n_slots} latent slots, '
                   f'using nearest-timestamp assignment')
    if n_slots == 1:
        return np.zeros(1, dtype=np.int64)
    position = np.arange(n_slots) * (n_video - 1) / (n_slots - 1)
    return np.floor(position + 0.5).astype(np.int64)


class DenoiserBlock(nn.Module):
    """
    Spatial self-attention, cross-attention to geometry tokens,
    cross-attention to the tokens of the paired frame, temporal
    self-attention across timestamps and an MLP. Every sub-layer is
    preceded by a noise-conditioned scale and shift.
    """

    def __init__(self, width, heads, geo_dim, frame_dim, use_spatial=True):
        super().__init__()
        self.use_spatial = use_spatial
        self.norms = nn.ModuleList([nn.LayerNorm(width,
                                                 elementwise_affine=False)
                                    for _ in range(5)])
        self.spatial = Attention(width, heads)
        self.norm_geo = nn.LayerNorm(geo_dim)
        self.geo_attn = Attention(width, heads, geo_dim)
        self.norm_frame = nn.LayerNorm(frame_dim)
        self.frame_attn = Attention(width, heads, frame_dim)
        self.temporal = Attention(width, heads)
        self.mlp = FeedForward(width)
        self.modulation = nn.Sequential(nn.SiLU(),
                                        nn.Linear(width, 10 * width))
        nn.init.zeros_(self.modulation[-1].weight)
        nn.init.zeros_(self.modulation[-1].bias)

    def forward(self, x, cond, geo_tokens, frame_tokens):
        n_batch, n_frames = x.shape[:2]
        mods = self.modulation(cond).chunk(10, dim=-1)

        def pre(k, h):
            return modulate(self.norms[k](h), mods[2 * k], mods[2 * k + 1])

        if self.use_spatial:
            h = rearrange(pre(0, x), 'b t m c -> (b t) m c')
            h = self.spatial(h)
            x = x + rearrange(h, '(b t) m c -> b t m c', b=n_batch)

        geo = self.norm_geo(geo_tokens).repeat_interleave(n_frames, dim=0)
        h = rearrange(pre(1, x), 'b t m c -> (b t) m c')
        h = self.geo_attn(h, geo)
        x = x + rearrange(h, '(b t) m c -> b t m c', b=n_batch)

        frames = rearrange(self.norm_frame(frame_tokens),
                           'b t k c -> (b t) k c')
        h = rearrange(pre(2, x), 'b t m c -> (b t) m c')
        h = self.frame_attn(h, frames)
        x = x + rearrange(h, '(b t) m c -> b t m c', b=n_batch)

        h = rearrange(pre(3, x), 'b t m c -> (b m) t c')
        h = self.temporal(h)
        x = x + rearrange(h, '(b m) t c -> b t m c', b=n_batch)

        return x + self.mlp(pre(4, x))


class MotionDenoiser(nn.Module):
    """
    The network inside the EDM wrapper: B x T x M x C0 latents in and out,
    conditioned on c_noise, geometry tokens and one token set per frame.
    There is no timestamp embedding, frame identity comes from the frame
    tokens alone.
    """

    def __init__(self, config: DiffusionConfig, geo_dim: int,
                 frame_dim: int, use_spatial: bool = True):
        super().__init__()
        config = config.validate()
        self.config = config
        width = config.width
        self.proj_in = nn.Linear(config.latent_channels, width)
        self.noise_embed = NoiseEmbedder(width)
        self.blocks = nn.ModuleList([
            DenoiserBlock(width, config.heads, geo_dim, frame_dim,
                          use_spatial)
            for _ in range(config.depth)])
        self.norm_out = nn.LayerNorm(width, elementwise_affine=False)
        self.modulation_out = nn.Sequential(nn.SiLU(),
                                            nn.Linear(width, 2 * width))
        nn.init.zeros_(self.modulation_out[-1].weight)
        nn.init.zeros_(self.modulation_out[-1].bias)
        self.proj_out = nn.Linear(width, config.latent_channels)

    def forward(self, x, c_noise, geo_tokens, frame_tokens):
        """
        Parameters
        ----------
        x : torch.Tensor
            (B, T, M, C0) preconditioned latents
        c_noise : torch.Tensor
            (B,) noise conditioning
        geo_tokens : torch.Tensor
            (B, Mg, Cg) rest geometry tokens
        frame_tokens : torch.Tensor
            (B, T, K, Cf) tokens of the frame paired with each timestamp
        """
        if frame_tokens.shape[:2] != x.shape[:2]:
            raise InvalidArgument(f'Expected frame tokens for '
                                  f'{tuple(x.shape[:2])} (batch, time), Got '
                                  f'{tuple(frame_tokens.shape[:2])}')
        if geo_tokens.shape[0] != x.shape[0]:
            raise InvalidArgument('Geometry tokens disagree on batch size')
        cond = self.noise_embed(c_noise.reshape(-1).to(x.dtype))
        h = self.proj_in(x)
        for block in self.blocks:
            h = block(h, cond, geo_tokens, frame_tokens)
        shift, scale = self.modulation_out(cond).chunk(2, dim=-1)
        return self.proj_out(modulate(self.norm_out(h), shift, scale))


class EDMDenoiser(nn.Module):
    """D(x, sigma) = c_skip x + c_out F(c_in x, c_noise, conditions)"""

    def __init__(self, net: Union[nn.Module, Callable],
                 sigma_data: float = 0.5):
        super().__init__()
        self.net = net
        self.sigma_data = sigma_data

    def forward(self, z_noisy, sigma, geo_tokens, frame_tokens):
        sigma = torch.as_tensor(sigma, dtype=z_noisy.dtype,
                                device=z_noisy.device)
        sigma = sigma.reshape(-1).expand(z_noisy.shape[0])
        if not torch.all(sigma > 0):
            raise InvalidArgument('sigma must be positive')
        s = sigma.reshape(-1, 1, 1, 1)
        total = s ** 2 + self.sigma_data ** 2
        c_skip = self.sigma_data ** 2 / total
        c_out = s * self.sigma_data / total.sqrt()
        c_in = 1.0 / total.sqrt()
        c_noise = 0.25 * sigma.log()
        out = self.net(c_in * z_noisy, c_noise, geo_tokens, frame_tokens)
        return c_skip * z_noisy + c_out * out


def frame_subset(n_frames: int, config: DiffusionConfig,
                 generator: torch.Generator = None) -> torch.Tensor:
    """Sorted random subset of ceil(T / 3) timestamps"""
    size = config.subset_size(n_frames)
    order = torch.randperm(n_frames, generator=generator)
    return order[:size].sort().values


def diffusion_training_loss(model, clean, geo_tokens, frame_tokens,
                            config: DiffusionConfig = None,
                            generator: torch.Generator = None,
                            sigma: torch.Tensor = None,
                            noise: torch.Tensor = None,
                            subset: torch.Tensor = None):
    """
    EDM-weighted denoising error on a random subset of timestamps.

    Parameters
    ----------
    model : EDMDenoiser or callable
        called as ``model(z_noisy, sigma, geo_tokens, frame_tokens)``
    clean : torch.Tensor
        (B, T, M, C0) latents of the training clips
    geo_tokens, frame_tokens : torch.Tensor
        conditions, frame tokens are (B, T, K, Cf)
    config : DiffusionConfig
        sigma distribution and subset rule
    generator : torch.Generator
        drives sigma, noise and subset draws that are not given
    sigma : torch.Tensor, optional
        (B,) noise levels, drawn log-normally when omitted
    noise : torch.Tensor, optional
        standard normal draw shaped like the subset, scaled by sigma here
    subset : torch.Tensor, optional
        ascending timestamp indices

    Raises
    ------
    InvalidArgument
        If the clips have fewer than 3 timestamps
    """
    config = config or DiffusionConfig()
    n_batch, n_frames = clean.shape[:2]
    if n_frames < 3:
        raise InvalidArgument(f'Need at least 3 timestamps, Got {n_frames}')
    if subset is None:
        subset = frame_subset(n_frames, config, generator)
    subset = torch.as_tensor(subset, dtype=torch.long)
    target = clean[:, subset.to(clean.device)]
    frames = frame_tokens[:, subset.to(frame_tokens.device)]

    if sigma is None:
        normal = torch.randn(n_batch, generator=generator, dtype=clean.dtype)
        sigma = (normal * config.p_std + config.p_mean).exp()
    sigma = torch.as_tensor(sigma, dtype=clean.dtype).to(clean.device)
    sigma = sigma.reshape(-1).expand(n_batch)
    if noise is None:
        noise = torch.randn(target.shape, generator=generator,
                            dtype=clean.dtype)
    noise = noise.to(clean.device)
    s = sigma.reshape(-1, 1, 1, 1)

    denoised = model(target + s * noise, sigma, geo_tokens, frames)
    weight = loss_weight(s, config.sigma_data)
    return (weight * (denoised - target) ** 2).mean()


def karras_sigmas(steps: int, sigma_min: float = 0.002,
                  sigma_max: float = 80.0, rho: float = 7.0):
    """
    ``steps`` noise levels from sigma_max down to sigma_min, spaced
    uniformly in sigma^(1/rho). No trailing zero.
    """
    if steps < 2:
        raise InvalidArgument(f'Need at least 2 sampler steps, Got {steps}')
    if not 0 < sigma_min < sigma_max:
        raise InvalidArgument('Expected 0 < sigma_min < sigma_max')
    ramp = torch.linspace(0, 1, steps, dtype=torch.float64)
    min_inv_rho = sigma_min ** (1 / rho)
    max_inv_rho = sigma_max ** (1 / rho)
    sigmas = (max_inv_rho + ramp * (min_inv_rho - max_inv_rho)) ** rho
    sigmas[0], sigmas[-1] = sigma_max, sigma_min
    return sigmas


def heun_sample(denoise_fn: Callable, x, sigmas, verbose=False):
    """
    Deterministic second-order Heun integration of the probability flow
    between consecutive noise levels. Returns the state at sigmas[-1].
    """
    for i in range(len(sigmas) - 1):
        sigma, sigma_next = float(sigmas[i]), float(sigmas[i + 1])
        denoised = denoise_fn(x, sigma)
        d = (x - denoised) / sigma
        dt = sigma_next - sigma
        x_2 = x + d * dt
        denoised_2 = denoise_fn(x_2, sigma_next)
        d_2 = (x_2 - denoised_2) / sigma_next
        x = x + 0.5 * (d + d_2) * dt
        if verbose:
            logger.info(f'sampler step {i + 1}/{len(sigmas) - 1} '
                        f'sigma={sigma_next:.4g}')
    return x


@torch.no_grad()
def sample_latents(model: EDMDenoiser, geo_tokens, frame_tokens,
                   n_latents: int, steps: int = None, seed: int = 0,
                   config: DiffusionConfig = None, verbose: bool = False):
    """
    Jointly denoises every timestamp of a latent sequence.

    Parameters
    ----------
    model : EDMDenoiser
        trained denoiser
    geo_tokens : torch.Tensor
        (B, Mg, Cg) rest geometry tokens
    frame_tokens : torch.Tensor
        (B, T, K, Cf) frame tokens, one set per output timestamp
    n_latents : int
        M, tokens per latent set
    steps : int
        number of noise levels, defaults to the config's
    seed : int
        seeds the initial noise, the output is bit-identical per seed

    Returns
    -------
    torch.Tensor
        (B, T, M, C0)

    Raises
    ------
    InvalidArgument
        If steps < 2
    NumericError
        If the sampler produces non-finite values
    """
    config = config or DiffusionConfig()
    steps = config.steps if steps is None else steps
    sigmas = karras_sigmas(steps, config.sigma_min, config.sigma_max,
                           config.rho)
    n_batch, n_frames = frame_tokens.shape[:2]
    shape = (n_batch, n_frames, n_latents, config.latent_channels)
    generator = torch.Generator(device='cpu').manual_seed(int(seed))
    x = torch.randn(shape, generator=generator, dtype=torch.float32)
    x = (x * config.sigma_max).to(device=frame_tokens.device,
                                   dtype=frame_tokens.dtype)
    model.eval()

    def denoise_fn(z, sigma):
        return model(z, sigma, geo_tokens, frame_tokens)

    x = heun_sample(denoise_fn, x, sigmas, verbose=verbose)
    if not torch.isfinite(x).all():
        raise NumericError('Sampler produced non-finite latents')
    return x


def denoiser_from_config(config: DiffusionConfig, geo_dim: int,
                         frame_dim: int) -> EDMDenoiser:
    return EDMDenoiser(MotionDenoiser(config, geo_dim, frame_dim),
                       sigma_data=config.sigma_data)


def latent_std(latents: torch.Tensor) -> float:
    """Global standard deviation used to rescale latents to sigma_data"""
    std = float(latents.float().std())
    if not math.isfinite(std) or std == 0.0:
        raise NumericError(f'Degenerate latent statistics, std={std}')
    return std
