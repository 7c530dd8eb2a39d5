import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from meshmotion.config import DiffusionConfig, InvalidArgument, NumericError
from meshmotion.motiondiff import EDMDenoiser, MotionDenoiser, \
    assign_frames, diffusion_training_loss, edm_precondition, \
    frame_subset, heun_sample, karras_sigmas, latent_std, loss_weight, \
    sample_latents
from meshmotion.tests.conftest import seed_strategy

SMALL = DiffusionConfig(depth=1, width=16, heads=2, latent_channels=4,
                        steps=3)
GEO_DIM, FRAME_DIM = 8, 6

sigma_strategy = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False)


def small_net(seed=0, use_spatial=True):
    torch.manual_seed(seed)
    return MotionDenoiser(SMALL, GEO_DIM, FRAME_DIM,
                          use_spatial=use_spatial).double()


def conditions(n_frames=4, n_latents=6, seed=0):
    generator = torch.Generator().manual_seed(seed)
    x = torch.randn(1, n_frames, n_latents, SMALL.latent_channels,
                    generator=generator, dtype=torch.float64)
    geo = torch.randn(1, 5, GEO_DIM, generator=generator,
                      dtype=torch.float64)
    frames = torch.randn(1, n_frames, 3, FRAME_DIM, generator=generator,
                         dtype=torch.float64)
    return x, geo, frames


@given(sigma=sigma_strategy)
@settings(max_examples=200, deadline=None)
def test_preconditioning_identities(sigma):
    level = edm_precondition(sigma, 0.5)
    total = sigma ** 2 + 0.25
    assert level.c_skip == pytest.approx(0.25 / total, rel=1e-12)
    assert level.c_in ** 2 * total == pytest.approx(1.0, rel=1e-12)
    assert (level.c_skip - 1) ** 2 * 0.25 + level.c_skip ** 2 * sigma ** 2 \
        == pytest.approx(level.c_out ** 2, rel=1e-9)
    assert loss_weight(sigma, 0.5) == \
        pytest.approx(1 / level.c_out ** 2, rel=1e-9)
    assert level.c_noise == pytest.approx(0.25 * math.log(sigma))


def test_preconditioning_examples():
    level = edm_precondition(0.5, 0.5)
    assert level.c_skip == 0.5
    assert edm_precondition(1.0).c_noise == 0.0

    level = edm_precondition(1e-8)
    assert level.c_skip == pytest.approx(1.0, abs=1e-15)
    assert level.c_out == pytest.approx(1e-8, rel=1e-6)

    for bad in (0.0, -1.0):
        with pytest.raises(InvalidArgument):
            edm_precondition(bad)
    with pytest.raises(InvalidArgument):
        edm_precondition(1.0, sigma_data=0.0)


def test_denoiser_is_identity_at_tiny_noise():
    model = EDMDenoiser(small_net(), SMALL.sigma_data)
    x, geo, frames = conditions()
    with torch.no_grad():
        out = model(x, 1e-8, geo, frames)
    assert (out - x).abs().max() < 1e-6
    with pytest.raises(InvalidArgument):
        model(x, 0.0, geo, frames)


def oracle_net(clean, sigma_data=0.5):
    """Inverts the preconditioning so that D returns ``clean``"""
    def net(x_in, c_noise, geo, frames):
        s = torch.exp(4 * c_noise).reshape(-1, 1, 1, 1)
        total = s ** 2 + sigma_data ** 2
        z = x_in * total.sqrt()
        c_skip = sigma_data ** 2 / total
        c_out = s * sigma_data / total.sqrt()
        return (clean - c_skip * z) / c_out
    return net


@given(seed=seed_strategy)
@settings(max_examples=50, deadline=None)
def test_oracle_denoiser_has_zero_loss(seed):
    clean, geo, frames = conditions(n_frames=6, seed=seed % 1000)
    subset = torch.tensor([1, 4])
    model = EDMDenoiser(oracle_net(clean[:, subset]), 0.5)
    loss = diffusion_training_loss(
        model, clean, geo, frames, SMALL,
        generator=torch.Generator().manual_seed(seed), subset=subset)
    assert float(loss) < 1e-10


def test_training_loss_matches_hand_computation():
    clean, geo, frames = conditions(n_frames=5)
    clean = clean.expand(2, -1, -1, -1)
    geo, frames = geo.expand(2, -1, -1), frames.expand(2, -1, -1, -1)
    subset = torch.tensor([0, 2])
    sigma = torch.tensor([0.5, 2.0], dtype=torch.float64)
    noise = torch.ones(2, 2, *clean.shape[2:], dtype=torch.float64)
    seen = {}

    def model(z_noisy, s, g, f):
        seen['z'], seen['frames'] = z_noisy, f
        return torch.zeros_like(z_noisy)

    loss = diffusion_training_loss(model, clean, geo, frames, SMALL,
                                   sigma=sigma, noise=noise, subset=subset)
    target = clean[:, [0, 2]]
    weights = [(s ** 2 + 0.25) / (0.25 * s ** 2) for s in (0.5, 2.0)]
    expected = np.mean([weights[b] * float((target[b] ** 2).mean())
                        for b in range(2)])
    assert float(loss) == pytest.approx(expected, rel=1e-12)
    assert torch.equal(seen['frames'], frames[:, [0, 2]])
    assert torch.allclose(seen['z'][1], target[1] + 2.0)


def test_training_loss_needs_three_timestamps():
    clean, geo, frames = conditions(n_frames=2)
    with pytest.raises(InvalidArgument):
        diffusion_training_loss(lambda z, *_: z, clean, geo, frames, SMALL)


@pytest.mark.parametrize('n_frames,expected', [(1, 1), (3, 1), (4, 2),
                                               (10, 4)])
def test_frame_subset(n_frames, expected):
    subset = frame_subset(n_frames, SMALL, torch.Generator().manual_seed(0))
    assert len(subset) == expected
    assert subset.tolist() == sorted(set(subset.tolist()))
    assert all(0 <= i < n_frames for i in subset.tolist())


@pytest.mark.parametrize('steps', [2, 3, 18, 40])
def test_karras_sigmas(steps):
    sigmas = karras_sigmas(steps, 0.002, 80.0, 7.0)
    assert sigmas.dtype == torch.float64
    assert len(sigmas) == steps
    assert float(sigmas[0]) == 80.0
    assert float(sigmas[-1]) == 0.002
    assert torch.all(sigmas[1:] < sigmas[:-1])


def test_karras_sigmas_errors():
    with pytest.raises(InvalidArgument):
        karras_sigmas(1)
    with pytest.raises(InvalidArgument):
        karras_sigmas(4, sigma_min=1.0, sigma_max=0.5)


def test_heun_matches_hand_unrolled_step():
    a = 0.3
    x0 = torch.tensor([2.0], dtype=torch.float64)
    sigmas = torch.tensor([4.0, 1.0], dtype=torch.float64)
    out = heun_sample(lambda x, s: a * x, x0, sigmas)

    d = (1 - a) * 2.0 / 4.0
    x2 = 2.0 + d * (1.0 - 4.0)
    d2 = (1 - a) * x2 / 1.0
    expected = 2.0 + 0.5 * (d + d2) * (1.0 - 4.0)
    assert float(out) == pytest.approx(expected, rel=1e-14)


def test_sampler_is_deterministic_per_seed():
    model = EDMDenoiser(small_net().float(), SMALL.sigma_data)
    _, geo, frames = conditions()
    geo, frames = geo.float(), frames.float()
    first = sample_latents(model, geo, frames, n_latents=6, seed=5,
                           config=SMALL)
    second = sample_latents(model, geo, frames, n_latents=6, seed=5,
                            config=SMALL)
    other = sample_latents(model, geo, frames, n_latents=6, seed=6,
                           config=SMALL)
    assert first.shape == (1, 4, 6, SMALL.latent_channels)
    assert torch.equal(first, second)
    assert not torch.equal(first, other)
    with pytest.raises(InvalidArgument):
        sample_latents(model, geo, frames, n_latents=6, steps=1,
                       config=SMALL)


@pytest.mark.parametrize('use_spatial', [True, False])
def test_denoiser_is_equivariant_to_timestamp_order(use_spatial):
    net = small_net(use_spatial=use_spatial)
    x, geo, frames = conditions()
    c_noise = torch.tensor([0.1], dtype=torch.float64)
    perm = [2, 0, 3, 1]
    with torch.no_grad():
        out = net(x, c_noise, geo, frames)
        permuted = net(x[:, perm], c_noise, geo, frames[:, perm])
    assert (permuted - out[:, perm]).abs().max() < 1e-10


def test_rows_stay_independent_without_spatial_attention():
    x, geo, frames = conditions()
    c_noise = torch.tensor([0.3], dtype=torch.float64)
    moved = x.clone()
    moved[:, 1, 2] += 0.5
    others = [i for i in range(x.shape[2]) if i != 2]
    with torch.no_grad():
        local = small_net(use_spatial=False)
        before, after = local(x, c_noise, geo, frames), \
            local(moved, c_noise, geo, frames)
        mixed = small_net(use_spatial=True)
        spread = mixed(moved, c_noise, geo, frames) - \
            mixed(x, c_noise, geo, frames)
    assert (after[:, :, others] - before[:, :, others]).abs().max() < 1e-12
    assert (after[:, [0, 2, 3], 2] - before[:, [0, 2, 3], 2]).abs().max() > 0
    assert spread[:, :, others].abs().max() > 0


@pytest.mark.parametrize('use_spatial', [True, False])
def test_denoiser_is_equivariant_to_row_order(use_spatial):
    net = small_net(use_spatial=use_spatial)
    x, geo, frames = conditions()
    c_noise = torch.tensor([-0.2], dtype=torch.float64)
    perm = [4, 1, 5, 0, 3, 2]
    with torch.no_grad():
        out = net(x, c_noise, geo, frames)
        permuted = net(x[:, :, perm], c_noise, geo, frames)
    assert (permuted - out[:, :, perm]).abs().max() < 1e-10


def test_training_loss_gradients_match_finite_differences():
    model = EDMDenoiser(small_net(), sigma_data=SMALL.sigma_data)
    clean, geo, frames = conditions(n_frames=4)
    subset = torch.tensor([0, 1, 3])
    sigma = torch.tensor([0.7], dtype=torch.float64)
    generator = torch.Generator().manual_seed(5)
    noise = torch.randn(1, 3, *clean.shape[2:], generator=generator,
                        dtype=torch.float64)

    def loss_fn(clean, geo):
        return diffusion_training_loss(model, clean, geo, frames, SMALL,
                                       sigma=sigma, noise=noise,
                                       subset=subset)

    inputs = (clean.clone().requires_grad_(True),
              geo.clone().requires_grad_(True))
    assert torch.autograd.gradcheck(loss_fn, inputs, eps=1e-6, atol=1e-6)

    weight = model.net.proj_out.weight
    loss_fn(clean, geo).backward()
    analytic = float(weight.grad[1, 3])
    eps = 1e-6
    with torch.no_grad():
        weight[1, 3] += eps
        upper = float(loss_fn(clean, geo))
        weight[1, 3] -= 2 * eps
        lower = float(loss_fn(clean, geo))
        weight[1, 3] += eps
    assert analytic == pytest.approx((upper - lower) / (2 * eps), rel=1e-5,
                                     abs=1e-8)


def test_frame_tokens_drive_their_timestamp():
    net = small_net()
    x, geo, frames = conditions()
    changed = frames.clone()
    changed[:, 1] += 1.0
    c_noise = torch.tensor([0.0], dtype=torch.float64)
    with torch.no_grad():
        before = net(x, c_noise, geo, frames)
        after = net(x, c_noise, geo, changed)
    assert (before[:, 1] - after[:, 1]).abs().max() > 0


def test_denoiser_rejects_mismatched_conditions():
    net = small_net()
    x, geo, frames = conditions()
    c_noise = torch.zeros(1, dtype=torch.float64)
    with pytest.raises(InvalidArgument):
        net(x, c_noise, geo, frames[:, :3])
    with pytest.raises(InvalidArgument):
        net(x, c_noise, geo.expand(2, -1, -1), frames)


@pytest.mark.parametrize('n_video,n_slots,expected', [
    (3, 3, [0, 1, 2]),
    (5, 3, [0, 1, 2, 3, 4]),
    (2, 5, [0, 0, 1, 1, 1]),
    (1, 4, [0, 0, 0, 0]),
    (3, 1, [0, 1, 2]),
])
def test_assign_frames(n_video, n_slots, expected):
    assert assign_frames(n_video, n_slots).tolist() == expected


def test_assign_frames_errors():
    with pytest.raises(InvalidArgument):
        assign_frames(0, 3)
    with pytest.raises(InvalidArgument):
        assign_frames(3, 0)


def test_latent_std():
    assert latent_std(torch.tensor([1.0, -1.0, 1.0, -1.0])) == \
        pytest.approx(2 / math.sqrt(3))
    with pytest.raises(NumericError):
        latent_std(torch.ones(8))
