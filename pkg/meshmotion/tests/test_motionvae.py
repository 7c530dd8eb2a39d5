from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings

from meshmotion.config import VaeConfig, InvalidArgument, NumericError
from meshmotion.geomcore import orthogonal_cameras
from meshmotion.motionvae import MotionVAE, VaeBatch, deformation_loss, \
    kl_loss, kl_loss_from_logvar, vae_training_step
from meshmotion.tests.conftest import seed_strategy
from meshmotion.toydata import camera_rays

SMALL = VaeConfig(n_latents=8, width=32, latent_channels=8, depth=1,
                  heads=4, patch_size=8, vit_depth=1, n_octaves=4)


def small_vae(seed=0, dtype=torch.float64, **overrides):
    torch.manual_seed(seed)
    return MotionVAE(replace(SMALL, **overrides)).to(dtype)


def make_batch(batch=2, n_points=32, views=2, size=16, seed=0,
               dtype=torch.float64):
    rng = np.random.default_rng(seed)
    p1 = rng.uniform(-0.8, 0.8, (batch, n_points, 3))
    pt = p1 + rng.normal(scale=0.05, size=p1.shape)
    images = rng.random((batch, views, size, size, 3))
    rays = np.stack([camera_rays(orthogonal_cameras(views, size))] * batch)
    return VaeBatch(*(torch.from_numpy(x).to(dtype)
                      for x in (p1, pt, images, rays)))


def test_encode_geometry_full_scale_shape():
    torch.manual_seed(0)
    config = VaeConfig(n_latents=512, width=512, latent_channels=32,
                       depth=0, heads=8, vit_depth=0)
    model = MotionVAE(config)
    points = torch.rand(2048, 3) * 1.8 - 0.9
    with torch.no_grad():
        assert model.encode_geometry(points).shape == (1, 512, 512)


def test_encode_geometry_ignores_point_order():
    model = small_vae()
    batch = make_batch(batch=1)
    anchors = model.anchors(batch.p1)
    perm = torch.randperm(batch.p1.shape[1],
                          generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        first = model.encode_geometry(batch.p1, anchors)
        second = model.encode_geometry(batch.p1[:, perm], anchors)
    assert first.shape == (1, SMALL.n_latents, SMALL.width)
    assert (first - second).abs().max() < 1e-6


def test_encode_geometry_sees_translation():
    model = small_vae()
    batch = make_batch(batch=1)
    with torch.no_grad():
        first = model.encode_geometry(batch.p1)
        second = model.encode_geometry(batch.p1 + 0.5)
    assert (first - second).norm() > 0


def test_encode_geometry_needs_enough_points():
    model = small_vae()
    with pytest.raises(InvalidArgument):
        model.encode_geometry(torch.rand(1, SMALL.n_latents - 1, 3,
                                         dtype=torch.float64))


def test_encode_multiview_shapes():
    torch.manual_seed(0)
    config = VaeConfig(width=128, heads=4, patch_size=8, vit_depth=1,
                       depth=1)
    model = MotionVAE(config)
    batch = make_batch(batch=1, views=2, size=64, dtype=torch.float32)
    with torch.no_grad():
        tokens = model.encode_multiview(batch.images, batch.rays)
    assert tokens.grid == (8, 8)
    assert tokens.upsampled.shape == (1, 2 * 16 * 16, 64)
    assert tokens.fused.shape == (1, 2 * 16 * 16, 128)


def test_encode_multiview_is_view_equivariant():
    model = small_vae()
    batch = make_batch(batch=1, views=2)
    swap = [1, 0]
    with torch.no_grad():
        fused = model.encode_multiview(batch.images, batch.rays).fused
        swapped = model.encode_multiview(batch.images[:, swap],
                                         batch.rays[:, swap]).fused
    per_view = fused.shape[1] // 2
    expected = torch.cat([fused[:, per_view:], fused[:, :per_view]], dim=1)
    assert (swapped - expected).abs().max() < 1e-9


def test_encode_multiview_reacts_to_one_view():
    model = small_vae()
    batch = make_batch(batch=1, views=2)
    images = batch.images.clone()
    images[:, 1] = 0.0
    with torch.no_grad():
        before = model.encode_multiview(batch.images, batch.rays).fused
        after = model.encode_multiview(images, batch.rays).fused
    assert (before - after).abs().max() > 0


def test_encode_multiview_rejects_channels():
    model = small_vae()
    batch = make_batch(batch=1)
    with pytest.raises(InvalidArgument):
        model.encode_multiview(batch.images[..., :2], batch.rays)


def test_encode_motion_shapes_and_frames():
    model = small_vae()
    batch = make_batch(batch=1)
    later = torch.rand_like(batch.images)
    with torch.no_grad():
        first = model.encode_motion(batch.p1, batch.images, batch.rays)
        second = model.encode_motion(batch.p1, later, batch.rays)
    assert first.shape == (1, SMALL.n_latents, SMALL.width)
    assert (first - second).abs().max() > 0


def test_encode_motion_without_blocks_is_fusion():
    model = small_vae(depth=0)
    batch = make_batch(batch=1)
    with torch.no_grad():
        geometry = model.encode_geometry(batch.p1)
        tokens = model.encode_multiview(batch.images, batch.rays).fused
        expected = model.fuse(geometry, tokens)
        actual = model.encode_motion(batch.p1, batch.images, batch.rays)
    assert torch.equal(actual, expected)


def test_kl_compress_deterministic_and_shapes():
    model = small_vae()
    latents = torch.randn(1, SMALL.n_latents, SMALL.width,
                          dtype=torch.float64)
    compressed = model.kl_compress(latents, deterministic=True)
    assert torch.equal(compressed.z, compressed.mu)
    assert compressed.z.shape == (1, SMALL.n_latents, SMALL.latent_channels)
    assert torch.all(compressed.sigma > 0)


def test_reparameterized_samples_match_moments():
    model = small_vae()
    latents = torch.randn(1, SMALL.n_latents, SMALL.width,
                          dtype=torch.float64).expand(10000, -1, -1)
    generator = torch.Generator().manual_seed(0)
    with torch.no_grad():
        compressed = model.kl_compress(latents, generator=generator)
    mu, sigma = compressed.mu[0], compressed.sigma[0]
    mean = compressed.z.mean(dim=0)
    std = compressed.z.std(dim=0)
    assert ((mean - mu).abs() / sigma).max() < 0.1
    assert ((std - sigma).abs() / sigma).max() < 0.05


def test_kl_loss_examples():
    mu, sigma = torch.zeros(4, 8), torch.ones(4, 8)
    assert float(kl_loss(mu, sigma)) == 0.5

    sigma = torch.ones(4, 8, dtype=torch.float64, requires_grad=True)
    kl_loss(torch.zeros(4, 8, dtype=torch.float64), sigma).backward()
    assert sigma.grad.abs().max() < 1e-12

    with pytest.raises(InvalidArgument):
        kl_loss(mu, torch.zeros(4, 8))


@given(seed=seed_strategy)
@settings(max_examples=50, deadline=None)
def test_kl_loss_matches_elementwise_formula(seed):
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=(3, 5))
    sigma = rng.uniform(0.1, 3.0, size=(3, 5))
    expected = np.mean([0.5 * (m * m + s * s - np.log(s * s))
                        for m, s in zip(mu.ravel(), sigma.ravel())])
    actual = float(kl_loss(torch.from_numpy(mu), torch.from_numpy(sigma)))
    assert actual == pytest.approx(expected, abs=1e-12)
    logvar = torch.from_numpy(np.log(sigma ** 2))
    assert float(kl_loss_from_logvar(torch.from_numpy(mu), logvar)) == \
        pytest.approx(expected, abs=1e-12)


@given(seed=seed_strategy)
@settings(max_examples=50, deadline=None)
def test_loss_gradients_match_finite_differences(seed):
    generator = torch.Generator().manual_seed(seed)
    pred = torch.randn(6, 3, dtype=torch.float64, generator=generator,
                       requires_grad=True)
    gt = torch.randn(6, 3, dtype=torch.float64, generator=generator)
    mu = torch.randn(4, 8, dtype=torch.float64, generator=generator,
                     requires_grad=True)
    logvar = torch.randn(4, 8, dtype=torch.float64, generator=generator,
                         requires_grad=True)
    assert torch.autograd.gradcheck(lambda p: deformation_loss(p, gt, 0.1),
                                    (pred,), rtol=1e-4)
    assert torch.autograd.gradcheck(kl_loss_from_logvar, (mu, logvar),
                                    rtol=1e-4)


def test_deformation_loss_examples():
    gt = torch.zeros(1, 3)
    assert float(deformation_loss(gt, gt)) == 0.0
    pred = torch.tensor([[1.0, 0.0, 0.0]])
    assert float(deformation_loss(pred, gt, 0.1)) == \
        pytest.approx(1 / 3 + 0.1)

    rng = np.random.default_rng(0)
    pred = torch.from_numpy(rng.normal(size=(5, 3)))
    gt = torch.from_numpy(rng.normal(size=(5, 3)))
    mse = ((pred - gt) ** 2).mean()
    dist = (pred - gt).norm(dim=-1).mean()
    assert torch.equal(deformation_loss(pred, gt, 0.0), mse)
    assert float(deformation_loss(pred, gt, 0.3, mse_weight=0.0)) == \
        pytest.approx(float(0.3 * dist), abs=1e-15)

    with pytest.raises(InvalidArgument):
        deformation_loss(torch.zeros(2, 3), torch.zeros(3, 3))


def test_zero_initialized_decoder_is_identity():
    model = small_vae()
    z = torch.randn(1, SMALL.n_latents, SMALL.latent_channels,
                    dtype=torch.float64)
    queries = torch.rand(1, 20, 3, dtype=torch.float64)
    with torch.no_grad():
        assert torch.equal(model.decode_queries(z, queries), queries)


def test_decode_queries_are_independent():
    model = small_vae()
    torch.nn.init.normal_(model.decoder.head.weight, std=0.5)
    z = torch.randn(1, SMALL.n_latents, SMALL.latent_channels,
                    dtype=torch.float64)
    queries = torch.rand(1, 17, 3, dtype=torch.float64)
    with torch.no_grad():
        batched = model.decode_queries(z, queries)
        single = torch.cat([model.decode_queries(z, queries[:, i:i + 1])
                            for i in range(17)], dim=1)
        chunked = model.decode_queries(z, queries, chunk=4)
    assert batched.shape == (1, 17, 3)
    assert (batched - single).abs().max() < 1e-6
    assert (batched - chunked).abs().max() < 1e-6
    assert (batched - queries).abs().max() > 0


def test_training_step_starts_at_zero_for_identity():
    model = small_vae()
    batch = make_batch()
    batch = VaeBatch(batch.p1, batch.p1.clone(), batch.images, batch.rays)
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    losses = vae_training_step(batch, model, optimizer,
                               generator=torch.Generator().manual_seed(0),
                               kl_weight=0.0)
    assert losses.deformation == 0.0
    assert losses.total == 0.0


def _loss_curve(seed, steps=5):
    model = small_vae(seed)
    batch = make_batch(seed=seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    generator = torch.Generator().manual_seed(seed)
    return [vae_training_step(batch, model, optimizer, generator).total
            for _ in range(steps)]


def test_training_is_deterministic():
    assert _loss_curve(3) == _loss_curve(3)


def test_training_step_rejects_non_finite_loss():
    model = small_vae()
    batch = make_batch()
    pt = batch.pt.clone()
    pt[0, 0, 0] = float('nan')
    before = {k: v.clone() for k, v in model.state_dict().items()}
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    with pytest.raises(NumericError):
        vae_training_step(VaeBatch(batch.p1, pt, batch.images, batch.rays),
                          model, optimizer, step=7)
    for name, value in model.state_dict().items():
        assert torch.equal(value, before[name])


def test_training_step_rejects_mismatched_clouds():
    model = small_vae()
    batch = make_batch()
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    with pytest.raises(InvalidArgument):
        vae_training_step(VaeBatch(batch.p1, batch.pt[:, :-1], batch.images,
                                   batch.rays), model, optimizer)


@pytest.mark.slow
def test_overfits_single_batch():
    curve = np.array(_loss_curve(0, steps=200))
    window = np.convolve(curve, np.ones(20) / 20, mode='valid')
    assert window[-1] < window[0]
