import numpy as np
import pytest
import torch

from fae import pixel
from fae.autoencoder import FAEConfig, train_fae
from fae.errors import ConfigError, NumericError, ShapeError
from fae.formats import encode_checkpoint
from fae.nn import count_parameters
from fae.teacher import TeacherSpec, build_dataset, make_manifest
from fae.verify import grad_pixel_decoder, grad_pixel_losses, randomize_, tiny_pixel_config

# 16px images on a 4x4 grid of 32-dim features keeps training tests fast
SPEC = TeacherSpec(grid_h=4, grid_w=4, feature_dim=32, image_size=16)


def _cfg(**kw):
    base = dict(feature_dim=32, grid_h=4, grid_w=4, depth=1, hidden_dim=64, num_heads=4, patch_size=4,
                image_size=16)
    base.update(kw)
    return pixel.PixelDecoderConfig(**base)


def _data(per_class=1):
    return build_dataset(make_manifest(10, per_class, image_size=16), SPEC)


# ---------------------------------------------------------------- noise

def test_zero_sigma_is_identity(rng):
    x = rng.standard_normal((3, 4, 4, 8))
    out = pixel.inject_noise(x, pixel.NoiseStageConfig(sigma_base=0.0), seed=1)
    assert np.array_equal(out, x)


def test_fixed_noise_std_and_mean():
    x = torch.zeros(1_000_000, dtype=torch.float64)
    out = pixel.inject_noise(x, pixel.NoiseStageConfig(0.4, "fixed"), seed=7)
    assert abs(out.std().item() / 0.4 - 1) <= 0.01
    # mean-unbiased: |mean| <= 3 sigma / sqrt(N)
    assert abs(out.mean().item()) <= 3 * 0.4 / 1000


def test_noise_is_deterministic_per_seed(rng):
    x = rng.standard_normal((2, 4, 4, 8))
    cfg = pixel.NoiseStageConfig()
    assert np.array_equal(pixel.inject_noise(x, cfg, seed=3), pixel.inject_noise(x, cfg, seed=3))
    assert not np.array_equal(pixel.inject_noise(x, cfg, seed=3), pixel.inject_noise(x, cfg, seed=4))
    assert pixel.inject_noise(x, cfg, seed=3).shape == x.shape


def test_scaled_noise_uses_teacher_norm():
    cfg = pixel.NoiseStageConfig(0.4, "scaled", reference_norm=10.0)
    assert pixel.noise_sigma(cfg, 5.0) == pytest.approx(0.2)
    assert pixel.noise_sigma(cfg, TeacherSpec(mean_norm=20.0)) == pytest.approx(0.8)
    with pytest.raises(ConfigError):
        pixel.noise_sigma(cfg, None)
    with pytest.raises(ConfigError):
        pixel.inject_noise(np.zeros(3), cfg, TeacherSpec())


# ---------------------------------------------------------------- decoder

def test_zero_output_projection_gives_black_image():
    dec = randomize_(pixel.PixelDecoder(_cfg()), 1)
    with torch.no_grad():
        dec.out.weight.zero_()
        dec.out.bias.zero_()
    img = dec(torch.randn(2, 4, 4, 32))
    assert img.shape == (2, 16, 16, 3) and torch.equal(img, torch.zeros_like(img))


def test_unpatchify_places_patches():
    cfg = _cfg(depth=0)
    dec = pixel.PixelDecoder(cfg)
    dec.norm = torch.nn.Identity()
    with torch.no_grad():
        dec.inp.weight.zero_()
        dec.inp.bias.zero_()
        dec.inp.weight[0, 0] = 1.0
        dec.out.weight.zero_()
        dec.out.bias.zero_()
        dec.out.weight[:, 0] = 1.0
    f = torch.zeros(4, 4, 32)
    f[1, 2, 0] = 1.0
    img = dec(f)
    expect = torch.zeros(16, 16, 3)
    expect[4:8, 8:12] = 1.0
    assert torch.equal(img, expect)


def test_decoder_shape_contract():
    dec = pixel.PixelDecoder(_cfg())
    assert dec(torch.randn(4, 4, 32)).shape == (16, 16, 3)
    with pytest.raises(ShapeError):
        dec(torch.randn(1, 4, 4, 31))
    with pytest.raises(ConfigError):
        _cfg(patch_size=3)


def test_export_clamps():
    out = pixel.export_image(np.array([-0.5, 0.25, 1.5]))
    assert out.tolist() == [0.0, 0.25, 1.0]


def test_full_size_pixel_decoder_is_constructible():
    with torch.device("meta"):
        dec = pixel.PixelDecoder(pixel.PixelDecoderConfig.full_size())
    assert 250e6 < count_parameters(dec) < 350e6


def test_pixel_decoder_gradient():
    assert tiny_pixel_config().depth == 1
    assert grad_pixel_decoder(3) <= 1e-4


# ---------------------------------------------------------------- losses

def test_loss_zero_when_prediction_matches():
    t = torch.rand(2, 8, 8, 3, dtype=torch.float64)
    w = pixel.PixelLossWeights(1.0, 0.5, 0.0)
    total, rec, perc, gan = pixel.pixel_loss(t.clone(), t, w, None, pixel.PerceptualNet().double())
    assert total.item() == rec.item() == perc.item() == gan.item() == 0.0


def test_rec_only_matches_scalar_l1(rng):
    p, t = rng.uniform(size=(2, 4, 4, 3)), rng.uniform(size=(2, 4, 4, 3))
    w = pixel.PixelLossWeights(rec=2.0, perc=0.0, gan=0.0)
    total, *_ = pixel.pixel_loss(torch.as_tensor(p), torch.as_tensor(t), w)
    flat_p, flat_t = p.ravel().tolist(), t.ravel().tolist()
    ref = 2.0 * sum(abs(a - b) for a, b in zip(flat_p, flat_t)) / len(flat_p)
    assert abs(total.item() - ref) <= 1e-12


def test_loss_weights_validated():
    with pytest.raises(ConfigError):
        pixel.PixelLossWeights(0.0, 0.0, 0.0)
    with pytest.raises(ConfigError):
        pixel.PixelLossWeights(1.0, -0.1, 0.0)


def test_loss_components_signs_and_errors(gen):
    disc = pixel.PatchDiscriminator(width=8).double()
    perc = pixel.PerceptualNet(channels=(4, 4, 4, 4)).double()
    p = torch.rand(2, 16, 16, 3, generator=gen, dtype=torch.float64)
    t = torch.rand(2, 16, 16, 3, generator=gen, dtype=torch.float64)
    total, rec, pc, gan = pixel.pixel_loss(p, t, pixel.PixelLossWeights(), disc, perc)
    assert rec.item() > 0 and pc.item() > 0 and torch.isfinite(total)
    assert pixel.discriminator_loss(disc, t, p).item() >= 0
    with pytest.raises(NumericError):
        pixel.pixel_loss(p * float("nan"), t, pixel.PixelLossWeights())
    with pytest.raises(ShapeError):
        pixel.pixel_loss(p[:, :8], t, pixel.PixelLossWeights())


def test_pixel_loss_gradients():
    assert grad_pixel_losses(3) <= 1e-4


def test_critic_gets_no_generator_gradient_and_vice_versa():
    dec = pixel.PixelDecoder(_cfg())
    trainer = pixel.PixelTrainer(dec, pixel.PixelTrainConfig(gan_start=0, steps=2), seed=0, stage="t")
    disc_before = [p.detach().clone() for p in trainer.disc.parameters()]
    feats = torch.randn(2, 4, 4, 32)
    img = torch.rand(2, 16, 16, 3)
    # generator step alone must not move the critic
    trainer.disc.requires_grad_(False)
    total, *_ = pixel.pixel_loss(dec(feats), img, trainer.tcfg.weights, trainer.disc, trainer.perc)
    total.backward()
    assert all(p.grad is None for p in trainer.disc.parameters())
    assert all(torch.equal(a, b) for a, b in zip(disc_before, trainer.disc.parameters()))
    # critic loss on a generated image leaves decoder grads untouched
    dec.zero_grad(set_to_none=True)
    trainer.disc.requires_grad_(True)
    pixel.discriminator_loss(trainer.disc, img, dec(feats)).backward()
    assert all(p.grad is None for p in dec.parameters())


# ---------------------------------------------------------------- training

def test_stage1_memorizes_ten_images():
    ds = _data()
    tcfg = pixel.PixelTrainConfig(lr=2e-3, warmup=20, steps=600, batch_size=10, lambda_gan=0.0,
                                  sigma_base=0.4, noise_mode="fixed")
    dec, _, history = pixel.train_pixel_stage1(ds.grids, ds.images, _cfg(depth=2), tcfg, seed=0)
    assert history[-1][1] < 0.05
    assert pixel.l1_error(dec, ds.grids, ds.images) < 0.05


def test_stage2_zero_steps_keeps_weights():
    ds = _data()
    fae, _, _ = train_fae(ds.grids, FAEConfig(feature_dim=32, grid_h=4, grid_w=4, latent_dim=8, dec_depth=1,
                                               steps=5, batch_size=5), seed=0)
    tcfg = pixel.PixelTrainConfig(steps=5, batch_size=5)
    _, b1, _ = pixel.train_pixel_stage1(ds.grids, ds.images, _cfg(), tcfg, seed=0, mean_norm=9.0)
    _, b2, hist = pixel.finetune_pixel_stage2(b1, fae, ds.grids, ds.images, pixel.PixelTrainConfig(steps=0))
    assert hist == []
    for k, v in b1.params.items():
        assert np.array_equal(v, b2.params[k])


def test_stage2_rejects_layout_mismatch():
    ds = _data()
    tcfg = pixel.PixelTrainConfig(steps=1, batch_size=5)
    _, b1, _ = pixel.train_pixel_stage1(ds.grids, ds.images, _cfg(), tcfg, seed=0, mean_norm=9.0)
    other = FAEConfig(feature_dim=16, grid_h=4, grid_w=4, latent_dim=4, dec_depth=1)
    from fae.autoencoder import build_fae
    with pytest.raises(ConfigError):
        pixel.finetune_pixel_stage2(b1, build_fae(other), ds.grids[..., :16], ds.images, tcfg)
    fae = build_fae(FAEConfig(feature_dim=32, grid_h=4, grid_w=4, latent_dim=4, dec_depth=1))
    with pytest.raises(ConfigError):
        pixel.finetune_pixel_stage2(b1, fae, ds.grids, np.zeros((10, 32, 32, 3)), tcfg)


def test_stage1_is_deterministic():
    ds = _data()
    tcfg = pixel.PixelTrainConfig(steps=6, batch_size=4, gan_start=2)
    runs = [pixel.train_pixel_stage1(ds.grids, ds.images, _cfg(), tcfg, seed=5, mean_norm=9.0)[1]
            for _ in range(2)]
    assert encode_checkpoint(runs[0]) == encode_checkpoint(runs[1])
