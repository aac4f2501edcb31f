"""Pixel decoder: features -> RGB, trained first on noisy teacher features, then on x_hat."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError, TrainingError, UsageError
from .formats import CheckpointBundle
from .nn import Block, BlockConfig, grid_positions, make_norm
from .runtime import MetricsLog, cosine_with_warmup, make_adamw, numpy_rng, seeded, torch_generator
from .state import bundle_from_model, config_from_strings, config_to_strings, load_model_params, rng_blob

log = logging.getLogger("fae")

# Mean per-patch L2 norm of the default synthetic teacher (8x8x96, seed 0) over
# the default 10-class training manifest; the norm that sigma_base is calibrated to.
REFERENCE_NORM = 9.80


@dataclass
class PixelDecoderConfig:
    feature_dim: int = 96
    grid_h: int = 8
    grid_w: int = 8
    depth: int = 4
    hidden_dim: int = 128
    num_heads: int = 4
    patch_size: int = 4
    image_size: int = 32
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.grid_h * self.patch_size != self.image_size or self.grid_w * self.patch_size != self.image_size:
            raise ConfigError(f"grid {self.grid_h}x{self.grid_w} x patch {self.patch_size} "
                              f"!= image size {self.image_size}")

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(self.hidden_dim, self.num_heads, self.mlp_ratio)

    @classmethod
    def full_size(cls) -> "PixelDecoderConfig":
        return cls(feature_dim=1536, grid_h=16, grid_w=16, depth=24, hidden_dim=1024, num_heads=16,
                   patch_size=16, image_size=256)


@dataclass
class NoiseStageConfig:
    sigma_base: float = 0.4
    norm_scale_mode: str = "fixed"      # fixed | scaled
    reference_norm: float = REFERENCE_NORM

    def __post_init__(self):
        if self.sigma_base < 0:
            raise ConfigError("sigma_base must be >= 0")
        if self.norm_scale_mode not in ("fixed", "scaled"):
            raise ConfigError(f"norm_scale_mode must be fixed|scaled, got {self.norm_scale_mode!r}")


@dataclass
class PixelLossWeights:
    rec: float = 1.0
    perc: float = 0.5
    gan: float = 0.1

    def __post_init__(self):
        if min(self.rec, self.perc, self.gan) < 0:
            raise ConfigError("pixel loss weights must be >= 0")
        if max(self.rec, self.perc, self.gan) == 0:
            raise ConfigError("at least one pixel loss weight must be > 0")


def noise_sigma(cfg: NoiseStageConfig, mean_norm=None) -> float:
    """Effective sigma; ``mean_norm`` may be a float or a TeacherSpec carrying one."""
    mean_norm = getattr(mean_norm, "mean_norm", mean_norm)
    if cfg.norm_scale_mode == "fixed":
        return cfg.sigma_base
    if mean_norm is None:
        raise ConfigError("scaled noise mode requires the teacher's mean_norm")
    return cfg.sigma_base * mean_norm / cfg.reference_norm


def inject_noise(x, cfg: NoiseStageConfig, mean_norm=None, seed: int | None = None,
                 generator: torch.Generator | None = None):
    """x + N(0, sigma^2 I). Works on numpy arrays or tensors; deterministic per seed."""
    sigma = noise_sigma(cfg, mean_norm)
    as_numpy = isinstance(x, np.ndarray)
    t = torch.as_tensor(x)
    if sigma == 0:
        return x.copy() if as_numpy else t.clone()
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    eps = torch.randn(t.shape, generator=generator, dtype=t.dtype)
    out = t + sigma * eps
    return out.numpy() if as_numpy else out


class PixelDecoder(nn.Module):
    """Feature grid -> token blocks -> per-patch RGB -> (B, S, S, 3)."""

    def __init__(self, cfg: PixelDecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.inp = nn.Linear(cfg.feature_dim, cfg.hidden_dim)
        self.blocks = nn.ModuleList(Block(cfg.block) for _ in range(cfg.depth))
        self.norm = make_norm(cfg.hidden_dim, True)
        self.out = nn.Linear(cfg.hidden_dim, cfg.patch_size * cfg.patch_size * 3)
        self.register_buffer("positions", grid_positions(cfg.grid_h, cfg.grid_w), persistent=False)

    def forward(self, feats):
        c = self.cfg
        if feats.shape[-3:] != (c.grid_h, c.grid_w, c.feature_dim):
            raise ShapeError(f"pixel decoder expects (…, {c.grid_h}, {c.grid_w}, {c.feature_dim}), "
                             f"got {tuple(feats.shape)}")
        squeeze = feats.dim() == 3
        if squeeze:
            feats = feats[None]
        B = feats.shape[0]
        h = self.inp(feats.reshape(B, -1, c.feature_dim))
        pos = self.positions.to(h.dtype)
        for blk in self.blocks:
            h = blk(h, pos)
        p = c.patch_size
        img = self.out(self.norm(h)).reshape(B, c.grid_h, c.grid_w, p, p, 3)
        img = img.permute(0, 1, 3, 2, 4, 5).reshape(B, c.image_size, c.image_size, 3)
        return img[0] if squeeze else img


def decode_pixels(features, decoder: PixelDecoder):
    return decoder(features)


def export_image(img) -> np.ndarray:
    """Clamp a decoded image to [0, 1] for export."""
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)


def _to_nchw(img):
    return img.permute(0, 3, 1, 2)


class PerceptualNet(nn.Module):
    """Frozen random 4-layer strided convnet; features from every layer."""

    def __init__(self, channels=(16, 32, 64, 64), seed: int = 1234):
        super().__init__()
        with seeded(seed, "perceptual"):
            layers, cin = [], 3
            for cout in channels:
                layers.append(nn.Conv2d(cin, cout, 3, stride=2, padding=1))
                cin = cout
            self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, img):
        x = _to_nchw(img) * 2 - 1
        feats = []
        for conv in self.layers:
            x = F.silu(conv(x))
            feats.append(x)
        return feats


class PatchDiscriminator(nn.Module):
    """4-conv patch critic producing a map of real/fake logits."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv2d(3, width, 4, stride=2, padding=1),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.Conv2d(2 * width, 2 * width, 3, stride=1, padding=1),
            nn.Conv2d(2 * width, 1, 3, stride=1, padding=1),
        ])

    def forward(self, img):
        x = _to_nchw(img) * 2 - 1
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.silu(x)
        return x


def perceptual_loss(pred, target, perc_net: PerceptualNet):
    return sum(F.mse_loss(a, b) for a, b in zip(perc_net(pred), perc_net(target)))


def pixel_loss(pred, target, w: PixelLossWeights, disc: PatchDiscriminator | None = None,
               perc_net: PerceptualNet | None = None, gan_active: bool = True):
    """(total, rec, perc, gan): L1 + random-convnet feature L2 + hinge generator loss."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if not (torch.isfinite(pred).all() and torch.isfinite(target).all()):
        raise NumericError("non-finite image passed to pixel_loss")
    zero = pred.new_zeros(())
    rec = (pred - target).abs().mean()
    perc = perceptual_loss(pred, target, perc_net) if (w.perc > 0 and perc_net is not None) else zero
    gan = -disc(pred).mean() if (w.gan > 0 and gan_active and disc is not None) else zero
    total = w.rec * rec + w.perc * perc + w.gan * gan
    return total, rec, perc, gan


def discriminator_loss(disc: PatchDiscriminator, real, fake):
    """Hinge critic loss; ``fake`` is detached so no gradient reaches the generator."""
    return F.relu(1.0 - disc(real)).mean() + F.relu(1.0 + disc(fake.detach())).mean()


@dataclass
class PixelTrainConfig:
    lr: float = 5e-4
    disc_lr: float = 2e-4
    warmup: int = 50
    steps: int = 800
    batch_size: int = 16
    weight_decay: float = 0.0
    lambda_rec: float = 1.0
    lambda_perc: float = 0.5
    lambda_gan: float = 0.1
    gan_start: int = 400
    sigma_base: float = 0.4
    noise_mode: str = "scaled"
    reference_norm: float = REFERENCE_NORM

    @property
    def weights(self) -> PixelLossWeights:
        return PixelLossWeights(self.lambda_rec, self.lambda_perc, self.lambda_gan)

    @property
    def noise(self) -> NoiseStageConfig:
        return NoiseStageConfig(self.sigma_base, self.noise_mode, self.reference_norm)


class PixelTrainer:
    """Alternating generator (pixel decoder) / critic updates over (features, image) pairs."""

    def __init__(self, decoder: PixelDecoder, tcfg: PixelTrainConfig, seed: int, stage: str):
        self.decoder = decoder
        self.tcfg = tcfg
        self.stage = stage
        self.seed = seed
        dtype = next(decoder.parameters()).dtype
        with seeded(seed, stage, "disc"):
            self.disc = PatchDiscriminator().to(dtype)
        self.perc = PerceptualNet().to(dtype)
        gen_ids = {id(p) for p in decoder.parameters()}
        disc_ids = {id(p) for p in self.disc.parameters()}
        assert not gen_ids & disc_ids, "generator and critic parameter sets must be disjoint"
        self.opt_g = make_adamw(decoder.parameters(), tcfg.lr, tcfg.weight_decay)
        self.opt_d = make_adamw(self.disc.parameters(), tcfg.disc_lr)
        self.sched = torch.optim.lr_scheduler.LambdaLR(self.opt_g, cosine_with_warmup(tcfg.warmup, tcfg.steps))

    def step(self, step, feats, target):
        w = self.tcfg.weights
        gan_on = w.gan > 0 and step >= self.tcfg.gan_start
        self.disc.requires_grad_(False)
        pred = self.decoder(feats)
        total, rec, perc, gan = pixel_loss(pred, target, w, self.disc, self.perc, gan_active=gan_on)
        if not torch.isfinite(total) or total.item() > 1e6:
            raise TrainingError(f"pixel decoder ({self.stage}) diverged at step {step}", step=step)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        self.sched.step()
        d_loss = 0.0
        if gan_on:
            self.disc.requires_grad_(True)
            loss_d = discriminator_loss(self.disc, target, pred)
            self.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            self.opt_d.step()
            d_loss = loss_d.item()
        return dict(total=total.item(), rec=rec.item(), perc=perc.item(), gan=gan.item(), disc=d_loss)


def _pixel_run(decoder, feature_fn, images, tcfg, seed, stage, log_to):
    trainer = PixelTrainer(decoder, tcfg, seed, stage)
    dtype = next(decoder.parameters()).dtype
    order_rng = numpy_rng(seed, stage, "batches")
    noise_gen = torch_generator(seed, stage, "noise")
    images_t = torch.as_tensor(np.asarray(images), dtype=dtype)
    history = []
    perm, cursor = order_rng.permutation(len(images_t)), 0
    bs = min(tcfg.batch_size, len(images_t))
    for step in range(tcfg.steps):
        if cursor + bs > len(images_t):
            perm, cursor = order_rng.permutation(len(images_t)), 0
        idx = perm[cursor:cursor + bs]
        cursor += bs
        feats = feature_fn(idx, noise_gen).to(dtype)
        row = trainer.step(step, feats, images_t[torch.as_tensor(idx)])
        history.append((step, row["rec"], row["perc"], row["gan"], row["total"]))
        if log_to is not None:
            log_to.log(stage, step, **row)
    return trainer, history, (noise_gen, order_rng)


def _bundle(decoder, trainer, cfg, tcfg, seed, stage, extra_cfg=None):
    config = config_to_strings(cfg, seed=seed, stage=stage)
    config.update({f"train.{k}": v for k, v in config_to_strings(tcfg).items()})
    config.update(extra_cfg or {})
    return bundle_from_model("pixel", decoder, config,
                             optimizer=trainer.opt_g if trainer else None,
                             step=tcfg.steps if trainer else 0)


def build_pixel_decoder(cfg: PixelDecoderConfig, seed: int = 0) -> PixelDecoder:
    with seeded(seed, "pixel", "init"):
        return PixelDecoder(cfg)


def train_pixel_stage1(grids, images, cfg: PixelDecoderConfig, tcfg: PixelTrainConfig, seed: int = 0,
                       mean_norm: float | None = None, log_to: MetricsLog | None = None, dtype=torch.float32):
    """Stage Ib: learn x~ = x + eps -> image on frozen teacher grids (noise redrawn every step)."""
    grids = np.asarray(grids)
    if len(grids) == 0 or len(grids) != len(images):
        raise UsageError("stage 1 needs matching, non-empty grids and images")
    decoder = build_pixel_decoder(cfg, seed).to(dtype)
    noise_cfg = tcfg.noise
    x = torch.as_tensor(grids, dtype=dtype)

    def features(idx, gen):
        return inject_noise(x[torch.as_tensor(idx)], noise_cfg, mean_norm, generator=gen)

    trainer, history, rngs = _pixel_run(decoder, features, images, tcfg, seed, "pixel1", log_to)
    extra = {"mean_norm": "none" if mean_norm is None else repr(float(mean_norm))}
    bundle = _bundle(decoder, trainer, cfg, tcfg, seed, "stage1", extra)
    bundle.rng = rng_blob(*rngs)
    return decoder, bundle, history


def pixel_from_bundle(bundle: CheckpointBundle) -> PixelDecoder:
    cfg = config_from_strings(PixelDecoderConfig, bundle.config)
    decoder = PixelDecoder(cfg)
    load_model_params(decoder, bundle.params)
    return decoder


def finetune_pixel_stage2(stage1: CheckpointBundle, fae, grids, images, tcfg: PixelTrainConfig,
                          seed: int = 0, log_to: MetricsLog | None = None):
    """Continue the stage-1 decoder on feature-decoder reconstructions x_hat -> image."""
    decoder = pixel_from_bundle(stage1)
    c, f = decoder.cfg, fae.cfg
    if (c.grid_h, c.grid_w, c.feature_dim) != (f.grid_h, f.grid_w, f.feature_dim):
        raise ConfigError(f"pixel decoder expects {c.grid_h}x{c.grid_w}x{c.feature_dim} features, "
                          f"FAE produces {f.grid_h}x{f.grid_w}x{f.feature_dim}")
    images = np.asarray(images)
    if images.shape[1:3] != (c.image_size, c.image_size):
        raise ConfigError(f"stage-1 decoder renders {c.image_size}px images, data is {images.shape[1:3]}")
    x_hat = torch.as_tensor(fae.reconstruct(np.asarray(grids)))

    def features(idx, gen):
        return x_hat[torch.as_tensor(idx)]

    if tcfg.steps == 0:
        bundle = _bundle(decoder, None, c, tcfg, seed, "stage2")
        return decoder, bundle, []
    trainer, history, rngs = _pixel_run(decoder, features, images, tcfg, seed, "pixel2", log_to)
    bundle = _bundle(decoder, trainer, c, tcfg, seed, "stage2")
    bundle.rng = rng_blob(*rngs)
    return decoder, bundle, history


@torch.no_grad()
def render(decoder: PixelDecoder, grids, batch_size=64) -> np.ndarray:
    dtype = next(decoder.parameters()).dtype
    out = [decoder(torch.as_tensor(np.asarray(grids[i:i + batch_size]), dtype=dtype)).numpy()
           for i in range(0, len(grids), batch_size)]
    c = decoder.cfg
    return np.concatenate(out) if out else np.zeros((0, c.image_size, c.image_size, 3))


def l1_error(decoder: PixelDecoder, grids, images) -> float:
    return float(np.abs(render(decoder, grids) - np.asarray(images)).mean())
