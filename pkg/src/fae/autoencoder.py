"""Feature autoencoder: single-attention encoder, transformer feature decoder, VAE loss."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, NumericError, ShapeError, TrainingError, UsageError
from .formats import CheckpointBundle
from .nn import Attention, AttentionConfig, Block, BlockConfig, grid_positions, make_norm
from .runtime import MetricsLog, cosine_with_warmup, make_adamw, numpy_rng, seeded, torch_generator
from .state import bundle_from_model, config_to_strings, load_model_params, rng_blob

log = logging.getLogger("fae")

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0
ENCODER_KINDS = ("single_attention", "linear", "transformer_4", "transformer_6")


@dataclass
class EncoderConfig:
    input_dim: int = 96
    latent_dim: int = 16
    kind: str = "single_attention"
    num_heads: int = 4
    head_dim: int = 64
    depth: int = 1
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise UsageError(f"unknown encoder kind {self.kind!r}; choose from {ENCODER_KINDS}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.kind == "single_attention":
            self.depth = 1
        elif self.kind == "linear":
            self.depth = 0
        else:
            self.depth = int(self.kind.split("_")[1])

    @property
    def output_dim(self) -> int:
        return 2 * self.latent_dim

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.input_dim, self.num_heads, self.head_dim, self.input_dim, merged_qkv=True)

    @classmethod
    def full_size(cls) -> "EncoderConfig":
        return cls(input_dim=1536, latent_dim=32, num_heads=24, head_dim=256)


def encoder_variant(kind: str, input_dim: int = 96, latent_dim: int = 16, **kw) -> EncoderConfig:
    """Encoder ablation variants sharing one latent width.

    ``single_attention``: one (wide-head) attention layer + linear head.
    ``linear``: a single affine map per patch.
    ``transformer_k`` (k in {4, 6}): k full pre-norm blocks + linear head.
    """
    if kind not in ENCODER_KINDS:
        raise UsageError(f"unknown encoder kind {kind!r}; choose from {ENCODER_KINDS}")
    if kind.startswith("transformer") and "num_heads" not in kw:
        kw["num_heads"] = 4
        kw["head_dim"] = input_dim // 4
    return EncoderConfig(input_dim=input_dim, latent_dim=latent_dim, kind=kind, **kw)


@dataclass
class LatentPosterior:
    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ShapeError("posterior mean and logvar shapes differ")


def _clamp_logvar(lv):
    return lv.clamp(LOGVAR_MIN, LOGVAR_MAX)


class FeatureEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.input_dim
        if cfg.kind == "single_attention":
            self.norm = make_norm(D, use_rmsnorm=False)
            self.attn = Attention(cfg.attention)
        elif cfg.kind != "linear":
            bc = BlockConfig(D, cfg.num_heads, cfg.mlp_ratio, use_rope=False)
            self.blocks = nn.ModuleList(Block(bc) for _ in range(cfg.depth))
        self.head = nn.Linear(D, cfg.output_dim)

    def forward(self, x) -> LatentPosterior:
        if x.shape[-1] != self.cfg.input_dim:
            raise ShapeError(f"encoder expects feature dim {self.cfg.input_dim}, got {x.shape[-1]}")
        if self.cfg.kind == "single_attention":
            x = x + self.attn(self.norm(x))
        elif self.cfg.kind != "linear":
            for blk in self.blocks:
                x = blk(x)
        mean, logvar = self.head(x).chunk(2, dim=-1)
        return LatentPosterior(mean, _clamp_logvar(logvar))


def encode(x, encoder: FeatureEncoder) -> LatentPosterior:
    return encoder(x)


def reparameterize(post: LatentPosterior, noise: torch.Tensor | None) -> torch.Tensor:
    """z = mean + exp(logvar / 2) * noise; ``noise=None`` returns the mean."""
    if noise is None:
        return post.mean
    if noise.shape != post.mean.shape:
        raise ShapeError(f"noise {tuple(noise.shape)} does not match posterior {tuple(post.mean.shape)}")
    return post.mean + torch.exp(0.5 * post.logvar) * noise


@dataclass
class FeatureDecoderConfig:
    latent_dim: int = 16
    hidden_dim: int = 96
    output_dim: int = 96
    depth: int = 6
    num_heads: int = 4
    mlp_ratio: float = 4.0
    use_rope: bool = True
    use_rmsnorm: bool = True
    use_swiglu: bool = True

    def __post_init__(self):
        if self.hidden_dim != self.output_dim:
            raise ConfigError("feature decoder hidden_dim must equal the teacher feature_dim")

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(self.hidden_dim, self.num_heads, self.mlp_ratio, self.use_swiglu,
                           self.use_rmsnorm, self.use_rope)

    @classmethod
    def full_size(cls) -> "FeatureDecoderConfig":
        return cls(latent_dim=32, hidden_dim=1536, output_dim=1536, depth=6, num_heads=24)


class FeatureDecoder(nn.Module):
    """z -> linear up-projection -> ``depth`` pre-norm blocks -> linear to teacher width."""

    def __init__(self, cfg: FeatureDecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.inp = nn.Linear(cfg.latent_dim, cfg.hidden_dim)
        self.blocks = nn.ModuleList(Block(cfg.block) for _ in range(cfg.depth))
        self.out = nn.Linear(cfg.hidden_dim, cfg.output_dim)

    def forward(self, z, positions=None):
        if z.shape[-1] != self.cfg.latent_dim:
            raise ShapeError(f"decoder expects latent dim {self.cfg.latent_dim}, got {z.shape[-1]}")
        h = self.inp(z)
        for blk in self.blocks:
            h = blk(h, positions)
        return self.out(h)


def decode_features(z, decoder: FeatureDecoder, positions=None):
    return decoder(z, positions)


def gaussian_kl(mean, logvar):
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over the last dim."""
    # expm1(l) - l >= 0 survives rounding; exp(l) - 1 - l does not for tiny l
    return 0.5 * (mean.pow(2) + torch.expm1(logvar) - logvar).sum(-1)


def vae_loss(x, x_hat, post: LatentPosterior, beta: float):
    """(total, recon, kl), each averaged over patches (and batch).

    recon: squared L2 distance per patch; kl: closed-form KL(q || N(0, I)) per patch.
    """
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    if x.shape != x_hat.shape:
        raise ShapeError(f"x {tuple(x.shape)} vs x_hat {tuple(x_hat.shape)}")
    for name, t in (("x", x), ("x_hat", x_hat), ("mean", post.mean), ("logvar", post.logvar)):
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite values in {name}")
    recon = (x_hat - x).pow(2).sum(-1).mean()
    kl = gaussian_kl(post.mean, post.logvar).mean()
    return recon + beta * kl, recon, kl


@dataclass
class FAEConfig:
    """Architecture + optimisation settings for the feature autoencoder."""

    feature_dim: int = 96
    grid_h: int = 8
    grid_w: int = 8
    latent_dim: int = 16
    encoder_kind: str = "single_attention"
    enc_heads: int = 4
    enc_head_dim: int = 64
    dec_depth: int = 6
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    beta: float = 1e-4
    lr: float = 1e-3
    warmup: int = 100
    steps: int = 2000
    batch_size: int = 16
    weight_decay: float = 0.0
    min_lr_ratio: float = 0.0
    snapshot_every: int = 100

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.encoder_kind!r}; choose from {ENCODER_KINDS}")
        if self.latent_dim < 1 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("latent_dim and batch_size must be >= 1, steps >= 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")

    def encoder_config(self) -> EncoderConfig:
        kw = {}
        if self.encoder_kind == "single_attention":
            kw = dict(num_heads=self.enc_heads, head_dim=self.enc_head_dim)
        return encoder_variant(self.encoder_kind, self.feature_dim, self.latent_dim, mlp_ratio=self.mlp_ratio, **kw)

    def decoder_config(self) -> FeatureDecoderConfig:
        return FeatureDecoderConfig(self.latent_dim, self.feature_dim, self.feature_dim, self.dec_depth,
                                    self.dec_heads, self.mlp_ratio)


class FeatureAutoencoder(nn.Module):
    def __init__(self, cfg: FAEConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = FeatureEncoder(cfg.encoder_config())
        self.decoder = FeatureDecoder(cfg.decoder_config())
        self.register_buffer("positions", grid_positions(cfg.grid_h, cfg.grid_w), persistent=False)
        # per-channel latent statistics for generator training
        self.register_buffer("latent_mean", torch.zeros(cfg.latent_dim))
        self.register_buffer("latent_std", torch.ones(cfg.latent_dim))

    @staticmethod
    def _tokens(x):
        if x.dim() == 4:
            return x.reshape(x.shape[0], -1, x.shape[-1]), x.shape[1:3]
        return x, None

    def encode(self, x) -> LatentPosterior:
        return self.encoder(self._tokens(x)[0])

    def decode(self, z):
        tokens, grid = self._tokens(z)
        out = self.decoder(tokens, self.positions.to(tokens.dtype))
        return out if grid is None else out.reshape(z.shape[0], *grid, -1)

    def forward(self, x, noise=None):
        """Returns (x_hat, posterior, z). ``noise=None`` decodes the posterior mean."""
        tokens, grid = self._tokens(x)
        post = self.encoder(tokens)
        z = reparameterize(post, noise)
        x_hat = self.decoder(z, self.positions.to(tokens.dtype))
        if grid is not None:
            x_hat = x_hat.reshape(x.shape)
        return x_hat, post, z

    @torch.no_grad()
    def latents(self, grids, batch_size=256, standardized=False) -> np.ndarray:
        """Posterior means for (N, H, W, D) grids as an (N, H, W, d_z) array."""
        out = []
        dtype = next(self.parameters()).dtype
        for i in range(0, len(grids), batch_size):
            x = torch.as_tensor(np.asarray(grids[i:i + batch_size]), dtype=dtype)
            mean = self.encode(x).mean
            if standardized:
                mean = (mean - self.latent_mean) / self.latent_std
            out.append(mean.reshape(len(x), self.cfg.grid_h, self.cfg.grid_w, -1).numpy())
        return np.concatenate(out) if out else np.zeros((0, self.cfg.grid_h, self.cfg.grid_w, self.cfg.latent_dim))

    @torch.no_grad()
    def reconstruct(self, grids, batch_size=256) -> np.ndarray:
        out = []
        dtype = next(self.parameters()).dtype
        for i in range(0, len(grids), batch_size):
            x = torch.as_tensor(np.asarray(grids[i:i + batch_size]), dtype=dtype)
            out.append(self(x)[0].numpy())
        return np.concatenate(out) if out else np.zeros_like(np.asarray(grids))

    @torch.no_grad()
    def decode_latents(self, z, standardized=False, batch_size=256) -> np.ndarray:
        dtype = next(self.parameters()).dtype
        out = []
        for i in range(0, len(z), batch_size):
            zz = torch.as_tensor(np.asarray(z[i:i + batch_size]), dtype=dtype)
            if standardized:
                zz = zz * self.latent_std + self.latent_mean
            out.append(self.decode(zz).numpy())
        return np.concatenate(out) if out else np.zeros((0, self.cfg.grid_h, self.cfg.grid_w, self.cfg.feature_dim))


def build_fae(cfg: FAEConfig, seed: int = 0) -> FeatureAutoencoder:
    with seeded(seed, "fae", "init"):
        return FeatureAutoencoder(cfg)


def mean_cosine(x: np.ndarray, y: np.ndarray) -> float:
    """Mean per-patch cosine similarity between two (…, D) arrays."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    num = (x * y).sum(-1)
    den = np.linalg.norm(x, axis=-1) * np.linalg.norm(y, axis=-1)
    return float((num / np.maximum(den, 1e-12)).mean())


def _snapshot(model, opt, sched_step, cfg, seed, kind="fae"):
    return bundle_from_model(kind, model, config_to_strings(cfg, seed=seed), optimizer=opt, step=sched_step)


def train_fae(grids: np.ndarray, cfg: FAEConfig, seed: int = 0, log_to: MetricsLog | None = None,
              model: FeatureAutoencoder | None = None, dtype=torch.float32):
    """Stage Ia: fit encoder + feature decoder on frozen teacher grids.

    AdamW (0.9, 0.999) with linear warmup and cosine decay. Returns
    ``(model, bundle, history)`` where history rows are (step, recon, kl, total).
    On divergence raises TrainingError carrying the last healthy snapshot.
    """
    grids = np.asarray(grids)
    if len(grids) == 0:
        raise UsageError("train_fae needs a non-empty dataset")
    if grids.shape[1:] != (cfg.grid_h, cfg.grid_w, cfg.feature_dim):
        raise ShapeError(f"grids {grids.shape[1:]} do not match config "
                         f"{(cfg.grid_h, cfg.grid_w, cfg.feature_dim)}")
    model = model if model is not None else build_fae(cfg, seed)
    model = model.to(dtype)
    opt = make_adamw(model.parameters(), cfg.lr, cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, cosine_with_warmup(cfg.warmup, cfg.steps, cfg.min_lr_ratio))
    order_rng = numpy_rng(seed, "fae", "batches")
    noise_gen = torch_generator(seed, "fae", "posterior")
    data = torch.as_tensor(grids, dtype=dtype)
    history = []
    last_good = _snapshot(model, opt, 0, cfg, seed)
    perm, cursor = order_rng.permutation(len(data)), 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > len(data):
            perm, cursor = order_rng.permutation(len(data)), 0
        idx = perm[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        x = data[torch.as_tensor(idx)]
        tokens = x.reshape(len(idx), -1, cfg.feature_dim)
        post = model.encoder(tokens)
        noise = torch.randn(post.mean.shape, generator=noise_gen, dtype=dtype)
        z = reparameterize(post, noise)
        x_hat = model.decoder(z, model.positions.to(dtype))
        total, recon, kl = vae_loss(tokens, x_hat, post, cfg.beta)
        if not torch.isfinite(total) or total.item() > 1e6:
            raise TrainingError(f"FAE training diverged at step {step} (total={total.item()})",
                                last_good=last_good, step=step)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        sched.step()
        row = (step, recon.item(), kl.item(), total.item())
        history.append(row)
        if log_to is not None:
            log_to.log("fae", step, recon=row[1], kl=row[2], total=row[3])
        if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
            last_good = _snapshot(model, opt, step + 1, cfg, seed)
    set_latent_stats(model, grids)
    bundle = _snapshot(model, opt, cfg.steps, cfg, seed)
    bundle.rng = rng_blob(noise_gen, order_rng)
    return model, bundle, history


@torch.no_grad()
def set_latent_stats(model: FeatureAutoencoder, grids) -> None:
    """Per-channel mean/std of posterior means over a training set, stored in the model."""
    z = model.latents(grids).reshape(-1, model.cfg.latent_dim).astype(np.float64)
    model.latent_mean.copy_(torch.as_tensor(z.mean(0)))
    model.latent_std.copy_(torch.as_tensor(z.std(0) + 1e-6))


def fae_from_bundle(bundle: CheckpointBundle) -> FeatureAutoencoder:
    from .state import config_from_strings

    cfg = config_from_strings(FAEConfig, bundle.config)
    model = FeatureAutoencoder(cfg)
    load_model_params(model, bundle.params)
    return model
