"""Invariant suite: gradient checks, interpolant identities, KL oracle, sampler
oracles and file-format round-trips. Used by ``fae verify`` and the tests."""
from __future__ import annotations

import io
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import autoencoder as ae
from . import flow
from . import pixel
from .errors import FormatError
from .formats import CheckpointBundle, decode_checkpoint, decode_embeddings, encode_checkpoint, encode_embeddings
from .nn import Block, BlockConfig, grad_check, grad_check_params, grid_positions, rmsnorm, swiglu

log = logging.getLogger("fae")

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str = ""
    seconds: float = 0.0


def randomize_(module: torch.nn.Module, seed: int, scale: float = 0.3) -> torch.nn.Module:
    """Overwrite every parameter with N(0, scale^2) draws so zero-initialised paths get exercised."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


def _randn(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


# --------------------------------------------------------------------------
# gradient cases: each returns the worst relative error at one random point
# --------------------------------------------------------------------------

def grad_rmsnorm(seed, max_coords=None):
    g = torch.Generator().manual_seed(seed)
    return grad_check(lambda x, w: rmsnorm(x, w), [_randn(g, 3, 8), 1 + 0.3 * _randn(g, 8)],
                      max_coords=max_coords, seed=seed)


def grad_swiglu(seed, max_coords=None):
    g = torch.Generator().manual_seed(seed)
    return grad_check(swiglu, [_randn(g, 3, 8), 0.4 * _randn(g, 16, 8), 0.4 * _randn(g, 16, 8),
                               0.4 * _randn(g, 8, 16)], max_coords=max_coords, seed=seed)


def grad_rope_block(seed, max_coords=24):
    g = torch.Generator().manual_seed(seed)
    blk = randomize_(Block(BlockConfig(16, 2, use_rope=True)).double(), seed)
    pos = grid_positions(2, 3)
    x = _randn(g, 2, 6, 16)
    e1 = grad_check(lambda x: blk(x, pos), [x], max_coords=max_coords, seed=seed)
    e2 = grad_check_params(blk, lambda: blk(x, pos), max_coords=max_coords, seed=seed)
    return max(e1, e2)


def grad_encoder(seed, max_coords=24):
    g = torch.Generator().manual_seed(seed)
    enc = randomize_(ae.FeatureEncoder(ae.EncoderConfig(input_dim=16, latent_dim=4, num_heads=2,
                                                         head_dim=8)).double(), seed)
    x = _randn(g, 2, 6, 16)

    def fn(x):
        post = enc(x)
        return torch.cat([post.mean, post.logvar], -1)

    return max(grad_check(fn, [x], max_coords=max_coords, seed=seed),
               grad_check_params(enc, lambda: fn(x), max_coords=max_coords, seed=seed))


def grad_feature_decoder(seed, max_coords=24):
    g = torch.Generator().manual_seed(seed)
    dec = randomize_(ae.FeatureDecoder(ae.FeatureDecoderConfig(4, 16, 16, depth=1, num_heads=2)).double(), seed)
    pos = grid_positions(2, 3)
    z = _randn(g, 2, 6, 4)
    return max(grad_check(lambda z: dec(z, pos), [z], max_coords=max_coords, seed=seed),
               grad_check_params(dec, lambda: dec(z, pos), max_coords=max_coords, seed=seed))


def tiny_pixel_config():
    return pixel.PixelDecoderConfig(feature_dim=8, grid_h=2, grid_w=2, depth=1, hidden_dim=32, num_heads=2,
                                    patch_size=2, image_size=4)


def grad_pixel_decoder(seed, max_coords=24):
    g = torch.Generator().manual_seed(seed)
    dec = randomize_(pixel.PixelDecoder(tiny_pixel_config()).double(), seed)
    f = _randn(g, 2, 2, 2, 8)
    return max(grad_check(dec, [f], max_coords=max_coords, seed=seed),
               grad_check_params(dec, lambda: dec(f), max_coords=max_coords, seed=seed))


def tiny_ldm_config(**kw):
    base = dict(latent_dim=3, grid_h=2, grid_w=2, depth=1, hidden_dim=16, num_heads=2, num_classes=3,
                freq_dim=16, cond_dropout_prob=0.0)
    base.update(kw)
    return flow.GenModelConfig(**base)


def grad_ldm(seed, max_coords=24):
    g = torch.Generator().manual_seed(seed)
    model = randomize_(flow.LatentDiT(tiny_ldm_config()).double(), seed)
    x = _randn(g, 2, 2, 2, 3)
    t = torch.rand(2, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 3])
    return max(grad_check(lambda x: model(x, t, y), [x], max_coords=max_coords, seed=seed),
               grad_check_params(model, lambda: model(x, t, y), max_coords=max_coords, seed=seed))


def grad_vae_loss(seed, max_coords=None):
    g = torch.Generator().manual_seed(seed)
    x = _randn(g, 2, 5, 6)

    def fn(x_hat, mean, logvar):
        return ae.vae_loss(x, x_hat, ae.LatentPosterior(mean, logvar), beta=0.3)[0]

    return grad_check(fn, [_randn(g, 2, 5, 6), _randn(g, 2, 5, 3), 0.5 * _randn(g, 2, 5, 3)],
                      max_coords=max_coords, seed=seed)


def grad_fm_loss(seed, max_coords=24):
    g = torch.Generator().manual_seed(seed)
    model = randomize_(flow.LatentDiT(tiny_ldm_config()).double(), seed)
    x0 = _randn(g, 3, 2, 2, 3)
    eps = _randn(g, 3, 2, 2, 3)
    t = torch.rand(3, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 2])
    return grad_check_params(model, lambda: flow.fm_loss(model, x0, y, t=t, eps=eps),
                             max_coords=max_coords, seed=seed)


def grad_pixel_losses(seed, max_coords=24):
    g = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        disc = randomize_(pixel.PatchDiscriminator(width=4).double(), seed, scale=0.2)
    perc = pixel.PerceptualNet(channels=(4, 4, 4, 4)).double()
    target = torch.rand(2, 8, 8, 3, generator=g, dtype=torch.float64)
    pred = torch.rand(2, 8, 8, 3, generator=g, dtype=torch.float64)
    w = pixel.PixelLossWeights(1.0, 0.5, 0.1)
    e1 = grad_check(lambda p: pixel.pixel_loss(p, target, w, disc, perc)[0], [pred],
                    max_coords=max_coords, seed=seed)
    e2 = grad_check_params(disc, lambda: pixel.discriminator_loss(disc, target, pred),
                           max_coords=max_coords, seed=seed)
    return max(e1, e2)


GRADIENT_CASES: dict[str, Callable] = {
    "rmsnorm": grad_rmsnorm,
    "swiglu": grad_swiglu,
    "rope_attention_block": grad_rope_block,
    "encoder": grad_encoder,
    "feature_decoder": grad_feature_decoder,
    "pixel_decoder": grad_pixel_decoder,
    "ldm": grad_ldm,
    "vae_loss": grad_vae_loss,
    "fm_loss": grad_fm_loss,
    "pixel_losses": grad_pixel_losses,
}


# --------------------------------------------------------------------------
# other invariants
# --------------------------------------------------------------------------

def interpolant_identity_error(n: int = 10_000, seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    x0, eps = _randn(g, n, 4), _randn(g, n, 4)
    t = torch.rand(n, generator=g, dtype=torch.float64).clamp_min(1e-6)
    x_t, v = flow.interpolate(x0, eps, t)
    x0_hat, eps_hat, _ = flow.velocity_to_estimates(v, x_t, t)
    return max((x0_hat - x0).abs().max().item(), (eps_hat - eps).abs().max().item(),
               (x_t - t[:, None] * v - x0).abs().max().item())


def kl_monte_carlo(mean: np.ndarray, logvar: np.ndarray, draws: int, rng: np.random.Generator,
                   chunk: int = 250_000) -> float:
    """E_q[log q(z) - log N(z; 0, I)] from ``draws`` samples of q."""
    std = np.exp(0.5 * logvar)
    total, done = 0.0, 0
    while done < draws:
        m = min(chunk, draws - done)
        e = rng.standard_normal((m, len(mean)))
        z = mean + std * e
        log_q = -0.5 * (e ** 2 + logvar + math.log(2 * math.pi)).sum(1)
        log_p = -0.5 * (z ** 2 + math.log(2 * math.pi)).sum(1)
        total += (log_q - log_p).sum()
        done += m
    return total / draws


def kl_oracle_worst(posteriors: int = 20, draws: int = 1_000_000, dim: int = 4, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(posteriors):
        mean = rng.normal(0, 1, dim)
        logvar = rng.uniform(-2, 1, dim)
        closed = ae.gaussian_kl(torch.as_tensor(mean), torch.as_tensor(logvar)).item()
        mc = kl_monte_carlo(mean, logvar, draws, rng)
        worst = max(worst, abs(mc - closed) / closed)
    return worst


def gaussian_sampler_stats(mode: str, n: int = 10_000, dim: int = 6, steps: int = 250, seed: int = 0):
    """(per-coordinate RMS of the sample mean, relative Frobenius error of the covariance)."""
    fn = flow.sample_ode if mode == "ode" else flow.sample_sde
    x = fn(flow.gaussian_oracle_velocity, n, (dim,), steps, seed=seed, dtype=torch.float64).numpy()
    mean_rms = float(np.sqrt((x.mean(0) ** 2).mean()))
    cov = np.cov(x, rowvar=False)
    cov_err = float(np.linalg.norm(cov - np.eye(dim)) / np.linalg.norm(np.eye(dim)))
    return mean_rms, cov_err


def zero_diffusion_matches_ode(seed: int = 0) -> bool:
    model = randomize_(flow.LatentDiT(tiny_ldm_config()), seed)
    y = torch.tensor([0, 1, 2, 0])
    a = flow.sample_ode(model, 4, (2, 2, 3), 20, labels=y, seed=seed)
    b = flow.sample_sde(model, 4, (2, 2, 3), 20, labels=y, seed=seed, interp=flow.Interpolant(0.0))
    return torch.equal(a, b)


def unit_guidance_matches_unguided(seed: int = 0) -> bool:
    model = randomize_(flow.LatentDiT(tiny_ldm_config()), seed)
    y = torch.tensor([0, 1, 2, 1])
    ones = flow.GuidanceSchedule([(0.0, 0.5, 1.0), (0.5, 1.0, 1.0)])
    same = True
    for fn in (flow.sample_ode, flow.sample_sde):
        a = fn(model, 4, (2, 2, 3), 20, labels=y, seed=seed)
        b = fn(model, 4, (2, 2, 3), 20, labels=y, seed=seed, guidance=ones)
        same &= torch.equal(a, b)
    return same


def format_roundtrips(seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((3, 2, 2, 5)).astype(np.float32)
    buf = encode_embeddings(vals, ["a", "b", "c"], [0, 1, 2])
    back = decode_embeddings(buf)
    ok = back.values.tobytes() == vals.tobytes() and encode_embeddings(back.values, back.image_ids,
                                                                       back.labels) == buf
    bundle = CheckpointBundle("fae", {"a": "1"}, {"w": rng.standard_normal((2, 3))}, {}, {}, b"{}", 7)
    raw = encode_checkpoint(bundle)
    ok &= encode_checkpoint(decode_checkpoint(raw)) == raw
    for blob, decode in ((buf, decode_embeddings), (raw, decode_checkpoint)):
        bad = bytearray(blob)
        bad[len(bad) // 2] ^= 0xFF
        try:
            decode(bytes(bad))
            ok = False
        except FormatError:
            pass
    return bool(ok)


def run_suite(points: int = 5, quick: bool = False) -> list[CheckResult]:
    """Run every invariant; ``quick`` shrinks Monte-Carlo sizes (for smoke runs)."""
    results = []

    def record(name, fn, ok_fn, detail=""):
        t0 = time.perf_counter()
        value = fn()
        results.append(CheckResult(name, bool(ok_fn(value)), float(value), detail, time.perf_counter() - t0))
        log.info("%-32s %s (%.3g)", name, "pass" if results[-1].passed else "FAIL", value)

    for name, case in GRADIENT_CASES.items():
        record(f"grad/{name}", lambda case=case: max(case(1000 + k) for k in range(points)),
               lambda v: v <= GRAD_TOL, f"max rel err over {points} points")
    record("interpolant/inverse", interpolant_identity_error, lambda v: v <= 1e-12)
    ts = torch.linspace(0, 1, 101, dtype=torch.float64)
    record("shift/identity", lambda: (flow.shift_time(ts, 1.0) - ts).abs().max().item(), lambda v: v == 0)
    record("shift/monotone", lambda: float(min((flow.shift_time(ts, s).diff() > 0).all().item()
                                               for s in (0.2, 0.5, 2.0, 4.0))), lambda v: v == 1)
    draws = 100_000 if quick else 1_000_000
    record("kl/monte_carlo", lambda: kl_oracle_worst(draws=draws), lambda v: v <= 0.01 if not quick else v <= 0.03)
    n = 2_000 if quick else 10_000
    for mode in ("ode", "sde"):
        stats = {}
        record(f"sampler/{mode}_mean", lambda mode=mode: stats.setdefault("s", gaussian_sampler_stats(mode, n))[0],
               lambda v: v <= (0.02 if not quick else 0.05))
        record(f"sampler/{mode}_cov", lambda: stats["s"][1], lambda v: v <= (0.05 if not quick else 0.1))
    record("sampler/zero_diffusion", lambda: float(zero_diffusion_matches_ode()), lambda v: v == 1)
    record("cfg/unit_scale", lambda: float(unit_guidance_matches_unguided()), lambda v: v == 1)
    record("formats/roundtrip", lambda: float(format_roundtrips()), lambda v: v == 1)
    return results


def report(results: list[CheckResult], stream=None) -> bool:
    stream = stream or io.StringIO()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<32} {r.value:.4g}  ({r.seconds:.1f}s) {r.detail}",
              file=stream)
    return all(r.passed for r in results)
