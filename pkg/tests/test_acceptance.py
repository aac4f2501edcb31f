"""Acceptance criteria; each test carries an ``acceptance`` marker and the
terminal summary prints one PASS/FAIL line per criterion."""
import csv
import time

import numpy as np
import pytest
import torch

from fae import flow, pipeline
from fae.autoencoder import (EncoderConfig, FeatureDecoder, FeatureDecoderConfig, FeatureEncoder,
                             fae_from_bundle)
from fae.cli import main
from fae.config import RunConfig
from fae.formats import CheckpointBundle
from fae.nn import count_parameters
from fae.pixel import pixel_from_bundle
from fae.verify import (GRAD_TOL, GRADIENT_CASES, format_roundtrips, gaussian_sampler_stats,
                        interpolant_identity_error, kl_oracle_worst, unit_guidance_matches_unguided,
                        zero_diffusion_matches_ode)

from helpers import TINY_INI, run_tiny_pipeline, tree_digest

acceptance = pytest.mark.acceptance


# ---------------------------------------------------------------- 1

@acceptance(1, "gradient suite: finite differences at 5 points, rel err <= 1e-4, <= 3 min")
def test_gradient_suite(measured):
    t0 = time.perf_counter()
    worst = {name: max(case(1000 + k) for k in range(5)) for name, case in GRADIENT_CASES.items()}
    elapsed = time.perf_counter() - t0
    measured("worst rel err", max(worst.values()))
    measured("seconds", elapsed)
    assert set(worst) >= {"rmsnorm", "swiglu", "rope_attention_block", "encoder", "feature_decoder",
                          "pixel_decoder", "ldm", "vae_loss", "fm_loss", "pixel_losses"}
    assert all(v <= GRAD_TOL for v in worst.values()), worst
    assert elapsed <= 180


# ---------------------------------------------------------------- 2

@acceptance(2, "parameter anchors: encoder 38.17M +-1%, decoder 170.43M +-2%, LDM 675.26M +-2%")
def test_parameter_anchors(measured):
    with torch.device("meta"):
        enc = count_parameters(FeatureEncoder(EncoderConfig.full_size()))
        dec = count_parameters(FeatureDecoder(FeatureDecoderConfig.full_size()))
        ldm = count_parameters(flow.LatentDiT(flow.GenModelConfig.full_size()))
    measured("encoder M", enc / 1e6)
    measured("feature decoder M", dec / 1e6)
    measured("LDM M", ldm / 1e6)
    assert abs(enc / 38.17e6 - 1) <= 0.01
    assert abs(dec / 170.43e6 - 1) <= 0.02
    assert abs(ldm / 675.26e6 - 1) <= 0.02


# ---------------------------------------------------------------- 3

@acceptance(3, "interpolant inverse to 1e-12 over 1e4 triples; shift(s=1) identity; unit CFG bit-identical")
def test_interpolant_algebra(measured):
    err = interpolant_identity_error(10_000)
    measured("max identity err", err)
    assert err <= 1e-12
    ts = torch.cat([torch.linspace(0, 1, 10_001, dtype=torch.float64),
                    torch.rand(10_000, generator=torch.Generator().manual_seed(0), dtype=torch.float64)])
    assert torch.equal(flow.shift_time(ts, 1.0), ts)
    assert unit_guidance_matches_unguided(seed=0) and unit_guidance_matches_unguided(seed=1)


# ---------------------------------------------------------------- 4

@acceptance(4, "closed-form KL within 1% of 1e6-draw Monte Carlo on 20 posteriors")
def test_kl_matches_monte_carlo(measured):
    worst = kl_oracle_worst(posteriors=20, draws=1_000_000)
    measured("worst rel err", worst)
    assert worst <= 0.01


# ---------------------------------------------------------------- 5

@acceptance(5, "N(0,I) oracle: 250-step ODE/SDE mean <= 0.02/coord, cov within 5%; zero-diffusion SDE == ODE")
@pytest.mark.parametrize("mode", ["ode", "sde"])
def test_sampler_oracle(mode, measured):
    mean_rms, cov_err = gaussian_sampler_stats(mode, n=10_000, steps=250)
    measured(f"{mode} mean rms", mean_rms)
    measured(f"{mode} cov rel frob err", cov_err)
    assert mean_rms <= 0.02
    assert cov_err <= 0.05


@acceptance(5, "N(0,I) oracle: 250-step ODE/SDE mean <= 0.02/coord, cov within 5%; zero-diffusion SDE == ODE")
def test_zero_diffusion_sde_is_ode():
    assert zero_diffusion_matches_ode(seed=0) and zero_diffusion_matches_ode(seed=7)


# ---------------------------------------------------------------- 6, 7 (shared desk run)

@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Default desk configuration run through every stage; times the whole thing."""
    root = tmp_path_factory.mktemp("desk")
    cfg = RunConfig()
    t0 = time.perf_counter()
    pipeline.synth(cfg, root / "data")
    fae_res = pipeline.run_train_fae(cfg, root / "data", root / "fae")
    pix1 = pipeline.run_train_pixel1(cfg, root / "data", root / "pix1")
    pix2 = pipeline.run_train_pixel2(cfg, root / "data", fae_res["checkpoint"], pix1["checkpoint"], root / "pix2")

    # LDM on toy mixture latents: 8 classes around a ring in a 2-d latent space
    x, y = flow.toy_mixture(8000, seed=0)
    gcfg = flow.GenModelConfig(latent_dim=2, grid_h=1, grid_w=1, depth=3, hidden_dim=128, num_heads=4,
                               num_classes=8)
    ldm, _, history = flow.train_ldm(x, y, gcfg, flow.LDMTrainConfig(lr=1e-3, steps=2000, batch_size=256), seed=0)
    target, ty = flow.toy_mixture(2000, seed=1)
    toy = {}
    for mode, fn in (("ode", flow.sample_ode), ("sde", flow.sample_sde)):
        s = fn(ldm, 2000, (1, 1, 2), 250, labels=torch.as_tensor(ty), seed=3).reshape(-1, 2).numpy()
        toy[mode] = (flow.w2_distance(s, target), float((flow.nearest_component(s) == ty).mean()))
    elapsed = time.perf_counter() - t0
    return dict(root=root, cfg=cfg, fae=fae_res, pix1=pix1, pix2=pix2, toy=toy, elapsed=elapsed,
                ldm_final=np.mean([r[1] for r in history[-100:]]))


@acceptance(6, "desk pipeline: FAE cosine >= 0.95, pixel stages complete, toy LDM W2 <= 0.1 and argmax >= 95%, <= 30 min")
def test_desk_pipeline(desk, measured):
    measured("FAE held-out cosine", desk["fae"]["test_cosine"])
    measured("pixel stage-1 test L1", desk["pix1"]["test_l1"])
    measured("pixel stage-2 test L1 (on reconstructions)", desk["pix2"]["test_l1"])
    for mode, (w2, acc) in desk["toy"].items():
        measured(f"toy {mode} W2", w2)
        measured(f"toy {mode} class consistency", acc)
    measured("minutes", desk["elapsed"] / 60)
    assert desk["fae"]["test_cosine"] >= 0.95
    for stage in ("pix1", "pix2"):
        assert desk[stage]["checkpoint"].is_file() and np.isfinite(desk[stage]["test_l1"])
    for w2, acc in desk["toy"].values():
        assert w2 <= 0.1 and acc >= 0.95
    assert desk["elapsed"] <= 30 * 60


@acceptance(7, "semantic preservation: Spearman >= 0.7, probe gap <= 2 points, retrieval gap <= 1 point")
def test_semantic_preservation(desk, measured):
    fae = fae_from_bundle(CheckpointBundle.load(desk["fae"]["checkpoint"]))
    decoder = pixel_from_bundle(CheckpointBundle.load(desk["pix2"]["checkpoint"]))
    rep = pipeline.semantic_report(desk["cfg"], desk["root"] / "data", fae, decoder)
    for k, v in rep.items():
        measured(k, v)
    assert rep["similarity_preservation"] >= 0.7
    assert abs(rep["probe_orig"] - rep["probe_recon"]) * 100 <= 2.0
    assert abs(rep["retrieval_orig"] - rep["retrieval_recon"]) * 100 <= 1.0
    assert abs(rep["retrieval_orig_rev"] - rep["retrieval_recon_rev"]) * 100 <= 1.0


# ---------------------------------------------------------------- 8

@acceptance(8, "ablation harness: every group trains on a tiny budget, CSV written, exit 0")
def test_ablation_smoke(tmp_path, capsys, measured):
    t0 = time.perf_counter()
    code = main(["ablate", "--out", str(tmp_path / "abl")])
    measured("seconds", time.perf_counter() - t0)
    assert code == 0
    with open(tmp_path / "abl" / "ablation.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    variants = {(r["group"], r["variant"]) for r in rows}
    assert {("encoder", "single_attention"), ("encoder", "linear"), ("encoder", "transformer_6")} <= variants
    assert {("latent_dim", "d_z=16"), ("latent_dim", "d_z=32"), ("shift", "s=0.5"), ("shift", "s=1.0")} <= variants
    assert {v for g, v in variants if g == "ldm_arch"} >= {"sit", "+swiglu", "+rope", "+rmsnorm"}
    for r in rows:
        if r["ldm_loss"]:
            assert np.isfinite(float(r["ldm_loss"]))


# ---------------------------------------------------------------- 9

@acceptance(9, "FAEB and FAEC round-trip bit-exactly with CRC and corruption detection")
def test_format_roundtrips():
    assert all(format_roundtrips(seed) for seed in range(5))


# ---------------------------------------------------------------- 10

@acceptance(10, "determinism: every training/sampling command reproduces its outputs byte-identically")
def test_cli_determinism(tmp_path, measured):
    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY_INI)
    digests = []
    for run in ("a", "b"):
        root = tmp_path / run
        codes = run_tiny_pipeline(root, ini)
        assert all(c == 0 for c in codes.values()), codes
        assert main(["ablate", "--config", str(ini), "--fae-steps", "5", "--ldm-steps", "5",
                     "--out", str(root / "abl")]) == 0
        assert main(["sample", "--config", str(ini), "--mode", "ode", "--ldm", str(root / "ldm/ldm.faec"),
                     "--fae", str(root / "fae/fae.faec"), "--pixel", str(root / "pix2/pixel2.faec"),
                     "--out", str(root / "samp_ode")]) == 0
        digests.append(tree_digest(root))
    measured("files compared", len(digests[0]))
    assert digests[0].keys() == digests[1].keys()
    differing = [k for k in digests[0] if digests[0][k] != digests[1][k]]
    assert not differing, differing
