"""Tiny-budget ablation matrix: encoder variants, latent width, LDM architecture
toggles and timestep shift, all emitted as one comparable CSV."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .autoencoder import mean_cosine, train_fae
from .config import RunConfig
from .flow import LDMTrainConfig, sample_ode, train_ldm
from .metrics import frechet_distance, gaussian_stats, pool
from .nn import count_parameters
from .runtime import write_csv
from .teacher import build_dataset, make_manifest

log = logging.getLogger("fae")

COLUMNS = ["group", "variant", "fae_params", "fae_cosine", "ldm_params", "ldm_loss", "latent_fd"]

# LightningDiT-style cumulative toggles (plain SiT first)
LDM_TOGGLES = [
    ("sit", dict(use_swiglu=False, use_rope=False, use_rmsnorm=False)),
    ("+swiglu", dict(use_swiglu=True, use_rope=False, use_rmsnorm=False)),
    ("+rope", dict(use_swiglu=True, use_rope=True, use_rmsnorm=False)),
    ("+rmsnorm", dict(use_swiglu=True, use_rope=True, use_rmsnorm=True)),
]


@dataclass
class AblationBudget:
    per_class: int = 20
    test_per_class: int = 5
    fae_steps: int = 150
    dec_depth: int = 2
    ldm_steps: int = 150
    ldm_hidden: int = 64
    ldm_depth: int = 2
    ldm_batch: int = 32
    sample_n: int = 64
    sample_steps: int = 50


def _fae_run(cfg: RunConfig, budget: AblationBudget, data, seed, **over):
    fcfg = dataclasses.replace(cfg.fae, steps=budget.fae_steps, warmup=min(cfg.fae.warmup, budget.fae_steps // 5),
                               dec_depth=budget.dec_depth, **over)
    tr, te = data
    model, _, _ = train_fae(tr.grids, fcfg, seed)
    return model, {"fae_params": count_parameters(model), "fae_cosine": mean_cosine(te.grids, model.reconstruct(te.grids))}


def _ldm_run(cfg: RunConfig, budget: AblationBudget, latents, labels, seed, shift=1.0, **toggles):
    gcfg = dataclasses.replace(cfg.ldm, latent_dim=latents.shape[-1], hidden_dim=budget.ldm_hidden,
                               depth=budget.ldm_depth, **toggles)
    tcfg = LDMTrainConfig(lr=cfg.ldm_train.lr, steps=budget.ldm_steps, batch_size=budget.ldm_batch, shift=shift,
                          snapshot_every=0)
    model, _, history = train_ldm(latents, labels, gcfg, tcfg, seed)
    n = min(budget.sample_n, len(latents))
    y = torch.as_tensor(np.arange(n) % gcfg.num_classes)
    z = sample_ode(model, n, latents.shape[1:], budget.sample_steps, labels=y, shift=shift, seed=seed).numpy()
    tail = [h[1] for h in history[-20:]]
    return {"ldm_params": count_parameters(model), "ldm_loss": float(np.mean(tail)),
            "latent_fd": frechet_distance(gaussian_stats(pool(latents)), gaussian_stats(pool(z)))}


def run_ablation(cfg: RunConfig, budget: AblationBudget | None = None) -> list[dict]:
    budget = budget or AblationBudget()
    seed = cfg.seed
    t = cfg.teacher
    spec = cfg.teacher_spec()
    tr = build_dataset(make_manifest(t.num_classes, budget.per_class, "train", seed, t.image_size), spec)
    te = build_dataset(make_manifest(t.num_classes, budget.test_per_class, "test", seed, t.image_size), spec)
    data = (tr, te)
    rows = []

    def add(group, variant, **vals):
        row = {"group": group, "variant": variant, **vals}
        log.info("ablation %s/%s: %s", group, variant, vals)
        rows.append(row)

    for kind in ("single_attention", "linear", "transformer_6"):
        _, m = _fae_run(cfg, budget, data, seed, encoder_kind=kind)
        add("encoder", kind, **m)

    base_latents = None
    for dz in (16, 32):
        model, m = _fae_run(cfg, budget, data, seed, latent_dim=dz)
        z = model.latents(tr.grids, standardized=True)
        if dz == cfg.fae.latent_dim or base_latents is None:
            base_latents = z
        add("latent_dim", f"d_z={dz}", **m, **_ldm_run(cfg, budget, z, tr.labels, seed))

    for name, toggles in LDM_TOGGLES:
        add("ldm_arch", name, **_ldm_run(cfg, budget, base_latents, tr.labels, seed, **toggles))

    for s in (0.5, 1.0):
        add("shift", f"s={s}", **_ldm_run(cfg, budget, base_latents, tr.labels, seed, shift=s))
    return rows


def write_ablation(path, rows) -> None:
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return "nan" if math.isnan(v) else f"{v:.6g}"
        return str(v)

    write_csv(path, COLUMNS, [[cell(r.get(c)) for c in COLUMNS] for r in rows])
