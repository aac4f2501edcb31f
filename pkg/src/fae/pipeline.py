"""Stage runners shared by the command line and the test-suite.

Every runner takes a resolved :class:`RunConfig`, explicit input paths and an
output directory, writes its artifacts atomically and returns a small dict
describing what it produced.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .autoencoder import fae_from_bundle, mean_cosine, train_fae
from .config import RunConfig
from .errors import ConfigError, MatchingError, TrainingError, UsageError
from .flow import ldm_from_bundle, sample_ode, sample_sde, train_ldm
from .formats import CheckpointBundle, image_sheet, load_embeddings, write_embeddings, write_ppm
from .metrics import (cross_image_match, frechet_distance, gaussian_stats, patch_similarity_map, pool,
                      retrieval_top1, similarity_pgm, similarity_preservation, fit_linear_probe, write_metrics)
from .pixel import export_image, finetune_pixel_stage2, l1_error, pixel_from_bundle, render, train_pixel_stage1
from .runtime import MetricsLog, atomic_write_bytes, set_workers
from .teacher import DatasetManifest, build_dataset, embed_images, embedding_norm_stats, make_manifest, render_images

log = logging.getLogger("fae")

CONFIG_NAME = "config.ini"


class Outputs:
    """An output directory that refuses to overwrite existing files unless ``force``."""

    def __init__(self, out_dir, force: bool = False):
        self.dir = Path(out_dir)
        self.force = force

    def claim(self, *names) -> list[Path]:
        paths = [self.dir / n for n in names]
        existing = [str(p) for p in paths if p.exists()]
        if existing and not self.force:
            raise UsageError(f"refusing to overwrite {', '.join(existing)} (pass --force)")
        self.dir.mkdir(parents=True, exist_ok=True)
        return paths

    def write_config(self, cfg: RunConfig) -> Path:
        path = self.dir / CONFIG_NAME
        atomic_write_bytes(path, cfg.to_text().encode("utf-8"))
        return path


def _prepare(cfg: RunConfig, outputs: Outputs, *names):
    set_workers(cfg.run.workers)
    paths = outputs.claim(*names)
    outputs.write_config(cfg)
    return paths


def _load_bundle(path, kind: str) -> CheckpointBundle:
    bundle = CheckpointBundle.load(path)
    if bundle.kind != kind:
        raise ConfigError(f"{path} holds a {bundle.kind!r} checkpoint, expected {kind!r}")
    return bundle


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def synth(cfg: RunConfig, out_dir, force=False) -> dict:
    """Render the paired synthetic dataset and its frozen teacher embeddings."""
    outputs = Outputs(out_dir, force)
    p_tr, p_te, m_tr, m_te, p_teacher = _prepare(cfg, outputs, "train.faeb", "test.faeb", "train.json",
                                                 "test.json", "teacher.json")
    t = cfg.teacher
    spec = cfg.teacher_spec()
    result, mean_norm = {}, None
    for split, per_class, p_emb, p_man in (("train", t.train_per_class, p_tr, m_tr),
                                           ("test", t.test_per_class, p_te, m_te)):
        manifest = make_manifest(t.num_classes, per_class, split, cfg.seed, t.image_size)
        ds = build_dataset(manifest, spec)
        write_embeddings(p_emb, ds.batch())
        atomic_write_bytes(p_man, manifest.to_json().encode())
        result[split] = len(manifest)
        if split == "train":
            mean_norm = embedding_norm_stats(ds.grids) if len(manifest) else None
    atomic_write_bytes(p_teacher, json.dumps({"mean_norm": mean_norm}, sort_keys=True).encode())
    result["mean_norm"] = mean_norm
    return result


def load_split(data_dir, split: str):
    """(manifest, grids (N,H,W,D), images (N,S,S,3)) for a synthesized split."""
    data_dir = Path(data_dir)
    manifest = DatasetManifest.from_json((data_dir / f"{split}.json").read_text())
    batch = load_embeddings(data_dir / f"{split}.faeb")
    if list(batch.image_ids) != [r.image_id for r in manifest.records]:
        raise ConfigError(f"{split}.faeb and {split}.json disagree on image ids")
    return manifest, batch.values, render_images(manifest)


def teacher_mean_norm(data_dir) -> float | None:
    return json.loads((Path(data_dir) / "teacher.json").read_text())["mean_norm"]


def _check_teacher(cfg: RunConfig, grids):
    t = cfg.teacher
    if grids.shape[1:] != (t.grid, t.grid, t.feature_dim):
        raise ConfigError(f"data grids {grids.shape[1:]} do not match [teacher] "
                          f"{(t.grid, t.grid, t.feature_dim)}")


def _fresh_log(path: Path, seed: int) -> MetricsLog:
    # claim() already enforced --force, so an old curve file is stale
    path.unlink(missing_ok=True)
    return MetricsLog(path, seed)


def _save_or_salvage(train, path):
    try:
        return train()
    except TrainingError as exc:
        if exc.last_good is not None:
            exc.last_good.save(path.with_suffix(".last_good.faec"))
        raise


# --------------------------------------------------------------------------
# training stages
# --------------------------------------------------------------------------

def run_train_fae(cfg: RunConfig, data_dir, out_dir, force=False) -> dict:
    outputs = Outputs(out_dir, force)
    ckpt, curves = _prepare(cfg, outputs, "fae.faec", "metrics.csv")
    _, grids, _ = load_split(data_dir, "train")
    _check_teacher(cfg, grids)
    mlog = _fresh_log(curves, cfg.seed)
    model, bundle, history = _save_or_salvage(lambda: train_fae(grids, cfg.fae, cfg.seed, mlog), ckpt)
    bundle.save(ckpt)
    _, test_grids, _ = load_split(data_dir, "test")
    cos = mean_cosine(test_grids, model.reconstruct(test_grids)) if len(test_grids) else float("nan")
    return {"checkpoint": ckpt, "test_cosine": cos, "final": history[-1] if history else None}


def _recon_sheet(path, decoder, grids, images, n=16):
    n = min(n, len(grids))
    if n == 0:
        return
    rec = export_image(render(decoder, grids[:n]))
    pairs = np.stack([np.asarray(images[:n]), rec], 1).reshape(2 * n, *rec.shape[1:])
    write_ppm(path, image_sheet(pairs, cols=8))


def run_train_pixel1(cfg: RunConfig, data_dir, out_dir, force=False) -> dict:
    outputs = Outputs(out_dir, force)
    ckpt, curves, sheet = _prepare(cfg, outputs, "pixel1.faec", "metrics.csv", "recon.ppm")
    _, grids, images = load_split(data_dir, "train")
    _check_teacher(cfg, grids)
    mlog = _fresh_log(curves, cfg.seed)
    mean_norm = teacher_mean_norm(data_dir)
    decoder, bundle, _ = _save_or_salvage(
        lambda: train_pixel_stage1(grids, images, cfg.pixel, cfg.pixel_train, cfg.seed, mean_norm, mlog), ckpt)
    bundle.save(ckpt)
    _, test_grids, test_images = load_split(data_dir, "test")
    _recon_sheet(sheet, decoder, test_grids, test_images)
    l1 = l1_error(decoder, test_grids, test_images) if len(test_grids) else float("nan")
    return {"checkpoint": ckpt, "test_l1": l1}


def run_train_pixel2(cfg: RunConfig, data_dir, fae_ckpt, pixel_ckpt, out_dir, force=False) -> dict:
    outputs = Outputs(out_dir, force)
    ckpt, curves, sheet = _prepare(cfg, outputs, "pixel2.faec", "metrics.csv", "recon.ppm")
    fae = fae_from_bundle(_load_bundle(fae_ckpt, "fae"))
    stage1 = _load_bundle(pixel_ckpt, "pixel")
    _, grids, images = load_split(data_dir, "train")
    _check_teacher(cfg, grids)
    mlog = _fresh_log(curves, cfg.seed)
    decoder, bundle, _ = _save_or_salvage(
        lambda: finetune_pixel_stage2(stage1, fae, grids, images, cfg.pixel2, cfg.seed, mlog), ckpt)
    bundle.save(ckpt)
    _, test_grids, test_images = load_split(data_dir, "test")
    x_hat = fae.reconstruct(test_grids)
    _recon_sheet(sheet, decoder, x_hat, test_images)
    l1 = l1_error(decoder, x_hat, test_images) if len(test_grids) else float("nan")
    return {"checkpoint": ckpt, "test_l1": l1}


def run_encode(cfg: RunConfig, data_dir, fae_ckpt, out_dir, force=False) -> dict:
    """Standardized posterior-mean latents of the training split, as an FAEB file."""
    outputs = Outputs(out_dir, force)
    (path,) = _prepare(cfg, outputs, "latents.faeb")
    fae = fae_from_bundle(_load_bundle(fae_ckpt, "fae"))
    manifest, grids, _ = load_split(data_dir, "train")
    z = fae.latents(grids, standardized=True)
    write_embeddings(path, z, [r.image_id for r in manifest.records], manifest.labels)
    return {"latents": path, "count": len(z)}


def run_train_ldm(cfg: RunConfig, latents_path, out_dir, force=False) -> dict:
    outputs = Outputs(out_dir, force)
    ckpt, curves = _prepare(cfg, outputs, "ldm.faec", "metrics.csv")
    batch = load_embeddings(latents_path)
    if batch.values.shape[1:] != (cfg.ldm.grid_h, cfg.ldm.grid_w, cfg.ldm.latent_dim):
        raise ConfigError(f"latents {batch.values.shape[1:]} do not match the [ldm]/[fae] layout")
    mlog = _fresh_log(curves, cfg.seed)
    _, bundle, history = _save_or_salvage(
        lambda: train_ldm(batch.values, batch.labels, cfg.ldm, cfg.ldm_train, cfg.seed, mlog), ckpt)
    bundle.save(ckpt)
    return {"checkpoint": ckpt, "final_loss": history[-1][1] if history else None}


# --------------------------------------------------------------------------
# sampling and probing
# --------------------------------------------------------------------------

def sample_latents(ldm, cfg: RunConfig, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    s = cfg.sample
    C = ldm.cfg.num_classes
    labels = np.full(n, s.class_label) if s.class_label >= 0 else np.arange(n) % C
    if n == 0:
        return np.zeros((0, ldm.cfg.grid_h, ldm.cfg.grid_w, ldm.cfg.latent_dim), np.float32), labels
    shape = (ldm.cfg.grid_h, ldm.cfg.grid_w, ldm.cfg.latent_dim)
    fn = sample_ode if s.mode == "ode" else sample_sde
    z = fn(ldm, n, shape, s.steps, labels=torch.as_tensor(labels), guidance=s.schedule(), shift=s.shift,
           seed=seed)
    return z.numpy(), labels


def run_sample(cfg: RunConfig, ldm_ckpt, fae_ckpt, pixel_ckpt, out_dir, force=False) -> dict:
    """Latents -> x_hat -> pixels. Writes samples.faeb (standardized latents) and samples.ppm."""
    outputs = Outputs(out_dir, force)
    lat_path, sheet = _prepare(cfg, outputs, "samples.faeb", "samples.ppm")
    ldm = ldm_from_bundle(_load_bundle(ldm_ckpt, "ldm"))
    n = cfg.sample.n
    z, labels = sample_latents(ldm, cfg, n, cfg.seed)
    write_embeddings(lat_path, z, [f"sample-{i:06d}" for i in range(n)], labels)
    if n == 0:
        return {"latents": lat_path, "count": 0}
    fae = fae_from_bundle(_load_bundle(fae_ckpt, "fae"))
    decoder = pixel_from_bundle(_load_bundle(pixel_ckpt, "pixel"))
    x_hat = fae.decode_latents(z, standardized=True)
    images = export_image(render(decoder, x_hat))
    write_ppm(sheet, image_sheet(images, cols=min(8, n)))
    return {"latents": lat_path, "sheet": sheet, "count": n}


def semantic_report(cfg: RunConfig, data_dir, fae, decoder=None) -> dict:
    """Similarity preservation, probe and retrieval on originals vs reconstructions."""
    p = cfg.probe
    spec = cfg.teacher_spec()
    _, tr_grids, _ = load_split(data_dir, "train")
    te_manifest, te_grids, te_images = load_split(data_dir, "test")
    tr_labels = DatasetManifest.from_json((Path(data_dir) / "train.json").read_text()).labels
    te_labels = te_manifest.labels
    x_hat = fae.reconstruct(te_grids)
    z = fae.latents(te_grids)
    k = min(p.similarity_images, len(te_grids))
    out = {
        "fae_cosine": mean_cosine(te_grids, x_hat),
        "similarity_preservation": similarity_preservation(te_grids[:k], z[:k]),
    }
    probe = fit_linear_probe(pool(tr_grids), tr_labels, p.l2_reg, cfg.teacher.num_classes)
    out["probe_orig"] = probe.accuracy(pool(te_grids), te_labels)
    out["probe_recon"] = probe.accuracy(pool(x_hat), te_labels)
    queries = pool(embed_images(render_images(te_manifest, variant=p.query_variant), spec))
    out["retrieval_orig"], out["retrieval_orig_rev"] = retrieval_top1(queries, pool(te_grids))
    out["retrieval_recon"], out["retrieval_recon_rev"] = retrieval_top1(queries, pool(x_hat))
    if decoder is not None:
        rec_images = export_image(render(decoder, x_hat))
        real = gaussian_stats(pool(te_grids))
        fake = gaussian_stats(pool(embed_images(rec_images, spec)))
        out["frechet_recon"] = frechet_distance(real, fake)
        out["pixel_l1_recon"] = float(np.abs(rec_images - te_images).mean())
    return out


def run_probe(cfg: RunConfig, data_dir, fae_ckpt, out_dir, pixel_ckpt=None, force=False) -> dict:
    outputs = Outputs(out_dir, force)
    (metrics_path,) = _prepare(cfg, outputs, "metrics.csv")
    fae = fae_from_bundle(_load_bundle(fae_ckpt, "fae"))
    decoder = pixel_from_bundle(_load_bundle(pixel_ckpt, "pixel")) if pixel_ckpt else None
    report = semantic_report(cfg, data_dir, fae, decoder)
    _, te_grids, _ = load_split(data_dir, "test")
    z = fae.latents(te_grids)
    g = cfg.teacher.grid
    query = (g // 2, g // 2)
    for i in range(min(cfg.probe.map_images, len(te_grids))):
        for name, grid in (("orig", te_grids[i]), ("latent", z[i])):
            path = outputs.dir / f"similarity_{i:02d}_{name}.pgm"
            atomic_write_bytes(path, similarity_pgm(patch_similarity_map(grid, query)))
    if len(te_grids) >= 2:
        try:
            ms = cross_image_match(te_grids[0], te_grids[cfg.teacher.num_classes % len(te_grids)],
                                   cfg.probe.k_clusters, cfg.probe.n_pairs, cfg.seed)
            report["match_mean_score"] = float(np.mean([s for _, _, s in ms.pairs]))
        except MatchingError as exc:
            log.warning("patch matching skipped: %s", exc)
    write_metrics(metrics_path, [(k, "test", v) for k, v in report.items()], cfg.seed)
    return report
