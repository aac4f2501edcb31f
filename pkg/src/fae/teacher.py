"""Frozen patch embeddings: procedural images, a synthetic frozen teacher, datasets."""
from __future__ import annotations

import colorsys
import functools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, UsageError
from .formats import EmbeddingGrid, GridBatch
from .nn import attention_core, grid_positions, sincos_2d
from .runtime import numpy_rng, substream

SHAPE_FAMILIES = ("disk", "square", "triangle", "ring", "cross", "star", "hexagon", "bar")


# --------------------------------------------------------------------------
# procedural images
# --------------------------------------------------------------------------

def _polygon(x, y, sides, radius):
    apothem = radius * math.cos(math.pi / sides)
    inside = np.ones_like(x, dtype=bool)
    for k in range(sides):
        a = 2 * math.pi * k / sides + math.pi / 2 + math.pi / sides
        inside &= x * math.cos(a) + y * math.sin(a) <= apothem
    return inside


def _inside(family, x, y):
    r = np.hypot(x, y)
    if family == "disk":
        return r <= 1.0
    if family == "square":
        return np.maximum(abs(x), abs(y)) <= 0.85
    if family == "triangle":
        return _polygon(x, y, 3, 1.2)
    if family == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if family == "cross":
        return ((abs(x) <= 0.36) & (abs(y) <= 1.0)) | ((abs(y) <= 0.36) & (abs(x) <= 1.0))
    if family == "star":
        return r <= 0.68 + 0.32 * np.cos(5 * np.arctan2(y, x))
    if family == "hexagon":
        return _polygon(x, y, 6, 1.0)
    return (x / 1.15) ** 2 + (y / 0.55) ** 2 <= 1.0


def class_palette(class_label: int):
    """Object colour and texture colour for a class (fixed hue per class)."""
    hue = (class_label * 0.61803398875) % 1.0
    main = np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.9))
    accent = np.array(colorsys.hsv_to_rgb((hue + 0.08) % 1.0, 0.55, 0.55))
    return main, accent


def synth_image(class_label: int, instance_seed: int, size: int = 32, *, variant: int = 0,
                return_mask: bool = False):
    """Deterministic procedural RGB image of shape (size, size, 3) in [0, 1].

    The class fixes the shape family and palette; the instance seed fixes pose,
    scale, background and texture. ``variant`` > 0 renders a second view of the
    same instance (re-drawn texture phase, mild pixel noise), used for paired
    retrieval data. With ``return_mask`` the boolean object mask is also returned.
    """
    if class_label < 0:
        raise UsageError(f"class_label must be >= 0, got {class_label}")
    if size < 8 or size % 8:
        raise UsageError(f"size must be a positive multiple of 8, got {size}")
    rng = np.random.default_rng([int(instance_seed) & 0xFFFFFFFF, int(instance_seed) >> 32, 7919])
    family = SHAPE_FAMILIES[class_label % len(SHAPE_FAMILIES)]
    main, accent = class_palette(class_label)

    cx, cy = 0.5 + rng.uniform(-0.1, 0.1, size=2)
    radius = rng.uniform(0.3, 0.37)
    theta = rng.uniform(0, 2 * math.pi)
    bg_a, bg_b = rng.uniform(0.75, 0.98, size=(2, 3))
    bg_dir = rng.uniform(0, 2 * math.pi)
    tex_freq = rng.uniform(1.5, 3.0)
    tex_dir = rng.uniform(0, 2 * math.pi)
    tex_phase = rng.uniform(0, 2 * math.pi)
    if variant:
        vrng = np.random.default_rng([int(instance_seed) & 0xFFFFFFFF, variant, 104729])
        tex_phase = vrng.uniform(0, 2 * math.pi)

    ss = 4
    coords = (np.arange(size * ss) + 0.5) / (size * ss)
    v, u = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = (u - cx) / radius, (v - cy) / radius
    x = dx * math.cos(theta) + dy * math.sin(theta)
    y = -dx * math.sin(theta) + dy * math.cos(theta)
    cover = _inside(family, x, y).astype(np.float64)
    alpha = cover.reshape(size, ss, size, ss).mean(axis=(1, 3))

    pu = (np.arange(size) + 0.5) / size
    pv, pu = np.meshgrid(pu, pu, indexing="ij")
    ramp = 0.5 + np.cos(bg_dir) * (pu - 0.5) + np.sin(bg_dir) * (pv - 0.5)
    background = bg_a * (1 - ramp[..., None]) + bg_b * ramp[..., None]
    wave = 0.5 + 0.5 * np.sin(2 * math.pi * tex_freq * (pu * math.cos(tex_dir) + pv * math.sin(tex_dir))
                              + tex_phase)
    obj = main * (1 - 0.35 * wave[..., None]) + accent * 0.35 * wave[..., None]
    img = alpha[..., None] * obj + (1 - alpha[..., None]) * background
    if variant:
        img = img + 0.03 * vrng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    if return_mask:
        return img, alpha >= 0.5
    return img


def patch_mask(mask: np.ndarray, grid_h: int, grid_w: int, threshold: float = 0.5) -> np.ndarray:
    """Pixel mask -> (grid_h, grid_w) mask of patches at least ``threshold`` covered."""
    h, w = mask.shape
    ph, pw = h // grid_h, w // grid_w
    return mask.reshape(grid_h, ph, grid_w, pw).mean(axis=(1, 3)) >= threshold


# --------------------------------------------------------------------------
# synthetic teacher
# --------------------------------------------------------------------------

@dataclass
class TeacherSpec:
    grid_h: int = 8
    grid_w: int = 8
    feature_dim: int = 96
    seed: int = 0
    image_size: int = 32
    num_heads: int = 4
    positional: bool = True
    num_registers: int = 0
    mean_norm: float | None = None

    def __post_init__(self):
        if self.grid_h * self.grid_w < 4:
            raise ConfigError("teacher grid must hold at least 4 patches")
        if self.feature_dim < 8:
            raise ConfigError(f"feature_dim must be >= 8, got {self.feature_dim}")
        if self.image_size % self.grid_h or self.image_size % self.grid_w:
            raise ConfigError(f"image_size {self.image_size} not divisible by grid {self.grid_h}x{self.grid_w}")
        if self.image_size // self.grid_h != self.image_size // self.grid_w:
            raise ConfigError("teacher patches must be square")
        if self.feature_dim % self.num_heads:
            raise ConfigError(f"feature_dim {self.feature_dim} not divisible by {self.num_heads} heads")
        if self.mean_norm is not None and self.mean_norm <= 0:
            raise ConfigError("mean_norm must be > 0")

    @property
    def patch_size(self) -> int:
        return self.image_size // self.grid_h

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    def frozen_key(self):
        return (self.grid_h, self.grid_w, self.feature_dim, self.seed, self.image_size,
                self.num_heads, self.positional, self.num_registers)


class SyntheticTeacher:
    """Randomly initialised, never-trained ViT-style encoder.

    Linear patchifier + optional fixed positional table + 2 attention blocks +
    final affine LayerNorm, all drawn from ``spec.seed``. Holds plain tensors
    with no autograd, so nothing can update it.
    """

    depth = 2

    def __init__(self, spec: TeacherSpec):
        self.spec = spec
        g = torch.Generator().manual_seed(substream(spec.seed, "teacher"))
        D, p = spec.feature_dim, spec.patch_size
        fan_in = 3 * p * p

        def rand(*shape, scale=1.0):
            return torch.randn(*shape, generator=g, dtype=torch.float64) * scale

        self.patch_w = rand(D, fan_in, scale=2.0 / math.sqrt(fan_in))
        self.patch_b = rand(D, scale=0.5)
        self.pos = sincos_2d(spec.grid_h, spec.grid_w, D) * (0.6 if spec.positional else 0.0)
        self.registers = rand(spec.num_registers, D)
        self.blocks = []
        for _ in range(self.depth):
            self.blocks.append({
                "qkv": rand(3 * D, D, scale=1.5 / math.sqrt(D)),
                "proj": rand(D, D, scale=1.0 / math.sqrt(D)),
                "fc1": rand(2 * D, D, scale=1.0 / math.sqrt(D)),
                "fc1_b": rand(2 * D, scale=0.2),
                "fc2": rand(D, 2 * D, scale=1.0 / math.sqrt(2 * D)),
            })
        self.gamma = 1.0 + rand(D, scale=0.2)
        self.beta = rand(D, scale=0.1)
        for t in [self.patch_w, self.patch_b, self.pos, self.registers, self.gamma, self.beta]:
            t.requires_grad_(False)

    @torch.no_grad()
    def __call__(self, images: np.ndarray) -> np.ndarray:
        spec = self.spec
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        n, h, w, c = images.shape
        if h % spec.grid_h or w % spec.grid_w or c != 3:
            raise ShapeError(f"image {h}x{w}x{c} not divisible into a {spec.grid_h}x{spec.grid_w} grid")
        if h != spec.image_size or w != spec.image_size:
            raise ShapeError(f"teacher expects {spec.image_size}px images, got {h}x{w}")
        p = spec.patch_size
        x = torch.from_numpy((images - 0.5) * 2.0)
        x = x.reshape(n, spec.grid_h, p, spec.grid_w, p, 3).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(n, spec.num_patches, p * p * 3)
        x = F.linear(x, self.patch_w, self.patch_b) + self.pos
        R = spec.num_registers
        if R:
            x = torch.cat([self.registers.expand(n, R, -1), x], dim=1)
        H, D = spec.num_heads, spec.feature_dim
        for blk in self.blocks:
            hdn = F.layer_norm(x, (D,))
            q, k, v = F.linear(hdn, blk["qkv"]).view(n, -1, 3, H, D // H).permute(2, 0, 3, 1, 4)
            a = attention_core(q, k, v).transpose(1, 2).reshape(n, -1, D)
            x = x + F.linear(a, blk["proj"])
            hdn = F.layer_norm(x, (D,))
            x = x + F.linear(F.gelu(F.linear(hdn, blk["fc1"], blk["fc1_b"])), blk["fc2"])
        x = F.layer_norm(x, (D,), self.gamma, self.beta)[:, R:]
        return x.reshape(n, spec.grid_h, spec.grid_w, D).numpy()


@functools.lru_cache(maxsize=8)
def _teacher_for(key) -> SyntheticTeacher:
    names = ("grid_h", "grid_w", "feature_dim", "seed", "image_size", "num_heads", "positional",
             "num_registers")
    return SyntheticTeacher(TeacherSpec(**dict(zip(names, key))))


def get_teacher(spec: TeacherSpec) -> SyntheticTeacher:
    return _teacher_for(spec.frozen_key())


def embed_images(images, spec: TeacherSpec, batch_size: int = 256, dtype=np.float32) -> np.ndarray:
    """(N, S, S, 3) images -> (N, grid_h, grid_w, feature_dim) embeddings."""
    teacher = get_teacher(spec)
    images = np.asarray(images)
    out = [teacher(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, spec.grid_h, spec.grid_w, spec.feature_dim), dtype=dtype)
    return np.concatenate(out).astype(dtype)


def teacher_embed(image, spec: TeacherSpec, image_id: str = "", class_label: int | None = None) -> EmbeddingGrid:
    return EmbeddingGrid(embed_images(np.asarray(image)[None], spec)[0], image_id, class_label)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class Record:
    image_id: str
    class_label: int
    instance_seed: int
    path: str | None = None


@dataclass
class DatasetManifest:
    records: list[Record]
    num_classes: int
    split: str = "train"
    seed: int = 0
    image_size: int = 32
    channel_stats: dict | None = None

    def __post_init__(self):
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise UsageError("image ids in a manifest must be unique")
        for r in self.records:
            if not 0 <= r.class_label < self.num_classes:
                raise UsageError(f"label {r.class_label} of {r.image_id} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.class_label for r in self.records], dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        d["records"] = [Record(**r) for r in d["records"]]
        return cls(**d)


def make_manifest(num_classes: int, per_class: int, split: str = "train", seed: int = 0,
                  image_size: int = 32) -> DatasetManifest:
    """Balanced class list with split-specific instance seeds."""
    if num_classes < 1 or per_class < 0:
        raise UsageError("need num_classes >= 1 and per_class >= 0")
    rng = numpy_rng(seed, "data", split)
    seeds = rng.choice(2 ** 62, size=num_classes * per_class, replace=False)
    records = []
    for i, s in enumerate(seeds):
        label = i % num_classes
        records.append(Record(f"{split}-{i:06d}", label, int(s)))
    return DatasetManifest(records, num_classes, split, seed, image_size)


def render_images(manifest: DatasetManifest, variant: int = 0) -> np.ndarray:
    return np.stack([synth_image(r.class_label, r.instance_seed, manifest.image_size, variant=variant)
                     for r in manifest.records]).astype(np.float32) if len(manifest) else \
        np.zeros((0, manifest.image_size, manifest.image_size, 3), np.float32)


def render_masks(manifest: DatasetManifest) -> np.ndarray:
    return np.stack([synth_image(r.class_label, r.instance_seed, manifest.image_size, return_mask=True)[1]
                     for r in manifest.records])


@dataclass
class EmbeddedDataset:
    manifest: DatasetManifest
    images: np.ndarray        # (N, S, S, 3) float32
    grids: np.ndarray         # (N, H, W, D) float32

    @property
    def labels(self):
        return self.manifest.labels

    def batch(self) -> GridBatch:
        return GridBatch(self.grids, [r.image_id for r in self.manifest.records], self.labels)


def build_dataset(manifest: DatasetManifest, spec: TeacherSpec) -> EmbeddedDataset:
    if manifest.image_size != spec.image_size:
        raise ConfigError(f"manifest images are {manifest.image_size}px, teacher expects {spec.image_size}px")
    images = render_images(manifest)
    grids = embed_images(images, spec)
    if manifest.channel_stats:
        grids = standardize(grids, manifest.channel_stats)
    return EmbeddedDataset(manifest, images, grids)


def channel_stats(grids: np.ndarray) -> dict:
    flat = np.asarray(grids, dtype=np.float64).reshape(-1, grids.shape[-1])
    return {"mean": flat.mean(0).tolist(), "std": (flat.std(0) + 1e-6).tolist()}


def standardize(grids, stats):
    return ((grids - np.asarray(stats["mean"])) / np.asarray(stats["std"])).astype(grids.dtype)


def embedding_norm_stats(source, spec: TeacherSpec | None = None) -> float:
    """Arithmetic mean of per-patch L2 norms over a dataset.

    ``source`` is a DatasetManifest (rendered and embedded with ``spec``), an
    (N, H, W, D) array, or a sequence of EmbeddingGrid. When ``spec`` is given
    the value is stored in ``spec.mean_norm``.
    """
    if isinstance(source, DatasetManifest):
        if len(source) == 0:
            raise UsageError("embedding_norm_stats needs a non-empty manifest")
        if spec is None:
            raise UsageError("a TeacherSpec is required to embed a manifest")
        grids = build_dataset(source, spec).grids
    elif isinstance(source, np.ndarray):
        grids = source
    else:
        grids = [g.values if isinstance(g, EmbeddingGrid) else np.asarray(g) for g in source]
        grids = np.stack(grids) if grids else np.zeros((0,))
    if grids.size == 0:
        raise UsageError("embedding_norm_stats needs at least one grid")
    norms = np.sqrt((np.asarray(grids, dtype=np.float64) ** 2).sum(-1))
    value = float(norms.mean())
    if spec is not None:
        spec.mean_norm = value
    return value
