"""Run configuration: one INI-style text file covering every stage.

Sections are ``[run] [teacher] [fae] [pixel] [pixel2] [ldm] [sample] [probe]``.
Fields that must agree across stages (feature dim, grid, latent dim, class
count, image size) are written once and propagated, so a config can never
describe stages that do not compose.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .autoencoder import FAEConfig
from .errors import ConfigError
from .flow import GenModelConfig, GuidanceSchedule, LDMTrainConfig
from .pixel import PixelDecoderConfig, PixelTrainConfig
from .state import format_value, parse_value
from .teacher import TeacherSpec


@dataclass
class RunSettings:
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class TeacherSettings:
    grid: int = 8
    feature_dim: int = 96
    image_size: int = 32
    num_heads: int = 4
    positional: bool = True
    num_registers: int = 0
    teacher_seed: int = 0
    num_classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 30

    def spec(self) -> TeacherSpec:
        return TeacherSpec(self.grid, self.grid, self.feature_dim, self.teacher_seed, self.image_size,
                           self.num_heads, self.positional, self.num_registers)


@dataclass
class SampleSettings:
    n: int = 64
    steps: int = 250
    mode: str = "sde"               # ode | sde
    shift: float = 1.0
    guidance: str = "none"          # none | main | list of t_low:t_high:scale
    guidance_gap: float = 1.0
    class_label: int = -1           # -1 cycles through classes

    def __post_init__(self):
        if self.mode not in ("ode", "sde"):
            raise ConfigError(f"sample mode must be ode|sde, got {self.mode!r}")
        if self.n < 0 or self.steps < 1:
            raise ConfigError("need n >= 0 and steps >= 1")
        self.schedule()

    def schedule(self) -> GuidanceSchedule | None:
        g = self.guidance.strip()
        if g in ("", "none"):
            return None
        if g == "main":
            return GuidanceSchedule.main_results(self.guidance_gap)
        try:
            segs = [tuple(float(v) for v in part.split(":")) for part in g.split(",")]
        except ValueError as exc:
            raise ConfigError(f"cannot parse guidance {g!r}") from exc
        if any(len(s) != 3 for s in segs):
            raise ConfigError(f"guidance segments must be t_low:t_high:scale, got {g!r}")
        return GuidanceSchedule(segs, self.guidance_gap)


@dataclass
class ProbeSettings:
    l2_reg: float = 1e-4
    k_clusters: int = 2
    n_pairs: int = 8
    query_variant: int = 1
    similarity_images: int = 50
    map_images: int = 4


def _pixel2_default() -> PixelTrainConfig:
    return PixelTrainConfig(lr=2e-4, warmup=0, steps=300, gan_start=0)


# section -> [(attribute, dataclass, fields derived from other sections)]
_DERIVED_FAE = ("feature_dim", "grid_h", "grid_w")
_DERIVED_PIXEL = ("feature_dim", "grid_h", "grid_w", "image_size", "patch_size")
_DERIVED_LDM = ("latent_dim", "grid_h", "grid_w", "num_classes")
_LAYOUT = {
    "run": [("run", RunSettings, ())],
    "teacher": [("teacher", TeacherSettings, ())],
    "fae": [("fae", FAEConfig, _DERIVED_FAE)],
    "pixel": [("pixel", PixelDecoderConfig, _DERIVED_PIXEL), ("pixel_train", PixelTrainConfig, ())],
    "pixel2": [("pixel2", PixelTrainConfig, ())],
    "ldm": [("ldm", GenModelConfig, _DERIVED_LDM), ("ldm_train", LDMTrainConfig, ())],
    "sample": [("sample", SampleSettings, ())],
    "probe": [("probe", ProbeSettings, ())],
}


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    teacher: TeacherSettings = field(default_factory=TeacherSettings)
    fae: FAEConfig = field(default_factory=FAEConfig)
    pixel: PixelDecoderConfig = field(default_factory=PixelDecoderConfig)
    pixel_train: PixelTrainConfig = field(default_factory=PixelTrainConfig)
    pixel2: PixelTrainConfig = field(default_factory=_pixel2_default)
    ldm: GenModelConfig = field(default_factory=GenModelConfig)
    ldm_train: LDMTrainConfig = field(default_factory=LDMTrainConfig)
    sample: SampleSettings = field(default_factory=SampleSettings)
    probe: ProbeSettings = field(default_factory=ProbeSettings)

    def __post_init__(self):
        self.resolve()

    def resolve(self) -> "RunConfig":
        """Propagate cross-stage fields from [teacher] and [fae] into dependent sections."""
        t = self.teacher
        if t.image_size % t.grid:
            raise ConfigError(f"image_size {t.image_size} not divisible by grid {t.grid}")
        self.fae = dataclasses.replace(self.fae, feature_dim=t.feature_dim, grid_h=t.grid, grid_w=t.grid)
        self.pixel = dataclasses.replace(self.pixel, feature_dim=t.feature_dim, grid_h=t.grid, grid_w=t.grid,
                                         image_size=t.image_size, patch_size=t.image_size // t.grid)
        self.ldm = dataclasses.replace(self.ldm, latent_dim=self.fae.latent_dim, grid_h=t.grid, grid_w=t.grid,
                                       num_classes=t.num_classes)
        return self

    @property
    def seed(self) -> int:
        return self.run.seed

    def teacher_spec(self) -> TeacherSpec:
        return self.teacher.spec()

    # ---- text form --------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for section, parts in _LAYOUT.items():
            lines.append(f"[{section}]")
            for attr, cls, derived in parts:
                obj = getattr(self, attr)
                for f in dataclasses.fields(cls):
                    if f.init and f.name not in derived:
                        lines.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                           inline_comment_prefixes=("#",), strict=True)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        unknown = set(parser.sections()) - set(_LAYOUT)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        base = cls()
        kwargs = {}
        for section, parts in _LAYOUT.items():
            values = dict(parser.items(section)) if parser.has_section(section) else {}
            claimed = set()
            for attr, dcls, derived in parts:
                hints = typing.get_type_hints(dcls)
                names = {f.name for f in dataclasses.fields(dcls) if f.init and f.name not in derived}
                current = getattr(base, attr)
                upd = {k: parse_value(values[k], hints[k]) for k in names & set(values)}
                claimed |= names & set(values)
                try:
                    kwargs[attr] = dataclasses.replace(current, **upd) if not derived else (current, upd)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{section}]: {exc}") from exc
            extra = set(values) - claimed
            if extra:
                raise ConfigError(f"unknown key(s) in [{section}]: {sorted(extra)}")
        return cls._assemble(kwargs)

    @classmethod
    def _assemble(cls, kwargs) -> "RunConfig":
        # sections with derived fields are rebuilt once the teacher/fae values are known
        teacher, fae_pair = kwargs["teacher"], kwargs["fae"]
        t = teacher
        try:
            fae = dataclasses.replace(fae_pair[0], **fae_pair[1], feature_dim=t.feature_dim, grid_h=t.grid,
                                      grid_w=t.grid)
            pix_cur, pix_upd = kwargs["pixel"]
            pixel = dataclasses.replace(pix_cur, **pix_upd, feature_dim=t.feature_dim, grid_h=t.grid,
                                        grid_w=t.grid, image_size=t.image_size,
                                        patch_size=t.image_size // t.grid)
            ldm_cur, ldm_upd = kwargs["ldm"]
            ldm = dataclasses.replace(ldm_cur, **ldm_upd, latent_dim=fae.latent_dim, grid_h=t.grid,
                                      grid_w=t.grid, num_classes=t.num_classes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(run=kwargs["run"], teacher=teacher, fae=fae, pixel=pixel, pixel_train=kwargs["pixel_train"],
                   pixel2=kwargs["pixel2"], ldm=ldm, ldm_train=kwargs["ldm_train"], sample=kwargs["sample"],
                   probe=kwargs["probe"])

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def with_run(self, seed: int | None = None, workers: int | None = None) -> "RunConfig":
        run = dataclasses.replace(self.run, **{k: v for k, v in dict(seed=seed, workers=workers).items()
                                               if v is not None})
        return dataclasses.replace(self, run=run)
