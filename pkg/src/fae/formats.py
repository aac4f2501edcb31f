"""Binary file formats.

FAEB  patch-embedding / latent grids (little-endian)::

    "FAEB" | version u32 = 1 | dtype u8 (0=f32, 1=f64) | grid_h u32 | grid_w u32
    | feature_dim u32 | has_labels u8 | count u64
    | count x [ id_len u16 | id utf-8 | label i32 (if has_labels) | values ]
    | crc32 u32 of the record region

FAEC  checkpoints::

    "FAEC" | version u32 = 1 | kind (u16 len + utf-8) | step u64
    | config (u32 len + canonical key=value utf-8)
    | 3 tensor groups (params, optim, extra): n u32, then per tensor
      name (u16 len + utf-8) | dtype u8 (0=f32, 1=f64, 2=i64) | ndim u8 | dims u64... | payload
    | rng (u32 len + bytes) | crc32 u32 of everything before it
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ShapeError
from .runtime import atomic_write_bytes

FAEB_MAGIC = b"FAEB"
FAEC_MAGIC = b"FAEC"
VERSION = 1
_HEADER = struct.Struct("<4sIBIIIBQ")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


@dataclass
class EmbeddingGrid:
    """One grid_h x grid_w x feature_dim patch-embedding (or latent) grid."""

    values: np.ndarray
    image_id: str = ""
    class_label: int | None = None

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"grid must be 3-D (h, w, d), got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise NumericError(f"grid {self.image_id!r} contains non-finite values")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class GridBatch:
    """A stack of grids as stored in one FAEB file."""

    values: np.ndarray                       # (N, H, W, D)
    image_ids: list[str]
    labels: np.ndarray | None = None         # (N,) int

    def __len__(self):
        return len(self.image_ids)

    def __getitem__(self, i) -> EmbeddingGrid:
        label = None if self.labels is None else int(self.labels[i])
        return EmbeddingGrid(self.values[i], self.image_ids[i], label)

    @classmethod
    def from_grids(cls, grids):
        grids = list(grids)
        if not grids:
            return cls(np.zeros((0, 1, 1, 1), np.float32), [], None)
        shapes = {g.values.shape for g in grids}
        if len(shapes) != 1:
            raise ShapeError(f"grids are not homogeneous: {sorted(shapes)}")
        labels = None
        if all(g.class_label is not None for g in grids):
            labels = np.array([g.class_label for g in grids], dtype=np.int64)
        return cls(np.stack([g.values for g in grids]), [g.image_id for g in grids], labels)


# --------------------------------------------------------------------------
# reading helpers
# --------------------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes, limit: int | None = None):
        self.buf = buf
        self.pos = 0
        self.limit = len(buf) if limit is None else limit

    def take(self, n, what):
        if self.pos + n > self.limit:
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def _check_crc(buf: bytes, start: int, what: str) -> None:
    if len(buf) < start + 4:
        raise FormatError(f"truncated: missing {what} checksum", len(buf))
    (stored,) = struct.unpack_from("<I", buf, len(buf) - 4)
    actual = zlib.crc32(buf[start:len(buf) - 4]) & 0xFFFFFFFF
    if stored != actual:
        raise FormatError(f"{what} CRC32 mismatch (stored {stored:#010x}, computed {actual:#010x})",
                          len(buf) - 4)


# --------------------------------------------------------------------------
# FAEB
# --------------------------------------------------------------------------

def encode_embeddings(values, image_ids, labels=None, dtype="float32") -> bytes:
    values = np.asarray(values)
    if values.ndim != 4:
        raise ShapeError(f"expected (N, H, W, D) values, got shape {values.shape}")
    n, gh, gw, d = values.shape
    if len(image_ids) != n:
        raise ShapeError(f"{len(image_ids)} image ids for {n} grids")
    if labels is not None and len(labels) != n:
        raise ShapeError(f"{len(labels)} labels for {n} grids")
    if not np.isfinite(values).all():
        raise NumericError("refusing to write non-finite embedding values")
    dt = np.dtype(dtype)
    code = _DTYPE_CODES.get(dt)
    if code not in (0, 1):
        raise ShapeError(f"unsupported payload dtype {dt}")
    head = _HEADER.pack(FAEB_MAGIC, VERSION, code, gh, gw, d, int(labels is not None), n)
    body = bytearray()
    payload = values.astype(_DTYPES[code], copy=False)
    for i, image_id in enumerate(image_ids):
        raw = image_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ShapeError(f"image id too long ({len(raw)} bytes)")
        body += struct.pack("<H", len(raw)) + raw
        if labels is not None:
            body += struct.pack("<i", int(labels[i]))
        body += np.ascontiguousarray(payload[i]).tobytes()
    return head + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)


def write_embeddings(path, grids, image_ids=None, labels=None, dtype="float32") -> None:
    """Write grids to an FAEB file. ``grids`` is a GridBatch, list of EmbeddingGrid or (N,H,W,D) array."""
    if isinstance(grids, GridBatch):
        values, image_ids, labels = grids.values, grids.image_ids, grids.labels
    elif isinstance(grids, np.ndarray):
        values = grids
        if image_ids is None:
            image_ids = [f"{i:06d}" for i in range(len(grids))]
    else:
        batch = GridBatch.from_grids(grids)
        values, image_ids, labels = batch.values, batch.image_ids, batch.labels
    atomic_write_bytes(path, encode_embeddings(values, image_ids, labels, dtype))


def decode_embeddings(buf: bytes) -> GridBatch:
    if len(buf) < 4 or buf[:4] != FAEB_MAGIC:
        raise FormatError("bad magic, expected b'FAEB'", 0)
    r = _Reader(buf)
    _, version, code, gh, gw, d, has_labels, count = r.unpack(_HEADER.format, "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in (0, 1):
        raise FormatError(f"unknown dtype code {code}", 8)
    r.limit = max(len(buf) - 4, r.pos)
    dt = _DTYPES[code]
    rec_bytes = gh * gw * d * dt.itemsize
    rows = []
    ids, labels = [], [] if has_labels else None
    for i in range(count):
        (n,) = r.unpack("<H", f"id length of record {i}")
        try:
            ids.append(r.take(n, f"id of record {i}").decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"record {i} id is not UTF-8", r.pos - n) from exc
        if has_labels:
            labels.append(r.unpack("<i", f"label of record {i}")[0])
        rows.append(np.frombuffer(r.take(rec_bytes, f"values of record {i}"), dtype=dt).reshape(gh, gw, d))
    if r.pos != r.limit:
        raise FormatError(f"header declares {count} records but more data follows", r.pos)
    _check_crc(buf, _HEADER.size, "payload")
    values = np.stack(rows) if rows else np.zeros((0, gh, gw, d), dtype=dt)
    values = values.astype(dt.newbyteorder("="))
    return GridBatch(values, ids, None if labels is None else np.array(labels, dtype=np.int64))


def load_embeddings(path) -> GridBatch:
    return decode_embeddings(Path(path).read_bytes())


# --------------------------------------------------------------------------
# FAEC
# --------------------------------------------------------------------------

def canonical_config(config: dict) -> str:
    lines = []
    for key in sorted(config):
        value = str(config[key])
        if "\n" in value or "=" in key:
            raise ShapeError(f"config entry {key!r} cannot be serialized canonically")
        lines.append(f"{key}={value}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_canonical_config(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        out[key] = value
    return out


@dataclass
class CheckpointBundle:
    """Serialized parameters + config + training state for one trainable module."""

    kind: str
    config: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    rng: bytes = b""
    step: int = 0

    def save(self, path) -> None:
        atomic_write_bytes(path, encode_checkpoint(self))

    @classmethod
    def load(cls, path) -> "CheckpointBundle":
        return decode_checkpoint(Path(path).read_bytes())


def _pack_str(s: str, fmt="<H") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(fmt, len(raw)) + raw


def _pack_tensors(group: dict) -> bytes:
    out = bytearray(struct.pack("<I", len(group)))
    for name, arr in group.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ShapeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        out += _pack_str(name) + struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return bytes(out)


def encode_checkpoint(b: CheckpointBundle) -> bytes:
    body = bytearray(FAEC_MAGIC + struct.pack("<I", VERSION))
    body += _pack_str(b.kind) + struct.pack("<Q", b.step)
    body += _pack_str(canonical_config(b.config), "<I")
    for group in (b.params, b.optim, b.extra):
        body += _pack_tensors(group)
    body += struct.pack("<I", len(b.rng)) + b.rng
    return bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)


def _read_str(r: _Reader, what, fmt="<H") -> str:
    (n,) = r.unpack(fmt, f"{what} length")
    return r.take(n, what).decode("utf-8")


def _read_tensors(r: _Reader, group_name) -> dict:
    (n,) = r.unpack("<I", f"{group_name} count")
    out = {}
    for _ in range(n):
        name = _read_str(r, f"{group_name} tensor name")
        at = r.pos
        code, ndim = r.unpack("<BB", f"dtype of {name}")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}", at)
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}")
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(size, f"payload of {name}"), dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="))
    return out


def decode_checkpoint(buf: bytes) -> CheckpointBundle:
    if len(buf) < 4 or buf[:4] != FAEC_MAGIC:
        raise FormatError("bad magic, expected b'FAEC'", 0)
    _check_crc(buf, 0, "checkpoint")
    r = _Reader(buf, limit=len(buf) - 4)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    kind = _read_str(r, "kind")
    (step,) = r.unpack("<Q", "step")
    config = parse_canonical_config(_read_str(r, "config", "<I"))
    params = _read_tensors(r, "params")
    optim = _read_tensors(r, "optim")
    extra = _read_tensors(r, "extra")
    (n,) = r.unpack("<I", "rng length")
    rng = r.take(n, "rng state")
    if r.pos != r.limit:
        raise FormatError("unexpected trailing data", r.pos)
    return CheckpointBundle(kind, config, params, optim, extra, rng, step)


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def encode_ppm(img) -> bytes:
    """Binary P6, maxval 255. ``img`` is (H, W, 3) in [0, 1]; clamped here."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"PPM needs (H, W, 3), got {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + to_uint8(img).tobytes()


def encode_pgm(img) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeError(f"PGM needs (H, W), got {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + to_uint8(img).tobytes()


def write_ppm(path, img) -> None:
    atomic_write_bytes(path, encode_ppm(img))


def write_pgm(path, img) -> None:
    atomic_write_bytes(path, encode_pgm(img))


def read_pnm(path) -> np.ndarray:
    """Read back a P5/P6 file written by this module, as floats in [0, 1]."""
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4], dtype=np.uint8).astype(np.float64) / maxval
    return data.reshape(h, w, 3) if magic == b"P6" else data.reshape(h, w)


def image_sheet(images, cols: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile (N, H, W, 3) images into one sheet with ``pad`` white pixels between tiles."""
    images = np.asarray(images)
    n = len(images)
    if n == 0:
        return np.ones((1, 1, 3))
    h, w = images.shape[1:3]
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    sheet = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, 3))
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        sheet[y:y + h, x:x + w] = img
    return sheet
