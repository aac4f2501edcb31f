import struct
import zlib

import numpy as np
import pytest
import torch

from fae.errors import FormatError, NumericError
from fae.formats import (CheckpointBundle, EmbeddingGrid, GridBatch, decode_checkpoint, decode_embeddings,
                         encode_checkpoint, encode_embeddings, encode_pgm, encode_ppm, image_sheet, load_embeddings,
                         read_pnm, write_embeddings, write_pgm, write_ppm)
from fae.state import bundle_from_model, load_model_params
from fae.verify import randomize_


def _grids(rng, n=3, dtype=np.float32):
    return rng.standard_normal((n, 2, 3, 5)).astype(dtype)


def test_embedding_roundtrip_bit_exact(tmp_path, rng):
    for dtype in ("float32", "float64"):
        vals = _grids(rng, dtype=dtype)
        path = tmp_path / f"e_{dtype}.faeb"
        write_embeddings(path, vals, ["a", "bé", "c"], [0, 2, 1], dtype=dtype)
        back = load_embeddings(path)
        assert back.values.dtype == np.dtype(dtype)
        assert back.values.tobytes() == vals.tobytes()
        assert back.image_ids == ["a", "bé", "c"]
        assert back.labels.tolist() == [0, 2, 1]
        assert encode_embeddings(back.values, back.image_ids, back.labels, dtype) == path.read_bytes()


def test_embedding_grids_list_roundtrip(tmp_path, rng):
    grids = [EmbeddingGrid(v, f"id{i}", i) for i, v in enumerate(_grids(rng))]
    write_embeddings(tmp_path / "g.faeb", grids)
    back = load_embeddings(tmp_path / "g.faeb")
    for a, b in zip(grids, back):
        assert a.image_id == b.image_id and a.class_label == b.class_label
        assert np.array_equal(a.values, b.values)


def test_empty_file_has_valid_header():
    buf = encode_embeddings(np.zeros((0, 2, 2, 4), np.float32), [], [])
    back = decode_embeddings(buf)
    assert len(back) == 0 and back.values.shape == (0, 2, 2, 4)


def test_bad_magic_reports_offset_zero(rng):
    buf = bytearray(encode_embeddings(_grids(rng), ["a", "b", "c"]))
    buf[0:4] = b"XXXX"
    with pytest.raises(FormatError) as exc:
        decode_embeddings(bytes(buf))
    assert exc.value.offset == 0


def test_count_mismatch_reports_computed_offset(rng):
    vals = _grids(rng)
    buf = bytearray(encode_embeddings(vals, ["a", "b", "c"]))
    # header count field is the trailing u64 of the 30-byte header
    struct.pack_into("<Q", buf, 22, 2)
    with pytest.raises(FormatError) as exc:
        decode_embeddings(bytes(buf))
    record = 2 + 1 + vals[0].nbytes
    assert exc.value.offset == 30 + 2 * record

    struct.pack_into("<Q", buf, 22, 4)
    with pytest.raises(FormatError) as exc:
        decode_embeddings(bytes(buf))
    assert exc.value.offset == 30 + 3 * record


def test_payload_corruption_detected_by_crc(rng):
    buf = bytearray(encode_embeddings(_grids(rng), ["a", "b", "c"]))
    buf[-10] ^= 0x01
    with pytest.raises(FormatError, match="CRC"):
        decode_embeddings(bytes(buf))


def test_truncation_detected(rng):
    buf = encode_embeddings(_grids(rng), ["a", "b", "c"])
    with pytest.raises(FormatError):
        decode_embeddings(buf[:40])


def test_writer_refuses_non_finite(rng):
    vals = _grids(rng)
    vals[1, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        encode_embeddings(vals, ["a", "b", "c"])


def _bundle(rng):
    return CheckpointBundle("fae", {"lr": "0.001", "depth": "6"},
                            {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4).astype(np.float32)},
                            {"state.0.step": np.array([5], dtype=np.int64)},
                            {"stats": np.arange(3, dtype=np.float64)}, b"rng-state", 17)


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    b = _bundle(rng)
    b.save(tmp_path / "c.faec")
    back = CheckpointBundle.load(tmp_path / "c.faec")
    assert (back.kind, back.config, back.rng, back.step) == (b.kind, b.config, b.rng, b.step)
    for group in ("params", "optim", "extra"):
        for k, v in getattr(b, group).items():
            got = getattr(back, group)[k]
            assert got.dtype == v.dtype and got.tobytes() == v.tobytes()
    assert encode_checkpoint(back) == (tmp_path / "c.faec").read_bytes()


def test_checkpoint_corruption_fixtures(rng):
    raw = encode_checkpoint(_bundle(rng))
    bad = bytearray(raw)
    bad[0] = ord("X")
    with pytest.raises(FormatError) as exc:
        decode_checkpoint(bytes(bad))
    assert exc.value.offset == 0
    for pos in (6, len(raw) // 2, len(raw) - 6):
        bad = bytearray(raw)
        bad[pos] ^= 0x40
        with pytest.raises(FormatError):
            decode_checkpoint(bytes(bad))
    with pytest.raises(FormatError):
        decode_checkpoint(raw[:-9])


def test_checkpoint_crc_is_crc32_of_body(rng):
    raw = encode_checkpoint(_bundle(rng))
    (stored,) = struct.unpack("<I", raw[-4:])
    assert stored == zlib.crc32(raw[:-4])


def test_model_forward_bit_exact_after_reload(tmp_path):
    from fae.autoencoder import FAEConfig, FeatureAutoencoder

    cfg = FAEConfig(feature_dim=16, grid_h=2, grid_w=2, latent_dim=4, enc_head_dim=8, dec_depth=1, dec_heads=2)
    model = randomize_(FeatureAutoencoder(cfg), 3)
    bundle_from_model("fae", model, {}).save(tmp_path / "m.faec")
    fresh = FeatureAutoencoder(cfg)
    load_model_params(fresh, CheckpointBundle.load(tmp_path / "m.faec").params)
    x = torch.randn(2, 2, 2, 16)
    assert torch.equal(model(x)[0], fresh(x)[0])


def test_pnm_roundtrip(tmp_path, rng):
    img = rng.uniform(size=(5, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    assert encode_ppm(img).startswith(b"P6\n7 5\n255\n")
    assert np.abs(read_pnm(tmp_path / "a.ppm") - img).max() <= 0.5 / 255 + 1e-12
    gray = rng.uniform(size=(4, 6))
    write_pgm(tmp_path / "a.pgm", gray)
    assert encode_pgm(gray).startswith(b"P5\n6 4\n255\n")
    assert np.abs(read_pnm(tmp_path / "a.pgm") - gray).max() <= 0.5 / 255 + 1e-12


def test_image_sheet_layout():
    imgs = np.zeros((5, 4, 4, 3))
    sheet = image_sheet(imgs, cols=3, pad=1)
    assert sheet.shape == (2 * 5 + 1, 3 * 5 + 1, 3)
    assert sheet[1:5, 1:5].max() == 0 and sheet[0].min() == 1


def test_grid_batch_rejects_heterogeneous_shapes(rng):
    from fae.errors import ShapeError

    with pytest.raises(ShapeError):
        GridBatch.from_grids([EmbeddingGrid(np.zeros((2, 2, 3))), EmbeddingGrid(np.zeros((2, 2, 4)))])
