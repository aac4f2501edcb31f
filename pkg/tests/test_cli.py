import numpy as np
import pytest

from fae.cli import main
from fae.formats import load_embeddings

from helpers import TINY_INI, run_tiny_pipeline


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    codes = run_tiny_pipeline(root, ini)
    return root, ini, codes


def test_every_stage_succeeds(tiny_run):
    root, _, codes = tiny_run
    assert all(code == 0 for code in codes.values()), codes
    for rel in ("data/train.faeb", "fae/fae.faec", "pix2/pixel2.faec", "ldm/ldm.faec", "samp/samples.faeb",
                "probe/metrics.csv"):
        assert (root / rel).is_file()
    samples = load_embeddings(root / "samp/samples.faeb")
    assert samples.values.shape == (4, 8, 8, 16) and np.isfinite(samples.values).all()


def test_refuses_overwrite_without_force(tiny_run, capsys):
    root, ini, _ = tiny_run
    argv = ["train-fae", "--config", str(ini), "--data", str(root / "data"), "--out", str(root / "fae")]
    before = (root / "fae/fae.faec").read_bytes()
    assert main(argv) == 2
    assert "overwrite" in capsys.readouterr().err
    assert (root / "fae/fae.faec").read_bytes() == before


def test_force_overwrite_reproduces(tiny_run):
    root, ini, _ = tiny_run
    before = (root / "fae/fae.faec").read_bytes()
    argv = ["train-fae", "--config", str(ini), "--data", str(root / "data"), "--out", str(root / "fae"), "--force"]
    assert main(argv) == 0
    assert (root / "fae/fae.faec").read_bytes() == before


def test_zero_samples_writes_empty_file(tiny_run):
    root, ini, _ = tiny_run
    out = root / "samp0"
    code = main(["sample", "--config", str(ini), "--ldm", str(root / "ldm/ldm.faec"), "--fae",
                 str(root / "fae/fae.faec"), "--pixel", str(root / "pix2/pixel2.faec"), "--n", "0",
                 "--out", str(out)])
    assert code == 0
    assert len(load_embeddings(out / "samples.faeb")) == 0


def test_bad_config_key_exits_2(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[fae]\nbogus = 1\n")
    assert main(["synth", "--config", str(ini), "--out", str(tmp_path / "o")]) == 2


def test_wrong_checkpoint_kind_exits_2(tiny_run, tmp_path):
    root, ini, _ = tiny_run
    code = main(["encode", "--config", str(ini), "--data", str(root / "data"), "--fae",
                 str(root / "ldm/ldm.faec"), "--out", str(tmp_path / "lat")])
    assert code == 2


def test_missing_input_exits_2(tmp_path):
    assert main(["train-ldm", "--latents", str(tmp_path / "none.faeb"), "--out", str(tmp_path / "o")]) == 2


def test_usage_error_from_argparse():
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--mode", "bogus"])
    assert exc.value.code == 2


def test_quick_verify_passes(capsys):
    assert main(["verify", "--quick", "--points", "1"]) == 0
    assert "PASS" in capsys.readouterr().out
