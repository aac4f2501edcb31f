"""Shared fixtures-as-functions for the CLI tests."""
import csv
import io
from pathlib import Path

from fae.cli import main

TINY_INI = """\
[teacher]
train_per_class = 4
test_per_class = 2
[fae]
steps = 20
dec_depth = 1
[pixel]
steps = 10
gan_start = 5
depth = 1
[pixel2]
steps = 5
[ldm]
steps = 10
depth = 1
hidden_dim = 32
[sample]
n = 4
steps = 5
"""


def run_tiny_pipeline(root: Path, ini: Path) -> dict:
    """Run every training/sampling subcommand once under ``root``; returns exit codes by command."""
    c = ["--config", str(ini)]
    steps = [
        ("synth", ["synth", *c, "--out", str(root / "data")]),
        ("train-fae", ["train-fae", *c, "--data", str(root / "data"), "--out", str(root / "fae")]),
        ("train-pixel1", ["train-pixel1", *c, "--data", str(root / "data"), "--out", str(root / "pix1")]),
        ("train-pixel2", ["train-pixel2", *c, "--data", str(root / "data"), "--fae", str(root / "fae/fae.faec"),
                          "--pixel", str(root / "pix1/pixel1.faec"), "--out", str(root / "pix2")]),
        ("encode", ["encode", *c, "--data", str(root / "data"), "--fae", str(root / "fae/fae.faec"),
                    "--out", str(root / "lat")]),
        ("train-ldm", ["train-ldm", *c, "--latents", str(root / "lat/latents.faeb"), "--out", str(root / "ldm")]),
        ("sample", ["sample", *c, "--ldm", str(root / "ldm/ldm.faec"), "--fae", str(root / "fae/fae.faec"),
                    "--pixel", str(root / "pix2/pixel2.faec"), "--out", str(root / "samp")]),
        ("probe", ["probe", *c, "--data", str(root / "data"), "--fae", str(root / "fae/fae.faec"),
                   "--out", str(root / "probe")]),
    ]
    return {name: main(argv) for name, argv in steps}


def comparable_bytes(path: Path) -> bytes:
    """File contents, with the wall-clock column dropped from metrics CSVs."""
    raw = path.read_bytes()
    if path.name != "metrics.csv":
        return raw
    rows = list(csv.reader(io.StringIO(raw.decode())))
    if "wall_ms" not in rows[0]:
        return raw
    k = rows[0].index("wall_ms")
    return "\n".join(",".join(r[:k] + r[k + 1:]) for r in rows).encode()


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): comparable_bytes(p) for p in sorted(root.rglob("*")) if p.is_file()}
