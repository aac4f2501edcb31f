"""Seeding, optimizer schedules, metrics logging and atomic file output."""
from __future__ import annotations

import contextlib
import csv
import hashlib
import logging
import math
import os
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("fae")


def substream(seed: int, *names) -> int:
    """Derive a 63-bit seed for a named (stage, purpose, ...) substream of ``seed``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def torch_generator(seed: int, *names) -> torch.Generator:
    return torch.Generator().manual_seed(substream(seed, *names))


def numpy_rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(substream(seed, *names))


@contextlib.contextmanager
def seeded(seed: int, *names):
    """Run a block (typically module construction) under a private, seeded global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(substream(seed, *names))
        yield


def set_workers(n: int) -> None:
    torch.set_num_threads(max(1, int(n)))
    torch.use_deterministic_algorithms(True)


def cosine_with_warmup(warmup: int, total: int, min_ratio: float = 0.0):
    """LambdaLR factor: linear warmup to 1, then cosine decay to ``min_ratio``."""

    def factor(step):
        if warmup > 0 and step < warmup:
            return (step + 1) / warmup
        if total <= warmup:
            return 1.0
        progress = min(1.0, (step - warmup) / max(1, total - warmup))
        return min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * progress))

    return factor


def make_adamw(params, lr, weight_decay=0.0, betas=(0.9, 0.999)):
    return torch.optim.AdamW(params, lr=lr, betas=betas, weight_decay=weight_decay)


class MetricsLog:
    """Append-only CSV of (stage, step, metric, value, wall_ms, seed)."""

    header = ("stage", "step", "metric", "value", "wall_ms", "seed")

    def __init__(self, path: str | Path | None = None, seed: int = 0):
        self.path = Path(path) if path else None
        self.seed = seed
        self.rows: list[tuple] = []
        self._last_step: dict[str, int] = {}
        self._t0 = time.perf_counter()
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.header)

    def log(self, stage: str, step: int, **metrics):
        if step < self._last_step.get(stage, -1):
            raise ValueError(f"steps must be monotone per stage ({stage}: {step})")
        self._last_step[stage] = step
        wall = int((time.perf_counter() - self._t0) * 1000)
        rows = [(stage, step, k, float(v), wall, self.seed) for k, v in metrics.items()]
        self.rows.extend(rows)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerows(rows)


def write_csv(path, header, rows):
    def emit(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)

    atomic_write(path, emit)


def atomic_write(path, emit) -> None:
    """Call ``emit(tmp_path)`` then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        emit(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    def emit(tmp):
        with open(tmp, "wb") as fh:
            fh.write(data)

    atomic_write(path, emit)
