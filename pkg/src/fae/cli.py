"""``fae`` command line: one binary, one subcommand per stage.

Exit codes: 0 success, 2 configuration/usage/format error, 3 numeric or training failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import pipeline
from .ablation import AblationBudget, run_ablation, write_ablation
from .config import RunConfig
from .errors import FAEError, NumericError, TrainingError
from .runtime import set_workers
from .verify import report, run_suite

log = logging.getLogger("fae")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--config", type=Path, help="run config (INI); defaults are used when omitted")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--workers", type=int, help="override [run] workers")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--force", action="store_true", help="allow overwriting existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fae", description="Feature autoencoder + latent flow pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the synthetic dataset and teacher embeddings")
    _common(p)

    p = sub.add_parser("train-fae", help="stage Ia: feature encoder + feature decoder")
    _common(p)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("train-pixel1", help="stage Ib: pixel decoder on noisy teacher features")
    _common(p)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("train-pixel2", help="fine-tune the stage-Ib pixel decoder on FAE reconstructions")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--fae", type=Path, required=True)
    p.add_argument("--pixel", type=Path, required=True, help="stage-Ib checkpoint")

    p = sub.add_parser("encode", help="write standardized training latents")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--fae", type=Path, required=True)

    p = sub.add_parser("train-ldm", help="stage II: flow-matching model on latents")
    _common(p)
    p.add_argument("--latents", type=Path, required=True)

    p = sub.add_parser("sample", help="latents -> features -> pixels")
    _common(p)
    p.add_argument("--ldm", type=Path, required=True)
    p.add_argument("--fae", type=Path, required=True)
    p.add_argument("--pixel", type=Path, required=True)
    p.add_argument("--n", type=int, help="override [sample] n")
    p.add_argument("--mode", choices=("ode", "sde"), help="override [sample] mode")

    p = sub.add_parser("probe", help="semantic-preservation metrics and similarity maps")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--fae", type=Path, required=True)
    p.add_argument("--pixel", type=Path, help="optional pixel decoder for the Frechet proxy")

    p = sub.add_parser("verify", help="run the invariant suite")
    _common(p, out_required=False)
    p.add_argument("--points", type=int, default=5, help="random points per gradient check")
    p.add_argument("--quick", action="store_true", help="smaller Monte-Carlo sizes")

    p = sub.add_parser("ablate", help="tiny-budget ablation matrix")
    _common(p)
    p.add_argument("--fae-steps", type=int, default=AblationBudget.fae_steps)
    p.add_argument("--ldm-steps", type=int, default=AblationBudget.ldm_steps)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.with_run(seed=args.seed, workers=args.workers)
    if args.command == "sample" and (args.n is not None or args.mode is not None):
        import dataclasses
        upd = {k: v for k, v in dict(n=args.n, mode=args.mode).items() if v is not None}
        cfg = dataclasses.replace(cfg, sample=dataclasses.replace(cfg.sample, **upd))
    return cfg


def dispatch(args, cfg: RunConfig) -> int:
    c, out, force = args.command, args.out, args.force
    if c == "synth":
        res = pipeline.synth(cfg, out, force)
    elif c == "train-fae":
        res = pipeline.run_train_fae(cfg, args.data, out, force)
    elif c == "train-pixel1":
        res = pipeline.run_train_pixel1(cfg, args.data, out, force)
    elif c == "train-pixel2":
        res = pipeline.run_train_pixel2(cfg, args.data, args.fae, args.pixel, out, force)
    elif c == "encode":
        res = pipeline.run_encode(cfg, args.data, args.fae, out, force)
    elif c == "train-ldm":
        res = pipeline.run_train_ldm(cfg, args.latents, out, force)
    elif c == "sample":
        res = pipeline.run_sample(cfg, args.ldm, args.fae, args.pixel, out, force)
    elif c == "probe":
        res = pipeline.run_probe(cfg, args.data, args.fae, out, args.pixel, force)
    elif c == "verify":
        set_workers(cfg.run.workers)
        ok = report(run_suite(points=args.points, quick=args.quick), sys.stdout)
        if out is not None:
            pipeline.Outputs(out, force).claim()
            pipeline.Outputs(out, force).write_config(cfg)
        return EXIT_OK if ok else EXIT_NUMERIC
    elif c == "ablate":
        outputs = pipeline.Outputs(out, force)
        (path,) = outputs.claim("ablation.csv")
        outputs.write_config(cfg)
        set_workers(cfg.run.workers)
        budget = AblationBudget(fae_steps=args.fae_steps, ldm_steps=args.ldm_steps)
        write_ablation(path, run_ablation(cfg, budget))
        res = {"csv": path}
    else:  # pragma: no cover - argparse guards this
        raise AssertionError(c)
    for k, v in res.items():
        print(f"{k}: {v}")
    return EXIT_OK


def main(argv=None) -> int:
    level = os.environ.get("FAE_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(args)
        code = dispatch(args, cfg)
    except (NumericError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FAEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
