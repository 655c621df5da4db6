"""Command line entry point: ``fend synth | pipeline | eval``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .pipeline import ABLATIONS, Pipeline, StageError, StaleCheckpointError, load_config
from .trajdata import ConfigError, FormatError, save_split, synth_longtail

log = logging.getLogger("fend")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fend", description="Long-tail trajectory prediction experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic long-tail dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--tail", type=float, default=0.1)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="overwrite an existing output file")

    for name, helptext in (("pipeline", "run extractor, clustering, training and evaluation"),
                           ("eval", "regenerate reports from stored checkpoints")):
        q = sub.add_parser(name, help=helptext)
        q.add_argument("config", help="TOML or JSON run configuration")
        q.add_argument("--seeds", type=int, nargs="+", help="override the config seed; one run per seed")
        q.add_argument("--run-dir", help="explicit run directory (default: <out_dir>/run-<config hash>)")
        q.add_argument("--export-predictions", action="store_true")
        if name == "pipeline":
            q.add_argument("--ablate", nargs="+", default=[], choices=sorted(ABLATIONS))
            q.add_argument("--force", action="store_true", help="discard checkpoints from another config")
    return p


def cmd_synth(args) -> int:
    if args.n < 1:
        raise ConfigError("n", "must be >= 1")
    if not 0.0 < args.tail < 1.0:
        raise ConfigError("tail", f"must lie in (0, 1), got {args.tail}")
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    split = synth_longtail(args.n, args.tail, seed=args.seed, noise_sigma=args.noise)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_split(split, out)
    print(f"wrote {len(split.train)} train / {len(split.test)} test samples to {out}")
    return 0


def _configs(args):
    cfg = load_config(args.config)
    if getattr(args, "ablate", None):
        cfg.ablate = tuple(args.ablate)
    if args.export_predictions:
        cfg.export_predictions = True
    seeds = args.seeds or [cfg.seed]
    for seed in seeds:
        c = dataclasses.replace(cfg, seed=seed)
        c.validate()
        yield c


def _summary(result) -> None:
    for name, rep in result["reports"].items():
        print(f"{name:10s} " + "  ".join(rep.row()))
    print(f"reports in {result['out']}")


def cmd_pipeline(args) -> int:
    cfgs = list(_configs(args))
    if args.run_dir and len(cfgs) > 1:
        raise UsageError("--run-dir cannot be combined with several --seeds")
    for cfg in cfgs:
        pipe = Pipeline(cfg, run_dir=args.run_dir, force=args.force)
        log.info("seed %s -> %s", cfg.seed, pipe.run_dir)
        _summary(pipe.run())
    return 0


def cmd_eval(args) -> int:
    for cfg in _configs(args):
        run_dir = Path(args.run_dir) if args.run_dir else Path(cfg.out_dir) / f"run-{cfg.digest()}"
        for name in ("baseline", "fend"):
            ck = run_dir / f"{name}.pt"
            if not ck.exists():
                print(f"error: missing checkpoint {ck}", file=sys.stderr)
                return 1
        pipe = Pipeline(cfg, run_dir=run_dir)
        _summary(pipe.evaluate())
    return 0


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"synth": cmd_synth, "pipeline": cmd_pipeline, "eval": cmd_eval}[args.command]
    try:
        return handler(args)
    except ConfigError as e:
        print(f"error: invalid setting {e}", file=sys.stderr)
        return 2
    except (UsageError, StaleCheckpointError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        return 1
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

