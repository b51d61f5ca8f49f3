"""``catsg`` command-line entry point."""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import torch

from . import pipeline as pl
from .bundle import read_bundle
from .config import parse_config, save_resolved
from .errors import CatsgError, ConfigError, DataError, NumericalError

log = logging.getLogger("catsg")


def _common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--ablation", choices=["full", "rand_env", "no_sw", "frozen_env", "no_env"])


def build_parser():
    ap = argparse.ArgumentParser(prog="catsg", description="Causal time-series generation toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate a harmonic-oscillator dataset")
    _common(p)
    p.add_argument("--scenario", choices=["VM", "VP"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="convert a CSV dataset into a series bundle")
    p.add_argument("--spec", required=True, help="air_quality, traffic, or a JSON spec file")
    p.add_argument("--csv", nargs="+", required=True)
    p.add_argument("--window-len", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a bundle")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("sample", help="generate from a checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["obs", "int", "cf"])
    p.add_argument("--omega", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--sampler", choices=["ddpm", "dpms2", "dpm_solver_2s"])
    p.add_argument("--split")
    p.add_argument("--action", help="JSON list of context edits for cf mode")
    p.add_argument("--limit", type=int, help="use only the first N samples of the split")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score generated samples against real data")
    _common(p)
    p.add_argument("--real", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--metrics", help="comma-separated subset of mdd,kl,mmd,jftsd")
    p.add_argument("--split", default=None)
    p.add_argument("--target", choices=["auto", "x", "xcf"], default="auto")
    p.add_argument("--out", required=True)

    p = sub.add_parser("diagnose", help="LOWESS and binned-mean tables per split")
    p.add_argument("--data", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--frac", type=float, default=0.3)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("embed-export", help="export environment posteriors or joint embeddings as CSV")
    _common(p)
    p.add_argument("--ckpt", help="export EnvInfer latents and weights for --data")
    p.add_argument("--data")
    p.add_argument("--real", help="export J-FTSD embeddings (embedders trained on this bundle)")
    p.add_argument("--gen")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="sampler-step or ablation sweep")
    _common(p)
    p.add_argument("--kind", choices=["steps", "ablation"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="checkpoint for the step sweep (trained if missing)")
    p.add_argument("--values", help="comma-separated step counts or ablation names")
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="gen-data -> train -> sample -> eval -> diagnose")
    _common(p)
    p.add_argument("--stages", help="comma-separated subset of " + ",".join(pl.STAGES))
    p.add_argument("--out", required=True)
    return ap


def split_overrides(argv):
    """Separate ``--section.key value`` pairs from regular arguments."""
    rest, overrides = [], []
    i = 0
    while i < len(argv):
        a = argv[i]
        if a.startswith("--") and "." in a.split("=", 1)[0]:
            key, _, val = a[2:].partition("=")
            if not _:
                if i + 1 >= len(argv):
                    raise ConfigError(f"missing value for --{key}")
                val = argv[i + 1]
                i += 1
            overrides.append((key, val))
        else:
            rest.append(a)
        i += 1
    return rest, overrides


def resolve(args, overrides):
    extra = list(overrides)
    if getattr(args, "seed", None) is not None:
        extra.append(("seed", str(args.seed)))
    if getattr(args, "ablation", None):
        extra.append(("ablation", args.ablation))
    if getattr(args, "scenario", None):
        extra.append(("dataset.scenario", args.scenario))
    for flag in ("mode", "omega", "steps", "sampler", "split"):
        v = getattr(args, flag, None)
        if v is not None and args.command == "sample":
            extra.append((f"sample.{flag}", str(v)))
    if getattr(args, "action", None):
        extra.append(("sample.action", args.action))
    if getattr(args, "metrics", None):
        extra.append(("eval.metrics", args.metrics))
    return parse_config(getattr(args, "config", None), extra)


def _out_dir(path):
    p = Path(path)
    return p if not p.suffix or p.is_dir() else p.parent


def dispatch(args, overrides):
    cmd = args.command
    t0 = time.time()
    if cmd == "ingest":
        out = Path(args.out)
        b = pl.ingest_csv(args.spec, args.csv, out, args.window_len)
        pl.Manifest(out).record("ingest", outputs=[str(out / "meta.json")], dataset_id=b.meta["dataset_id"],
                                seconds=round(time.time() - t0, 3))
        print(json.dumps({"splits": b.meta["splits"], "report": b.meta["ingest"]["report"]}, indent=2))
        return
    if cmd == "diagnose":
        _, bins, paths = pl.diagnose_stage(args.data, args.context, args.out, args.frac, args.bins)
        pl.Manifest(_out_dir(args.out)).record("diagnose", outputs=[str(p) for p in paths])
        return

    cfg = resolve(args, overrides)
    h = cfg.hash()
    if cmd == "gen-data":
        out = Path(args.out)
        b = pl.gen_data(cfg, out)
        save_resolved(cfg, out)
        pl.Manifest(out).record("gen-data", h, outputs=[str(out / "meta.json")], dataset_id=b.meta["dataset_id"],
                                seconds=round(time.time() - t0, 3))
    elif cmd == "train":
        m = pl.train_stage(cfg, args.data, args.out)
        d = _out_dir(args.out)
        save_resolved(cfg, d)
        pl.Manifest(d).record("train", h, outputs=[str(args.out)], checkpoint=str(args.out),
                              dataset_id=read_bundle(args.data).meta.get("dataset_id"), steps=m.step,
                              seconds=round(time.time() - t0, 3))
    elif cmd == "sample":
        out = Path(args.out)
        pl.sample_stage(cfg, args.ckpt, args.data, out, args.limit)
        save_resolved(cfg, out)
        pl.Manifest(out).record("sample", h, outputs=[str(out / "meta.json")], checkpoint=str(args.ckpt),
                                seconds=round(time.time() - t0, 3))
    elif cmd == "eval":
        split = args.split or cfg.sample.split
        report = pl.eval_stage(cfg, args.real, args.gen, split, args.target)
        pl.write_json(report, args.out)
        pl.Manifest(_out_dir(args.out)).record("eval", h, outputs=[str(args.out)],
                                               seconds=round(time.time() - t0, 3))
        print(json.dumps({k: v["value"] for k, v in report.items()}, indent=2))
    elif cmd == "embed-export":
        if args.ckpt:
            if not args.data:
                raise ConfigError("embed-export --ckpt needs --data")
            pl.export_posteriors(args.ckpt, args.data, args.out)
        elif args.real:
            pl.export_embeddings(cfg, args.real, args.out, args.gen)
        else:
            raise ConfigError("embed-export needs --ckpt/--data or --real")
        pl.Manifest(_out_dir(args.out)).record("embed-export", h, outputs=[str(args.out)])
    elif cmd == "sweep":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_resolved(cfg, out)
        if args.kind == "steps":
            values = [int(v) for v in (args.values or "5,10,20,50,100").split(",")]
            ckpt = Path(args.ckpt) if args.ckpt else out / "model.ckpt"
            if not ckpt.exists():
                pl.train_stage(cfg, args.data, ckpt)
            res = pl.step_sweep(cfg, ckpt, args.data, out, values)
        else:
            values = (args.values or "full,rand_env,no_sw,frozen_env").split(",")
            res = pl.ablation_sweep(cfg, args.data, out, values)
        pl.Manifest(out).record(f"sweep-{args.kind}", h, values=values, seconds=round(time.time() - t0, 3))
        print(json.dumps(res if args.kind == "ablation" else
                         {k: {m: r[m]["value"] for m in r} for k, r in res.items()}, indent=2))
    elif cmd == "run":
        stages = args.stages.split(",") if args.stages else pl.STAGES
        pl.run_pipeline(cfg, args.out, stages)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    threads = os.environ.get("CATSG_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        rest, overrides = split_overrides(argv)
        args = build_parser().parse_args(rest)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        dispatch(args, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return e.exit_code
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return e.exit_code
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return e.exit_code
    except CatsgError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
