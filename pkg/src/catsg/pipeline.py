"""Stage functions behind the command line and the resumable run pipeline."""

import csv
import json
import logging
import platform
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__, kernels
from . import oscillator as osc
from .bundle import SeriesBundle, SplitData, read_bundle, write_bundle
from .config import save_resolved
from .diagnostics import bin_edges, binned_means, lowess_diagnostic, write_bins_csv, write_lowess_csv
from .errors import ConfigError, DataError, NumericalError
from .metrics import HistogramSpec, evaluate, train_embedders
from .sampling import sample_counterfactual, sample_interventional
from .seeding import derive_seed
from .train import load_checkpoint, train

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train", "sample", "eval", "diagnose")
MANIFEST = "manifest.json"


def versions():
    import scipy

    return {
        "catsg": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "kernel_backend": kernels.BACKEND,
    }


class Manifest:
    """One manifest.json per artifact directory, updated stage by stage."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path = self.dir / MANIFEST
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {"stages": {}}

    def record(self, stage, config_hash=None, status="ok", **info):
        entry = {"status": status, "config_hash": config_hash, **info}
        self.data["stages"][stage] = entry
        self.data["versions"] = versions()
        self.save()

    def done(self, stage, config_hash):
        e = self.data["stages"].get(stage)
        if not e or e.get("status") != "ok" or e.get("config_hash") != config_hash:
            return False
        return all(Path(p).exists() for p in e.get("outputs", []))

    def save(self):
        tmp = self.path.with_name(MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path)


def gen_data(cfg, out_dir):
    d = cfg.dataset
    seq = osc.SeqConfig(T=d.T, dt=d.dt, substeps=d.substeps)
    seed = derive_seed(cfg.seed, "data")
    bundle = osc.build_dataset(d.scenario, d.counts, seq, seed=seed)
    if d.cf_pairs:
        bundle = osc.build_cf_pairs(bundle, osc.COUNTERFACTUAL_INIT, seed=derive_seed(cfg.seed, "cf"))
    write_bundle(bundle, out_dir)
    return bundle


def ingest_csv(spec_ref, csv_paths, out_dir, window_len=None):
    from .ingest import ingest, load_spec

    spec = load_spec(spec_ref)
    if window_len is not None:
        spec = replace(spec, window_len=int(window_len))
    bundle = ingest(spec, csv_paths)
    write_bundle(bundle, out_dir)
    return bundle


def train_stage(cfg, data_dir, ckpt_path):
    bundle = read_bundle(data_dir)
    tcfg = replace(cfg.train, seed=derive_seed(cfg.seed, "train"))
    Path(ckpt_path).parent.mkdir(parents=True, exist_ok=True)
    return train(bundle, cfg.model, tcfg, out_path=ckpt_path)


def apply_action(c, meta, action):
    """Apply context edits to physical-unit contexts ``c`` (N, T, D_c).

    Each edit is {"channel": name, "set" | "add" | "scale": value}; "set" on a
    categorical channel takes a vocabulary token.
    """
    c = np.array(c, dtype=np.float32, copy=True)
    D = int(meta["D"])
    names = meta["channel_names"][D:]
    kinds = meta["channel_kinds"][D:]
    for edit in action or []:
        name = edit.get("channel")
        if name not in names:
            raise ConfigError(f"action channel {name!r} not among contexts {names}")
        j = names.index(name)
        ops = [k for k in ("set", "add", "scale") if k in edit]
        if len(ops) != 1:
            raise ConfigError(f"action on {name!r} needs exactly one of set/add/scale")
        op, val = ops[0], edit[ops[0]]
        if kinds[j] == "categorical":
            if op != "set":
                raise ConfigError(f"categorical channel {name!r} only supports 'set'")
            vocab = meta.get("vocab", {}).get(name, [])
            val = vocab.index(val) if val in vocab else 0
        if op == "set":
            c[..., j] = val
        elif op == "add":
            c[..., j] += val
        else:
            c[..., j] *= val
    return c


def sample_stage(cfg, ckpt, data_dir, out_dir, limit=None):
    """Generate for ``cfg.sample.split``; writes a one-split bundle.

    int/obs modes condition on the split's contexts. cf mode abducts from
    the factual pairs and acts with the stored counterfactual contexts, or
    with ``cfg.sample.action`` applied to the factual contexts.
    """
    s = cfg.sample
    model = load_checkpoint(ckpt) if not isinstance(ckpt, torch.nn.Module) else ckpt
    bundle = read_bundle(data_dir)
    split = bundle[s.split]
    n = len(split) if limit is None else min(limit, len(split))
    gcfg = cfg.guidance(derive_seed(cfg.seed, "sample"))
    if s.mode == "cf":
        if s.action:
            c_prime = apply_action(split.c[:n], bundle.meta, s.action)
        elif split.ccf is not None:
            c_prime = split.ccf[:n]
        else:
            raise DataError(f"split {s.split!r} has no counterfactual contexts and no action was given")
        x = sample_counterfactual(model, split.x[:n], split.c[:n], c_prime, gcfg)
        c_out = c_prime
    else:
        x = sample_interventional(model, split.c[:n], gcfg)
        c_out = split.c[:n]
    if not np.isfinite(x).all():
        raise NumericalError("generated samples contain non-finite values")
    meta = dict(bundle.meta)
    meta["generated"] = {"mode": s.mode, "omega": gcfg.omega, "steps": gcfg.steps, "sampler": gcfg.sampler,
                         "seed": gcfg.seed, "source_split": s.split, "checkpoint_step": int(model.step),
                         "ablation": model.cfg.ablation}
    meta["has_cf"] = False
    out = SeriesBundle(meta=meta, splits={s.split: SplitData(x=x, c=c_out, params=split.params[:n])})
    write_bundle(out, out_dir)
    return out


def eval_stage(cfg, real_dir, gen_dir, split="test", field="auto", embedders=None):
    """Compare a generated bundle with the real split.

    ``field`` picks the real target: "x", "xcf" or "auto" (xcf for
    counterfactual generations).
    """
    real = read_bundle(real_dir)
    gen = read_bundle(gen_dir)
    g = gen[split]
    r = real[split]
    if field == "auto":
        field = "xcf" if gen.meta.get("generated", {}).get("mode") == "cf" else "x"
    if field == "xcf":
        if r.xcf is None:
            raise DataError("real bundle has no counterfactual targets")
        rx, rc = r.xcf, r.ccf
    else:
        rx, rc = r.x, r.c
    n = min(len(g), len(rx))
    rx, rc = rx[:n], rc[:n]
    e = cfg.eval
    if "jftsd" in e.metrics and embedders is None:
        tr = real["train"]
        embedders = train_embedders(tr.x, tr.c, real.meta, d_e=e.d_e, steps=e.embed_steps,
                                    seed=derive_seed(cfg.seed, "embed"))
    return evaluate(rx, rc, g.x[:n], g.c[:n], e.metrics, embedders, HistogramSpec(e.bins, e.eps), e.bandwidth)


def diagnose_stage(data_dir, context, out_csv, frac=0.3, n_bins=10, grid_size=50, max_points=20000, seed=0):
    """LOWESS curves and binned means of the target against one context channel.

    Time points are pooled; each split is subsampled to ``max_points``.
    """
    bundle = read_bundle(data_dir)
    D = bundle.D
    names = bundle.meta["channel_names"]
    if context not in names[D:]:
        raise ConfigError(f"unknown context channel {context!r}; choose from {names[D:]}")
    j = names[D:].index(context)
    rng = np.random.default_rng(seed)
    xs, cs, labels = [], [], []
    for name in bundle.splits:
        s = bundle[name]
        x = s.x[..., 0].ravel().astype(np.float64)
        c = s.c[..., j].ravel().astype(np.float64)
        if len(x) > max_points:
            idx = np.sort(rng.choice(len(x), max_points, replace=False))
            x, c = x[idx], c[idx]
        xs.append(x)
        cs.append(c)
        labels.append(np.full(len(x), name))
    x, c, lab = np.concatenate(xs), np.concatenate(cs), np.concatenate(labels)
    rows = lowess_diagnostic(x, c, lab, frac=frac, grid_size=grid_size)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    write_lowess_csv(rows, out_csv)
    train_c = c[lab == "train"] if "train" in bundle.splits else c
    bins = binned_means(x, c, lab, bin_edges(train_c, n_bins))
    bins_path = out_csv.with_name(out_csv.stem + ".bins.csv")
    write_bins_csv(bins, bins_path)
    return rows, bins, [out_csv, bins_path]


@torch.no_grad()
def export_posteriors(ckpt, data_dir, out_csv):
    """Per-sample EnvInfer latents h and posterior weights w as CSV."""
    model = load_checkpoint(ckpt) if not isinstance(ckpt, torch.nn.Module) else ckpt
    if not model.has_env:
        raise ConfigError("checkpoint has no environment bank (no_env ablation)")
    bundle = read_bundle(data_dir)
    H, K = model.cfg.H, model.K
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "split"] + [f"h_{i}" for i in range(H)] + [f"w_{k}" for k in range(K)])
        for name, s in bundle.splits.items():
            x, c = model.to_model_space(s.x, s.c)
            out = model.infer(x, model.ctx(c))
            for i, (h, wk) in enumerate(zip(out.h.double().numpy(), out.w.double().numpy())):
                w.writerow([i, name] + [repr(float(v)) for v in h] + [repr(float(v)) for v in wk])
    return out_csv


def export_embeddings(cfg, real_dir, out_csv, gen_dir=None):
    real = read_bundle(real_dir)
    tr = real["train"]
    emb = train_embedders(tr.x, tr.c, real.meta, d_e=cfg.eval.d_e, steps=cfg.eval.embed_steps,
                          seed=derive_seed(cfg.seed, "embed"))
    sources = [("real", real)] + ([("gen", read_bundle(gen_dir))] if gen_dir else [])
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "split", "index"] + [f"z{i}" for i in range(2 * emb.d_e)])
        for src, b in sources:
            for name, s in b.splits.items():
                z = emb.embed(s.x, s.c)
                for i, row in enumerate(z):
                    w.writerow([src, name, i] + [repr(float(v)) for v in row])
    return out_csv


def run_pipeline(cfg, out_dir, stages=STAGES):
    """Run the requested stages in order inside ``out_dir``.

    Completed stages (same config hash, outputs present) are skipped, so a
    failed run resumes where it stopped.
    """
    out = Path(out_dir)
    man = Manifest(out)
    save_resolved(cfg, out)
    h = cfg.hash()
    man.data["config_hash"] = h
    data_dir, ckpt, gen_dir = out / "data", out / "model.ckpt", out / "samples"
    report_path, curves = out / "report.json", out / "curves.csv"
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stage(s) {unknown}; expected a subset of {STAGES}")
    for stage in STAGES:
        if stage not in stages or man.done(stage, h):
            continue
        t0 = time.time()
        try:
            if stage == "gen-data":
                if cfg.dataset.spec:
                    b = ingest_csv(cfg.dataset.spec, cfg.dataset.csv, data_dir, cfg.dataset.window_len)
                else:
                    b = gen_data(cfg, data_dir)
                info = {"outputs": [str(data_dir / "meta.json")], "dataset_id": b.meta["dataset_id"]}
            elif stage == "train":
                m = train_stage(cfg, data_dir, ckpt)
                info = {"outputs": [str(ckpt)], "checkpoint": str(ckpt), "steps": m.step}
            elif stage == "sample":
                sample_stage(cfg, ckpt, data_dir, gen_dir)
                info = {"outputs": [str(gen_dir / "meta.json")]}
            elif stage == "eval":
                report = eval_stage(cfg, data_dir, gen_dir, cfg.sample.split)
                write_json(report, report_path)
                info = {"outputs": [str(report_path)]}
            else:
                b = read_bundle(data_dir)
                ctx = cfg.eval.context or b.meta["channel_names"][b.D]
                _, _, paths = diagnose_stage(data_dir, ctx, curves, frac=cfg.eval.frac)
                info = {"outputs": [str(p) for p in paths]}
        except Exception as e:
            man.record(stage, h, status="failed", error=f"{type(e).__name__}: {e}", seconds=time.time() - t0)
            raise
        man.record(stage, h, seconds=round(time.time() - t0, 3), **info)
    return man


def write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def step_sweep(cfg, ckpt, data_dir, out_dir, steps_list=(5, 10, 20, 50, 100)):
    """One report per sampler step count on the same checkpoint."""
    out = Path(out_dir)
    model = load_checkpoint(ckpt)
    reports = {}
    embedders = None
    for n in steps_list:
        c = replace(cfg, sample=replace(cfg.sample, steps=int(n)))
        gen_dir = out / f"steps_{n}"
        sample_stage(c, model, data_dir, gen_dir)
        if "jftsd" in cfg.eval.metrics and embedders is None:
            real = read_bundle(data_dir)
            embedders = train_embedders(real["train"].x, real["train"].c, real.meta, d_e=cfg.eval.d_e,
                                        steps=cfg.eval.embed_steps, seed=derive_seed(cfg.seed, "embed"))
        rep = eval_stage(c, data_dir, gen_dir, cfg.sample.split, embedders=embedders)
        write_json(rep, gen_dir / "report.json")
        reports[int(n)] = rep
    write_json({str(k): v for k, v in reports.items()}, out / "sweep_steps.json")
    return reports


def ablation_sweep(cfg, data_dir, out_dir, ablations=("full", "rand_env", "no_sw", "frozen_env")):
    """Train each variant and compare counterfactual generations."""
    out = Path(out_dir)
    table = {}
    for ab in ablations:
        c = replace(cfg, ablation=ab, model=replace(cfg.model, ablation=ab),
                    sample=replace(cfg.sample, mode="cf"))
        ckpt = out / ab / "model.ckpt"
        model = train_stage(c, data_dir, ckpt)
        gen_dir = out / ab / "samples"
        sample_stage(c, model, data_dir, gen_dir)
        rep = eval_stage(c, data_dir, gen_dir, c.sample.split, field="xcf")
        write_json(rep, out / ab / "report.json")
        table[ab] = {k: v["value"] for k, v in rep.items()}
    write_json(table, out / "sweep_ablation.json")
    return table
