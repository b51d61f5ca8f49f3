"""Two-phase training loop and the checkpoint archive format."""

import io
import json
import logging
import os
import time
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .diffusion import CaTSG, LossTerms, ModelConfig, eps_loss
from .envinfer import Augmenter, SinkhornConfig, orthogonality_loss, swapped_loss_from_logits
from .errors import DataError, NumericalError
from .seeding import derive_seed, torch_generator

log = logging.getLogger(__name__)

CKPT_SCHEMA = 1


@dataclass
class TrainConfig:
    steps: int = 2000
    warmup_steps: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    p_drop: float = 0.2
    alpha_sw: float = 0.5
    beta_orth: float = 0.5
    sw_after_warmup: bool = True
    sinkhorn_reg: float = 0.05
    sinkhorn_iters: int = 3
    views: int = 2
    grad_clip: float = 1.0
    ckpt_every: int = 0
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError(f"p_drop must lie in [0, 1], got {self.p_drop}")
        if self.alpha_sw < 0 or self.beta_orth < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.views != 2:
            raise ValueError("swapped prediction uses exactly two views")


def loss_weights(ablation, cfg, warm):
    """(use_eps, alpha_sw, beta_orth) after applying the ablation variant."""
    alpha = cfg.alpha_sw
    beta = cfg.beta_orth
    if ablation == "no_sw":
        alpha = 0.0
    if ablation == "frozen_env":
        beta = 0.0
    if ablation == "no_env":
        alpha = beta = 0.0
    if not warm and not cfg.sw_after_warmup:
        alpha = 0.0
    return (not warm), alpha, beta


def loss_terms(model, x0, c, cfg, generator, warm=False, aug_stats=None, augmenter=Augmenter()):
    """All loss terms for one batch, combined per the model's ablation."""
    use_eps, alpha, beta = loss_weights(model.cfg.ablation, cfg, warm)
    out = LossTerms()
    total = torch.zeros((), dtype=x0.dtype)
    c_enc = model.ctx(c)
    if use_eps:
        out.eps, out.w = eps_loss(model, x0, c_enc, cfg.p_drop, generator)
        total = total + out.eps
    if model.has_env and alpha > 0:
        x_std, c_std, c_mask = aug_stats if aug_stats is not None else (None, None, None)
        views = [augmenter(x0, c, generator, x_std, c_std, c_mask) for _ in range(2)]
        s1 = model.infer(views[0][0], model.ctx(views[0][1])).s
        s2 = model.infer(views[1][0], model.ctx(views[1][1])).s
        sk = SinkhornConfig(cfg.sinkhorn_reg, cfg.sinkhorn_iters)
        out.sw = swapped_loss_from_logits(s1, s2, model.envinfer.tau, sk)
        total = total + alpha * out.sw
    if model.has_env and beta > 0:
        out.orth = orthogonality_loss(model.bank.E)
        total = total + beta * out.orth
    out.total = total
    return out


def train(bundle, model_cfg=None, cfg=None, out_path=None, progress=None):
    """Fit a CaTSG model on the train split of ``bundle``.

    Warm-up steps optimize only the environment terms; the joint phase adds
    the noise-regression loss. Returns the trained model; ``model.history``
    holds per-step losses.
    """
    model_cfg = model_cfg or ModelConfig()
    cfg = cfg or TrainConfig()
    split = bundle["train"]
    if len(split) < 2:
        raise DataError("training needs at least two samples")
    model = CaTSG(model_cfg, bundle.meta, seed=derive_seed(cfg.seed, "init"))
    x_all, c_all = model.to_model_space(split.x, split.c)
    gen = torch_generator(cfg.seed, "train")
    mask = model.ctx.continuous_mask()
    aug_stats = (x_all.reshape(-1, model.D).std(dim=0), c_all.reshape(-1, model.D_c).std(dim=0), mask)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), weight_decay=0.0)
    warmup = cfg.warmup_steps if model.has_env else 0
    history = []
    n = x_all.shape[0]
    t0 = time.time()
    for step in range(warmup + cfg.steps):
        warm = step < warmup
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen)
        try:
            terms = loss_terms(model, x_all[idx], c_all[idx], cfg, gen, warm=warm, aug_stats=aug_stats)
            if not torch.isfinite(terms.total):
                raise NumericalError(f"non-finite loss ({_fmt(terms)})")
        except NumericalError as e:
            snap = None
            if out_path is not None:
                snap = str(out_path) + ".nan-snapshot"
                save_checkpoint(model, snap, cfg)
            raise NumericalError(f"step {step}: {e}; snapshot: {snap}") from None
        opt.zero_grad(set_to_none=True)
        if terms.total.requires_grad:
            terms.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
        model.step = step + 1
        history.append({k: (None if v is None else float(v.detach())) for k, v in
                        (("eps", terms.eps), ("sw", terms.sw), ("orth", terms.orth), ("total", terms.total))})
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d %s (%.1fs)", step + 1, _fmt(terms), time.time() - t0)
            if progress:
                progress(step + 1, history[-1])
        if out_path is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            save_checkpoint(model, out_path, cfg, history)
    model.history = history
    model.train_cfg = cfg
    if out_path is not None:
        save_checkpoint(model, out_path, cfg, history)
    return model


def _fmt(terms):
    parts = []
    for name in ("eps", "sw", "orth", "total"):
        v = getattr(terms, name)
        if v is not None:
            parts.append(f"{name}={float(v.detach()):.4f}")
    return " ".join(parts)


def save_checkpoint(model, path, train_cfg=None, history=None):
    """Write a zip archive: manifest.json plus little-endian f32 blobs."""
    path = Path(path)
    state = model.state_dict()
    tensors = {}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            tensors[name] = list(arr.shape)
            _writestr(zf, f"params/{name}.f32", arr.tobytes(order="C"))
        manifest = {
            "schema_version": CKPT_SCHEMA,
            "model_config": asdict(model.cfg),
            "train_config": asdict(train_cfg) if train_cfg is not None else None,
            "meta": model.meta,
            "step": int(model.step),
            "tensors": tensors,
            "dtype": "float32-le",
        }
        _writestr(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        if history is not None:
            _writestr(zf, "history.json", json.dumps(history).encode())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def _writestr(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    zf.writestr(info, data)


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("schema_version") != CKPT_SCHEMA:
            raise DataError(f"unsupported checkpoint schema {manifest.get('schema_version')!r}")
        mcfg = _build(ModelConfig, manifest["model_config"])
        model = CaTSG(mcfg, manifest["meta"])
        state = {}
        for name, shape in manifest["tensors"].items():
            raw = np.frombuffer(zf.read(f"params/{name}.f32"), dtype="<f4").reshape(shape)
            state[name] = torch.from_numpy(raw.astype(np.float32))
        model.load_state_dict(state)
        if manifest.get("train_config"):
            model.train_cfg = _build(TrainConfig, manifest["train_config"])
        model.history = json.loads(zf.read("history.json")) if "history.json" in zf.namelist() else []
    model.step = manifest["step"]
    model.eval()
    return model


def _build(cls, data):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in data.items() if k in names})
