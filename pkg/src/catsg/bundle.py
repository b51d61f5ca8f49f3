"""Series-bundle directory format shared by the simulator and CSV ingest.

Layout::

    meta.json            dataset description (see ``SeriesBundle.meta``)
    x.<split>.bin        float32 LE, row-major [sample, time, D]
    c.<split>.bin        float32 LE, row-major [sample, time, D_c]
    params.<split>.jsonl one JSON object per sample (generating metadata)
    xcf.<split>.bin      optional counterfactual targets
    ccf.<split>.bin      optional counterfactual contexts

Values are stored in physical units. Continuous channels are min-max
normalized with the train-split statistics in ``meta["normalization"]`` when
fed to a model; categorical and phase channels pass through unchanged.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
_DTYPE = np.dtype("<f4")


@dataclass
class SplitData:
    x: np.ndarray
    c: np.ndarray
    params: list = field(default_factory=list)
    xcf: np.ndarray | None = None
    ccf: np.ndarray | None = None

    def __len__(self):
        return self.x.shape[0]


@dataclass
class SeriesBundle:
    meta: dict
    splits: dict

    def __getitem__(self, name):
        try:
            return self.splits[name]
        except KeyError:
            raise DataError(f"bundle has no split {name!r}; available: {sorted(self.splits)}") from None

    @property
    def has_cf(self):
        return any(s.xcf is not None for s in self.splits.values())

    @property
    def D(self):
        return int(self.meta["D"])

    @property
    def D_c(self):
        return int(self.meta["D_c"])

    @property
    def T(self):
        return int(self.meta["T"])

    def x_kinds(self):
        return self.meta["channel_kinds"][: self.D]

    def c_kinds(self):
        return self.meta["channel_kinds"][self.D:]


def write_bundle(bundle, out_dir):
    """Write ``bundle`` to ``out_dir``; files are replaced atomically."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = dict(bundle.meta)
    meta["schema_version"] = SCHEMA_VERSION
    meta["splits"] = {name: len(s) for name, s in bundle.splits.items()}
    for name, s in bundle.splits.items():
        _write_bin(out / f"x.{name}.bin", s.x)
        _write_bin(out / f"c.{name}.bin", s.c)
        if s.xcf is not None:
            _write_bin(out / f"xcf.{name}.bin", s.xcf)
            _write_bin(out / f"ccf.{name}.bin", s.ccf)
        lines = "".join(json.dumps(p, sort_keys=True) + "\n" for p in s.params)
        _atomic_write(out / f"params.{name}.jsonl", lines.encode())
    _atomic_write(out / "meta.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    bundle.meta = meta
    return out


def read_bundle(path):
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{root} is not a series bundle (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported bundle schema_version {meta.get('schema_version')!r}")
    T, D, D_c = int(meta["T"]), int(meta["D"]), int(meta["D_c"])
    splits = {}
    for name, count in meta["splits"].items():
        x = _read_bin(root / f"x.{name}.bin", (count, T, D))
        c = _read_bin(root / f"c.{name}.bin", (count, T, D_c))
        params = []
        p_path = root / f"params.{name}.jsonl"
        if p_path.exists():
            params = [json.loads(line) for line in p_path.read_text().splitlines() if line.strip()]
        xcf = ccf = None
        if (root / f"xcf.{name}.bin").exists():
            xcf = _read_bin(root / f"xcf.{name}.bin", (count, T, D))
            ccf = _read_bin(root / f"ccf.{name}.bin", (count, T, D_c))
        splits[name] = SplitData(x=x, c=c, params=params, xcf=xcf, ccf=ccf)
    return SeriesBundle(meta=meta, splits=splits)


def minmax_stats(x_train, c_train, kinds):
    """Per-channel train min/max over [x channels..., c channels...].

    Non-continuous channels get (0, 1) so normalization is the identity.
    """
    flat = np.concatenate(
        [x_train.reshape(-1, x_train.shape[-1]), c_train.reshape(-1, c_train.shape[-1])], axis=1
    ).astype(np.float64)
    lo, hi = [], []
    for j, kind in enumerate(kinds):
        if kind == "continuous" and flat.shape[0]:
            lo.append(float(flat[:, j].min()))
            hi.append(float(flat[:, j].max()))
        else:
            lo.append(0.0)
            hi.append(1.0)
    return {"min": lo, "max": hi}


class Normalizer:
    """Channel-wise min-max map between physical and model space."""

    def __init__(self, meta):
        D = int(meta["D"])
        lo = np.asarray(meta["normalization"]["min"], dtype=np.float64)
        hi = np.asarray(meta["normalization"]["max"], dtype=np.float64)
        span = hi - lo
        span[span == 0] = 1.0
        self.x_lo, self.x_span = lo[:D], span[:D]
        self.c_lo, self.c_span = lo[D:], span[D:]

    def x(self, x):
        return ((np.asarray(x, dtype=np.float64) - self.x_lo) / self.x_span).astype(np.float32)

    def c(self, c):
        return ((np.asarray(c, dtype=np.float64) - self.c_lo) / self.c_span).astype(np.float32)

    def x_inverse(self, x):
        return (np.asarray(x, dtype=np.float64) * self.x_span + self.x_lo).astype(np.float32)


def _write_bin(path, arr):
    _atomic_write(path, np.ascontiguousarray(arr, dtype=_DTYPE).tobytes(order="C"))


def _read_bin(path, shape):
    if not path.exists():
        raise DataError(f"missing bundle file {path.name}")
    raw = np.fromfile(path, dtype=_DTYPE)
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise DataError(f"{path.name}: expected {expected} floats for shape {shape}, found {raw.size}")
    return raw.reshape(shape).astype(np.float32)


def _atomic_write(path, data):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
