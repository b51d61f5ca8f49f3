"""CSV ingest for the hourly air-quality and traffic datasets.

Rows are typed and imputed, assigned to train/val/test by an environment
proxy (monitoring station or temperature band), cut into non-overlapping
windows of contiguous hourly data and written in the series-bundle format.
"""

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .bundle import SPLITS, SeriesBundle, SplitData, minmax_stats
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

UNK = "<UNK>"
KINDS = ("continuous", "categorical")
PHASE_PERIOD = 24.0


class SchemaError(DataError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "continuous"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"column {self.name!r}: kind must be one of {KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class StationPartition:
    column: str
    stations: dict

    def assign(self, frame):
        lookup = {s: split for split, names in self.stations.items() for s in names}
        seen = {}
        for s, split in ((s, sp) for sp, names in self.stations.items() for s in names):
            if s in seen:
                raise ConfigError(f"station {s!r} listed in both {seen[s]!r} and {split!r}")
            seen[s] = split
        return frame[self.column].astype(str).map(lookup)


@dataclass(frozen=True)
class Threshold:
    """train: v < lo; val: lo <= v <= hi; test: v > hi (after adding ``offset``)."""

    variable: str
    lo: float
    hi: float
    offset: float = 0.0

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ConfigError(f"threshold bounds out of order: {self.lo} > {self.hi}")

    def values(self, frame):
        return pd.to_numeric(frame[self.variable], errors="coerce") + self.offset

    def assign(self, frame):
        v = self.values(frame)
        out = pd.Series(np.nan, index=frame.index, dtype=object)
        out[v < self.lo] = "train"
        out[(v >= self.lo) & (v <= self.hi)] = "val"
        out[v > self.hi] = "test"
        return out


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    target_column: str
    context_columns: tuple
    split_rule: object
    timestamp: tuple = ("date_time",)
    group_column: str | None = None
    window_len: int = 24
    phase: bool = True

    def __post_init__(self):
        names = [c.name for c in self.context_columns]
        if self.target_column in names:
            raise ConfigError(f"target {self.target_column!r} must not be a context column")
        if isinstance(self.split_rule, Threshold) and self.split_rule.variable in names:
            raise ConfigError(f"split variable {self.split_rule.variable!r} must not be a context column")
        if self.window_len < 1:
            raise ConfigError("window_len must be >= 1")

    @property
    def required_columns(self):
        cols = [self.target_column, *(c.name for c in self.context_columns), *self.timestamp]
        if self.group_column:
            cols.append(self.group_column)
        rule = self.split_rule
        cols.append(rule.column if isinstance(rule, StationPartition) else rule.variable)
        return list(dict.fromkeys(cols))

    def to_dict(self):
        rule = self.split_rule
        kind = "station_partition" if isinstance(rule, StationPartition) else "threshold"
        return {
            "name": self.name,
            "target_column": self.target_column,
            "context_columns": [asdict(c) for c in self.context_columns],
            "split_rule": {"type": kind, **asdict(rule)},
            "timestamp": list(self.timestamp),
            "group_column": self.group_column,
            "window_len": self.window_len,
            "phase": self.phase,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        rule = dict(d.pop("split_rule"))
        kind = rule.pop("type", None)
        if kind == "station_partition":
            rule = StationPartition(**rule)
        elif kind == "threshold":
            rule = Threshold(**rule)
        else:
            raise ConfigError(f"unknown split_rule type {kind!r}; expected station_partition or threshold")
        cols = tuple(ColumnSpec(**c) for c in d.pop("context_columns"))
        ts = tuple(d.pop("timestamp", ("date_time",)))
        try:
            return cls(context_columns=cols, split_rule=rule, timestamp=ts, **d)
        except TypeError as e:
            raise ConfigError(f"invalid dataset spec: {e}") from None


AIR_QUALITY = DatasetSpec(
    name="air_quality",
    target_column="PM2.5",
    context_columns=tuple(ColumnSpec(n) for n in ("TEMP", "PRES", "DEWP", "WSPM", "RAIN"))
    + (ColumnSpec("wd", "categorical"),),
    split_rule=StationPartition(
        column="station",
        stations={
            "train": ["Dongsi", "Guanyuan", "Tiantan", "Wanshouxigong",
                      "Aotizhongxin", "Nongzhanguan", "Wanliu", "Gucheng"],
            "val": ["Changping", "Dingling"],
            "test": ["Shunyi", "Huairou"],
        },
    ),
    timestamp=("year", "month", "day", "hour"),
    group_column="station",
)

TRAFFIC = DatasetSpec(
    name="traffic",
    target_column="traffic_volume",
    context_columns=(
        ColumnSpec("rain_1h"),
        ColumnSpec("snow_1h"),
        ColumnSpec("clouds_all"),
        ColumnSpec("weather_main", "categorical"),
        ColumnSpec("holiday", "categorical"),
    ),
    # temperatures are recorded in Kelvin
    split_rule=Threshold(variable="temp", lo=12.0, hi=22.0, offset=-273.15),
    timestamp=("date_time",),
)

BUILTIN_SPECS = {"air_quality": AIR_QUALITY, "traffic": TRAFFIC}


def load_spec(ref):
    """Built-in spec by name, or a JSON spec file."""
    if isinstance(ref, DatasetSpec):
        return ref
    if str(ref) in BUILTIN_SPECS:
        return BUILTIN_SPECS[str(ref)]
    path = Path(ref)
    if not path.exists():
        raise ConfigError(f"unknown dataset spec {ref!r}; built-ins: {sorted(BUILTIN_SPECS)}")
    try:
        return DatasetSpec.from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


@dataclass
class RawTable:
    frame: pd.DataFrame
    report: dict = field(default_factory=dict)


def load_csv_dataset(spec, paths):
    """Read, type and impute the CSV rows declared by ``spec``.

    The result has a ``_time`` column plus the declared columns. Rows with a
    missing target or timestamp are dropped; continuous contexts are forward
    filled (per group) and then mean-imputed. Counts go to ``report``.
    """
    spec = load_spec(spec)
    paths = [paths] if isinstance(paths, (str, Path)) else list(paths)
    if not paths:
        raise DataError("no CSV files given")
    frames = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise DataError(f"CSV file {p} does not exist")
        try:
            frames.append(pd.read_csv(p, low_memory=False))
        except pd.errors.EmptyDataError:
            warnings.warn(f"{p} is empty", RuntimeWarning, stacklevel=2)
    report = {"rows_read": 0, "bad_timestamp": 0, "missing_target": 0, "duplicate_time": 0,
              "ffilled": {}, "mean_imputed": {}}
    cols = spec.required_columns
    if not frames or all(len(f) == 0 and len(f.columns) == 0 for f in frames):
        warnings.warn(f"dataset {spec.name!r} has no rows", RuntimeWarning, stacklevel=2)
        return RawTable(pd.DataFrame(columns=[*cols, "_time"]), report)
    df = pd.concat(frames, ignore_index=True)
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise SchemaError(f"dataset {spec.name!r}: missing column(s) {missing}")
    df = df[cols].copy()
    report["rows_read"] = len(df)
    if len(df) == 0:
        warnings.warn(f"dataset {spec.name!r} has no rows", RuntimeWarning, stacklevel=2)
        df["_time"] = pd.Series(dtype="datetime64[ns]")
        return RawTable(df, report)

    df["_time"] = _parse_time(df, spec.timestamp)
    bad = df["_time"].isna()
    report["bad_timestamp"] = int(bad.sum())
    df = df[~bad]

    df[spec.target_column] = pd.to_numeric(df[spec.target_column], errors="coerce")
    miss = df[spec.target_column].isna()
    report["missing_target"] = int(miss.sum())
    df = df[~miss]

    keys = [spec.group_column] if spec.group_column else []
    before = len(df)
    df = df.sort_values([*keys, "_time"], kind="stable").drop_duplicates([*keys, "_time"], keep="first")
    report["duplicate_time"] = before - len(df)

    for col in spec.context_columns:
        if col.kind == "continuous":
            v = pd.to_numeric(df[col.name], errors="coerce")
            n0 = int(v.isna().sum())
            v = v.groupby(df[spec.group_column]).ffill() if keys else v.ffill()
            n1 = int(v.isna().sum())
            report["ffilled"][col.name] = n0 - n1
            report["mean_imputed"][col.name] = n1
            df[col.name] = v.fillna(v.mean() if n1 < len(v) else 0.0)
        else:
            df[col.name] = df[col.name].where(df[col.name].notna(), UNK).astype(str)
    for k, v in report.items():
        if isinstance(v, int) and v and k != "rows_read":
            log.info("%s: %s = %d", spec.name, k, v)
    return RawTable(df.reset_index(drop=True), report)


def _parse_time(df, parts):
    if len(parts) == 1:
        return pd.to_datetime(df[parts[0]], errors="coerce")
    if tuple(parts) != ("year", "month", "day", "hour"):
        raise ConfigError(f"multi-column timestamps must be (year, month, day, hour), got {parts}")
    num = {p: pd.to_numeric(df[p], errors="coerce") for p in parts}
    return pd.to_datetime(pd.DataFrame(num), errors="coerce")


def apply_split(table, spec):
    """Assign rows to splits by the dataset's environment proxy column.

    For threshold rules the split variable leaves the context and survives
    only as the ``_proxy`` column (diagnostics).
    """
    spec = load_spec(spec)
    df = table.frame if isinstance(table, RawTable) else table
    rule = spec.split_rule
    col = rule.column if isinstance(rule, StationPartition) else rule.variable
    if col not in df.columns:
        raise SchemaError(f"split variable {col!r} not present")
    df = df.copy()
    if isinstance(rule, Threshold):
        df["_proxy"] = rule.values(df)
    assign = rule.assign(df)
    dropped = int(assign.isna().sum())
    if dropped:
        log.info("%s: %d rows matched no split and were dropped", spec.name, dropped)
    out = {s: df[assign == s].reset_index(drop=True) for s in SPLITS}
    if isinstance(table, RawTable):
        table.report["split_dropped"] = dropped
        table.report["split_rows"] = {s: len(v) for s, v in out.items()}
    return out


def phase_encoding(t, period=PHASE_PERIOD):
    """(sin, cos) of 2*pi*t/period."""
    a = 2.0 * np.pi * np.asarray(t, dtype=np.float64) / period
    return np.sin(a), np.cos(a)


def contiguous_windows(times, window_len, freq=pd.Timedelta(hours=1)):
    """Start indices of non-overlapping windows inside runs of consecutive steps."""
    times = pd.DatetimeIndex(times)
    if len(times) == 0:
        return []
    breaks = np.flatnonzero(np.diff(times.asi8) != freq.value) + 1
    starts = []
    for lo, hi in zip(np.r_[0, breaks], np.r_[breaks, len(times)]):
        starts.extend(range(lo, lo + (hi - lo) // window_len * window_len, window_len))
    return starts


def build_vocab(values):
    return [UNK] + sorted(set(values) - {UNK})


def window_and_encode(tables, spec, report=None):
    """Window the split tables and encode contexts into a series bundle.

    Continuous values stay in physical units (normalization statistics are
    stored in the metadata); categorical values become vocabulary indices
    with 0 reserved for unseen values; phase channels encode hour of day.
    """
    spec = load_spec(spec)
    L = spec.window_len
    cat_cols = [c.name for c in spec.context_columns if c.kind == "categorical"]
    vocab = {n: build_vocab(tables["train"][n].astype(str)) for n in cat_cols}
    index = {n: {v: i for i, v in enumerate(toks)} for n, toks in vocab.items()}

    splits = {}
    for split in SPLITS:
        df = tables[split]
        groups = [g for _, g in df.groupby(spec.group_column, sort=True)] if spec.group_column else [df]
        xs, cs, params = [], [], []
        for g in groups:
            g = g.sort_values("_time", kind="stable")
            starts = contiguous_windows(g["_time"], L)
            if not starts:
                continue
            x = g[spec.target_column].to_numpy(np.float64)
            ctx = []
            for col in spec.context_columns:
                if col.kind == "continuous":
                    ctx.append(g[col.name].to_numpy(np.float64))
                else:
                    ctx.append(g[col.name].astype(str).map(lambda v, m=index[col.name]: m.get(v, 0))
                               .to_numpy(np.float64))
            if spec.phase:
                hours = g["_time"].dt.hour.to_numpy() + g["_time"].dt.minute.to_numpy() / 60.0
                ctx.extend(phase_encoding(hours))
            ctx = np.stack(ctx, axis=-1)
            times = g["_time"].to_numpy()
            proxy = g["_proxy"].to_numpy(np.float64) if "_proxy" in g.columns else None
            for s in starts:
                xs.append(x[s:s + L, None])
                cs.append(ctx[s:s + L])
                rec = {"start": str(pd.Timestamp(times[s]))}
                if spec.group_column:
                    rec["group"] = str(g[spec.group_column].iloc[0])
                if proxy is not None:
                    rec["proxy"] = float(np.mean(proxy[s:s + L]))
                params.append(rec)
        if not xs:
            raise DataError(f"split {split!r} has no complete window of length {L}")
        splits[split] = SplitData(x=np.stack(xs).astype(np.float32), c=np.stack(cs).astype(np.float32),
                                  params=params)

    c_names = [c.name for c in spec.context_columns] + (["phase_sin", "phase_cos"] if spec.phase else [])
    kinds = ["continuous"] + [c.kind for c in spec.context_columns] + (["phase"] * 2 if spec.phase else [])
    meta = {
        "dataset_id": _dataset_id(spec, splits),
        "source": f"csv:{spec.name}",
        "T": L,
        "D": 1,
        "D_c": len(c_names),
        "dt": 1.0,
        "channel_names": [spec.target_column] + c_names,
        "channel_kinds": kinds,
        "vocab": vocab,
        "normalization": minmax_stats(splits["train"].x, splits["train"].c, kinds),
        "ingest": {"spec": spec.to_dict(), "report": report or {},
                   "imputation": "forward fill per group, then column mean",
                   "phase_period_hours": PHASE_PERIOD if spec.phase else None},
        "has_cf": False,
    }
    return SeriesBundle(meta=meta, splits=splits)


def _dataset_id(spec, splits):
    h = hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode())
    for name in SPLITS:
        h.update(splits[name].x.tobytes())
        h.update(splits[name].c.tobytes())
    return h.hexdigest()[:16]


def ingest(spec, paths):
    """load -> split -> window/encode."""
    spec = load_spec(spec)
    raw = load_csv_dataset(spec, paths)
    if len(raw.frame) == 0:
        raise DataError(f"dataset {spec.name!r} has no usable rows")
    tables = apply_split(raw, spec)
    return window_and_encode(tables, spec, _jsonable(raw.report))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj
