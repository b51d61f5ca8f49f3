"""Damped harmonic oscillator benchmark with counterfactual ground truth.

Each sample solves ``m(t) x'' + gamma(t) x' + k(t) x = 0`` with

    m(t)     = m0 + alpha * t
    gamma(t) = gamma0 + beta * sin(omega_gamma * t)
    k(t)     = k0 * (1 - eta * (1 - exp(-lam * t)))

The target series is the acceleration and the context is (velocity,
position). In the VM scenario only the mass varies (beta = eta = 0).
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .bundle import SPLITS, SeriesBundle, SplitData, minmax_stats
from .errors import DataError, IntegrationDiverged

SCENARIOS = ("VM", "VP")
PARAM_FIELDS = ("m0", "gamma0", "k0", "alpha", "beta", "eta", "omega_gamma", "lam")


@dataclass(frozen=True)
class OscParams:
    alpha: float = 0.0
    beta: float = 0.0
    eta: float = 0.0
    m0: float = 1.0
    gamma0: float = 0.1
    k0: float = 1.0
    omega_gamma: float = 0.2
    lam: float = 0.05
    scenario: str = "VP"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise DataError(f"unknown scenario {self.scenario!r}")
        if not self.m0 > 0:
            raise DataError(f"m0 must be positive, got {self.m0}")
        if self.scenario == "VM" and (self.beta != 0.0 or self.eta != 0.0):
            raise DataError("VM scenario requires beta = eta = 0")

    def as_row(self):
        return [getattr(self, f) for f in PARAM_FIELDS]

    def mass(self, t):
        return self.m0 + self.alpha * np.asarray(t, dtype=np.float64)

    def damping(self, t):
        return self.gamma0 + self.beta * np.sin(self.omega_gamma * np.asarray(t, dtype=np.float64))

    def stiffness(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.k0 * (1.0 - self.eta * (1.0 - np.exp(-self.lam * t)))


@dataclass(frozen=True)
class InitialState:
    x0: float
    v0: float


@dataclass
class Trajectory:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    dt: float
    params: OscParams
    init: InitialState

    @property
    def t(self):
        return np.arange(self.position.shape[0]) * self.dt


@dataclass(frozen=True)
class SeqConfig:
    T: int = 64
    dt: float = 0.25
    substeps: int = 16


FACTUAL_INIT = ((-2.0, 2.0), (-1.5, 1.5))
COUNTERFACTUAL_INIT = ((2.2, 4.0), (-2.5, -1.0))


@dataclass(frozen=True)
class SplitRanges:
    """Dominant per-split intervals for each varied parameter."""

    intervals: dict = field(default_factory=dict)  # param -> {split: (lo, hi)}
    p_dom: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.p_dom <= 1.0:
            raise DataError(f"p_dom must lie in (0, 1], got {self.p_dom}")
        for name, per_split in self.intervals.items():
            if set(per_split) != set(SPLITS):
                raise DataError(f"ranges for {name} must cover {SPLITS}")
            spans = sorted(per_split.values())
            for (lo, hi), (lo2, _) in zip(spans, spans[1:]):
                if hi >= lo2:
                    raise DataError(f"dominant intervals of {name} overlap")
            if any(lo > hi for lo, hi in spans):
                raise DataError(f"empty interval for {name}")

    @classmethod
    def table(cls, scenario, p_dom=0.8):
        alpha = {"train": (0.0, 0.2), "val": (0.3, 0.5), "test": (0.6, 1.0)}
        if scenario == "VM":
            return cls({"alpha": alpha}, p_dom)
        if scenario == "VP":
            return cls(
                {
                    "alpha": alpha,
                    "beta": {"train": (0.0, 0.01), "val": (0.018, 0.022), "test": (0.035, 0.04)},
                    "eta": {"train": (0.002, 0.08), "val": (0.18, 0.22), "test": (0.42, 0.5)},
                },
                p_dom,
            )
        raise DataError(f"unknown scenario {scenario!r}")


def simulate_trajectory(params, init, horizon_steps=64, dt=0.25, substeps=16, backend=None):
    """Integrate one oscillator on the grid t_i = i * dt, i < horizon_steps."""
    traj = simulate_batch([params], [init], horizon_steps, dt, substeps, backend)
    return traj[0]


def simulate_batch(params, inits, horizon_steps=64, dt=0.25, substeps=16, backend=None):
    if horizon_steps < 2:
        raise DataError(f"horizon_steps must be >= 2, got {horizon_steps}")
    if not dt > 0:
        raise DataError(f"dt must be positive, got {dt}")
    t_end = (horizon_steps - 1) * dt
    for p in params:
        _check_positive(p, t_end)
    prm = np.array([p.as_row() for p in params], dtype=np.float64).reshape(-1, len(PARAM_FIELDS))
    ini = np.array([[s.x0, s.v0] for s in inits], dtype=np.float64).reshape(-1, 2)
    pos, vel, acc = kernels.rk4_oscillator(prm, ini, horizon_steps, dt, substeps, backend=backend)
    if not (np.isfinite(pos).all() and np.isfinite(vel).all()):
        raise IntegrationDiverged("oscillator integration produced non-finite state")
    return [
        Trajectory(pos[i], vel[i], acc[i], dt, p, s)
        for i, (p, s) in enumerate(zip(params, inits))
    ]


def _check_positive(p, t_end):
    # m(t) is affine and k(t) monotone in t, so endpoint checks cover the horizon
    for t in (0.0, t_end):
        if not p.mass(t) > 0:
            raise DataError(f"mass non-positive at t={t}: {float(p.mass(t))}")
        if not p.stiffness(t) > 0:
            raise DataError(f"stiffness non-positive at t={t}: {float(p.stiffness(t))}")


def sample_environment(split, scenario, ranges=None, rng=None):
    """Draw OscParams for ``split`` from the dominant/tail mixture."""
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    if scenario not in SCENARIOS:
        raise DataError(f"unknown scenario {scenario!r}")
    ranges = ranges or SplitRanges.table(scenario)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    varied = ("alpha",) if scenario == "VM" else ("alpha", "beta", "eta")
    values = {}
    for name in varied:
        per_split = ranges.intervals[name]
        if rng.random() < ranges.p_dom:
            lo, hi = per_split[split]
        else:
            # tail: uniform over the union of the other splits' intervals
            others = [per_split[s] for s in SPLITS if s != split]
            lengths = np.array([hi - lo for lo, hi in others], dtype=np.float64)
            probs = lengths / lengths.sum() if lengths.sum() > 0 else np.full(len(others), 1 / len(others))
            lo, hi = others[rng.choice(len(others), p=probs)]
        values[name] = float(rng.uniform(lo, hi))
    return OscParams(scenario=scenario, **values)


def sample_init(rng, ranges=FACTUAL_INIT):
    (xl, xh), (vl, vh) = ranges
    return InitialState(float(rng.uniform(xl, xh)), float(rng.uniform(vl, vh)))


def dataset_id(scenario, counts, seq, seed):
    blob = json.dumps(
        {"scenario": scenario, "counts": dict(counts), "seq": asdict(seq), "seed": int(seed)},
        sort_keys=True,
    )
    return f"harmonic-{scenario.lower()}-" + hashlib.sha256(blob.encode()).hexdigest()[:12]


def build_dataset(scenario, counts, seq=None, seed=0, ranges=None, backend=None):
    """Simulate factual train/val/test splits as a SeriesBundle.

    ``x`` is acceleration (D = 1) and ``c`` is (velocity, position). The
    generating parameters and initial state are kept per sample in
    ``params`` and never fed to the model.
    """
    seq = seq or SeqConfig()
    counts = {s: int(counts[s]) for s in SPLITS if s in counts}
    if not counts or any(n <= 0 for n in counts.values()):
        raise DataError(f"split counts must be positive, got {counts}")
    ranges = ranges or SplitRanges.table(scenario)
    root = np.random.SeedSequence(int(seed))
    children = dict(zip(SPLITS, root.spawn(len(SPLITS))))
    splits = {}
    for name, n in counts.items():
        rng = np.random.default_rng(children[name])
        params, inits = [], []
        for _ in range(n):
            params.append(sample_environment(name, scenario, ranges, rng))
            inits.append(sample_init(rng))
        trajs = simulate_batch(params, inits, seq.T, seq.dt, seq.substeps, backend)
        x, c = _to_arrays(trajs)
        meta_rows = [_param_record(p, s) for p, s in zip(params, inits)]
        splits[name] = SplitData(x=x, c=c, params=meta_rows)
    kinds = ["continuous"] * 3
    norm_src = splits["train"] if "train" in splits else next(iter(splits.values()))
    meta = {
        "dataset_id": dataset_id(scenario, counts, seq, seed),
        "scenario": scenario,
        "T": seq.T,
        "D": 1,
        "D_c": 2,
        "dt": seq.dt,
        "substeps": seq.substeps,
        "channel_names": ["acceleration", "velocity", "position"],
        "channel_kinds": kinds,
        "vocab": {},
        "normalization": minmax_stats(norm_src.x, norm_src.c, kinds),
        "seed": int(seed),
        "source": "oscillator",
    }
    return SeriesBundle(meta=meta, splits=splits)


def build_cf_pairs(dataset, cf_ranges=COUNTERFACTUAL_INIT, seed=0, splits=None, backend=None):
    """Attach counterfactual trajectories: same parameters, new initial state."""
    names = list(splits or dataset.splits)
    dt = float(dataset.meta["dt"])
    T = int(dataset.meta["T"])
    substeps = int(dataset.meta.get("substeps", 16))
    root = np.random.SeedSequence([int(seed), 0xCF])
    children = dict(zip(SPLITS, root.spawn(len(SPLITS))))
    for name in names:
        split = dataset[name]
        if len(split.params) != len(split) or not all("alpha" in p for p in split.params):
            raise DataError(f"split {name!r} lacks generating parameter metadata")
        rng = np.random.default_rng(children[name])
        params = [_params_from_record(p) for p in split.params]
        inits = [sample_init(rng, cf_ranges) for _ in params]
        trajs = simulate_batch(params, inits, T, dt, substeps, backend)
        split.xcf, split.ccf = _to_arrays(trajs)
        for rec, s in zip(split.params, inits):
            rec["x0_cf"], rec["v0_cf"] = s.x0, s.v0
    dataset.meta["has_cf"] = True
    return dataset


def _to_arrays(trajs):
    acc = np.stack([t.acceleration for t in trajs])
    vel = np.stack([t.velocity for t in trajs])
    pos = np.stack([t.position for t in trajs])
    x = acc[..., None].astype(np.float32)
    c = np.stack([vel, pos], axis=-1).astype(np.float32)
    return x, c


def _param_record(p, s):
    rec = {f: getattr(p, f) for f in PARAM_FIELDS}
    rec.update(scenario=p.scenario, x0=s.x0, v0=s.v0)
    return rec


def _params_from_record(rec):
    return OscParams(scenario=rec["scenario"], **{f: rec[f] for f in PARAM_FIELDS})
