"""Dataset I/O, scaling, target transform, temporal splits and the synthetic workload.

The CSV layout is ``entity_key, time, <variant features>, <invariant
features>, <target>`` with a header row. Columns are matched by name, so
their order in the file does not matter.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import log_sum_exp, sigmoid

VARIANT_NAMES = (
    "hour_sin",
    "hour_cos",
    "dow_sin",
    "dow_cos",
    "count_15m",
    "count_30m",
    "count_60m",
    "duration_15m",
    "duration_30m",
    "duration_60m",
)
INVARIANT_NAMES = ("latitude", "longitude", "segment_length", "total_count")

SCALE_FLOOR = 1e-8
HOURS_PER_DAY = 24.0
# train: days 0-14, valid: days 14-21, test: days 21-28 (times are in hours)
DEFAULT_TIME_BOUNDARIES = (14 * HOURS_PER_DAY, 21 * HOURS_PER_DAY)


@dataclass(frozen=True)
class FeatureSchema:
    variant_names: tuple[str, ...] = VARIANT_NAMES
    invariant_names: tuple[str, ...] = INVARIANT_NAMES
    target_name: str = "duration"
    entity_key_name: str = "entity_key"
    time_name: str = "time"

    def __post_init__(self):
        names = self.columns
        if len(set(names)) != len(names):
            raise ValueError("feature schema names must be unique")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(self.variant_names) + tuple(self.invariant_names)

    @property
    def n_variant(self) -> int:
        return len(self.variant_names)

    @property
    def n_invariant(self) -> int:
        return len(self.invariant_names)

    @property
    def columns(self) -> tuple[str, ...]:
        return (self.entity_key_name, self.time_name, *self.feature_names, self.target_name)

    def to_dict(self) -> dict:
        return {
            "variant_names": list(self.variant_names),
            "invariant_names": list(self.invariant_names),
            "target_name": self.target_name,
            "entity_key_name": self.entity_key_name,
            "time_name": self.time_name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            variant_names=tuple(d["variant_names"]),
            invariant_names=tuple(d["invariant_names"]),
            target_name=d["target_name"],
            entity_key_name=d["entity_key_name"],
            time_name=d.get("time_name", "time"),
        )


@dataclass(frozen=True)
class FeatureVector:
    """One standardized input: tree sees ``variant ++ invariant``, leaves see ``invariant``."""

    variant: np.ndarray
    invariant: np.ndarray
    entity_key: str = ""

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.variant, self.invariant])


@dataclass
class RawTable:
    """Parsed rows, unscaled, target in original units."""

    entity: np.ndarray  # str objects
    time: np.ndarray
    variant: np.ndarray
    invariant: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.time)

    def take(self, idx) -> "RawTable":
        return RawTable(
            self.entity[idx], self.time[idx], self.variant[idx], self.invariant[idx], self.target[idx]
        )


# ---------------------------------------------------------------------------
# CSV


def load_dataset(path, schema: FeatureSchema = FeatureSchema()) -> RawTable:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        col = {name: i for i, name in enumerate(header)}
        missing = [c for c in schema.columns if c not in col]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        numeric = [schema.time_name, *schema.feature_names, schema.target_name]
        num_idx = [col[c] for c in numeric]
        key_idx = col[schema.entity_key_name]
        keys, values = [], []
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            vals = []
            for name, i in zip(numeric, num_idx):
                try:
                    v = float(row[i])
                except (ValueError, IndexError):
                    raise ValueError(
                        f"{path}: row {lineno}, column {name!r}: non-numeric cell {row[i] if i < len(row) else ''!r}"
                    ) from None
                if not math.isfinite(v):
                    raise ValueError(f"{path}: row {lineno}, column {name!r}: non-finite value {row[i]!r}")
                vals.append(v)
            keys.append(row[key_idx])
            values.append(vals)
    if not values:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(values, dtype=np.float64)
    nv, ni = schema.n_variant, schema.n_invariant
    return RawTable(
        entity=np.asarray(keys, dtype=object),
        time=arr[:, 0],
        variant=arr[:, 1 : 1 + nv],
        invariant=arr[:, 1 + nv : 1 + nv + ni],
        target=arr[:, -1],
    )


def write_dataset(path, table: RawTable, schema: FeatureSchema = FeatureSchema()) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.columns)
        for i in range(len(table)):
            nums = [table.time[i], *table.variant[i], *table.invariant[i], table.target[i]]
            w.writerow([table.entity[i], *(repr(float(v)) for v in nums)])


# ---------------------------------------------------------------------------
# scaling and target transform


@dataclass
class Scaler:
    """Per-feature mean and population std fitted on the train split."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_scaler(features) -> Scaler:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("cannot fit a scaler on zero rows")
    std = x.std(axis=0)
    return Scaler(x.mean(axis=0), np.where(std < SCALE_FLOOR, SCALE_FLOOR, std))


def apply_scaler(features, scaler: Scaler) -> np.ndarray:
    return scaler.apply(features)


def transform_target(y_raw):
    y = np.asarray(y_raw, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("target must be strictly positive before the log transform")
    out = np.log(y)
    return float(out) if out.ndim == 0 else out


def inverse_target(y):
    out = np.exp(np.asarray(y, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# splitting


@dataclass
class Split:
    """Model-ready rows: standardized features, log target."""

    variant: np.ndarray
    invariant: np.ndarray
    y: np.ndarray
    entity: np.ndarray
    time: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.variant, self.invariant], axis=1)

    def feature_vector(self, i: int) -> FeatureVector:
        return FeatureVector(self.variant[i], self.invariant[i], str(self.entity[i]))

    def rows(self) -> list[tuple[FeatureVector, float]]:
        return [(self.feature_vector(i), float(self.y[i])) for i in range(len(self))]

    def take(self, idx) -> "Split":
        return Split(self.variant[idx], self.invariant[idx], self.y[idx], self.entity[idx], self.time[idx])


@dataclass
class SplitDataset:
    train: Split
    valid: Split
    test: Split
    scaler: Scaler
    boundaries: tuple[int, int]
    schema: FeatureSchema = field(default_factory=FeatureSchema)

    def split(self, name: str) -> Split:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def temporal_split(table: RawTable, boundaries: Sequence[int]) -> tuple[RawTable, RawTable, RawTable]:
    """Cut time-ordered rows at two row indices into train / valid / test.

    Rows must already be sorted by time; sorting is the caller's job.
    Rows sharing a timestamp are assigned by row position.
    """
    if np.any(np.diff(table.time) < 0):
        raise ValueError("rows are not in chronological order")
    a, b = (int(v) for v in boundaries)
    if not 0 < a < b < len(table):
        raise ValueError(f"empty split: boundaries {a}, {b} for {len(table)} rows")
    return table.take(slice(0, a)), table.take(slice(a, b)), table.take(slice(b, None))


def time_boundaries_to_rows(table: RawTable, times: Sequence[float]) -> tuple[int, int]:
    """Row indices where ``time >= t`` starts, for each boundary time."""
    t1, t2 = times
    if not t1 < t2:
        raise ValueError("time boundaries must be strictly increasing")
    return (
        int(np.searchsorted(table.time, t1, side="left")),
        int(np.searchsorted(table.time, t2, side="left")),
    )


def _to_split(table: RawTable, scaler: Scaler, schema: FeatureSchema) -> Split:
    x = scaler.apply(np.concatenate([table.variant, table.invariant], axis=1))
    nv = schema.n_variant
    return Split(x[:, :nv], x[:, nv:], transform_target(table.target), table.entity, table.time)


def prepare_splits(
    table: RawTable,
    schema: FeatureSchema = FeatureSchema(),
    time_boundaries: Sequence[float] = DEFAULT_TIME_BOUNDARIES,
    scaler: Scaler | None = None,
) -> SplitDataset:
    """Temporal split, scaler fitted on train only (unless one is given), log target."""
    bounds = time_boundaries_to_rows(table, time_boundaries)
    train, valid, test = temporal_split(table, bounds)
    if scaler is None:
        scaler = fit_scaler(np.concatenate([train.variant, train.invariant], axis=1))
    return SplitDataset(
        train=_to_split(train, scaler, schema),
        valid=_to_split(valid, scaler, schema),
        test=_to_split(test, scaler, schema),
        scaler=scaler,
        boundaries=bounds,
        schema=schema,
    )


# ---------------------------------------------------------------------------
# synthetic workload
#
# Each entity (a taxi stand) gets fixed invariant features and two lognormal
# duration components whose parameters depend on the entity alone. The mixing
# weight of the second component depends on the hour of day and on the
# entity's segment length:
#
#     p(e, h) = sigmoid(a * sin(2 pi h / 24) + b * c_e),
#     c_e = (segment_length_e - center) / half_range  in [-1, 1].


@dataclass(frozen=True)
class SyntheticGenConfig:
    n_entities: int = 20
    rows_per_entity: int = 2000
    seed: int = 7
    n_days: int = 28
    center_lat: float = 35.4583
    center_lon: float = 139.5625
    half_side_deg: tuple[float, float] = (0.045, 0.055)  # ~5 km in lat / lon
    segment_length_range: tuple[float, float] = (50.0, 400.0)
    total_count_range: tuple[float, float] = (10_000.0, 40_000.0)
    log_mean_range: tuple[float, float] = (3.0, 4.5)
    log_gap_range: tuple[float, float] = (0.8, 1.6)
    log_std_range: tuple[float, float] = (0.15, 0.35)
    mix_hour_coef: float = 1.0
    mix_entity_coef: float = 0.5
    identical_components: bool = False

    def __post_init__(self):
        if self.n_entities < 1 or self.rows_per_entity < 1 or self.n_days < 1:
            raise ValueError("n_entities, rows_per_entity and n_days must be positive")
        for name in ("segment_length_range", "total_count_range", "log_mean_range", "log_gap_range", "log_std_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound exceeds upper bound")
        if self.log_std_range[0] <= 0:
            raise ValueError("log_std_range must be positive")


def entity_mix_offset(segment_length: float, config: SyntheticGenConfig) -> float:
    lo, hi = config.segment_length_range
    if hi == lo:
        return 0.0
    return (segment_length - 0.5 * (lo + hi)) / (0.5 * (hi - lo))


def mixing_weight(hour, mix_offset, a: float, b: float):
    """Probability of the second component."""
    return sigmoid(a * np.sin(2.0 * np.pi * np.asarray(hour) / HOURS_PER_DAY) + b * mix_offset)


def _recent_mean(values: np.ndarray, window: int, seed_value: float) -> np.ndarray:
    """Mean of the previous ``window`` values (strictly before each row)."""
    padded = np.concatenate([np.full(window, seed_value), values])
    csum = np.concatenate([[0.0], np.cumsum(padded)])
    n = len(values)
    return (csum[window : window + n] - csum[0:n]) / window


def generate_synthetic(config: SyntheticGenConfig = SyntheticGenConfig()) -> tuple[RawTable, dict]:
    """Generate the synthetic taxi-stand workload and its ground truth.

    Variant features per row: sin/cos of hour of day and day of week,
    passed-vehicle counts in nested 15/30/60 min windows (Poisson with an
    hour-dependent rate), and the mean duration of the entity's previous
    1/2/4 passes (standing in for the 15/30/60 min averages; never missing).
    None of them carries information about a row's target beyond (entity, hour).
    """
    rng = np.random.default_rng(config.seed)
    n_e, n_r = config.n_entities, config.rows_per_entity
    span_h = config.n_days * HOURS_PER_DAY
    a, b = config.mix_hour_coef, config.mix_entity_coef

    truth_entities = {}
    keys, times, variant, invariant, target = [], [], [], [], []
    for e in range(n_e):
        key = f"stand_{e:03d}"
        lat = config.center_lat + rng.uniform(-1, 1) * config.half_side_deg[0]
        lon = config.center_lon + rng.uniform(-1, 1) * config.half_side_deg[1]
        seg_len = rng.uniform(*config.segment_length_range)
        total = float(np.round(rng.uniform(*config.total_count_range)))
        m0 = rng.uniform(*config.log_mean_range)
        gap = rng.uniform(*config.log_gap_range)
        s0, s1 = rng.uniform(*config.log_std_range, size=2)
        comps = [(m0, s0), (m0 + gap, s1)]
        if config.identical_components:
            comps = [(m0, s0), (m0, s0)]
        c_e = entity_mix_offset(seg_len, config)
        truth_entities[key] = {
            "components": [{"log_mean": float(m), "log_std": float(s)} for m, s in comps],
            "mix_offset": float(c_e),
        }

        t = np.sort(rng.uniform(0.0, span_h, size=n_r))
        hour = np.mod(t, HOURS_PER_DAY)
        dow = np.mod(np.floor(t / HOURS_PER_DAY), 7.0)
        p = mixing_weight(hour, c_e, a, b)
        second = rng.uniform(size=n_r) < p
        means = np.where(second, comps[1][0], comps[0][0])
        stds = np.where(second, comps[1][1], comps[0][1])
        y = np.exp(means + stds * rng.standard_normal(n_r))

        rate = total / (30.0 * HOURS_PER_DAY) * (1.0 + 0.5 * np.sin(2.0 * np.pi * (hour - 8.0) / HOURS_PER_DAY))
        c15 = rng.poisson(rate / 4.0)
        c30 = c15 + rng.poisson(rate / 4.0)
        c60 = c30 + rng.poisson(rate / 2.0)
        typical = float(np.exp(0.5 * (comps[0][0] + comps[1][0])))
        durs = [_recent_mean(y, k, typical) for k in (1, 2, 4)]

        v = np.column_stack(
            [
                np.sin(2 * np.pi * hour / HOURS_PER_DAY),
                np.cos(2 * np.pi * hour / HOURS_PER_DAY),
                np.sin(2 * np.pi * dow / 7.0),
                np.cos(2 * np.pi * dow / 7.0),
                c15,
                c30,
                c60,
                *durs,
            ]
        ).astype(np.float64)
        keys.extend([key] * n_r)
        times.append(t)
        variant.append(v)
        invariant.append(np.tile([lat, lon, seg_len, total], (n_r, 1)))
        target.append(y)

    time = np.concatenate(times)
    order = np.argsort(time, kind="stable")
    table = RawTable(
        entity=np.asarray(keys, dtype=object)[order],
        time=time[order],
        variant=np.concatenate(variant)[order],
        invariant=np.concatenate(invariant)[order],
        target=np.concatenate(target)[order],
    )
    truth = {
        "format_version": 1,
        "seed": config.seed,
        "mixing": {
            "hour_coef": a,
            "entity_coef": b,
            "rule": "p_second = sigmoid(hour_coef * sin(2*pi*hour/24) + entity_coef * mix_offset)",
            "mix_offset_rule": "(segment_length - center) / half_range",
        },
        "time_boundaries": list(DEFAULT_TIME_BOUNDARIES),
        "entities": truth_entities,
    }
    return table, truth


def write_synthetic(config: SyntheticGenConfig, data_path, truth_path) -> tuple[RawTable, dict]:
    table, truth = generate_synthetic(config)
    write_dataset(data_path, table)
    Path(truth_path).write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return table, truth


def load_truth(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def oracle_log_density(truth: dict, entity, time, y_log) -> np.ndarray:
    """Log density of the generating mixture at log-targets ``y_log``."""
    mix = truth["mixing"]
    entity = np.asarray(entity, dtype=object)
    y_log = np.asarray(y_log, dtype=np.float64)
    hour = np.mod(np.asarray(time, dtype=np.float64), HOURS_PER_DAY)
    ents = truth["entities"]
    m = np.array([[c["log_mean"] for c in ents[k]["components"]] for k in entity]).reshape(-1, 2)
    s = np.array([[c["log_std"] for c in ents[k]["components"]] for k in entity]).reshape(-1, 2)
    c = np.array([ents[k]["mix_offset"] for k in entity], dtype=np.float64)
    p = mixing_weight(hour, c, mix["hour_coef"], mix["entity_coef"])
    log_w = np.stack([np.log1p(-p), np.log(p)], axis=1)
    z = (y_log[:, None] - m) / s
    log_n = -0.5 * np.log(2 * np.pi) - np.log(s) - 0.5 * z * z
    return log_sum_exp(log_w + log_n, axis=1)


def oracle_nll(truth: dict, split: Split) -> float:
    """Mean NLL of the true generating distribution on a split (log-target space)."""
    return float(-np.mean(oracle_log_density(truth, split.entity, split.time, split.y)))
