"""Grid data ingestion, carbon-intensity computation, windowing and folds."""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from .errors import (
    ArgumentError,
    DataError,
    InsufficientDataError,
    ParseError,
    UndefinedCIFError,
)

VARIABLES = ("cif", "gld", "reg", "neg", "temperature")
CSV_COLUMNS = ("timestamp",) + VARIABLES
MIX_COLUMNS = ("timestamp", "source", "energy_mwh", "emission_rate")
TARGET = 0  # CIF is variable 0 and the only forecast target
HOUR = timedelta(hours=1)


@dataclass
class RawGridRecord:
    timestamp: datetime
    gld: float
    reg: float
    neg: float
    temperature: float
    cif: Optional[float] = None
    interpolated: bool = False

    def values(self):
        return (self.cif, self.gld, self.reg, self.neg, self.temperature)


@dataclass
class GenerationMix:
    energy: Sequence[float]  # MWh per source
    rate: Sequence[float]  # g CO2-e/kWh per source


def compute_cif(mix: GenerationMix) -> float:
    """Energy-weighted mean emission rate of the generation mix."""
    e = np.asarray(mix.energy, dtype=np.float64)
    c = np.asarray(mix.rate, dtype=np.float64)
    if e.shape != c.shape:
        raise ArgumentError("energy and rate lists differ in length")
    if np.any(e < 0) or np.any(c < 0):
        raise ArgumentError("energies and emission rates must be non-negative")
    total = e.sum()
    if not total > 0:
        raise UndefinedCIFError("total generation is zero; CIF undefined")
    return float(np.dot(e, c) / total)


# -- CSV ------------------------------------------------------------------

def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat()


def _data_lines(fh):
    """Yield (line number, text) pairs, skipping blank and '#' comment lines."""
    for number, line in enumerate(fh, start=1):
        if line.strip() and not line.lstrip().startswith("#"):
            yield number, line


def _read_rows(path, expected, optional=()):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        lines = list(_data_lines(fh))
    if not lines:
        raise ParseError("file has no header", line=1)
    header_line, header_text = lines[0]
    header = [h.strip() for h in next(csv.reader([header_text]))]
    required = [c for c in expected if c not in optional]
    if not set(required) <= set(header) or not set(header) <= set(expected):
        raise ParseError(f"header {header} does not match schema {list(expected)}", line=header_line)
    rows = []
    for number, text in lines[1:]:
        cells = next(csv.reader([text]))
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(cells)}", line=number)
        rows.append((number, dict(zip(header, (c.strip() for c in cells)))))
    return rows


def _float(value, number, column):
    try:
        out = float(value)
    except ValueError:
        raise ParseError(f"column {column}: cannot parse {value!r} as a number", line=number) from None
    if not math.isfinite(out):
        raise ParseError(f"column {column}: non-finite value {value!r}", line=number)
    return out


def load_mix_csv(path) -> dict[datetime, float]:
    """Long-format generation mix -> CIF per timestamp."""
    grouped = defaultdict(lambda: ([], []))
    for number, row in _read_rows(path, MIX_COLUMNS):
        try:
            ts = parse_timestamp(row["timestamp"])
        except ValueError:
            raise ParseError(f"bad timestamp {row['timestamp']!r}", line=number) from None
        energies, rates = grouped[ts]
        energies.append(_float(row["energy_mwh"], number, "energy_mwh"))
        rates.append(_float(row["emission_rate"], number, "emission_rate"))
    return {ts: compute_cif(GenerationMix(e, c)) for ts, (e, c) in grouped.items()}


def load_csv(path, mix_path=None) -> list[RawGridRecord]:
    """Read and validate an hourly grid CSV.

    Single missing hours are filled by linear interpolation and flagged;
    longer gaps, duplicates and out-of-order timestamps raise ``DataError``.
    When ``mix_path`` is given, CIF comes from the generation-mix file.
    """
    optional = ("cif",) if mix_path is not None else ()
    cif_by_time = load_mix_csv(mix_path) if mix_path is not None else None
    records: list[RawGridRecord] = []
    for number, row in _read_rows(path, CSV_COLUMNS, optional):
        try:
            ts = parse_timestamp(row["timestamp"])
        except ValueError:
            raise ParseError(f"bad timestamp {row['timestamp']!r}", line=number) from None
        vals = {c: _float(row[c], number, c) for c in ("gld", "reg", "neg", "temperature")}
        for c in ("gld", "reg", "neg"):
            if vals[c] < 0:
                raise ParseError(f"column {c} must be non-negative, got {vals[c]}", line=number)
        if cif_by_time is not None:
            if ts not in cif_by_time:
                raise DataError(f"line {number}: no generation mix for {format_timestamp(ts)}")
            cif = cif_by_time[ts]
        else:
            cif = _float(row["cif"], number, "cif")
        rec = RawGridRecord(ts, cif=cif, **vals)
        if records:
            step = rec.timestamp - records[-1].timestamp
            if step <= timedelta(0):
                kind = "duplicate" if step == timedelta(0) else "non-monotone"
                raise DataError(f"line {number}: {kind} timestamp {format_timestamp(ts)}")
            if step == 2 * HOUR:
                records.append(_midpoint(records[-1], rec))
            elif step != HOUR:
                raise DataError(f"line {number}: gap of {step} before {format_timestamp(ts)} "
                                "exceeds one missing hour")
        records.append(rec)
    return records


def _midpoint(a: RawGridRecord, b: RawGridRecord) -> RawGridRecord:
    def mid(x, y):
        return None if x is None or y is None else 0.5 * (x + y)

    return RawGridRecord(a.timestamp + HOUR, mid(a.gld, b.gld), mid(a.reg, b.reg), mid(a.neg, b.neg),
                         mid(a.temperature, b.temperature), mid(a.cif, b.cif), interpolated=True)


def write_csv(records, path, comment: str | None = None):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([format_timestamp(r.timestamp)] + [repr(float(v)) for v in r.values()])
    return path


def records_to_array(records) -> np.ndarray:
    """(hours, 5) array in ``VARIABLES`` order."""
    arr = np.array([r.values() for r in records], dtype=np.float64)
    if arr.size and np.isnan(arr).any():
        raise DataError("records contain missing CIF values")
    return arr.reshape(len(records), len(VARIABLES))


# -- windows, normalisation, folds ------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z) * self.std + self.mean

    def apply_target(self, e):
        return (np.asarray(e) - self.mean[TARGET]) / self.std[TARGET]

    def invert_target(self, z):
        return np.asarray(z) * self.std[TARGET] + self.mean[TARGET]

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def fit_normalization(samples) -> NormStats:
    """Per-variable z-score statistics from training inputs ``(..., N)``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ArgumentError("cannot fit normalisation on an empty training set")
    flat = x.reshape(-1, x.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if constant.any():
        warnings.warn(f"constant variable(s) {np.flatnonzero(constant).tolist()}; std set to 1",
                      RuntimeWarning, stacklevel=2)
        std = np.where(constant, 1.0, std)
    return NormStats(mean, std)


@dataclass
class WindowedDataset:
    X: np.ndarray  # (n, T, N) raw inputs
    e: np.ndarray  # (n, S) raw CIF targets
    starts: np.ndarray  # hour index of each window's first input step
    T: int
    S: int
    stride: int
    source: str = ""
    timestamps: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.X)

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx)
        return WindowedDataset(self.X[idx], self.e[idx], self.starts[idx], self.T, self.S,
                               self.stride, self.source, self.timestamps)


def window_count(length: int, T: int, S: int, stride: int) -> int:
    return (length - (T + S)) // stride + 1


def make_windows(records, T: int = 24, S: int = 24, stride: int = 1, source: str = "") -> WindowedDataset:
    """Sliding windows of T input hours followed by S hours of CIF."""
    if T < 1 or S < 1 or stride < 1:
        raise ArgumentError("T, S and stride must be positive")
    if isinstance(records, np.ndarray):
        arr, stamps = np.asarray(records, dtype=np.float64), []
    else:
        arr, stamps = records_to_array(records), [r.timestamp for r in records]
    if len(arr) < T + S:
        raise InsufficientDataError(f"{len(arr)} hours cannot fill one window of {T}+{S}")
    n = window_count(len(arr), T, S, stride)
    starts = np.arange(n) * stride
    X = sliding_window_view(arr, T, axis=0)[starts].transpose(0, 2, 1).copy()
    e = sliding_window_view(arr[T:, TARGET], S)[starts].copy()
    return WindowedDataset(X, e, starts, T, S, stride, source, stamps)


@dataclass
class FoldSplit:
    folds: np.ndarray  # fold id (0-based) per sample
    k: int
    purge_gap: int = 0

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        """Samples outside the test block and more than ``purge_gap`` samples away from it."""
        test = self.test_indices(fold)
        idx = np.arange(len(self.folds))
        far = (idx < test[0] - self.purge_gap) | (idx > test[-1] + self.purge_gap)
        return idx[far]

    def sizes(self):
        return np.bincount(self.folds, minlength=self.k)


def kfold_split(n: int, k: int = 5, purge_gap: int = 0) -> FoldSplit:
    """Contiguous temporal blocks; earlier blocks take the remainder."""
    if k < 1 or k > n:
        raise ArgumentError(f"cannot split {n} samples into {k} folds")
    if purge_gap < 0:
        raise ArgumentError("purge gap must be non-negative")
    folds = np.concatenate([np.full(len(b), i) for i, b in enumerate(np.array_split(np.arange(n), k))])
    return FoldSplit(folds, k, purge_gap)


# -- synthetic grid -----------------------------------------------------------

@dataclass
class CurtailmentEvent:
    start: int  # hour index, inclusive
    end: int  # hour index, exclusive
    fraction: float = 0.8  # share of REG removed


@dataclass
class SynthConfig:
    seed: int = 7
    days: int = 365
    penetration: float = 0.5
    noise: float = 1.0
    floor: float = 0.15  # NEG floor as a share of mean load
    reg_rate: float = 30.0
    neg_rate: float = 820.0
    base_load: float = 7000.0
    cloud_persistence: float = 0.9  # hourly AR(1) coefficient
    wind_persistence: float = 0.9
    start: str = "2021-01-01T00:00:00+00:00"
    events: list = field(default_factory=list)


def _ar1(rng, n, phi, sigma):
    """Stationary AR(1) with innovation scale ``sigma``."""
    eps = rng.standard_normal(n) * sigma
    eps[0] /= math.sqrt(1.0 - phi * phi)
    return lfilter([1.0], [1.0, -phi], eps)


def grid_mix(gld, reg, floor, reg_rate=30.0, neg_rate=820.0):
    """NEG covering the residual load (never below ``floor``) and the resulting CIF."""
    gld = np.asarray(gld, dtype=np.float64)
    reg = np.asarray(reg, dtype=np.float64)
    neg = np.maximum(gld - reg, floor)
    total = reg + neg
    if np.any(total <= 0):
        raise UndefinedCIFError("zero total generation in synthetic mix")
    cif = (reg * reg_rate + neg * neg_rate) / total
    # a weighted mean cannot leave the rate range; clip away rounding
    return neg, np.clip(cif, min(reg_rate, neg_rate), max(reg_rate, neg_rate))


def synthesize_grid(config: SynthConfig = SynthConfig()) -> list[RawGridRecord]:
    """Hourly synthetic grid series with a diurnal/weekly load and a weather-driven REG."""
    if config.days < 2:
        raise ArgumentError("need at least two days of synthetic data")
    n = config.days * 24
    for ev in config.events:
        if not 0 <= ev.start < ev.end <= n or not 0 <= ev.fraction <= 1:
            raise ArgumentError(f"invalid event {ev} for {n} hours")
    rng = np.random.default_rng(config.seed)
    noise = config.noise
    start = parse_timestamp(config.start)
    hours = np.arange(n)
    hod = (hours + start.hour) % 24
    doy = (hours / 24.0 + start.timetuple().tm_yday - 1) % 365.25
    weekday = (start.weekday() + (hours + start.hour) // 24) % 7
    season = np.cos(2 * np.pi * (doy - 15) / 365.25)  # +1 in mid-January (austral summer)

    temperature = (18.0 + 7.0 * season + 5.0 * np.sin(2 * np.pi * (hod - 9) / 24)
                   + noise * _ar1(rng, n, 0.9, 0.8))

    base = config.base_load
    daily = 1.0 + 0.12 * np.sin(2 * np.pi * (hod - 10) / 24) + 0.06 * np.sin(4 * np.pi * (hod - 5) / 24)
    weekly = np.where(weekday >= 5, 0.92, 1.0)
    comfort = 70.0 * np.maximum(temperature - 22.0, 0) + 45.0 * np.maximum(15.0 - temperature, 0)
    gld = base * daily * weekly + comfort + noise * _ar1(rng, n, 0.5, 90.0)
    gld = np.maximum(gld, 0.0)

    bell = np.clip(np.sin(np.pi * (hod - 6) / 12), 0, None) ** 1.5
    daylight = 1.0 + 0.25 * season
    cloud = np.clip(0.75 + noise * _ar1(rng, n, config.cloud_persistence,
                                        0.2 * math.sqrt(1 - config.cloud_persistence ** 2)), 0.05, 1.0)
    wind = np.clip(0.35 + noise * _ar1(rng, n, config.wind_persistence,
                                       0.2 * math.sqrt(1 - config.wind_persistence ** 2)), 0.0, 1.0)
    capacity = 2.0 * config.penetration * base
    reg = capacity * (0.7 * bell * daylight * cloud + 0.3 * wind)
    for ev in config.events:
        reg[ev.start:ev.end] *= 1.0 - ev.fraction
    reg = np.maximum(reg, 0.0)

    neg, cif = grid_mix(gld, reg, config.floor * base, config.reg_rate, config.neg_rate)
    stamps = [start + HOUR * int(i) for i in hours]
    return [RawGridRecord(stamps[i], float(gld[i]), float(reg[i]), float(neg[i]),
                          float(temperature[i]), float(cif[i])) for i in range(n)]
