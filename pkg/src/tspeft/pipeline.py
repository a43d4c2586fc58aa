"""ICU-vitals preprocessing: resample, forward-fill, window, filter, scale, split.

The recipe: align each (patient, vital) stream to a 5-minute grid with
forward filling, smooth with a zero-phase moving average, cut 9-hour
windows before each diagnosis anchor (72 context + 36 horizon ticks),
min-max scale globally per vital using training data only, and split by
patient in an 8:1:1 ratio. A synthetic generator stands in for the
credentialed clinical source at desk scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .model import CONTEXT_LEN, HORIZON_LEN
from .numerics import Rng

GRID_SECONDS = 300
WINDOW_TICKS = CONTEXT_LEN + HORIZON_LEN  # 108 ticks = 9 hours

VITAL_BOUNDS = {"MeanBP": (30.0, 150.0), "HR": (40.0, 180.0)}


@dataclass(frozen=True)
class VitalsRecord:
    patient_id: str
    vital: str
    timestamp: int   # epoch seconds
    value: float


@dataclass
class RegularSeries:
    """One (patient, vital) stream on the 300 s grid after forward filling."""

    patient_id: str
    vital: str
    start: int                # timestamp of values[0], multiple of the grid
    values: np.ndarray

    def tick_index(self, timestamp: int) -> int:
        return (timestamp - self.start) // GRID_SECONDS


@dataclass
class VitalsWindow:
    patient_id: str
    vital: str
    anchor_time: int
    context: np.ndarray       # length 72
    horizon: np.ndarray       # length 36

    def key(self):
        return (self.patient_id, self.vital, self.anchor_time)


@dataclass
class Scaler:
    """Global per-vital min/max fitted on training windows only."""

    bounds: dict = field(default_factory=dict)   # vital -> (min, max)

    def transform(self, vital: str, x: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds[vital]
        if hi == lo:
            return np.full_like(np.asarray(x, dtype=np.float64), 0.5)
        return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)

    def inverse(self, vital: str, x: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds[vital]
        if hi == lo:
            return np.full_like(np.asarray(x, dtype=np.float64), lo)
        return np.asarray(x, dtype=np.float64) * (hi - lo) + lo


@dataclass
class SplitDataset:
    train: list
    val: list
    test: list
    scaler: Scaler | None = None
    ratio: tuple = (8, 1, 1)

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

CSV_HEADER = ["patient_id", "vital", "timestamp", "value"]


def ingest_csv(path) -> tuple[list[VitalsRecord], list[tuple[int, str]]]:
    """Parse the input CSV; malformed rows land in a rejects report."""
    records, rejects = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header required")
        if [h.strip() for h in header] != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                rejects.append((lineno, "wrong field count"))
                continue
            pid, vital, ts_s, val_s = (c.strip() for c in row)
            try:
                ts = int(ts_s)
            except ValueError:
                rejects.append((lineno, "unparseable timestamp"))
                continue
            try:
                val = float(val_s)
            except ValueError:
                rejects.append((lineno, "unparseable value"))
                continue
            if not math.isfinite(val):
                rejects.append((lineno, "non-finite value"))
                continue
            records.append(VitalsRecord(pid, vital, ts, val))
    return records, rejects


def write_csv(path, records: list[VitalsRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.patient_id, r.vital, r.timestamp, repr(r.value)])


# ---------------------------------------------------------------------------
# resampling and imputation
# ---------------------------------------------------------------------------


def resample_and_impute(records: list[VitalsRecord],
                        grid_seconds: int = GRID_SECONDS) -> list[RegularSeries]:
    """Align each stream to the grid, forward filling from the last observation.

    Each grid tick takes the nearest observation at or before the tick.
    Ticks before the first observation are not emitted (nothing to fill
    from), so every emitted series starts valid.
    """
    groups: dict[tuple, list[VitalsRecord]] = {}
    for r in records:
        groups.setdefault((r.patient_id, r.vital), []).append(r)

    out = []
    for (pid, vital) in sorted(groups):
        obs = sorted(groups[(pid, vital)], key=lambda r: r.timestamp)
        ts = np.array([r.timestamp for r in obs], dtype=np.int64)
        vals = np.array([r.value for r in obs], dtype=np.float64)
        first = int(-(-ts[0] // grid_seconds) * grid_seconds)   # ceil to grid
        last = int(ts[-1] // grid_seconds * grid_seconds)
        if last < first:
            continue
        ticks = np.arange(first, last + 1, grid_seconds, dtype=np.int64)
        idx = np.searchsorted(ts, ticks, side="right") - 1
        out.append(RegularSeries(pid, vital, first, vals[idx]))
    return out


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------


def make_windows(series: RegularSeries, anchor: int) -> list[VitalsWindow]:
    """Cut the 9-hour window [anchor-9h, anchor) into context and horizon."""
    anchor = int(anchor // GRID_SECONDS * GRID_SECONDS)
    start = anchor - WINDOW_TICKS * GRID_SECONDS
    i0 = series.tick_index(start)
    i1 = i0 + WINDOW_TICKS
    if i0 < 0 or i1 > len(series.values):
        return []
    vals = series.values[i0:i1]
    if not np.all(np.isfinite(vals)):
        return []
    return [VitalsWindow(series.patient_id, series.vital, anchor,
                         vals[:CONTEXT_LEN].copy(), vals[CONTEXT_LEN:].copy())]


def lowpass(series: np.ndarray, width: int = 5) -> np.ndarray:
    """Zero-phase centered moving average; the window shrinks at the edges."""
    if width < 1 or width % 2 == 0:
        raise ConfigError("lowpass width must be odd and >= 1")
    x = np.asarray(series, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("lowpass: input contains NaN/Inf")
    half = width // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    n = len(x)
    lo = np.maximum(np.arange(n) - half, 0)
    hi = np.minimum(np.arange(n) + half + 1, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------


def fit_scale(train_windows: list[VitalsWindow]) -> Scaler:
    scaler = Scaler()
    for w in train_windows:
        vals = np.concatenate([w.context, w.horizon])
        lo, hi = scaler.bounds.get(w.vital, (math.inf, -math.inf))
        scaler.bounds[w.vital] = (min(lo, vals.min()), max(hi, vals.max()))
    if not scaler.bounds:
        raise DataError("fit_scale: no training windows")
    return scaler


def apply_scale(windows: list[VitalsWindow], scaler: Scaler) -> list[VitalsWindow]:
    """Affine map to the train range; out-of-range values are not clipped."""
    return [VitalsWindow(w.patient_id, w.vital, w.anchor_time,
                         scaler.transform(w.vital, w.context),
                         scaler.transform(w.vital, w.horizon))
            for w in windows]


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split_by_patient(windows: list[VitalsWindow], rng: Rng,
                     ratio: tuple = (8, 1, 1)) -> SplitDataset:
    """Patient-disjoint split approximating the ratio by sample count."""
    by_patient: dict[str, list[VitalsWindow]] = {}
    for w in windows:
        by_patient.setdefault(w.patient_id, []).append(w)
    if len(by_patient) < 3:
        raise DataError(f"split needs >= 3 patients, got {len(by_patient)}")

    order = rng.child("split").shuffle(sorted(by_patient))
    total = len(windows)
    weight = sum(ratio)
    train_target = total * ratio[0] / weight
    val_target = total * (ratio[0] + ratio[1]) / weight

    parts = {"train": [], "val": [], "test": []}
    seen = 0
    for pid in order:
        if seen < train_target:
            split = "train"
        elif seen < val_target:
            split = "val"
        else:
            split = "test"
        parts[split].extend(by_patient[pid])
        seen += len(by_patient[pid])
    for name, ws in parts.items():
        if not ws:
            raise DataError(f"split produced an empty {name} set; need more patients")
        ws.sort(key=VitalsWindow.key)
    return SplitDataset(parts["train"], parts["val"], parts["test"], ratio=ratio)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

EPOCH_BASE = 1_700_000_000 // GRID_SECONDS * GRID_SECONDS
# Documented separation between source and shifted baselines (mmHg / bpm)
DOMAIN_SHIFT = {"MeanBP": -12.0, "HR": 18.0}
DETERIORATION_HOURS = 4.0
DETERIORATION_TOTAL = {"MeanBP": -28.0, "HR": 32.0}

_SOURCE_BASE = {"MeanBP": 88.0, "HR": 82.0}
_WAVE_AMP = {"MeanBP": 9.0, "HR": 11.0}
_NOISE_STD = {"MeanBP": 1.2, "HR": 1.5}


def synthetic_anchor_times(patient_index: int) -> list[int]:
    """Diagnosis anchors for a synthetic patient: one or two, on the grid."""
    n_anchors = 1 + (patient_index % 2)
    t0 = EPOCH_BASE + patient_index * 72 * 3600
    return [t0 + WINDOW_TICKS * GRID_SECONDS + k * 3 * 3600 for k in range(n_anchors)]


def generate_synthetic(n_patients: int, rng: Rng, domain: str = "source",
                       vitals: tuple = ("MeanBP", "HR")) -> list[VitalsRecord]:
    """Synthetic vitals: baseline + slow wave + circadian + AR(1) noise.

    The ``shifted`` domain moves the baselines and adds a deterioration
    ramp over the last hours before each anchor, so a source-pretrained
    model is measurably miscalibrated on it.
    """
    if n_patients < 1:
        raise ConfigError("n_patients must be >= 1")
    if domain not in ("source", "shifted"):
        raise ConfigError(f"unknown domain {domain!r}")
    records = []
    for i in range(n_patients):
        pid = f"{domain[0]}{i:05d}"
        anchors = synthetic_anchor_times(i)
        t_start = anchors[0] - WINDOW_TICKS * GRID_SECONDS
        t_end = anchors[-1]
        ticks = np.arange(t_start, t_end, GRID_SECONDS, dtype=np.int64)
        prng = rng.child(f"patient.{pid}")
        for vital in vitals:
            vrng = prng.child(vital)
            base = _SOURCE_BASE[vital] + float(vrng.uniform(-6.0, 6.0))
            if domain == "shifted":
                base += DOMAIN_SHIFT[vital]
            period = float(vrng.uniform(2.0, 4.0)) * 3600.0
            phase = float(vrng.uniform(0.0, 2 * np.pi))
            phase_c = float(vrng.uniform(0.0, 2 * np.pi))
            t = ticks.astype(np.float64)
            vals = (base
                    + _WAVE_AMP[vital] * np.sin(2 * np.pi * t / period + phase)
                    + 0.35 * _WAVE_AMP[vital] * np.sin(2 * np.pi * t / 86400.0 + phase_c))
            # AR(1) noise, rho 0.8
            eps = vrng.normal(len(ticks), std=_NOISE_STD[vital])
            noise = np.empty(len(ticks))
            acc = 0.0
            for j in range(len(ticks)):
                acc = 0.8 * acc + eps[j]
                noise[j] = acc
            vals = vals + noise
            if domain == "shifted":
                ramp_len = DETERIORATION_HOURS * 3600.0
                for anchor in anchors:
                    rel = (t - (anchor - ramp_len)) / ramp_len
                    vals = vals + DETERIORATION_TOTAL[vital] * np.clip(rel, 0.0, 1.0) \
                        * (t < anchor)
            lo, hi = VITAL_BOUNDS[vital]
            vals = np.clip(vals, lo, hi)
            # drop ~2% of interior ticks to exercise forward filling
            keep = vrng.uniform(0.0, 1.0, len(ticks)) >= 0.02
            keep[0] = keep[-1] = True
            for ts, v, k in zip(ticks, vals, keep):
                if k:
                    records.append(VitalsRecord(pid, vital, int(ts), float(v)))
    return records


def synthetic_anchors(n_patients: int, domain: str = "source") -> dict[str, list[int]]:
    return {f"{domain[0]}{i:05d}": synthetic_anchor_times(i) for i in range(n_patients)}


# ---------------------------------------------------------------------------
# end-to-end convenience
# ---------------------------------------------------------------------------


def build_dataset(records: list[VitalsRecord], anchors: dict[str, list[int]],
                  rng: Rng, lowpass_width: int = 5,
                  ratio: tuple = (8, 1, 1)) -> SplitDataset:
    """records -> resample -> lowpass -> window -> split -> scale."""
    windows = []
    for series in resample_and_impute(records):
        series.values = lowpass(series.values, lowpass_width)
        for anchor in anchors.get(series.patient_id, []):
            windows.extend(make_windows(series, anchor))
    windows.sort(key=VitalsWindow.key)
    ds = split_by_patient(windows, rng, ratio)
    scaler = fit_scale(ds.train)
    ds.train = apply_scale(ds.train, scaler)
    ds.val = apply_scale(ds.val, scaler)
    ds.test = apply_scale(ds.test, scaler)
    ds.scaler = scaler
    return ds
