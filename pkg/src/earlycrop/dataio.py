"""Parcel timeseries containers, long-format text I/O and a synthetic phenology generator.

A dataset is a list of parcels sharing one date axis.  Every parcel carries a
``bands x timesteps`` reflectance matrix and a boolean mask marking which
timesteps are present; removed or missing timesteps stay in the matrix (as
zeros) so all parcels remain rectangular.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, SchemaError, SplitError

SENTINEL2_BANDS = (
    "B01", "B02", "B03", "B04", "B05", "B06", "B07",
    "B08", "B8A", "B09", "B10", "B11", "B12",
)
HEADER_PREFIX = ("parcel_id", "label", "block_id", "date")

# bare-soil reflectance and full-canopy increment per Sentinel-2 band
_SOIL = np.array([0.08, 0.09, 0.11, 0.14, 0.17, 0.19, 0.20, 0.21, 0.22, 0.20, 0.02, 0.28, 0.24])
_CANOPY = np.array([-0.02, -0.04, -0.02, -0.10, -0.02, 0.18, 0.24, 0.26, 0.27, 0.08, 0.0, -0.06, -0.10])

_CLEAR_MAX = 0.70
_CLOUD_RANGE = (0.75, 0.95)
_SCALE = 1e4  # quantisation of reflectances (Sentinel-2 L2A digital numbers)


@dataclass(frozen=True)
class DateAxis:
    """Strictly increasing acquisition dates inside one calendar year."""

    dates: tuple

    def __post_init__(self):
        dates = tuple(self.dates)
        object.__setattr__(self, "dates", dates)
        if not dates:
            raise ConfigError("date axis must not be empty")
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ConfigError("date axis must be strictly increasing")
        if len({d.year for d in dates}) != 1:
            raise ConfigError("date axis must lie within one calendar year")

    @classmethod
    def regular(cls, year, n, start=(1, 6)):
        """``n`` dates from ``start`` with a fixed step of at most seven days."""
        first = dt.date(year, *start)
        room = (dt.date(year, 12, 31) - first).days
        if n < 1 or (n > 1 and room < n - 1):
            raise ConfigError(f"cannot place {n} dates in {year}")
        step = 7 if n == 1 else max(1, min(7, room // (n - 1)))
        return cls(tuple(first + dt.timedelta(days=step * k) for k in range(n)))

    def __len__(self):
        return len(self.dates)

    def __getitem__(self, i):
        return self.dates[i]

    @property
    def year(self):
        return self.dates[0].year

    @cached_property
    def doy(self):
        """Day of year (1-based) of every date, as floats."""
        out = np.array([d.timetuple().tm_yday for d in self.dates], dtype=float)
        out.setflags(write=False)
        return out

    def iso(self):
        return [d.isoformat() for d in self.dates]


@dataclass(frozen=True, eq=False)
class TimeSeriesSample:
    parcel_id: str
    label: int
    values: np.ndarray
    block_id: int
    mask: np.ndarray
    axis: DateAxis

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape[1] != len(self.axis):
            raise SchemaError(
                f"parcel {self.parcel_id}: values shape {values.shape} does not match "
                f"{len(self.axis)} timesteps"
            )
        if mask.shape != (values.shape[1],):
            raise SchemaError(f"parcel {self.parcel_id}: mask length {mask.shape} != T")
        if not mask.any():
            raise SchemaError(f"parcel {self.parcel_id}: no timestep present")
        if not np.isfinite(values).all():
            raise SchemaError(f"parcel {self.parcel_id}: non-finite reflectance")
        if (values < 0).any():
            raise SchemaError(f"parcel {self.parcel_id}: negative reflectance")
        values[:, ~mask] = 0.0
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "block_id", int(self.block_id))

    @property
    def n_bands(self):
        return self.values.shape[0]

    def replace(self, **changes):
        kw = dict(parcel_id=self.parcel_id, label=self.label, values=self.values,
                  block_id=self.block_id, mask=self.mask, axis=self.axis)
        kw.update(changes)
        return TimeSeriesSample(**kw)


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple
    axis: DateAxis
    class_names: tuple
    band_names: tuple

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "band_names", tuple(self.band_names))
        seen = set()
        C, B = len(self.class_names), len(self.band_names)
        for s in self.samples:
            if s.parcel_id in seen:
                raise SchemaError(f"duplicate parcel_id {s.parcel_id!r}")
            seen.add(s.parcel_id)
            if not 0 <= s.label < C:
                raise SchemaError(f"parcel {s.parcel_id}: label {s.label} outside 0..{C - 1}")
            if s.axis != self.axis:
                raise SchemaError(f"parcel {s.parcel_id}: date axis differs from dataset axis")
            if s.n_bands != B:
                raise SchemaError(f"parcel {s.parcel_id}: {s.n_bands} bands, expected {B}")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def n_bands(self):
        return len(self.band_names)

    @cached_property
    def labels(self):
        out = np.array([s.label for s in self.samples], dtype=int)
        out.setflags(write=False)
        return out

    @cached_property
    def block_ids(self):
        out = np.array([s.block_id for s in self.samples], dtype=int)
        out.setflags(write=False)
        return out

    def tensors(self):
        """Stacked ``(X, mask)`` with ``X`` shaped ``(N, T, B)`` and mask ``(N, T)``."""
        T, B = len(self.axis), self.n_bands
        if not self.samples:
            return np.zeros((0, T, B)), np.zeros((0, T), dtype=bool)
        X = np.stack([s.values.T for s in self.samples])
        M = np.stack([s.mask for s in self.samples])
        return X, M

    def subset(self, indices):
        return Dataset(tuple(self.samples[i] for i in indices), self.axis,
                       self.class_names, self.band_names)


def same_dataset(a, b):
    """Equality up to sample order."""
    if (a.axis != b.axis or a.class_names != b.class_names
            or a.band_names != b.band_names or len(a) != len(b)):
        return False
    other = {s.parcel_id: s for s in b}
    for s in a:
        t = other.get(s.parcel_id)
        if t is None or (s.label, s.block_id) != (t.label, t.block_id):
            return False
        if not (np.array_equal(s.mask, t.mask) and np.array_equal(s.values, t.values)):
            return False
    return True


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs of the synthetic phenology generator.

    Every non-uniform class follows a double-logistic canopy curve (green-up and
    senescence dates) plus a short flowering bump centred on a class-specific
    peak date whose spectral shape is a class-specific band-weight vector.  The
    last ``n_uniform_classes`` classes copy, parcel by parcel, the phenology of
    a randomly drawn regular class, so no timestep is characteristic for them.
    """

    n_classes: int = 8
    n_samples: int = 2000
    T: int = 52
    B: int = 13
    year: int = 2019
    cloud_probability: float = 0.1
    imbalance_exponent: float = 0.0
    n_blocks: int = 50
    seed: int = 0
    jitter_std: float = 0.02
    noise_std: float = 0.01
    date_jitter_days: float = 3.0
    phenology_spread_days: float = 20.0
    peak_window: tuple = (150.0, 240.0)
    peak_amplitude: float = 0.15
    peak_width_days: float = 6.0
    n_uniform_classes: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.T < 8:
            raise ConfigError("T must be >= 8")
        if self.B < 1:
            raise ConfigError("B must be >= 1")
        if self.n_samples < 0:
            raise ConfigError("n_samples must be >= 0")
        if not 0.0 <= self.cloud_probability < 1.0:
            raise ConfigError("cloud_probability must lie in [0, 1)")
        if self.imbalance_exponent < 0:
            raise ConfigError("imbalance_exponent must be >= 0")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if min(self.jitter_std, self.noise_std, self.date_jitter_days,
               self.phenology_spread_days, self.peak_amplitude) < 0:
            raise ConfigError("jitter, noise, spread and amplitude must be >= 0")
        if self.peak_width_days <= 0:
            raise ConfigError("peak_width_days must be > 0")
        lo, hi = self.peak_window
        if not 1 <= lo <= hi <= 366:
            raise ConfigError("peak_window must be an ordered day-of-year pair")
        if not 0 <= self.n_uniform_classes < self.n_classes:
            raise ConfigError("n_uniform_classes must leave at least one regular class")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "peak_window" in d:
            d["peak_window"] = tuple(d["peak_window"])
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        d = asdict(self)
        d["peak_window"] = list(self.peak_window)
        return d


def band_names_for(B):
    if B == len(SENTINEL2_BANDS):
        return SENTINEL2_BANDS
    return tuple(f"B{k + 1:02d}" for k in range(B))


def _band_curve(base, B):
    if B == len(base):
        return base.copy()
    return np.interp(np.linspace(0, len(base) - 1, B), np.arange(len(base)), base)


def _double_logistic(doy, green_up, senescence, slope=8.0):
    rise = 1.0 / (1.0 + np.exp(-(doy - green_up) / slope))
    fall = 1.0 / (1.0 + np.exp(-(doy - senescence) / slope))
    return rise - fall


def power_law_counts(n_samples, n_classes, exponent):
    """Class sizes proportional to ``(k + 1) ** -exponent`` (largest remainder)."""
    w = np.arange(1, n_classes + 1, dtype=float) ** -exponent
    share = w / w.sum() * n_samples
    counts = np.floor(share).astype(int)
    rest = n_samples - counts.sum()
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


@dataclass(frozen=True)
class ClassPhenology:
    green_up: float
    senescence: float
    peak: float
    canopy: float
    band_weights: np.ndarray = field(repr=False)
    uniform: bool = False


def class_phenologies(config):
    """Deterministic per-class phenology parameters for ``config``."""
    config.validate()
    rng = np.random.default_rng([config.seed, 1])
    K = config.n_classes
    n_regular = K - config.n_uniform_classes
    lo, hi = config.peak_window
    peaks = lo + (np.arange(n_regular) + 0.5) / n_regular * (hi - lo)
    peaks = rng.permutation(peaks)
    out = []
    for k in range(K):
        spread = config.phenology_spread_days
        g = 110.0 + spread * rng.uniform(-1, 1)
        s = 270.0 + spread * rng.uniform(-1, 1)
        canopy = 1.0 - 0.3 * rng.uniform() if spread > 0 else 0.85
        weights = rng.uniform(0.0, 1.0, size=config.B)
        weights /= weights.max()
        if k < n_regular:
            out.append(ClassPhenology(g, s, float(peaks[k]), canopy, weights))
        else:
            out.append(ClassPhenology(g, s, float("nan"), canopy, weights, uniform=True))
    return out


def generate_synthetic(config):
    """Draw a synthetic parcel dataset; identical configs give identical datasets."""
    config.validate()
    rng = np.random.default_rng([config.seed, 2])
    axis = DateAxis.regular(config.year, config.T)
    doy = axis.doy
    soil = _band_curve(_SOIL, config.B)
    canopy = _band_curve(_CANOPY, config.B)
    phen = class_phenologies(config)
    counts = power_law_counts(config.n_samples, config.n_classes, config.imbalance_exponent)
    labels = rng.permutation(np.repeat(np.arange(config.n_classes), counts))

    samples = []
    n_regular = config.n_classes - config.n_uniform_classes
    for i, k in enumerate(labels):
        p = phen[k]
        if p.uniform:
            p = phen[int(rng.integers(n_regular))]
        jd = config.date_jitter_days
        g = p.green_up + rng.normal(0, jd)
        s = p.senescence + rng.normal(0, jd)
        peak = p.peak + rng.normal(0, jd)
        weights = p.band_weights
        amp = config.peak_amplitude + rng.normal(0, config.jitter_std)
        offset = rng.normal(0, config.jitter_std, size=config.B)
        veg = p.canopy * _double_logistic(doy, g, s)
        bump = np.exp(-0.5 * ((doy - peak) / config.peak_width_days) ** 2)
        values = (soil[:, None] + offset[:, None] + canopy[:, None] * veg[None, :]
                  + amp * weights[:, None] * bump[None, :])
        values += rng.normal(0, config.noise_std, size=values.shape)
        values = np.clip(values, 0.0, _CLEAR_MAX)
        cloudy = rng.uniform(size=config.T) < config.cloud_probability
        cloud = rng.uniform(*_CLOUD_RANGE, size=values.shape)
        values = np.where(cloudy[None, :], cloud, values)
        # dividing makes each entry the double nearest to its 4-decimal value
        values = np.rint(values * _SCALE) / _SCALE
        block = int(rng.integers(config.n_blocks))
        samples.append(TimeSeriesSample(f"p{i:06d}", int(k), values, block,
                                        np.ones(config.T, dtype=bool), axis))
    class_names = tuple(f"class_{k}" for k in range(config.n_classes))
    return Dataset(tuple(samples), axis, class_names, band_names_for(config.B))


# ---------------------------------------------------------------------------
# long-format text files
# ---------------------------------------------------------------------------

def _fmt(v):
    return f"{v:.9g}"


def save_dataset(ds, path):
    """Write ``ds`` as one comma-separated row per present (parcel, date)."""
    dates = ds.axis.iso()
    lines = [",".join(HEADER_PREFIX + ds.band_names)]
    for s in ds.samples:
        head = f"{s.parcel_id},{s.label},{s.block_id},"
        cols = s.values.T
        for t in np.flatnonzero(s.mask):
            lines.append(head + dates[t] + "," + ",".join(_fmt(v) for v in cols[t]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_dataset(path, class_names=None):
    """Read a long-format dataset file.

    The date axis is the sorted union of all dates in the file; parcel/date
    combinations absent from the file become masked timesteps.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header required") from None
        if tuple(header[:4]) != HEADER_PREFIX or len(header) < 5:
            raise SchemaError(f"{path}: header must start with {','.join(HEADER_PREFIX)}"
                              " followed by band columns")
        band_names = tuple(header[4:])
        B = len(band_names)
        rows = {}
        meta = {}
        dates = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4 + B:
                raise SchemaError(f"{path}: line {lineno}: {len(row) - 4} band values, "
                                  f"header declares {B}")
            pid = row[0]
            try:
                label, block = int(row[1]), int(row[2])
            except ValueError:
                raise ParseError(f"label/block_id must be integers: {row[1]!r}, {row[2]!r}",
                                 lineno) from None
            try:
                date = dt.date.fromisoformat(row[3])
            except ValueError:
                raise ParseError(f"invalid ISO date {row[3]!r}", lineno) from None
            try:
                vals = [float(v) for v in row[4:]]
            except ValueError:
                raise ParseError(f"non-numeric reflectance in {row[4:]!r}", lineno) from None
            if meta.setdefault(pid, (label, block)) != (label, block):
                raise SchemaError(f"{path}: line {lineno}: parcel {pid} changes label or block")
            per = rows.setdefault(pid, {})
            if date in per:
                raise ParseError(f"duplicate row for parcel {pid} on {date}", lineno)
            per[date] = vals
            dates.add(date)

    if not rows:
        raise SchemaError(f"{path}: no data rows; the date axis cannot be inferred")
    axis = DateAxis(tuple(sorted(dates)))
    index = {d: t for t, d in enumerate(axis.dates)}
    T = len(axis)
    samples = []
    for pid, per in rows.items():
        values = np.zeros((B, T))
        mask = np.zeros(T, dtype=bool)
        for d, vals in per.items():
            values[:, index[d]] = vals
            mask[index[d]] = True
        label, block = meta[pid]
        samples.append(TimeSeriesSample(pid, label, values, block, mask, axis))
    if class_names is None:
        n = max(s.label for s in samples) + 1
        class_names = tuple(f"class_{k}" for k in range(n))
    return Dataset(tuple(samples), axis, tuple(class_names), band_names)


# ---------------------------------------------------------------------------
# splitting and statistics
# ---------------------------------------------------------------------------

def split_spatial(ds, test_fraction, seed):
    """Partition whole spatial blocks into ``(train, test)``.

    Blocks are visited in a seeded random order; the test side receives the
    prefix of that order whose sample share is closest to ``test_fraction``.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    blocks, sizes = np.unique(ds.block_ids, return_counts=True)
    if len(blocks) < 2:
        raise SplitError("spatial split needs at least two distinct block ids")
    order = np.random.default_rng(seed).permutation(len(blocks))
    share = np.cumsum(sizes[order]) / len(ds)
    # keep both sides non-empty
    k = int(np.argmin(np.abs(share[:-1] - test_fraction))) + 1
    test_blocks = set(blocks[order[:k]].tolist())
    is_test = np.array([b in test_blocks for b in ds.block_ids], dtype=bool)
    return ds.subset(np.flatnonzero(~is_test)), ds.subset(np.flatnonzero(is_test))


@dataclass(frozen=True)
class ClassHistogram:
    counts: np.ndarray
    shares: np.ndarray

    def as_dict(self):
        return {k: int(c) for k, c in enumerate(self.counts) if c}


def class_distribution(ds):
    counts = np.bincount(ds.labels, minlength=ds.n_classes)[: ds.n_classes] if len(ds) \
        else np.zeros(ds.n_classes, dtype=int)
    total = counts.sum()
    shares = counts / total if total else np.zeros(ds.n_classes)
    return ClassHistogram(counts, shares)
