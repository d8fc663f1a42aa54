"""From per-parcel relevance to dataset-level timestep rankings and date windows."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Dataset, DateAxis
from .errors import ConfigError, ParseError, PruningError, SchemaError
from .lrp import LrpConfig, relevance_batch
from .model import predict_logits

STATISTICS = ("mean", "median")


@dataclass(frozen=True, eq=False)
class RelevanceProfile:
    """Aggregated score per timestep.

    Each parcel's ``R_t`` is divided by its own ``max |R_t|`` before the
    absolute values are aggregated, so every parcel weighs the same.
    ``per_class`` rows aggregate parcels of one reference class (zero rows
    for classes without parcels, see ``class_counts``).
    """

    per_timestep: np.ndarray
    per_class: np.ndarray | None = None
    n_samples_used: int = 0
    normalization: str = "linf-per-sample"
    statistic: str = "mean"
    class_counts: np.ndarray | None = None
    n_excluded_zero: int = 0


@dataclass(frozen=True, eq=False)
class ClassRelevance:
    """Quartiles of raw ``R_t`` per reference class, each ``(C, T)``."""

    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    counts: np.ndarray

    def normalised(self):
        """``|median|`` of every class divided by the largest value over all classes."""
        a = np.abs(self.median)
        top = a.max() if a.size else 0.0
        return a / top if top > 0 else a


@dataclass(frozen=True)
class Timeframe:
    start: dt.date
    end: dt.date
    member_indices: tuple = field(default=())
    n: int = 0

    def __post_init__(self):
        if self.start > self.end:
            raise ConfigError("timeframe start after end")

    def contains(self, other):
        return self.start <= other.start and other.end <= self.end

    @property
    def length_days(self):
        return (self.end - self.start).days


def sample_timestep_relevance(params, ds, lrp_config=None, batch_size=128, targets=None):
    """Raw ``R_t`` per parcel ``(N, T)`` and the target class used for each parcel.

    ``targets`` (one class per parcel) overrides the target selection of
    ``lrp_config``.
    """
    cfg = (lrp_config or LrpConfig()).validate()
    X, M = ds.tensors()
    doy = ds.axis.doy
    if targets is not None:
        target = np.asarray(targets, dtype=int)
    else:
        target = None if cfg.target_selection == "predicted-class" else cfg.target_class
    R_t = np.zeros(M.shape)
    targets = np.zeros(len(ds), dtype=int)
    for lo in range(0, len(ds), batch_size):
        sl = slice(lo, lo + batch_size)
        tsel = target[sl] if target is not None and np.ndim(target) else target
        R, tg, _, _ = relevance_batch(params, X[sl], M[sl], doy, tsel, cfg.epsilon)
        R_t[sl] = R.sum(axis=2)
        targets[sl] = tg
    return R_t, targets


def normalise_rows(R_t):
    """Divide every row by its ``max |.|``; all-zero rows are flagged, not divided."""
    top = np.abs(R_t).max(axis=1)
    keep = top > 0
    out = np.zeros_like(R_t)
    out[keep] = R_t[keep] / top[keep, None]
    return out, keep


def _aggregate(rows, statistic):
    if len(rows) == 0:
        return np.zeros(rows.shape[1])
    return rows.mean(axis=0) if statistic == "mean" else np.median(rows, axis=0)


def profile_from_relevance(R_t, labels, n_classes, statistic="mean", use=None):
    """Build a :class:`RelevanceProfile` from raw per-parcel ``R_t`` rows."""
    if statistic not in STATISTICS:
        raise ConfigError(f"statistic must be one of {STATISTICS}")
    R_t = np.asarray(R_t, dtype=float)
    labels = np.asarray(labels, dtype=int)
    use = np.ones(len(R_t), dtype=bool) if use is None else np.asarray(use, dtype=bool)
    norm, nonzero = normalise_rows(R_t)
    chosen = use & nonzero
    rows = np.abs(norm[chosen])
    lab = labels[chosen]
    per_class = np.zeros((n_classes, R_t.shape[1]))
    counts = np.bincount(lab, minlength=n_classes)[:n_classes]
    for k in range(n_classes):
        per_class[k] = _aggregate(rows[lab == k], statistic)
    return RelevanceProfile(_aggregate(rows, statistic), per_class, int(chosen.sum()),
                            statistic=statistic, class_counts=counts,
                            n_excluded_zero=int((use & ~nonzero).sum()))


def aggregate_relevance(params, ds, lrp_config=None, statistic="mean", correct_only=True):
    """Dataset-level relevance profile.

    With ``correct_only`` only parcels whose prediction matches the reference
    label contribute (if none does, all parcels are used).
    """
    if len(ds) == 0:
        raise ConfigError("cannot aggregate relevance over an empty dataset")
    cfg = (lrp_config or LrpConfig()).validate()
    R_t, targets = sample_timestep_relevance(params, ds, cfg)
    use = None
    if correct_only:
        if cfg.target_selection == "predicted-class":
            pred = targets
        else:
            pred = predict_logits(params, ds).argmax(axis=1)
        use = pred == ds.labels
        if not use.any():
            use = None
    return profile_from_relevance(R_t, ds.labels, ds.n_classes, statistic, use)


def class_relevance(R_t, labels, n_classes):
    """Median and inter-quartile band of raw ``R_t`` per reference class."""
    R_t = np.asarray(R_t, dtype=float)
    labels = np.asarray(labels, dtype=int)
    T = R_t.shape[1]
    med, lo, hi = (np.zeros((n_classes, T)) for _ in range(3))
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    for k in range(n_classes):
        rows = R_t[labels == k]
        if len(rows):
            lo[k], med[k], hi[k] = np.percentile(rows, [25, 50, 75], axis=0)
    return ClassRelevance(med, lo, hi, counts)


def reference_class_relevance(params, ds, lrp_config=None):
    """:func:`class_relevance` with every parcel explained for its own reference label.

    Evidence the model holds for the true class, not for whatever it predicted,
    so a class the model cannot recognise shows no consistent timestep.
    """
    R_t, _ = sample_timestep_relevance(params, ds, lrp_config, targets=ds.labels)
    return class_relevance(R_t, ds.labels, ds.n_classes)


def _scores(profile):
    if isinstance(profile, RelevanceProfile):
        return np.asarray(profile.per_timestep, dtype=float)
    return np.asarray(profile, dtype=float)


def top_n_timesteps(profile, n):
    """Sorted indices of the ``n`` largest absolute scores; ties favour earlier timesteps."""
    scores = np.abs(_scores(profile))
    T = len(scores)
    if not 1 <= n <= T:
        raise ConfigError(f"n must lie in 1..{T}, got {n}")
    order = np.lexsort((np.arange(T), -scores))
    return tuple(sorted(int(i) for i in order[:n]))


def bounding_window(indices, axis, n=None):
    """Closed date interval spanned by ``indices`` on ``axis``."""
    idx = sorted(set(int(i) for i in indices))
    if not idx:
        raise ConfigError("bounding window of an empty index set")
    if idx[0] < 0 or idx[-1] >= len(axis):
        raise ConfigError(f"index outside the {len(axis)}-step axis")
    return Timeframe(axis[idx[0]], axis[idx[-1]], tuple(idx), len(idx) if n is None else n)


def timeframes(profile, axis, n_list=(3, 5, 10)):
    return [bounding_window(top_n_timesteps(profile, n), axis, n) for n in n_list]


def dominant_peaks(profile, threshold=0.25):
    """Local maxima of ``|profile|`` strictly above ``threshold``.

    On a plateau only its first index counts.
    """
    if not threshold > 0:
        raise ConfigError("threshold must be > 0")
    v = np.abs(_scores(profile))
    peaks = []
    for i, x in enumerate(v):
        if x <= threshold:
            continue
        left_ok = i == 0 or x > v[i - 1]
        right_ok = i == len(v) - 1 or x >= v[i + 1]
        if left_ok and right_ok:
            peaks.append((i, float(x)))
    return peaks


def prune_to_window(ds, tf):
    """Restrict ``ds`` to the dates inside ``[tf.start, tf.end]``; values are sliced, not altered."""
    keep = [t for t, d in enumerate(ds.axis.dates) if tf.start <= d <= tf.end]
    if not keep:
        raise PruningError(f"window {tf.start}..{tf.end} does not overlap the date axis")
    axis = DateAxis(tuple(ds.axis.dates[t] for t in keep))
    samples = []
    for s in ds.samples:
        mask = s.mask[keep]
        if not mask.any():
            raise PruningError(f"parcel {s.parcel_id} has no observation inside the window")
        samples.append(s.replace(values=s.values[:, keep], mask=mask, axis=axis))
    return Dataset(tuple(samples), axis, ds.class_names, ds.band_names)


def full_span(axis):
    return Timeframe(axis[0], axis[-1], tuple(range(len(axis))), len(axis))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def save_profile(profile, axis, path, class_names=None):
    """``date,score,class`` rows; the pooled profile uses class ``all``."""
    dates = axis.iso()
    lines = ["date,score,class"]
    lines += [f"{d},{v:.9g},all" for d, v in zip(dates, profile.per_timestep)]
    if profile.per_class is not None:
        names = class_names or [f"class_{k}" for k in range(len(profile.per_class))]
        for name, row in zip(names, profile.per_class):
            lines += [f"{d},{v:.9g},{name}" for d, v in zip(dates, row)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_profile(path):
    """Read the pooled rows of a profile file: ``(DateAxis, RelevanceProfile)``."""
    dates, scores = [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["date", "score", "class"]:
            raise SchemaError(f"{path}: header must be date,score,class")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise SchemaError(f"{path}: line {lineno}: expected 3 columns")
            if row[2] != "all":
                continue
            try:
                dates.append(dt.date.fromisoformat(row[0]))
                scores.append(float(row[1]))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    if not dates:
        raise SchemaError(f"{path}: no pooled ('all') profile rows")
    return DateAxis(tuple(dates)), RelevanceProfile(np.array(scores))


def save_timeframes(frames, path):
    lines = ["n,start,end"] + [f"{tf.n},{tf.start.isoformat()},{tf.end.isoformat()}"
                               for tf in frames]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
