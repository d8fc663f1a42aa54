"""Validation studies: relevance-guided timestep pruning and retraining on shortened windows."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, TrainingError
from .lrp import LrpConfig
from .model import init_model, logits_under_masks
from .timeframe import full_span, prune_to_window, sample_timestep_relevance
from .train import evaluate, train

log = logging.getLogger(__name__)

TARGETED = "targeted-least-first"
RANDOM = "random"


@dataclass(frozen=True, eq=False)
class PruneCurve:
    """Mean squared logit deviation from the unpruned parcel after ``n`` removals."""

    n_removed: np.ndarray
    mse: np.ndarray
    mode: str
    trials: int = 1
    T: int = 0

    @property
    def fraction_removed(self):
        return self.n_removed / self.T

    def mse_at_fraction(self, fraction):
        n = int(round(fraction * self.T))
        return float(self.mse[min(n, len(self.mse) - 1)])


def _progressive_masks(mask, order):
    """Row ``n`` keeps ``mask`` minus the first ``n`` entries of ``order``."""
    rows = np.repeat(mask[None], len(order), axis=0)
    for n in range(1, len(order)):
        rows[n:, order[n - 1]] = False
    return rows


def _accumulate(sums, counts, logits, present):
    full = logits[0]
    err = ((logits - full) ** 2).mean(axis=1)
    sums[:present] += err
    counts[:present] += 1


def _take(ds, max_samples):
    if max_samples is None or max_samples >= len(ds):
        return ds
    return ds.subset(range(max_samples))


def prune_curve_targeted(params, ds, lrp_config=None, max_samples=None):
    """Remove each parcel's timesteps in ascending ``|R_t|`` order, one at a time."""
    ds = _take(ds, max_samples)
    if len(ds) == 0:
        raise ConfigError("pruning curve needs at least one parcel")
    R_t, _ = sample_timestep_relevance(params, ds, lrp_config)
    T = len(ds.axis)
    doy = ds.axis.doy
    sums, counts = np.zeros(T), np.zeros(T)
    for i, s in enumerate(ds.samples):
        present = np.flatnonzero(s.mask)
        order = present[np.lexsort((present, np.abs(R_t[i, present])))]
        logits = logits_under_masks(params, s.values.T, doy, _progressive_masks(s.mask, order))
        _accumulate(sums, counts, logits, len(present))
    used = counts > 0
    return PruneCurve(np.flatnonzero(used), sums[used] / counts[used], TARGETED, 1, T)


def removal_order(n_present, seed, sample_index, trial):
    """Random permutation keyed by ``(seed, sample, trial)``, independent of evaluation order."""
    return np.random.default_rng([seed, sample_index, trial]).permutation(n_present)


def prune_curve_random(params, ds, trials=20, seed=0, max_samples=None):
    """Same protocol as :func:`prune_curve_targeted` with uniformly random removal orders."""
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    ds = _take(ds, max_samples)
    if len(ds) == 0:
        raise ConfigError("pruning curve needs at least one parcel")
    T = len(ds.axis)
    doy = ds.axis.doy
    sums, counts = np.zeros(T), np.zeros(T)
    for i, s in enumerate(ds.samples):
        present = np.flatnonzero(s.mask)
        P = len(present)
        masks = np.concatenate([
            _progressive_masks(s.mask, present[removal_order(P, seed, i, k)])
            for k in range(trials)
        ])
        logits = logits_under_masks(params, s.values.T, doy, masks)
        for k in range(trials):
            _accumulate(sums, counts, logits[k * P:(k + 1) * P], P)
    used = counts > 0
    return PruneCurve(np.flatnonzero(used), sums[used] / counts[used], RANDOM, trials, T)


def curve_auc(curve, reference=None):
    """Trapezoidal area under ``mse`` over the removal axis rescaled to ``[0, 1]``.

    With ``reference`` (normally the random curve) the area is divided by the
    reference's final mse so that paired curves are compared on one scale.
    """
    n = np.asarray(curve.n_removed, dtype=float)
    if len(n) < 2:
        return 0.0
    x = (n - n[0]) / (n[-1] - n[0])
    y = np.asarray(curve.mse, dtype=float)
    area = float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0)
    if reference is not None:
        last = float(reference.mse[-1])
        if last > 0:
            area /= last
    return area


def save_curves(curves, path):
    lines = ["n_removed,fraction_removed,mse,mode"]
    for c in curves:
        for n, f, m in zip(c.n_removed, c.fraction_removed, c.mse):
            lines.append(f"{int(n)},{f:.9g},{m:.9g},{c.mode}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# earliness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EarlinessResult:
    window: object          # Timeframe
    n: int | None           # None for the full span
    train_accuracy: float
    test_accuracy: float
    window_length_days: int
    end_date: object
    delta_vs_full: float = 0.0

    @property
    def label(self):
        return "full" if self.n is None else str(self.n)


def train_and_score(train_ds, test_ds, train_config, model_config, model_seed=0):
    """Fresh model trained on ``train_ds``; returns ``(params, train_acc, test_acc, history)``."""
    mc = dataclasses.replace(model_config, B=train_ds.n_bands, C=train_ds.n_classes)
    params = init_model(mc, model_seed)
    params, history = train(params, train_ds, train_config)
    return (params, evaluate(params, train_ds).overall_accuracy,
            evaluate(params, test_ds).overall_accuracy, history)


def earliness_experiment(full_train, full_test, windows, train_config, model_config,
                         model_seed=0):
    """Retrain from scratch on the full span and on every window; score on the pruned test set.

    The first result is the full span.  ``delta_vs_full`` is the test-accuracy
    difference to it (negative = worse).
    """
    configs = [(None, full_span(full_train.axis))] + [(tf.n, tf) for tf in windows]
    results = []
    for n, tf in configs:
        tr = prune_to_window(full_train, tf)
        te = prune_to_window(full_test, tf)
        try:
            _, acc_tr, acc_te, _ = train_and_score(tr, te, train_config, model_config, model_seed)
        except TrainingError as exc:
            raise TrainingError(f"window n={n if n is not None else 'full'} "
                                f"({tf.start}..{tf.end}): {exc}") from exc
        log.info("window %s %s..%s test accuracy %.4f", n, tf.start, tf.end, acc_te)
        results.append(EarlinessResult(tf, n, acc_tr, acc_te, tf.length_days, tf.end))
    base = results[0].test_accuracy
    return [dataclasses.replace(r, delta_vs_full=r.test_accuracy - base) for r in results]


def save_earliness(results, path):
    lines = ["window_n,start,end,train_acc,test_acc,delta_vs_full"]
    for r in results:
        lines.append(f"{r.label},{r.window.start.isoformat()},{r.window.end.isoformat()},"
                     f"{r.train_accuracy:.9g},{r.test_accuracy:.9g},{r.delta_vs_full:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
