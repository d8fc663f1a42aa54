"""Cross-entropy training with Adam, gradient verification and accuracy metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataio import Dataset
from .errors import ConfigError, NumericError, TrainingError
from .model import (Parameters, backward, fit_standardisation, forward_batch, param_shapes,
                    predict_logits)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.2

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if min(self.learning_rate, self.adam_eps) <= 0:
            raise ConfigError("learning_rate and adam_eps must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0 <= self.validation_fraction <= 0.5:
            raise ConfigError("validation_fraction must lie in [0, 0.5]")
        return self

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        return asdict(self)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to the logits."""
    n = len(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    per_sample = logsum - shifted[np.arange(n), labels]
    probs = np.exp(shifted - logsum[:, None])
    probs[np.arange(n), labels] -= 1.0
    return per_sample, probs / n


def _as_arrays(batch):
    if isinstance(batch, Dataset):
        samples = batch.samples
    else:
        samples = tuple(batch)
    if not samples:
        raise ConfigError("empty batch")
    axis = samples[0].axis
    if any(s.axis != axis for s in samples):
        raise ConfigError("all samples of a batch must share one date axis")
    X = np.stack([s.values.T for s in samples])
    M = np.stack([s.mask for s in samples])
    y = np.array([s.label for s in samples])
    return X, M, axis.doy, y, [s.parcel_id for s in samples]


def _loss_and_grad(params, X, M, doy, y, ids=None):
    trace = forward_batch(params, X, M, doy)
    per_sample, dlogits = cross_entropy(trace.logits, y)
    bad = ~np.isfinite(per_sample)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        who = ids[i] if ids is not None else f"#{i}"
        raise NumericError(f"non-finite loss for sample {who}")
    return per_sample.mean(), backward(params, trace, dlogits), trace.logits


def loss_and_grad(params, batch):
    """Mean cross-entropy over ``batch`` and its gradient, keyed like the parameters."""
    X, M, doy, y, ids = _as_arrays(batch)
    loss, grads, _ = _loss_and_grad(params, X, M, doy, y, ids)
    return loss, grads


def sample_param_entries(params, n, seed=0):
    """``n`` distinct ``(name, flat_index)`` pairs drawn uniformly over all parameters."""
    names = [name for name, _ in param_shapes(params.config)]
    sizes = np.array([params.arrays[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = min(n, int(offsets[-1]))
    flat = np.sort(np.random.default_rng(seed).choice(offsets[-1], size=n, replace=False))
    where = np.searchsorted(offsets, flat, side="right") - 1
    return [(names[w], int(f - offsets[w])) for w, f in zip(where, flat)]


def grad_check(params, sample, fd_epsilon=1e-5, n_checks=200, seed=0, analytic=None):
    """Largest relative error between analytic and central-difference gradients.

    Differences are evaluated in extended precision (``np.longdouble``) so that
    roundoff does not swamp gradients of order 1e-7.  ``analytic`` overrides
    the gradient being checked (used to confirm that the check notices a
    corrupted gradient).
    """
    if not 1e-7 <= fd_epsilon <= 1e-3:
        raise ConfigError("fd_epsilon must lie in [1e-7, 1e-3]")
    X, M, doy, y, _ = _as_arrays([sample])
    if analytic is None:
        _, analytic, _ = _loss_and_grad(params, X, M, doy, y)
    probe = Parameters(params.config,
                       {k: v.astype(np.longdouble) for k, v in params.arrays.items()},
                       params.input_shift, params.input_scale)
    X = X.astype(np.longdouble)
    eps = np.longdouble(fd_epsilon)
    worst = 0.0
    for name, idx in sample_param_entries(params, n_checks, seed):
        flat = probe.arrays[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        up = cross_entropy(forward_batch(probe, X, M, doy).logits, y)[0].mean()
        flat[idx] = orig - eps
        down = cross_entropy(forward_batch(probe, X, M, doy).logits, y)[0].mean()
        flat[idx] = orig
        numeric = float((up - down) / (2 * eps))
        a = float(analytic[name].reshape(-1)[idx])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


class Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params.arrays[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _evaluate_arrays(params, X, M, doy, y, batch_size=256):
    losses, correct = [], 0
    for lo in range(0, len(y), batch_size):
        logits = forward_batch(params, X[lo:lo + batch_size], M[lo:lo + batch_size], doy).logits
        per, _ = cross_entropy(logits, y[lo:lo + batch_size])
        losses.append(per)
        correct += int((logits.argmax(axis=1) == y[lo:lo + batch_size]).sum())
    return float(np.concatenate(losses).mean()), correct / len(y)


def train(params, train_ds, config):
    """Fit ``params`` (a copy is trained) on ``train_ds``.

    The per-band input standardisation is fitted on the training part first.
    Returns ``(best_params, history)`` where ``history`` holds one dict per
    epoch.  The returned parameters come from the epoch with the highest
    validation accuracy, or the last epoch when no validation split is used.
    """
    config.validate()
    if len(train_ds) == 0:
        raise ConfigError("training set is empty")
    if int(train_ds.labels.max()) >= params.config.C:
        raise ConfigError("a label exceeds the model's class count")
    params = params.copy()
    if config.epochs == 0:
        return params, []

    rng = np.random.default_rng(config.seed)
    X, M = train_ds.tensors()
    y = np.asarray(train_ds.labels)
    doy = train_ds.axis.doy
    n_val = int(round(config.validation_fraction * len(y)))
    if n_val >= len(y):
        raise ConfigError("validation split leaves no training samples")
    perm = rng.permutation(len(y))
    val_idx, fit_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    ids = [train_ds.samples[i].parcel_id for i in fit_idx]
    Xf, Mf, yf = X[fit_idx], M[fit_idx], y[fit_idx]
    fit_standardisation(params, Xf, Mf)

    opt = Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2,
               config.adam_eps)
    history = []
    best, best_acc = params.copy(), -1.0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(yf))
        loss_sum, correct = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            b = order[lo:lo + config.batch_size]
            try:
                loss, grads, logits = _loss_and_grad(params, Xf[b], Mf[b], doy, yf[b],
                                                     [ids[i] for i in b])
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            loss_sum += loss * len(b)
            correct += int((logits.argmax(axis=1) == yf[b]).sum())
            opt.step(params, grads)
        if not all(np.isfinite(v).all() for v in params.arrays.values()):
            raise TrainingError(f"epoch {epoch}: parameters diverged")
        row = {"epoch": epoch, "train_loss": loss_sum / len(yf), "train_acc": correct / len(yf),
               "val_loss": math.nan, "val_acc": math.nan}
        if n_val:
            row["val_loss"], row["val_acc"] = _evaluate_arrays(params, X[val_idx], M[val_idx],
                                                               doy, y[val_idx])
            if row["val_acc"] > best_acc:
                best, best_acc = params.copy(), row["val_acc"]
        history.append(row)
        log.info("epoch %d loss %.4f acc %.4f val_acc %.4f", epoch, row["train_loss"],
                 row["train_acc"], row["val_acc"])
    return (best if n_val else params), history


def save_history(history, path):
    lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
    for r in history:
        lines.append(",".join([str(r["epoch"])] + [f"{r[k]:.9g}" for k in
                                                   ("train_loss", "train_acc", "val_loss", "val_acc")]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    overall_accuracy: float
    confusion: np.ndarray
    producer_accuracy: np.ndarray
    user_accuracy: np.ndarray

    @property
    def mean_producer_accuracy(self):
        return float(np.nanmean(self.producer_accuracy))

    @property
    def mean_user_accuracy(self):
        return float(np.nanmean(self.user_accuracy))


def confusion_matrix(truth, pred, n_classes):
    """Counts with rows = reference class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (np.asarray(truth, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm


def metrics_from_predictions(truth, pred, n_classes):
    cm = confusion_matrix(truth, pred, n_classes)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    diag = np.diag(cm).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        producer = np.where(rows > 0, diag / rows, np.nan)
        user = np.where(cols > 0, diag / cols, np.nan)
    overall = diag.sum() / cm.sum() if cm.sum() else math.nan
    return Metrics(float(overall), cm, producer, user)


def evaluate(params, ds):
    """Overall, producer's and user's accuracy of ``params`` on ``ds``."""
    if len(ds) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    pred = predict_logits(params, ds).argmax(axis=1)
    return metrics_from_predictions(ds.labels, pred, params.config.C)
