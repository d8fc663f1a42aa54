"""Layer-wise relevance propagation for the attention classifier.

Every linear step uses the z-rule::

    R_i = sum_j  x_i w_ij / (sum_i' x_i' w_i'j)  *  R_j

with bias terms left out of the contributions and a small ``epsilon * sign``
added to each denominator.  Attention and pooling weights are treated as
constants, so relevance flows through the value path only; the queries and
keys never receive relevance.  The positional code enters the value
projection like a bias and gets no share.  ReLU units pass relevance
unchanged where active (and hold none where inactive, since their output is
zero).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InferenceError
from .model import forward_batch, sample_inputs

NEAR_ZERO = 1e-6


@dataclass
class LrpConfig:
    epsilon: float = 1e-9
    attention_rule: str = "weights-as-constants"
    target_selection: str = "predicted-class"
    target_class: int | None = None

    def validate(self):
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be >= 0")
        if self.attention_rule != "weights-as-constants":
            raise ConfigError(f"unknown attention rule {self.attention_rule!r}")
        if self.target_selection not in ("predicted-class", "given-class"):
            raise ConfigError(f"unknown target selection {self.target_selection!r}")
        if self.target_selection == "given-class" and self.target_class is None:
            raise ConfigError("given-class target selection needs target_class")
        return self

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        return {"epsilon": self.epsilon, "attention_rule": self.attention_rule,
                "target_selection": self.target_selection, "target_class": self.target_class}


@dataclass
class LrpDiagnostics:
    """Counters gathered while propagating.

    ``layer_totals`` maps a layer name to the per-sample relevance sum right
    below that layer; with ``epsilon=0`` every entry equals the seeded logit.
    """

    near_zero_denominators: int = 0
    n_denominators: int = 0
    layer_totals: dict = field(default_factory=dict)

    def merge(self, other):
        self.near_zero_denominators += other.near_zero_denominators
        self.n_denominators += other.n_denominators
        for k, v in other.layer_totals.items():
            self.layer_totals[k] = np.concatenate([self.layer_totals.get(k, np.zeros(0)), v])
        return self

    def _record(self, name, R, batch_ndim):
        axes = tuple(range(batch_ndim, R.ndim))
        self.layer_totals[name] = R.sum(axis=axes)


def stabilise(denominator, epsilon):
    """``d + epsilon * sign(d)`` with ``sign(0) = +1``."""
    return denominator + epsilon * np.where(denominator >= 0, 1.0, -1.0)


def _ratio(R, z, epsilon, diagnostics):
    denom = stabilise(z, epsilon)
    if diagnostics is not None:
        diagnostics.near_zero_denominators += int((np.abs(z) <= NEAR_ZERO).sum())
        diagnostics.n_denominators += z.size
    out = np.zeros(np.broadcast_shapes(R.shape, denom.shape))
    np.divide(R, denom, out=out, where=denom != 0)
    return out


def lrp_linear(x, W, R_upper, epsilon=1e-9, diagnostics=None):
    """Redistribute ``R_upper`` (``..., J``) onto inputs ``x`` (``..., I``) of ``x @ W``.

    A denominator that is exactly zero (only possible with ``epsilon=0``)
    passes no relevance; it is counted in the diagnostics either way.
    """
    x = np.asarray(x, dtype=float)
    W = np.asarray(W, dtype=float)
    lead = x.shape[:-1]
    x2 = x.reshape(-1, W.shape[0])
    s = _ratio(np.asarray(R_upper, dtype=float).reshape(-1, W.shape[1]), x2 @ W, epsilon,
               diagnostics)
    return (x2 * (s @ W.T)).reshape(lead + (W.shape[0],))


@dataclass(frozen=True)
class AttentionSegment:
    """Everything relevance propagation needs from one self-attention block.

    ``inputs`` are the encoder outputs without the positional code
    ``(N, T, d)``; ``values`` the per-head value vectors ``(N, H, T, dh)``
    including bias and positional contributions; ``attn`` the attention weights
    ``(N, H, T, T)`` (row = query); ``context`` the concatenated head outputs
    ``(N, T, d)`` fed to the output projection.
    """

    inputs: np.ndarray
    values: np.ndarray
    attn: np.ndarray
    context: np.ndarray
    W_value: np.ndarray
    W_out: np.ndarray

    @classmethod
    def from_trace(cls, params, trace):
        return cls(trace.encoded, trace.v, trace.attn, trace.context,
                   params["attn.Wv"], params["attn.Wo"])


def lrp_attention(segment, upper_relevance, epsilon=1e-9, diagnostics=None):
    """Relevance on the attention block's inputs from relevance on its outputs.

    Output projection and value projection use :func:`lrp_linear`; the head
    mixing ``context[t] = sum_s attn[t, s] * value[s]`` is a fixed linear map
    to which the same z-rule applies.
    """
    N, H, T, dh = segment.values.shape
    R_ctx = lrp_linear(segment.context, segment.W_out, upper_relevance, epsilon, diagnostics)
    if diagnostics is not None:
        diagnostics._record("attn.out", R_ctx, 1)
    R_ctx = R_ctx.reshape(N, T, H, dh).transpose(0, 2, 1, 3)
    ctx = segment.context.reshape(N, T, H, dh).transpose(0, 2, 1, 3)
    s = _ratio(R_ctx, ctx, epsilon, diagnostics)
    R_val = segment.values * (segment.attn.transpose(0, 1, 3, 2) @ s)
    R_val = R_val.transpose(0, 2, 1, 3).reshape(N, T, H * dh)
    if diagnostics is not None:
        diagnostics._record("attn.mix", R_val, 1)
    R_in = lrp_linear(segment.inputs, segment.W_value, R_val, epsilon, diagnostics)
    if diagnostics is not None:
        diagnostics._record("attn.value", R_in, 1)
    return R_in


def _propagate(params, trace, targets, epsilon, diagnostics):
    """Relevance ``(N, T, B)`` on the standardised inputs for logits ``targets``."""
    P = params.arrays
    N = len(trace)
    origin = trace.logits[np.arange(N), targets]
    R = np.zeros_like(trace.logits)
    R[np.arange(N), targets] = origin
    diagnostics._record("logits", R, 1)

    n_dec = params.n_decoder
    for l in reversed(range(n_dec)):
        if l < n_dec - 1:
            R = R * (trace.dec_pre[l] > 0)
        R = lrp_linear(trace.dec_acts[l], P[f"dec{l}.W"], R, epsilon, diagnostics)
        diagnostics._record(f"dec{l}", R, 1)

    # pooled_j = sum_t pool_t * o_tj
    o, pool = trace.attn_out, trace.pool
    z = pool[:, :, None] * o
    R = z * _ratio(R, z.sum(axis=1), epsilon, diagnostics)[:, None, :]
    diagnostics._record("pool", R, 1)

    R = lrp_attention(AttentionSegment.from_trace(params, trace), R, epsilon, diagnostics)

    for l in reversed(range(params.n_encoder)):
        R = R * (trace.enc_pre[l] > 0)
        R = lrp_linear(trace.enc_acts[l], P[f"enc{l}.W"], R, epsilon, diagnostics)
        diagnostics._record(f"enc{l}", R, 1)
    # standardisation is a per-band affine map: a single input, so R passes unchanged
    R = R * trace.mask[:, :, None]
    return R, origin


def relevance_batch(params, X, mask, doy, targets=None, epsilon=1e-9):
    """Batched propagation.

    Returns ``(R, targets, origin_logits, diagnostics)`` with ``R`` shaped
    ``(N, T, B)``; ``targets=None`` selects each sample's predicted class.
    """
    trace = forward_batch(params, X, mask, doy)
    if targets is None:
        targets = trace.logits.argmax(axis=1)
    targets = np.broadcast_to(np.asarray(targets, dtype=int), (len(trace),)).copy()
    diag = LrpDiagnostics()
    R, origin = _propagate(params, trace, targets, epsilon, diag)
    return R, targets, origin, diag


@dataclass(frozen=True, eq=False)
class RelevanceMap:
    values: np.ndarray          # (B, T)
    target_class: int
    origin_logit: float
    sample_ref: str
    diagnostics: LrpDiagnostics = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class TimestepRelevance:
    values: np.ndarray          # (T,)


def _target_for(config):
    return None if config.target_selection == "predicted-class" else config.target_class


def relevance_map(params, sample, config=None):
    """Relevance of every (band, timestep) of ``sample`` for the target logit."""
    config = (config or LrpConfig()).validate()
    if sample.n_bands != params.config.B:
        raise InferenceError(f"parcel {sample.parcel_id} has {sample.n_bands} bands, "
                             f"model expects {params.config.B}")
    target = _target_for(config)
    if target is not None and not 0 <= target < params.config.C:
        raise ConfigError(f"target class {target} outside 0..{params.config.C - 1}")
    R, targets, origin, diag = relevance_batch(params, *sample_inputs(sample), targets=target,
                                               epsilon=config.epsilon)
    return RelevanceMap(R[0].T.copy(), int(targets[0]), float(origin[0]), sample.parcel_id, diag)


def relevance_maps(params, ds, config=None, batch_size=128):
    """Maps for every parcel of ``ds`` (batched), in dataset order."""
    config = (config or LrpConfig()).validate()
    X, M = ds.tensors()
    doy = ds.axis.doy
    target = _target_for(config)
    out = []
    for lo in range(0, len(ds), batch_size):
        R, targets, origin, diag = relevance_batch(params, X[lo:lo + batch_size],
                                                   M[lo:lo + batch_size], doy, target,
                                                   config.epsilon)
        for i in range(len(R)):
            out.append(RelevanceMap(R[i].T.copy(), int(targets[i]), float(origin[i]),
                                    ds.samples[lo + i].parcel_id))
    return out


def timestep_relevance(rmap):
    """Per-timestep relevance: the band sum of the map."""
    return TimestepRelevance(rmap.values.sum(axis=0))


def conservation_gap(rmap, trace=None):
    """``|sum R - logit| / max(|logit|, 1e-8)``; the logit is taken from ``trace`` if given."""
    logit = rmap.origin_logit if trace is None else float(trace.logits[0, rmap.target_class])
    return abs(math.fsum(rmap.values.ravel()) - logit) / max(abs(logit), 1e-8)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def save_relevance_maps(maps, axis, band_names, path):
    dates = axis.iso()
    lines = ["parcel_id,target_class,date,band,relevance"]
    for m in maps:
        for t, d in enumerate(dates):
            for b, name in enumerate(band_names):
                lines.append(f"{m.sample_ref},{m.target_class},{d},{name},{m.values[b, t]:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def save_timestep_relevance(maps, axis, path):
    dates = axis.iso()
    lines = ["parcel_id,target_class,date,r_t"]
    for m in maps:
        r_t = m.values.sum(axis=0)
        for t, d in enumerate(dates):
            lines.append(f"{m.sample_ref},{m.target_class},{d},{r_t[t]:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
