"""Attention-transformer crop classifier in plain numpy.

Pipeline per parcel (``T`` timesteps, ``B`` bands)::

    x_t --MLP(ReLU)--> h_t + PE(day_of_year_t) --> multi-head self-attention
        --> attention pooling (learned query) --> MLP decoder --> logits

Masked timesteps are excluded from both keys and queries, so a parcel with
timesteps removed behaves like a shorter sequence.  The positional code is a
function of the calendar day, not of the position in the array.

All tensors carry a leading batch axis.  :func:`forward_batch` records every
intermediate activation in a :class:`ForwardTrace`, which both the manual
reverse pass (:func:`backward`) and relevance propagation consume.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InferenceError, ModelFormatError

FORMAT_TAG = "earlycrop-model/1"
_UNDERFLOW = 1e-280


@dataclass
class ModelConfig:
    B: int = 13
    T_max: int = 366
    d_model: int = 64
    n_heads: int = 4
    encoder_dims: tuple = (32, 64)
    decoder_dims: tuple = (64, 32)
    C: int = 8
    positional_encoding: str = "sinusoidal-day-of-year"

    def __post_init__(self):
        self.encoder_dims = tuple(int(v) for v in self.encoder_dims)
        self.decoder_dims = tuple(int(v) for v in self.decoder_dims)

    def validate(self):
        if min(self.B, self.T_max, self.d_model, self.n_heads, self.C) < 1:
            raise ConfigError("B, T_max, d_model, n_heads and C must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not self.encoder_dims or self.encoder_dims[-1] != self.d_model:
            raise ConfigError("last encoder width must equal d_model")
        if any(w < 1 for w in self.encoder_dims + self.decoder_dims):
            raise ConfigError("layer widths must be positive")
        if self.positional_encoding != "sinusoidal-day-of-year":
            raise ConfigError(f"unknown positional encoding {self.positional_encoding!r}")
        return self

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        d = asdict(self)
        d["encoder_dims"] = list(self.encoder_dims)
        d["decoder_dims"] = list(self.decoder_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def param_shapes(config):
    """Canonical ``(name, shape)`` list; this order is the on-disk layer order."""
    out = []
    dims = (config.B,) + config.encoder_dims
    for l in range(len(config.encoder_dims)):
        out += [(f"enc{l}.W", (dims[l], dims[l + 1])), (f"enc{l}.b", (dims[l + 1],))]
    d = config.d_model
    for p in "qkvo":
        out.append((f"attn.W{p}", (d, d)))
        # a key bias shifts every score of a query equally; softmax cancels it
        if p != "k":
            out.append((f"attn.b{p}", (d,)))
    out.append(("pool.query", (d,)))
    dims = (d,) + config.decoder_dims + (config.C,)
    for l in range(len(dims) - 1):
        out += [(f"dec{l}.W", (dims[l], dims[l + 1])), (f"dec{l}.b", (dims[l + 1],))]
    return out


@dataclass(eq=False)
class Parameters:
    """Trainable arrays keyed by :func:`param_shapes` names.

    ``input_shift``/``input_scale`` standardise each band before the encoder;
    they are fitted from data, never updated by gradient steps.
    """

    config: ModelConfig
    arrays: dict = field(repr=False)
    input_shift: np.ndarray = field(default=None, repr=False)
    input_scale: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        B = self.config.B
        self.input_shift = np.zeros(B) if self.input_shift is None else np.asarray(self.input_shift, dtype=float)
        self.input_scale = np.ones(B) if self.input_scale is None else np.asarray(self.input_scale, dtype=float)
        if self.input_shift.shape != (B,) or self.input_scale.shape != (B,):
            raise ModelFormatError(f"input standardisation must have {B} entries")
        if not (self.input_scale > 0).all():
            raise ModelFormatError("input scale must be positive")

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def n_encoder(self):
        return len(self.config.encoder_dims)

    @property
    def n_decoder(self):
        return len(self.config.decoder_dims) + 1

    def copy(self):
        return Parameters(self.config, {k: v.copy() for k, v in self.arrays.items()},
                          self.input_shift.copy(), self.input_scale.copy())

    def standardise(self, X):
        return (X - self.input_shift) / self.input_scale

    def size(self):
        return sum(v.size for v in self.arrays.values())


def init_model(config, seed):
    """Glorot-uniform weights, zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config):
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in, fan_out = (shape[0], 1) if len(shape) == 1 else shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return Parameters(config, arrays)


def fit_standardisation(params, X, mask):
    """Set the per-band shift/scale from the present timesteps of ``X`` ``(N, T, B)``."""
    present = X[mask]
    if len(present) == 0:
        return params
    params.input_shift = present.mean(axis=0)
    std = present.std(axis=0)
    params.input_scale = np.where(std > 1e-12, std, 1.0)
    return params


def positional_encoding(doy, d_model):
    """Sinusoidal code of the day of year, shape ``(T, d_model)``."""
    doy = np.asarray(doy, dtype=float)
    i = np.arange(d_model)
    freq = 1.0 / 10000.0 ** (2 * (i // 2) / d_model)
    angle = doy[:, None] * freq[None, :]
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def masked_softmax(scores, keep):
    """Softmax over the last axis restricted to ``keep``; excluded entries are exactly 0."""
    s = scores + np.where(keep, 0.0, -np.inf)
    top = s.max(axis=-1, keepdims=True)
    e = np.exp(s - np.where(np.isfinite(top), top, 0.0))
    total = e.sum(axis=-1, keepdims=True)
    e /= np.where(total > 0, total, 1.0)
    return e


@dataclass(eq=False)
class ForwardTrace:
    """Activations of one forward pass, every array batched along axis 0.

    ``enc_acts[l]`` is the input of encoder layer ``l`` (``enc_acts[0]`` is the
    standardised reflectance); ``enc_pre[l]`` its pre-activation.  The decoder lists
    follow the same convention, with ``dec_acts[0]`` the pooled vector.
    """

    mask: np.ndarray
    pe: np.ndarray
    enc_acts: list
    enc_pre: list
    embed: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    context: np.ndarray
    attn_out: np.ndarray
    pool_scores: np.ndarray
    pool: np.ndarray
    dec_acts: list
    dec_pre: list
    logits: np.ndarray

    @property
    def encoded(self):
        """Encoder output before the positional code is added."""
        return self.embed - self.pe

    def __len__(self):
        return self.logits.shape[0]


def _dense(a, W):
    """``a @ W`` over the last axis, flattened to one BLAS call."""
    return (a.reshape(-1, a.shape[-1]) @ W).reshape(a.shape[:-1] + (W.shape[1],))


def _outer_sum(a, b):
    """``sum_n a[n]^T b[n]`` for stacked row vectors, i.e. a weight gradient."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _split_heads(a, H):
    N, T, d = a.shape
    return a.reshape(N, T, H, d // H).transpose(0, 2, 1, 3)


def _merge_heads(a):
    N, H, T, dh = a.shape
    return a.transpose(0, 2, 1, 3).reshape(N, T, H * dh)


def _check_inputs(params, X, mask, doy):
    cfg = params.config
    if X.ndim != 3 or X.shape[2] != cfg.B:
        raise InferenceError(f"expected (N, T, {cfg.B}) inputs, got shape {X.shape}")
    N, T, _ = X.shape
    if mask.shape != (N, T) or doy.shape != (T,):
        raise InferenceError("mask must be (N, T) and doy (T,)")
    if T > cfg.T_max:
        raise InferenceError(f"sequence length {T} exceeds T_max={cfg.T_max}")
    empty = ~mask.any(axis=1)
    if empty.any():
        raise InferenceError(f"sample {int(np.flatnonzero(empty)[0])} has every timestep masked")


def forward_batch(params, X, mask, doy):
    """Run the network on ``X`` of shape ``(N, T, B)``; returns the full trace."""
    X = np.asarray(X)
    if X.dtype != np.longdouble:
        X = X.astype(float)
    mask = np.asarray(mask, dtype=bool)
    doy = np.asarray(doy, dtype=float)
    _check_inputs(params, X, mask, doy)
    cfg, P = params.config, params.arrays
    H = cfg.n_heads

    h = params.standardise(X)
    enc_acts, enc_pre = [h], []
    for l in range(params.n_encoder):
        a = _dense(h, P[f"enc{l}.W"]) + P[f"enc{l}.b"]
        enc_pre.append(a)
        h = np.maximum(a, 0.0)
        enc_acts.append(h)
    enc_acts.pop()  # the last output is stored via ``embed``

    pe = positional_encoding(doy, cfg.d_model)
    e = h + pe
    q = _split_heads(_dense(e, P["attn.Wq"]) + P["attn.bq"], H)
    k = _split_heads(_dense(e, P["attn.Wk"]), H)
    v = _split_heads(_dense(e, P["attn.Wv"]) + P["attn.bv"], H)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(cfg.head_dim)
    attn = masked_softmax(scores, mask[:, None, None, :]) * mask[:, None, :, None]
    ctx = _merge_heads(attn @ v)
    o = _dense(ctx, P["attn.Wo"]) + P["attn.bo"]

    pool_scores = o @ P["pool.query"] / np.sqrt(cfg.d_model)
    pool = masked_softmax(pool_scores, mask)
    pooled = (pool[:, None, :] @ o)[:, 0]

    dec_acts, dec_pre = [pooled], []
    z = pooled
    n_dec = params.n_decoder
    for l in range(n_dec):
        a = z @ P[f"dec{l}.W"] + P[f"dec{l}.b"]
        dec_pre.append(a)
        z = np.maximum(a, 0.0) if l < n_dec - 1 else a
        if l < n_dec - 1:
            dec_acts.append(z)
    return ForwardTrace(mask, pe, enc_acts, enc_pre, e, q, k, v, attn, ctx, o,
                        pool_scores, pool, dec_acts, dec_pre, z)


def sample_inputs(sample):
    """``(X, mask, doy)`` batch-of-one arrays for a :class:`TimeSeriesSample`."""
    return sample.values.T[None], sample.mask[None], sample.axis.doy


def forward(params, sample):
    """Trace of a single parcel (batch axis of length one)."""
    if sample.n_bands != params.config.B:
        raise InferenceError(f"parcel {sample.parcel_id} has {sample.n_bands} bands, "
                             f"model expects {params.config.B}")
    return forward_batch(params, *sample_inputs(sample))


def predict(params, sample):
    """``(class index, logits)``; ties go to the lowest class index."""
    logits = forward(params, sample).logits[0]
    return int(np.argmax(logits)), logits


def predict_logits(params, ds, batch_size=256):
    """Logits for every parcel of a dataset, shape ``(N, C)``."""
    X, M = ds.tensors()
    doy = ds.axis.doy
    if X.shape[2] != params.config.B:
        raise InferenceError(f"dataset has {X.shape[2]} bands, model expects {params.config.B}")
    out = np.zeros((len(ds), params.config.C))
    for lo in range(0, len(ds), batch_size):
        out[lo:lo + batch_size] = forward_batch(params, X[lo:lo + batch_size],
                                                M[lo:lo + batch_size], doy).logits
    return out


def logits_under_masks(params, x, doy, masks, chunk=128):
    """Logits of one parcel ``x`` (``T x B``) under many timestep masks ``(M, T)``.

    The per-timestep encoder and projections do not depend on the mask, so they
    are evaluated once; only attention, pooling and the decoder are repeated.
    """
    cfg, P = params.config, params.arrays
    masks = np.asarray(masks, dtype=bool)
    if x.shape[1] != cfg.B:
        raise InferenceError(f"parcel has {x.shape[1]} bands, model expects {cfg.B}")
    if not masks.any(axis=1).all():
        raise InferenceError("a mask removes every timestep")
    h = params.standardise(x)
    for l in range(params.n_encoder):
        h = np.maximum(h @ P[f"enc{l}.W"] + P[f"enc{l}.b"], 0.0)
    e = h + positional_encoding(doy, cfg.d_model)
    H = cfg.n_heads
    q = _split_heads((e @ P["attn.Wq"] + P["attn.bq"])[None], H)[0]
    k = _split_heads((e @ P["attn.Wk"])[None], H)[0]
    v = _split_heads((e @ P["attn.Wv"] + P["attn.bv"])[None], H)[0]
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(cfg.head_dim)
    # softmax is shift invariant: one exponentiation serves every mask, which
    # then only selects the terms of numerator and normaliser
    weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
    out = np.empty((len(masks), cfg.C))
    n_dec = params.n_decoder
    for lo in range(0, len(masks), chunk):
        m = masks[lo:lo + chunk]
        mf = m.astype(float)
        norm = (weights @ mf.T).transpose(2, 0, 1)[..., None]
        if (norm < _UNDERFLOW).any():
            attn = masked_softmax(scores[None], m[:, None, None, :]) * m[:, None, :, None]
            ctx = attn @ v[None]
        else:
            ctx = (weights[None] @ (mf[:, None, :, None] * v[None])) / norm
            ctx *= mf[:, None, :, None]
        o = _dense(_merge_heads(ctx), P["attn.Wo"]) + P["attn.bo"]
        pool = masked_softmax(o @ P["pool.query"] / np.sqrt(cfg.d_model), m)
        z = (pool[:, None, :] @ o)[:, 0]
        for l in range(n_dec):
            z = z @ P[f"dec{l}.W"] + P[f"dec{l}.b"]
            if l < n_dec - 1:
                z = np.maximum(z, 0.0)
        out[lo:lo + chunk] = z
    return out


def backward(params, trace, dlogits):
    """Gradients of ``sum(dlogits * logits)`` with respect to every parameter."""
    cfg, P = params.config, params.arrays
    H, dh, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    g = {}

    dz = dlogits
    n_dec = params.n_decoder
    for l in reversed(range(n_dec)):
        if l < n_dec - 1:
            dz = dz * (trace.dec_pre[l] > 0)
        a_in = trace.dec_acts[l]
        g[f"dec{l}.W"] = a_in.T @ dz
        g[f"dec{l}.b"] = dz.sum(axis=0)
        dz = dz @ P[f"dec{l}.W"].T
    dpooled = dz

    o, pool = trace.attn_out, trace.pool
    do = pool[:, :, None] * dpooled[:, None, :]
    dpool = (o @ dpooled[:, :, None])[:, :, 0]
    dscore = pool * (dpool - (pool * dpool).sum(axis=1, keepdims=True))
    do += dscore[:, :, None] * P["pool.query"][None, None, :] / np.sqrt(d)
    g["pool.query"] = dscore.reshape(-1) @ o.reshape(-1, d) / np.sqrt(d)

    ctx = trace.context
    g["attn.Wo"] = _outer_sum(ctx, do)
    g["attn.bo"] = do.sum(axis=(0, 1))
    dctx = _split_heads(_dense(do, P["attn.Wo"].T), H)

    A = trace.attn
    dA = dctx @ trace.v.transpose(0, 1, 3, 2)
    dv = A.transpose(0, 1, 3, 2) @ dctx
    dS = A * (dA - (A * dA).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
    dq = dS @ trace.k
    dk = dS.transpose(0, 1, 3, 2) @ trace.q

    e = trace.embed
    de = np.zeros_like(e)
    for p, dp in (("q", dq), ("k", dk), ("v", dv)):
        dp = _merge_heads(dp)
        g[f"attn.W{p}"] = _outer_sum(e, dp)
        if p != "k":
            g[f"attn.b{p}"] = dp.sum(axis=(0, 1))
        de += _dense(dp, P[f"attn.W{p}"].T)

    dh_ = de
    for l in reversed(range(params.n_encoder)):
        dh_ = dh_ * (trace.enc_pre[l] > 0)
        a_in = trace.enc_acts[l]
        g[f"enc{l}.W"] = _outer_sum(a_in, dh_)
        g[f"enc{l}.b"] = dh_.sum(axis=(0, 1))
        if l:
            dh_ = _dense(dh_, P[f"enc{l}.W"].T)
    return {name: g[name] for name, _ in param_shapes(cfg)}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _num(v):
    return format(float(v), ".17g")


def save_params(params, path):
    """JSON model file: config plus flat row-major arrays in canonical order."""
    cfg = params.config
    parts = [
        "{\n",
        f'  "format": "{FORMAT_TAG}",\n',
        f'  "config": {json.dumps(cfg.to_dict(), sort_keys=True)},\n',
        '  "input": {"shift": [' + ",".join(_num(v) for v in params.input_shift)
        + '], "scale": [' + ",".join(_num(v) for v in params.input_scale) + ']},\n',
        '  "layers": [\n',
    ]
    layers = []
    for name, shape in param_shapes(cfg):
        data = ",".join(_num(v) for v in params.arrays[name].ravel())
        layers.append(f'    {{"name": "{name}", "shape": {json.dumps(list(shape))}, '
                      f'"data": [{data}]}}')
    parts.append(",\n".join(layers))
    parts.append("\n  ]\n}\n")
    Path(path).write_text("".join(parts), encoding="utf-8", newline="\n")


def load_params(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("format") != FORMAT_TAG:
        raise ModelFormatError(f"{path}: unsupported format tag {doc.get('format')!r}")
    try:
        cfg = ModelConfig.from_dict(doc["config"])
    except (KeyError, ConfigError) as exc:
        raise ModelFormatError(f"{path}: bad config: {exc}") from None
    expected = param_shapes(cfg)
    layers = doc.get("layers", [])
    if [l.get("name") for l in layers] != [n for n, _ in expected]:
        raise ModelFormatError(f"{path}: layer list does not match the config")
    arrays = {}
    for layer, (name, shape) in zip(layers, expected):
        data = np.asarray(layer["data"], dtype=float)
        if tuple(layer["shape"]) != shape or data.size != int(np.prod(shape)):
            raise ModelFormatError(f"{path}: layer {name} has shape {layer['shape']}, "
                                   f"config implies {list(shape)}")
        if not np.isfinite(data).all():
            raise ModelFormatError(f"{path}: layer {name} holds non-finite values")
        arrays[name] = data.reshape(shape)
    try:
        shift, scale = doc["input"]["shift"], doc["input"]["scale"]
    except (KeyError, TypeError):
        raise ModelFormatError(f"{path}: missing input standardisation") from None
    return Parameters(cfg, arrays, shift, scale)
