import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from earlycrop.dataio import DateAxis, SynthConfig, generate_synthetic, split_spatial
from earlycrop.model import ModelConfig, Parameters, init_model, param_shapes
from earlycrop.train import TrainConfig, train


def random_network(seed, T=None, with_mask=True):
    """Small model with random weights and biases plus one random parcel.

    At most three encoder layers and ten units per layer.
    """
    rng = np.random.default_rng(seed)
    H = int(rng.choice([1, 2]))
    d = H * int(rng.integers(2, 5))
    enc = tuple(int(w) for w in rng.integers(2, 11, size=rng.integers(0, 3))) + (d,)
    dec = tuple(int(w) for w in rng.integers(2, 11, size=rng.integers(0, 3)))
    cfg = ModelConfig(B=int(rng.integers(2, 6)), T_max=366, d_model=d, n_heads=H,
                      encoder_dims=enc, decoder_dims=dec, C=int(rng.integers(2, 5)))
    arrays = {name: rng.normal(0, 0.7, size=shape) for name, shape in param_shapes(cfg)}
    params = Parameters(cfg, arrays, rng.normal(0, 0.1, cfg.B), rng.uniform(0.5, 2.0, cfg.B))
    T = T or int(rng.integers(2, 7))
    x = rng.uniform(0, 1, size=(T, cfg.B))
    mask = rng.uniform(size=T) < 0.75 if with_mask else np.ones(T, dtype=bool)
    mask[rng.integers(T)] = True
    x[~mask] = 0.0
    doy = np.sort(rng.choice(np.arange(1, 366), size=T, replace=False)).astype(float)
    return params, x, mask, doy


TINY_SYNTH = dict(n_classes=3, n_samples=90, T=10, B=4, n_blocks=9, cloud_probability=0.1)
TINY_MODEL = dict(d_model=8, n_heads=2, encoder_dims=(6, 8), decoder_dims=(8,))


@pytest.fixture(scope="session")
def tiny_ds():
    return generate_synthetic(SynthConfig(**TINY_SYNTH, seed=3))


@pytest.fixture(scope="session")
def tiny_split(tiny_ds):
    return split_spatial(tiny_ds, 0.3, 0)


@pytest.fixture(scope="session")
def tiny_model(tiny_split):
    tr, _ = tiny_split
    cfg = ModelConfig(B=tr.n_bands, C=tr.n_classes, **TINY_MODEL)
    params, _ = train(init_model(cfg, 0), tr, TrainConfig(epochs=15, batch_size=8))
    return params


@pytest.fixture
def weekly_axis():
    return DateAxis.regular(2019, 52)
