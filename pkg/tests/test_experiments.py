import numpy as np
import pytest

from conftest import TINY_MODEL
from earlycrop.dataio import Dataset, DateAxis, TimeSeriesSample
from earlycrop.errors import ConfigError
from earlycrop.experiments import (RANDOM, TARGETED, EarlinessResult, PruneCurve, curve_auc,
                                   earliness_experiment, prune_curve_random,
                                   prune_curve_targeted, removal_order, save_curves,
                                   save_earliness, train_and_score)
from earlycrop.model import ModelConfig, Parameters, forward_batch, param_shapes
from earlycrop.timeframe import (Timeframe, bounding_window, prune_to_window,
                                 sample_timestep_relevance)
from earlycrop.train import TrainConfig


def _mse_after(params, s, removed):
    keep = s.mask.copy()
    keep[list(removed)] = False
    X = np.repeat(s.values.T[None], 2, axis=0)
    logits = forward_batch(params, X, np.stack([s.mask, keep]), s.axis.doy).logits
    return float(((logits[1] - logits[0]) ** 2).mean())


def _ignoring_model(t_ignored, T=5, seed=0):
    """Network whose attention gives timestep ``t_ignored`` a weight of about exp(-35).

    Band 0 is non-zero only at the ignored timestep and feeds encoder unit 0
    alone; the keys read only that unit with a large negative weight.  All
    queries are equal (zero query weights), so every position mixes the same
    values and pooling over identical outputs returns that common mix.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(B=3, T_max=366, d_model=4, n_heads=2, encoder_dims=(4,),
                      decoder_dims=(), C=2)
    P = {name: np.zeros(shape) for name, shape in param_shapes(cfg)}
    P["enc0.W"][0, 0] = 5.0
    P["enc0.W"][1:, 1:] = rng.uniform(0.5, 1.5, size=(2, 3))
    # per head q.k = -10 per unit of encoder unit 0, which is 5 at the ignored timestep
    P["attn.bq"][:] = 1.0
    P["attn.Wk"][0] = -5.0
    P["attn.Wv"][:] = rng.normal(size=(4, 4))
    P["attn.Wo"][:] = rng.normal(size=(4, 4))
    P["pool.query"][:] = rng.normal(size=4)
    P["dec0.W"][:] = rng.normal(size=(4, 2))
    params = Parameters(cfg, P, np.zeros(3), np.ones(3))

    axis = DateAxis.regular(2019, T)
    x = np.zeros((3, T))
    x[1:] = rng.uniform(0.2, 0.8, size=(2, T))
    x[:, t_ignored] = [1.0, 0.0, 0.0]
    s = TimeSeriesSample("p", 0, x, 0, np.ones(T, bool), axis)
    return params, Dataset((s,), axis, ("a", "b"), ("B0", "B1", "B2"))


class TestTargeted:
    def test_ignored_timestep_goes_first(self):
        params, ds = _ignoring_model(3)
        s = ds[0]
        assert _mse_after(params, s, [3]) < 1e-8
        R_t, _ = sample_timestep_relevance(params, ds)
        assert int(np.argmin(np.abs(R_t[0]))) == 3
        curve = prune_curve_targeted(params, ds)
        assert curve.mse[1] < 1e-8
        assert curve.mse[1] == pytest.approx(_mse_after(params, s, [3]), abs=1e-15)

    def test_curve_shape_and_start(self, tiny_model, tiny_ds):
        curve = prune_curve_targeted(tiny_model, tiny_ds, max_samples=15)
        assert curve.mse[0] == 0.0 and np.isfinite(curve.mse).all()
        assert curve.mode == TARGETED and curve.T == 10
        assert curve.n_removed.tolist() == list(range(len(curve.mse)))
        assert curve.n_removed[-1] <= 9

    def test_matches_hand_loop(self, tiny_model, tiny_ds):
        ds = tiny_ds.subset(range(6))
        curve = prune_curve_targeted(tiny_model, ds)
        R_t, _ = sample_timestep_relevance(tiny_model, ds)
        sums, counts = np.zeros(10), np.zeros(10)
        for i, s in enumerate(ds):
            present = [t for t in range(10) if s.mask[t]]
            order = sorted(present, key=lambda t: (abs(R_t[i, t]), t))
            assert sorted(order) == present
            for n in range(len(present)):
                sums[n] += _mse_after(tiny_model, s, order[:n])
                counts[n] += 1
        used = counts > 0
        np.testing.assert_allclose(curve.mse, sums[used] / counts[used], rtol=1e-9, atol=1e-12)


class TestRandom:
    def test_reproducible(self, tiny_model, tiny_ds):
        a = prune_curve_random(tiny_model, tiny_ds, trials=3, seed=5, max_samples=10)
        b = prune_curve_random(tiny_model, tiny_ds, trials=3, seed=5, max_samples=10)
        c = prune_curve_random(tiny_model, tiny_ds, trials=3, seed=6, max_samples=10)
        assert np.array_equal(a.mse, b.mse) and not np.array_equal(a.mse, c.mse)
        assert a.mse[0] == 0.0 and a.mode == RANDOM and a.trials == 3

    def test_removal_order_is_a_permutation(self):
        for k in range(5):
            o = removal_order(9, 1, 2, k)
            assert sorted(o.tolist()) == list(range(9))
        assert np.array_equal(removal_order(9, 1, 2, 3), removal_order(9, 1, 2, 3))

    def test_matches_hand_loop(self, tiny_model, tiny_ds):
        ds = tiny_ds.subset(range(4))
        curve = prune_curve_random(tiny_model, ds, trials=2, seed=9)
        sums, counts = np.zeros(10), np.zeros(10)
        for i, s in enumerate(ds):
            present = np.flatnonzero(s.mask)
            for k in range(2):
                order = present[removal_order(len(present), 9, i, k)]
                for n in range(len(present)):
                    sums[n] += _mse_after(tiny_model, s, order[:n])
                    counts[n] += 1
        used = counts > 0
        np.testing.assert_allclose(curve.mse, sums[used] / counts[used], rtol=1e-9, atol=1e-12)

    def test_two_timestep_oracle(self, tiny_model, tiny_ds):
        ds = prune_to_window(tiny_ds.subset(range(30)),
                             Timeframe(tiny_ds.axis[4], tiny_ds.axis[5]))
        ds = ds.subset([i for i, s in enumerate(ds) if s.mask.all()][:5])
        trials = 40
        curve = prune_curve_random(tiny_model, ds, trials=trials, seed=2)
        expected = []
        for i, s in enumerate(ds):
            m = [_mse_after(tiny_model, s, [0]), _mse_after(tiny_model, s, [1])]
            first = [int(removal_order(2, 2, i, k)[0]) for k in range(trials)]
            p0 = first.count(0) / trials
            expected.append(p0 * m[0] + (1 - p0) * m[1])
        assert curve.mse[1] == pytest.approx(np.mean(expected), rel=1e-9)

    def test_trials_validation(self, tiny_model, tiny_ds):
        with pytest.raises(ConfigError):
            prune_curve_random(tiny_model, tiny_ds, trials=0)


class TestAuc:
    def _curve(self, mse):
        return PruneCurve(np.arange(len(mse)), np.asarray(mse, float), RANDOM, 1, len(mse))

    def test_zero_and_constant(self):
        assert curve_auc(self._curve([0.0] * 5)) == 0.0
        assert curve_auc(self._curve([2.5] * 7)) == pytest.approx(2.5)

    def test_trapezoid_and_reference(self):
        assert curve_auc(self._curve([0.0, 1.0, 2.0])) == pytest.approx(1.0)
        assert curve_auc(self._curve([0.0, 1.0, 2.0]), self._curve([0.0, 4.0])) == pytest.approx(0.25)
        assert curve_auc(self._curve([3.0])) == 0.0


class TestEarliness:
    def test_full_span_equals_plain_training(self, tiny_split):
        tr, te = tiny_split
        tc = TrainConfig(epochs=3, batch_size=8)
        mc = ModelConfig(**TINY_MODEL)
        window = bounding_window([2, 6], tr.axis, 3)
        res = earliness_experiment(tr, te, [window], tc, mc, model_seed=1)
        _, acc_tr, acc_te, _ = train_and_score(tr, te, tc, mc, model_seed=1)
        assert res[0].n is None and res[0].label == "full"
        assert (res[0].train_accuracy, res[0].test_accuracy) == (acc_tr, acc_te)
        assert res[0].delta_vs_full == 0.0 and res[1].n == 3
        assert res[1].delta_vs_full == res[1].test_accuracy - acc_te
        assert res[1].window_length_days == 28 and res[1].end_date == tr.axis[6]
        assert all(0 <= r.test_accuracy <= 1 for r in res)

    def test_save(self, tmp_path, tiny_split):
        tr, _ = tiny_split
        tf = bounding_window([0, 1], tr.axis, 3)
        save_earliness([EarlinessResult(tf, 3, 1.0, 0.5, 7, tf.end, -0.25)], tmp_path / "e.csv")
        assert (tmp_path / "e.csv").read_text().splitlines() == [
            "window_n,start,end,train_acc,test_acc,delta_vs_full",
            f"3,{tr.axis.iso()[0]},{tr.axis.iso()[1]},1,0.5,-0.25"]


def test_save_curves(tmp_path):
    c = PruneCurve(np.arange(3), np.array([0.0, 0.5, 2.0]), TARGETED, 1, 4)
    save_curves([c], tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == [
        "n_removed,fraction_removed,mse,mode", "0,0,0,targeted-least-first",
        "1,0.25,0.5,targeted-least-first", "2,0.5,2,targeted-least-first"]
