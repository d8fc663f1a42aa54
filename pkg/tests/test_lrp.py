import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_network
from oracles import relevance_oracle, zrule
from earlycrop.dataio import DateAxis
from earlycrop.errors import ConfigError, InferenceError
from earlycrop.lrp import (AttentionSegment, LrpConfig, LrpDiagnostics, RelevanceMap,
                           conservation_gap, lrp_attention, lrp_linear, relevance_batch,
                           relevance_map, relevance_maps, save_relevance_maps,
                           save_timestep_relevance, stabilise, timestep_relevance)
from earlycrop.model import forward

finite = st.floats(-5, 5, allow_nan=False)


class TestLinear:
    def test_hand_example(self):
        R = lrp_linear([1.0, 2.0], [[0.5], [0.25]], [2.0], epsilon=0.0)
        assert R.tolist() == [1.0, 1.0]

    def test_single_input_keeps_relevance(self):
        for w in (0.3, -2.0, 7.0):
            assert lrp_linear([0.7], [[w]], [1.25], epsilon=1e-9)[0] == pytest.approx(1.25, rel=1e-8)

    def test_degenerate_denominator(self):
        diag = LrpDiagnostics()
        R = lrp_linear([1.0, 1.0], [[1.0], [-1.0]], [1.0], epsilon=1e-9, diagnostics=diag)
        assert np.isfinite(R).all() and diag.near_zero_denominators == 1
        diag = LrpDiagnostics()
        R = lrp_linear([1.0, 1.0], [[1.0], [-1.0]], [1.0], epsilon=0.0, diagnostics=diag)
        assert R.tolist() == [0.0, 0.0] and diag.near_zero_denominators == 1

    def test_stabiliser_sign(self):
        assert stabilise(np.array([0.0, 2.0, -2.0]), 0.5).tolist() == [0.5, 2.5, -2.5]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1),
           st.sampled_from([0.0, 1e-9, 1e-2]))
    def test_matches_double_loop(self, n_in, n_out, seed, eps):
        rng = np.random.default_rng(seed)
        x, W, R = rng.normal(size=n_in), rng.normal(size=(n_in, n_out)), rng.normal(size=n_out)
        got = lrp_linear(x, W, R, epsilon=eps)
        np.testing.assert_allclose(got, zrule(list(x), W.tolist(), list(R), eps),
                                   rtol=1e-9, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_conserves_at_zero_epsilon(self, n_in, n_out, seed):
        rng = np.random.default_rng(seed)
        x, W, R = rng.normal(size=n_in), rng.normal(size=(n_in, n_out)), rng.normal(size=n_out)
        z = x @ W
        if (np.abs(z) <= 1e-6).any():
            return
        lower = lrp_linear(x, W, R, epsilon=0.0)
        # each output's share sums back to it, so the error is bounded by the per-output scale
        scale = np.abs(R).sum() * max(1.0, (np.abs(x[:, None] * W).sum(0) / np.abs(z)).max())
        assert abs(lower.sum() - R.sum()) <= 1e-10 * scale


def _segment(values, attn, inputs, W_value, W_out):
    N, H, T, dh = values.shape
    ctx = (attn @ values).transpose(0, 2, 1, 3).reshape(N, T, H * dh)
    return AttentionSegment(inputs, values, attn, ctx, W_value, W_out)


class TestAttention:
    def test_identity_attention_reduces_to_linear(self):
        rng = np.random.default_rng(0)
        N, T, d, H = 2, 4, 6, 2
        h = rng.normal(size=(N, T, d))
        Wv, Wo = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        v = (h @ Wv).reshape(N, T, H, d // H).transpose(0, 2, 1, 3)
        attn = np.broadcast_to(np.eye(T), (N, H, T, T)).copy()
        seg = _segment(v, attn, h, Wv, Wo)
        R_up = rng.normal(size=(N, T, d))
        got = lrp_attention(seg, R_up, epsilon=0.0)
        want = lrp_linear(h, Wv, lrp_linear(seg.context, Wo, R_up, 0.0), 0.0)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)

    def test_uniform_attention_identical_values(self):
        rng = np.random.default_rng(1)
        d = 4
        row = rng.uniform(0.5, 1.0, size=d)
        h = np.stack([row, row])[None]
        Wv, Wo = np.eye(d), rng.normal(size=(d, d))
        v = (h @ Wv)[:, None]
        attn = np.full((1, 1, 2, 2), 0.5)
        R = lrp_attention(_segment(v, attn, h, Wv, Wo), rng.normal(size=(1, 2, d)), 0.0)
        np.testing.assert_allclose(R[0, 0], R[0, 1], rtol=1e-12)

    def test_matches_dense_oracle(self):
        for seed in range(20):
            params, x, mask, doy = random_network(seed, T=3)
            target = seed % params.config.C
            R, _, origin, _ = relevance_batch(params, x[None], mask[None], doy, target, 1e-9)
            want, logit = relevance_oracle(params, x, mask, doy, target, 1e-9)
            assert origin[0] == pytest.approx(logit, rel=1e-12, abs=1e-12)
            tol = 1e-10 * max(1.0, np.abs(want).max())
            np.testing.assert_allclose(R[0], want, rtol=0, atol=tol)


class TestRelevanceMap:
    def test_masked_timesteps_zero(self, tiny_model, tiny_ds):
        for s in tiny_ds.samples[:20]:
            m = relevance_map(tiny_model, s)
            assert m.values.shape == (4, 10) and np.isfinite(m.values).all()
            assert (m.values[:, ~s.mask] == 0.0).all()

    def test_predicted_and_given_targets(self, tiny_model, tiny_ds):
        s = tiny_ds[0]
        tr = forward(tiny_model, s)
        m = relevance_map(tiny_model, s)
        assert m.target_class == int(tr.logits.argmax())
        assert m.origin_logit == tr.logits[0, m.target_class]
        g = relevance_map(tiny_model, s, LrpConfig(target_selection="given-class", target_class=2))
        assert g.target_class == 2 and g.origin_logit == tr.logits[0, 2]
        with pytest.raises(ConfigError):
            relevance_map(tiny_model, s, LrpConfig(target_selection="given-class", target_class=5))

    def test_batched_matches_single(self, tiny_model, tiny_ds):
        maps = relevance_maps(tiny_model, tiny_ds.subset(range(12)), batch_size=5)
        for m, s in zip(maps, tiny_ds.samples[:12]):
            one = relevance_map(tiny_model, s)
            np.testing.assert_allclose(m.values, one.values, rtol=1e-12, atol=1e-14)
            assert m.sample_ref == s.parcel_id

    def test_errors(self, tiny_model, tiny_ds):
        s = tiny_ds[0]
        with pytest.raises(InferenceError):
            relevance_map(tiny_model, s.replace(values=np.ones((3, 10))))
        with pytest.raises(InferenceError):
            relevance_batch(tiny_model, np.zeros((1, 10, 4)), np.zeros((1, 10), bool),
                            s.axis.doy)

    @pytest.mark.parametrize("kw", [dict(epsilon=-1.0), dict(attention_rule="rollout"),
                                    dict(target_selection="given-class"),
                                    dict(target_selection="other")])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            LrpConfig(**kw).validate()

    def test_positive_net_relevance(self, tiny_model, tiny_ds):
        pos = neg = 0.0
        for m, s in zip(relevance_maps(tiny_model, tiny_ds), tiny_ds):
            if m.target_class == s.label:
                r_t = m.values.sum(axis=0)
                pos += np.maximum(r_t, 0).sum()
                neg += np.maximum(-r_t, 0).sum()
        assert pos > neg


class TestConservation:
    def test_layer_totals_at_zero_epsilon(self):
        checked = 0
        for seed in range(40):
            params, x, mask, doy = random_network(seed)
            _, _, origin, diag = relevance_batch(params, x[None], mask[None], doy, None, 0.0)
            if diag.near_zero_denominators:
                continue
            checked += 1
            for name, total in diag.layer_totals.items():
                assert total[0] == pytest.approx(origin[0], rel=1e-10, abs=1e-12), name
        assert checked >= 10

    def test_gap_small_and_monotone(self, tiny_model, tiny_ds):
        gaps = []
        for eps in (0.0, 1e-9, 1e-4, 1e-2, 1.0):
            maps = relevance_maps(tiny_model, tiny_ds, LrpConfig(epsilon=eps))
            gaps.append(np.mean([conservation_gap(m) for m in maps]))
        assert gaps[1] < 1e-3
        assert all(b >= a - 1e-12 for a, b in zip(gaps, gaps[1:]))

    def test_gap_uses_trace_and_floor(self, tiny_model, tiny_ds):
        s = tiny_ds[1]
        m = relevance_map(tiny_model, s)
        assert conservation_gap(m, forward(tiny_model, s)) == conservation_gap(m)
        z = RelevanceMap(np.full((2, 2), 1e-9), 0, 0.0, "z")
        assert conservation_gap(z) == pytest.approx(0.4)


class TestTimestepRelevance:
    def test_hand_example(self):
        m = RelevanceMap(np.array([[1, 0, -1], [0.5, 0.5, 0]], float), 0, 1.0, "a")
        assert timestep_relevance(m).values.tolist() == [1.5, 0.5, -1.0]
        assert not timestep_relevance(RelevanceMap(np.zeros((2, 3)), 0, 0.0, "z")).values.any()

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, (3, 7), elements=finite))
    def test_sum_identity(self, values):
        m = RelevanceMap(values, 0, 1.0, "a")
        assert abs(timestep_relevance(m).values.sum() - values.sum()) <= 1e-12 * max(
            1.0, np.abs(values).sum())


def test_exports(tmp_path):
    axis = DateAxis.regular(2019, 2)
    m = RelevanceMap(np.array([[1.0, 0.25], [-0.5, 0.0]]), 1, 1.0, "p1")
    save_relevance_maps([m], axis, ("B02", "B03"), tmp_path / "bt.csv")
    save_timestep_relevance([m], axis, tmp_path / "t.csv")
    dates = axis.iso()
    assert (tmp_path / "bt.csv").read_text().splitlines() == [
        "parcel_id,target_class,date,band,relevance",
        f"p1,1,{dates[0]},B02,1", f"p1,1,{dates[0]},B03,-0.5",
        f"p1,1,{dates[1]},B02,0.25", f"p1,1,{dates[1]},B03,0"]
    assert (tmp_path / "t.csv").read_text().splitlines() == [
        "parcel_id,target_class,date,r_t", f"p1,1,{dates[0]},0.5", f"p1,1,{dates[1]},0.25"]
