import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reportbias import model as M
from reportbias.errors import ConfigError, InvalidInputError
from reportbias.trainer import gradient_check


def _sigmoid(a):
    return 1.0 / (1.0 + math.exp(-a))


def random_params(seed, W=3, d=5, hidden=(4,), scale=0.7, **flags):
    rng = np.random.default_rng(seed)
    p = M.init_params(W, d, hidden, seed=seed, **flags)
    for a in p.named_arrays().values():
        a[...] = rng.normal(0, scale, a.shape)
    return p


class TestTrunk:
    def test_depth_zero_is_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 2, 6))
        out = M.trunk_forward(x, M.TrunkParams([]))
        assert np.array_equal(out, x)

    def test_zero_layer_gives_zero(self):
        trunk = M.TrunkParams([(np.zeros((3, 6)), np.zeros(3))])
        out = M.trunk_forward(np.ones((2, 1, 6)), trunk)
        assert np.array_equal(out, np.zeros((2, 1, 3)))

    def test_two_layers_match_loop_oracle(self):
        rng = np.random.default_rng(1)
        layers = [(rng.normal(size=(4, 5)), rng.normal(size=4)),
                  (rng.normal(size=(3, 4)), rng.normal(size=3))]
        x = rng.normal(size=(2, 3, 5))
        out = M.trunk_forward(x, M.TrunkParams(layers, "relu"))
        for n in range(2):
            for r in range(3):
                h = list(x[n, r])
                for w, b in layers:
                    h = [max(0.0, sum(w[o, i] * h[i] for i in range(len(h))) + b[o])
                         for o in range(w.shape[0])]
                np.testing.assert_allclose(out[n, r], h, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        trunk = M.TrunkParams([(np.zeros((3, 6)), np.zeros(3))])
        with pytest.raises(ConfigError):
            M.trunk_forward(np.ones((1, 1, 5)), trunk)

    def test_layers_must_compose(self):
        with pytest.raises(ConfigError):
            M.TrunkParams([(np.zeros((3, 6)), np.zeros(3)), (np.zeros((2, 4)), np.zeros(2))])


class TestNoisyOr:
    def test_examples(self):
        assert M.noisy_or([0.5, 0.5]) == 0.75
        assert M.noisy_or([0.0, 0.0, 0.0]) == 0.0
        assert M.noisy_or([0.2, 0.3, 0.4]) == pytest.approx(1 - 0.8 * 0.7 * 0.6, abs=1e-15)

    @pytest.mark.parametrize("bad", [[], [1.2], [-0.1, 0.5], [float("nan")]])
    def test_invalid(self, bad):
        with pytest.raises(InvalidInputError):
            M.noisy_or(bad)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
    def test_bounds(self, probs):
        q = M.noisy_or(probs)
        assert max(probs) - 1e-15 <= q <= 1.0

    @given(st.floats(0, 1))
    def test_singleton_identity(self, p):
        assert M.noisy_or([p]) == pytest.approx(p, abs=1e-15)


class TestPresence:
    def test_zero_head(self):
        head = M.PresenceHeadParams(np.zeros((4, 3)), np.zeros(4))
        v1, _ = M.presence_forward(np.ones((2, 1, 3)), head, bag_mode=False)
        assert np.array_equal(v1, np.full((2, 4), 0.5))

    def test_bag_of_two_halves(self):
        head = M.PresenceHeadParams(np.zeros((1, 3)), np.zeros(1))
        v1, p = M.presence_forward(np.ones((1, 2, 3)), head, bag_mode=True)
        assert v1[0, 0] == 0.75
        assert p.shape == (1, 2, 1)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        head = M.PresenceHeadParams(rng.normal(size=(3, 4)), rng.normal(size=3))
        phi = rng.normal(size=(5, 1, 4))
        v1, _ = M.presence_forward(phi, head, bag_mode=False)
        for n in range(5):
            for w in range(3):
                a = sum(head.weight[w, i] * phi[n, 0, i] for i in range(4)) + head.bias[w]
                assert abs(v1[n, w] - _sigmoid(a)) < 1e-12

    def test_multiple_regions_need_bag_mode(self):
        head = M.PresenceHeadParams(np.zeros((1, 3)), np.zeros(1))
        with pytest.raises(InvalidInputError):
            M.presence_forward(np.ones((1, 2, 3)), head, bag_mode=False)


class TestRelevance:
    def test_zero_head_is_uniform(self):
        head = M.RelevanceHeadParams(np.zeros((2, 4, 3)), np.zeros((2, 4)))
        rt, r = M.relevance_forward(np.ones(3), head)
        np.testing.assert_array_equal(rt, np.full((1, 2, 2, 2), 0.25))
        np.testing.assert_array_equal(r, np.full((1, 2, 2, 2), 0.5))

    def test_log_scores(self):
        # (s00, s01, s10, s11) = (ln 4, ln 1, ln 2, ln 3)
        b = np.log([[4.0, 1.0, 2.0, 3.0]])
        head = M.RelevanceHeadParams(np.zeros((1, 4, 2)), b)
        rt, r = M.relevance_forward(np.zeros(2), head)
        np.testing.assert_allclose(rt[0, 0], [[0.4, 0.1], [0.2, 0.3]], atol=1e-15)
        np.testing.assert_allclose(r[0, 0], [[0.4 / 0.6, 0.1 / 0.4], [0.2 / 0.6, 0.3 / 0.4]],
                                   atol=1e-15)

    def test_identity_override(self):
        rng = np.random.default_rng(3)
        head = M.RelevanceHeadParams(rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4)))
        rt, r = M.relevance_forward(rng.normal(size=(5, 3)), head, identity_override=True)
        assert np.array_equal(r, np.broadcast_to(np.eye(2), (5, 2, 2, 2)))
        assert np.array_equal(rt, np.broadcast_to(0.5 * np.eye(2), (5, 2, 2, 2)))

    def test_unconditioned_ignores_features(self):
        rng = np.random.default_rng(4)
        head = M.RelevanceHeadParams(rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4)))
        _, r = M.relevance_forward(rng.normal(size=(6, 3)), head, conditioned=False)
        assert np.all(r == r[0])

    def test_large_scores_are_stable(self):
        head = M.RelevanceHeadParams(np.zeros((1, 4, 1)), np.array([[800.0, 0.0, 0.0, 790.0]]))
        rt, r = M.relevance_forward(np.zeros(1), head)
        assert np.all(np.isfinite(rt)) and np.all(np.isfinite(r))
        np.testing.assert_allclose(r.sum(axis=-2), 1.0, atol=1e-12)


class TestMarginalize:
    def test_identity(self):
        assert M.marginalize(0.3, np.eye(2)) == pytest.approx(0.3, abs=1e-15)

    def test_substitution(self):
        r = np.array([[2 / 3, 0.25], [1 / 3, 0.75]])
        assert M.marginalize(0.5, r) == pytest.approx(0.75 * 0.5 + 0.5 / 3, abs=1e-15)

    def test_enumeration_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            v1 = rng.random()
            r1 = rng.random(2)
            r = np.array([[1 - r1[0], 1 - r1[1]], [r1[0], r1[1]]])
            brute = 0.0
            for z in (0, 1):
                brute += r[1, z] * (v1 if z else 1.0 - v1)
            assert M.marginalize(v1, r) == brute


class TestModelForward:
    def test_identity_relevance_collapses(self):
        p = random_params(0, identity_relevance=True)
        x = np.random.default_rng(0).normal(size=(7, 1, 5))
        pred = M.model_forward(p, x)
        assert np.array_equal(pred.h1, pred.v1)

    def test_zero_model(self):
        p = M.init_params(3, 4)
        for a in p.named_arrays().values():
            a[...] = 0.0
        pred = M.model_forward(p, np.ones(4))
        np.testing.assert_array_equal(pred.v1, 0.5)
        np.testing.assert_array_equal(pred.h1, 0.5)
        np.testing.assert_array_equal(pred.r, 0.5)

    @pytest.mark.parametrize("bag", [False, True])
    def test_marginal_invariant(self, bag):
        p = random_params(1, bag_mode=bag)
        x = np.random.default_rng(1).normal(size=(9, 3 if bag else 1, 5))
        pred = M.model_forward(p, x)
        r = pred.r
        np.testing.assert_allclose(pred.h1, r[..., 1, 1] * pred.v1 + r[..., 1, 0] * (1 - pred.v1),
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(pred.rtilde.sum(axis=(-1, -2)), 1.0, atol=1e-12)
        np.testing.assert_allclose(r.sum(axis=-2), 1.0, atol=1e-12)
        assert np.all((pred.h1 >= 0) & (pred.h1 <= 1))

    def test_bag_mode_pools_relevance_features(self):
        p = random_params(2, bag_mode=True)
        x = np.random.default_rng(2).normal(size=(1, 4, 5))
        pred = M.model_forward(p, x)
        phi = M.trunk_forward(x, p.trunk)
        _, r = M.relevance_forward(phi.mean(axis=1), p.relevance)
        np.testing.assert_array_equal(pred.r, r)
        assert pred.v1[0, 0] == pytest.approx(M.noisy_or(pred.region_probs[0, :, 0]), abs=1e-15)

    def test_decoupling_capacity(self):
        # confident presence, yet almost never mentioned
        W, d = 1, 2
        p = M.ModelParams(M.TrunkParams([]),
                          M.PresenceHeadParams(np.zeros((W, d)), np.array([4.0])),
                          M.RelevanceHeadParams(np.zeros((W, 4, d)),
                                                np.array([[3.0, 3.0, -3.0, -3.0]])))
        pred = M.model_forward(p, np.zeros(d))
        assert pred.v1[0, 0] > 0.9
        assert pred.h1[0, 0] < 0.1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.booleans(), st.booleans())
    def test_normalization_property(self, seed, bag, cond):
        p = random_params(seed, scale=3.0, bag_mode=bag, relevance_conditioned=cond)
        x = np.random.default_rng(seed).normal(size=(3, 2 if bag else 1, 5))
        pred = M.model_forward(p, x)
        np.testing.assert_allclose(pred.rtilde.sum(axis=(-1, -2)), 1.0, atol=1e-12)
        np.testing.assert_allclose(pred.r.sum(axis=-2), 1.0, atol=1e-12)
        assert np.all((pred.h1 >= 0) & (pred.h1 <= 1))


class TestLoss:
    def test_perfect_prediction(self):
        p = M.init_params(4, 3)
        y = np.array([[1, 0, 1, 0]])
        value = M.loss(y.astype(float), y, p, weight_decay=0.0)
        assert 0 <= value <= 4 * 1.1e-7

    @pytest.mark.parametrize("y", [0, 1])
    def test_half(self, y):
        p = M.init_params(1, 3)
        assert M.loss(np.array([[0.5]]), np.array([[y]]), p, 0.0) == pytest.approx(math.log(2))

    def test_scalar_oracle(self):
        p = random_params(3)
        rng = np.random.default_rng(3)
        h = rng.random((1, 3))
        y = rng.integers(0, 2, (1, 3))
        lam = 0.01
        expected = -sum(math.log(h[0, w]) if y[0, w] else math.log(1 - h[0, w]) for w in range(3))
        sq = 0.0
        for name, a in p.named_arrays().items():
            if name.endswith("weight"):
                sq += sum(float(v) ** 2 for v in a.ravel())
        expected += 0.5 * lam * sq
        assert M.loss(h, y, p, lam) == pytest.approx(expected, abs=1e-12)

    def test_clamping_keeps_loss_finite(self):
        p = M.init_params(2, 3)
        assert np.isfinite(M.loss(np.array([[0.0, 1.0]]), np.array([[1, 0]]), p, 0.0))


class TestBackward:
    def test_zero_params_identity_bias_gradient(self):
        p = M.init_params(4, 3, identity_relevance=True)
        for a in p.named_arrays().values():
            a[...] = 0.0
        y = np.array([[1, 0, 1, 0]])
        _, g = M.loss_and_grad(p, np.ones(3), y, 0.0)
        np.testing.assert_allclose(g["presence.bias"], 0.5 - y[0], atol=1e-15)

    def test_zero_params_uniform_relevance_blocks_presence(self):
        # with r uniform, h is 0.5 whatever v says
        p = M.init_params(2, 3)
        for a in p.named_arrays().values():
            a[...] = 0.0
        _, g = M.loss_and_grad(p, np.ones(3), np.array([[1, 0]]), 0.0)
        np.testing.assert_array_equal(g["presence.bias"], 0.0)

    @pytest.mark.parametrize("bag", [False, True])
    @pytest.mark.parametrize("cond", [False, True])
    @pytest.mark.parametrize("hidden", [(), (4,), (4, 3)])
    def test_finite_differences(self, bag, cond, hidden):
        p = random_params(11, hidden=hidden, bag_mode=bag, relevance_conditioned=cond)
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 2 if bag else 1, 5))
        y = rng.integers(0, 2, (2, 3))
        assert gradient_check(p, x, y, 1e-3) < 1e-5

    def test_small_bag_instance(self):
        p = random_params(12, W=3, d=5, bag_mode=True)
        rng = np.random.default_rng(12)
        x = rng.normal(size=(1, 2, 5))
        y = rng.integers(0, 2, (1, 3))
        assert gradient_check(p, x, y, 1e-4, step=1e-5) < 1e-5

    def test_identity_matches_naive_gradients(self):
        from reportbias.baselines import build_baseline
        latent = random_params(13, identity_relevance=True)
        naive = build_baseline("naive", 3, 5, (4,), seed=13)
        for name, a in naive.named_arrays().items():
            a[...] = latent.named_arrays()[name]
        rng = np.random.default_rng(13)
        x, y = rng.normal(size=(4, 1, 5)), rng.integers(0, 2, (4, 3))
        v1, g1 = M.loss_and_grad(latent, x, y, 1e-3)
        v2, g2 = M.loss_and_grad(naive, x, y, 1e-3)
        assert v1 == v2
        for name in g1:
            np.testing.assert_allclose(g1[name], g2[name], rtol=0, atol=1e-12)
        assert all(not np.any(g1[n]) for n in g1 if n.startswith("relevance."))

    def test_identity_gradients_are_plain_sigmoid_loss(self):
        p = random_params(14, hidden=(), identity_relevance=True)
        rng = np.random.default_rng(14)
        x, y = rng.normal(size=(6, 1, 5)), rng.integers(0, 2, (6, 3))
        _, g = M.loss_and_grad(p, x, y, 0.0)
        v = 1 / (1 + np.exp(-(x[:, 0] @ p.presence.weight.T + p.presence.bias)))
        np.testing.assert_allclose(g["presence.bias"], (v - y).mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(g["presence.weight"], (v - y).T @ x[:, 0] / 6, atol=1e-12)

    def test_label_shape_checked(self):
        p = random_params(15)
        with pytest.raises(InvalidInputError):
            M.loss_and_grad(p, np.zeros((2, 1, 5)), np.zeros((2, 4)))


def test_init_is_flag_independent():
    a = M.init_params(3, 5, (4,), seed=7)
    b = M.init_params(3, 5, (4,), seed=7, identity_relevance=True, relevance_conditioned=False)
    for name, arr in a.named_arrays().items():
        assert np.array_equal(arr, b.named_arrays()[name])
    np.testing.assert_array_equal(a.relevance.bias[0], M.RELEVANCE_INIT_BIAS)
    assert not np.any(a.relevance.weight)


def test_copy_is_deep():
    a = random_params(0)
    b = a.copy()
    b.presence.weight[0, 0] += 1.0
    assert a.presence.weight[0, 0] != b.presence.weight[0, 0]
    assert replace(a).presence.weight is a.presence.weight
