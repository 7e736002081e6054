import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grad
from twinguard.ade import (AdeConfig, AdeEngine, AdeModel, MmdReference, ResidualStats, ade_batch_loss,
                           balance_classes, build_window, classify, classify_validated, latent_mmd, mmd2,
                           mmd2_unbiased_grad, permutation_null, permutation_threshold, stealth_risk, train_ade,
                           windows_from_stream)
from twinguard.ade import train as ade_train
from twinguard.nn import GruParams, softmax, softmax_xent


def small_model(seed=0, d_in=2, hidden=3, window=5, compress=True):
    cfg = AdeConfig(window=window, hidden=hidden, compress=compress, seed=seed, test_size=4)
    m = AdeModel(d_in, cfg, rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1000)
    for v in m.params().values():
        v[...] = 0.7 * rng.standard_normal(v.shape)
    m.res_std = rng.uniform(0.5, 2.0, d_in)
    return m


def brute_unbiased(X, Y, bw):
    k = lambda a, b: np.exp(-np.sum((a - b) ** 2) / (2 * bw ** 2))
    m, n = len(X), len(Y)
    sxx = sum(k(X[i], X[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    syy = sum(k(Y[i], Y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    sxy = sum(k(X[i], Y[j]) for i in range(m) for j in range(n)) / (m * n)
    return sxx + syy - 2 * sxy


# -- windowing -------------------------------------------------------------------
def test_windows_from_stream_labels_and_onset_skip():
    R = np.arange(20.0)[:, None]
    labels = np.zeros(20, dtype=int)
    labels[10:] = 1
    X, y, ends = windows_from_stream(R, labels, W=4, min_attack_rows=2)
    assert ends[0] == 3 and 10 not in ends and 11 in ends
    np.testing.assert_array_equal(X[0, :, 0], [0, 1, 2, 3])
    assert np.all(y[ends >= 11] == 1) and np.all(y[ends < 10] == 0)


def test_build_window_warmup():
    s = np.arange(10.0)
    assert build_window(s, 3, 5) is None
    np.testing.assert_array_equal(build_window(s, 4, 5), [0, 1, 2, 3, 4])


def test_balance_classes_equalizes():
    y = np.array([0] * 50 + [1] * 7 + [2] * 20)
    X = np.arange(len(y))[:, None]
    Xb, yb = balance_classes(X, y, np.random.default_rng(0))
    assert np.bincount(yb).tolist() == [7, 7, 7]
    np.testing.assert_array_equal(y[Xb[:, 0]], yb)


# -- encoder and classifier ---------------------------------------------------------
def test_zero_gru_gives_zero_embedding():
    m = AdeModel(3, AdeConfig(window=6, hidden=4))
    m.fwd, m.bwd = GruParams.zeros(3, 4), GruParams.zeros(3, 4)
    z = m.encode(np.random.default_rng(0).standard_normal((2, 6, 3)))
    assert np.all(z == 0)


def test_reversed_window_swaps_halves_with_tied_directions():
    m = small_model(3)
    m.bwd = m.fwd
    x = np.random.default_rng(4).standard_normal((3, 5, 2))
    z, zr = m.encode(x), m.encode(x[:, ::-1])
    np.testing.assert_allclose(zr[:, :3], z[:, 3:], atol=1e-14)
    np.testing.assert_allclose(zr[:, 3:], z[:, :3], atol=1e-14)


def test_encode_deterministic_and_cached_path_agrees():
    m = small_model(5)
    x = np.random.default_rng(6).standard_normal((4, 5, 2))
    z1, (z2, _) = m.encode(x), m.encode(x, return_cache=True)
    assert z1.tobytes() == m.encode(x).tobytes()
    np.testing.assert_allclose(z1, z2, atol=1e-14)


def test_classify_zero_head_is_uniform_and_picks_normal():
    m = small_model(0)
    m.W_c[...] = 0
    m.b_c[...] = 0
    c = classify(np.ones(6), m)
    np.testing.assert_allclose(c.p, 1 / 3)
    assert c.cls == 0


def test_classify_large_margin():
    m = small_model(0)
    m.W_c[...] = 0
    m.b_c[...] = [0.0, 10.0, 0.0]
    c = classify(np.zeros(6), m)
    assert c.cls == 1 and c.p[1] > 0.9999


def test_probabilities_sum_to_one():
    m = small_model(1)
    z = np.random.default_rng(0).standard_normal((10_000, 6)) * 5
    p = softmax(m.logits(z))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_compression_is_signed_log1p():
    m = small_model(2)
    x = np.array([[-3.0, 0.5]])
    np.testing.assert_allclose(m.standardize(x), np.sign(x / m.res_std) * np.log1p(np.abs(x / m.res_std)))
    m.cfg.compress = False
    np.testing.assert_allclose(m.standardize(x), x / m.res_std)


def test_model_roundtrip(tmp_path):
    m = small_model(7)
    m.save(tmp_path / "ade.bin")
    back = AdeModel.load(tmp_path / "ade.bin")
    x = np.random.default_rng(0).standard_normal((2, 5, 2))
    assert back.encode(x).tobytes() == m.encode(x).tobytes()


def test_residual_stats_fit():
    R = np.random.default_rng(0).standard_normal((500, 3)) * [1.0, 2.0, 0.5]
    s = ResidualStats.fit(R)
    np.testing.assert_allclose(s.cov, np.cov(R, rowvar=False))
    np.testing.assert_allclose(s.std, R.std(axis=0, ddof=1))


# -- gradients ------------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(100))
def test_ade_loss_gradient(seed, monkeypatch):
    # the kernel bandwidth is a constant inside the backward pass
    monkeypatch.setattr(ade_train, "median_bandwidth", lambda z: 1.3)
    m = small_model(seed, compress=seed % 2 == 0)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((6, 5, 2)) * 2
    y = np.array([0, 1, 1, 2, 2, 0])
    _, _, mv, grads = ade_batch_loss(m, X, y, 0.3, -1.0)
    assert mv != 0
    p = m.params()
    name = ["fwd.W_x", "fwd.W_h", "bwd.W_x", "bwd.b_h", "cls.W", "fwd.b_x"][seed % 6]
    assert_grad(grads[name], lambda: ade_batch_loss(m, X, y, 0.3, -1.0, need_grads=False)[0], p[name])


@pytest.mark.parametrize("seed", range(100))
def test_input_gradient_through_compression(seed):
    m = small_model(seed, compress=seed % 4 != 0)
    x = np.random.default_rng(seed).standard_normal((5, 2)) * 3
    target = seed % 3

    def ce():
        return softmax_xent(m.logits(m.encode(x[None])), np.array([target]))[1]

    assert_grad(m.input_gradient(x, target), ce, x)


@pytest.mark.parametrize("seed", range(100))
def test_unbiased_mmd_gradient(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((4, 3)), rng.standard_normal((5, 3)) + 0.5
    _, gX, gY = mmd2_unbiased_grad(X, Y, 1.1)
    assert_grad(gX, lambda: mmd2(X, Y, 1.1), X)
    assert_grad(gY, lambda: mmd2(X, Y, 1.1), Y)


# -- MMD --------------------------------------------------------------------------------
def test_biased_mmd_of_identical_sets_is_zero():
    for seed in range(20):
        X = np.random.default_rng(seed).standard_normal((17, 4))
        assert mmd2(X, X, estimator="biased") == 0.0


def test_singleton_closed_form():
    for d in (0.5, 1.0, 3.0):
        val = mmd2([[0.0]], [[d]], bandwidth=1.0, estimator="biased")
        assert val == pytest.approx(2 - 2 * np.exp(-d * d / 2), rel=1e-14)
    assert mmd2([[0.0]], [[50.0]], bandwidth=1.0, estimator="biased") == pytest.approx(2.0)


def test_unbiased_needs_two_samples():
    with pytest.raises(ValueError):
        mmd2(np.zeros((1, 2)), np.ones((5, 2)), 1.0)
    with pytest.raises(ValueError):
        mmd2(np.zeros((3, 2)), np.ones((3, 2)), 1.0, estimator="other")


def test_unbiased_matches_brute_force_20_30():
    rng = np.random.default_rng(0)
    X, Y = rng.standard_normal((20, 3)), rng.standard_normal((30, 3)) * 1.5
    assert abs(mmd2(X, Y, 0.9) - brute_unbiased(X, Y, 0.9)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 50), st.integers(2, 50), st.integers(0, 10_000))
def test_unbiased_matches_brute_force_property(m, n, seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((m, 2)), rng.standard_normal((n, 2)) + 0.3
    assert abs(mmd2(X, Y, 1.2) - brute_unbiased(X, Y, 1.2)) < 1e-12


def test_reference_statistic_matches_mmd2():
    rng = np.random.default_rng(3)
    ref = MmdReference(rng.standard_normal((60, 3)))
    X = rng.standard_normal((8, 3))
    assert ref.statistic(X) == pytest.approx(mmd2(X, ref.Z, ref.bandwidth), abs=1e-14)


# -- permutation threshold ---------------------------------------------------------------
def test_permutation_rejection_rate_under_null():
    rej = 0
    for trial in range(500):
        rng = np.random.default_rng(trial)
        Z = rng.standard_normal((120, 3))
        tau = permutation_threshold(Z, n_perm=200, alpha=0.05, seed=trial, test_size=10)
        rej += MmdReference(Z).statistic(rng.standard_normal((10, 3))) > tau
    assert 0.02 < rej / 500 < 0.09


def test_permutation_degenerate_alpha_one_and_determinism():
    Z = np.random.default_rng(0).standard_normal((40, 2))
    null = permutation_null(Z, 50, seed=1)
    assert permutation_threshold(Z, 50, alpha=1.0, seed=1) == null.min()
    assert permutation_threshold(Z, 50, seed=1) == permutation_threshold(Z, 50, seed=1)
    with pytest.raises(ValueError):
        permutation_threshold(Z[:15], 50, test_size=10)


def test_threshold_stable_when_permutations_double():
    Z = np.random.default_rng(0).standard_normal((100, 3))
    t200 = np.array([permutation_threshold(Z, 200, seed=s) for s in range(30)])
    t400 = np.array([permutation_threshold(Z, 400, seed=100 + s) for s in range(30)])
    bound = 3 * np.sqrt(t200.var(ddof=1) + t400.var(ddof=1))
    assert abs(permutation_threshold(Z, 400, seed=7) - permutation_threshold(Z, 200, seed=7)) < bound
    assert t400.std() < t200.std()


def test_block_null_excludes_guard_rows():
    Z = np.random.default_rng(0).standard_normal((80, 2))
    a = permutation_null(Z, 30, seed=2, test_size=10, block=True, guard=5)
    assert a.shape == (30,) and np.all(np.isfinite(a))


# -- validated classification ------------------------------------------------------------
def test_validation_rules():
    p = np.array([0.8, 0.15, 0.05])
    assert classify_validated(p, True) == (0, 0.8) and classify_validated(p, False) == (0, 0.8)
    assert classify_validated(np.array([0.05, 0.9, 0.05]), False) == (0, 0.45)
    assert classify_validated(np.array([0.05, 0.05, 0.9]), True) == (2, 0.9)


def test_stealth_risk_examples():
    assert stealth_risk(np.array([1.0, 0.0, 0.0])) == pytest.approx(0.0)
    assert stealth_risk(np.array([0.25, 0.5, 0.25])) == pytest.approx(1.0 / (0.25 + 1e-6))
    assert stealth_risk(np.array([0.0, 0.0, 1.0])) == pytest.approx(2e6)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 0.5), st.floats(0.0, 0.25), st.floats(0.0, 0.25))
def test_stealth_risk_monotone_in_multistage(pn, pam, extra):
    pas = 1 - pn - pam - extra
    lo = stealth_risk(np.array([pn, pas + extra, pam]))
    hi = stealth_risk(np.array([pn, pas, pam + extra]))
    assert 0 <= lo <= hi


def biased_engine(seed=0):
    m = small_model(seed, d_in=3, hidden=4, window=8)
    m.res_std = np.ones(3)
    m.b_c[...] = [0.0, 0.05, -5.0]
    m.W_c[...] *= 0.02
    rng = np.random.default_rng(seed + 50)
    _, Z = AdeEngine(m, MmdReference(np.zeros((2, 8))), 0.0).run_batch(rng.standard_normal((600, 3)))
    ref = MmdReference(Z[::3])
    tau = permutation_threshold(ref.Z, 200, 0.05, seed=seed, test_size=m.cfg.test_size, block=True, guard=8)
    return AdeEngine(m, ref, tau)


def test_gating_reduces_false_alarms():
    for seed in range(5):
        eng = biased_engine(seed)
        out, _ = eng.run_batch(np.random.default_rng(seed + 99).standard_normal((800, 3)))
        far_raw, far_gated = np.mean(out["raw"] != 0), np.mean(out["cls"] != 0)
        assert far_raw > 0.1 and far_gated < far_raw


def test_warmup_rows_are_normal_with_zero_confidence():
    eng = biased_engine(1)
    W = eng.cfg.window
    R = np.random.default_rng(3).standard_normal((40, 3)) * 5
    for t in range(W - 1):
        p, ready = eng.step(R[t])
        assert not ready and p.validated == 0 and p.confidence == 0.0
    out, _ = eng.run_batch(R)
    assert np.all(out["cls"][:W - 1] == 0) and np.all(out["confidence"][:W - 1] == 0)


def test_batch_matches_stepwise():
    eng = biased_engine(2)
    R = np.random.default_rng(4).standard_normal((60, 3)) * 2
    out, _ = eng.run_batch(R)
    eng.reset()
    for t in range(len(R)):
        p, _ = eng.step(R[t])
        assert p.validated == out["cls"][t]
        assert p.confidence == pytest.approx(out["confidence"][t], abs=1e-12)


# -- training -----------------------------------------------------------------------------
def toy_windows(n, seed, W=12):
    """Normal noise, a sustained bias on channel 0, and a bias that moves from channel 0 to 1."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((3 * n, W, 2)) * 0.3
    X[n:2 * n, :, 0] += 1.0
    X[2 * n:, :W // 2, 0] += 1.0
    X[2 * n:, W // 2:, 1] += 1.0
    return X, np.repeat([0, 1, 2], n)


def test_beta_zero_is_plain_cross_entropy():
    m = small_model(0)
    X = np.random.default_rng(0).standard_normal((6, 5, 2))
    y = np.array([0, 1, 1, 2, 2, 0])
    loss, ce, mv, _ = ade_batch_loss(m, X, y, 0.0, -1.0)
    assert loss == ce and mv == 0.0
    assert ce == pytest.approx(softmax_xent(m.logits(m.encode(X)), y)[1])


def test_batch_without_multistage_has_no_mmd_term():
    m = small_model(0)
    X = np.random.default_rng(0).standard_normal((4, 5, 2))
    loss, ce, mv, _ = ade_batch_loss(m, X, np.array([0, 1, 1, 0]), 0.5, -1.0)
    assert mv == 0.0 and loss == ce


def test_missing_class_warns_and_trains():
    X, y = toy_windows(10, 0)
    keep = y != 2
    with pytest.warns(UserWarning, match="absent"):
        train_ade((X[keep], y[keep]), cfg=AdeConfig(window=12, hidden=4, epochs=1))


def test_training_learns_toy_classes():
    X, y = toy_windows(40, 1)
    cfg = AdeConfig(window=12, hidden=8, epochs=15, lr=1e-2, batch=16, patience=15)
    m, hist = train_ade((X, y), toy_windows(20, 2), cfg)
    Xt, yt = toy_windows(30, 3)
    acc = np.mean(np.argmax(m.probs(Xt), axis=1) == yt)
    assert acc > 0.9 and hist[-1]["train"] < hist[0]["train"]


def test_frozen_encoder_updates_only_head():
    X, y = toy_windows(10, 4)
    cfg = AdeConfig(window=12, hidden=4, epochs=2)
    base, _ = train_ade((X, y), cfg=cfg)
    tuned, _ = train_ade((X, y), cfg=cfg, freeze="attack-layers", init=base)
    for k, v in base.params().items():
        same = np.array_equal(v, tuned.params()[k])
        assert same == (k not in base.head_names())


def test_mmd_regularization_increases_latent_separation():
    X, y = toy_windows(40, 5)
    Xt, yt = toy_windows(40, 6)
    gains = []
    for seed in range(6):
        cfg = dict(window=12, hidden=16, epochs=8, lr=1e-2, batch=32, seed=seed)
        m0, _ = train_ade((X, y), cfg=AdeConfig(beta=0.0, **cfg))
        m1, _ = train_ade((X, y), cfg=AdeConfig(beta=0.1, **cfg))
        gains.append(latent_mmd(m1, Xt, yt) - latent_mmd(m0, Xt, yt))
    # the toy classes are almost separable by cross-entropy alone, so single pairs are noisy
    gains = np.array(gains)
    assert gains.mean() > 0 and np.count_nonzero(gains > 0) >= 4
