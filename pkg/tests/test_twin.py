import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grad, numeric_grad, rel_error, small_twin
from twinguard.plant import NoiseConfig, default_topology, simulate
from twinguard.twin import (DtConfig, LinearTwin, PhysicsMap, TcnTwin, adaptive_physics_weight, composite_loss,
                            concat_datasets, make_dataset, physics_residuals, prediction_errors, sample_covariance,
                            train_dt)
from twinguard.twin.train import PhysicsScales

TOPO = default_topology()
PM = PhysicsMap.from_topology(TOPO)


def plant_data(runs, steps, seed0, dither=0.3):
    zero = NoiseConfig.zero(TOPO)
    parts = []
    for r in range(runs):
        rng = np.random.default_rng(seed0 + r)
        Y, U, _ = simulate(TOPO, zero, steps, seed=seed0 + r, levels=rng.uniform(0.6, 1.4, 3),
                           rng_dither=rng, dither=dither)
        parts.append(make_dataset(Y, U, 10))
    return concat_datasets(parts)


@pytest.fixture(scope="module")
def trained():
    train = plant_data(3, 1200, 0)
    val = plant_data(1, 1200, 100)
    cfg = DtConfig(hidden=16, epochs=60, patience=10, lr=2e-3, seed=0)
    model, hist = train_dt(train, val, TOPO, cfg)
    return model, hist, val


# -- prediction ----------------------------------------------------------------------
def test_zero_head_predicts_training_mean():
    m = small_twin(0)
    m.raw["fc.W"][:] = 0
    m.raw["fc.b"][:] = 0
    m.refresh()
    ctx = np.random.default_rng(1).standard_normal((4, 12))
    np.testing.assert_allclose(m.predict(ctx), m.y_mean, atol=1e-15)


def test_short_context_rejected():
    with pytest.raises(ValueError, match="tau"):
        small_twin(0).predict(np.zeros((3, 12)))
    with pytest.raises(ValueError):
        DtConfig(tau=1)


def test_trained_twin_accuracy_and_determinism(trained):
    model, hist, (vctx, vtgt) = trained
    ctx = vctx[:1].copy()
    assert model.predict(ctx).tobytes() == model.predict(ctx).tobytes()
    err = prediction_errors(model, vctx, vtgt)
    span = vtgt.max(axis=0) - vtgt.min(axis=0)
    nrmse = np.sqrt(np.mean(err ** 2, axis=0)) / span
    assert np.all(nrmse <= 0.05), nrmse
    assert model.train_info["final_val_mse"] * 10 <= model.train_info["initial_val_mse"]


def test_save_load_roundtrip(trained, tmp_path):
    model, _, (vctx, _) = trained
    model.save(tmp_path / "twin.bin")
    back = TcnTwin.load(tmp_path / "twin.bin")
    assert back.predict_batch(vctx[:20]).tobytes() == model.predict_batch(vctx[:20]).tobytes()
    assert (back.e_bar, back.L_f, back.tau) == (model.e_bar, model.L_f, model.tau)


def test_operating_point_dependent_jacobian(trained):
    model, _, (vctx, _) = trained
    A1, _ = model.jacobians(vctx[0])
    A2, _ = model.jacobians(vctx[600])
    assert np.max(np.abs(A1 - A2)) > 1e-6


# -- MC dropout covariance ---------------------------------------------------------------
def test_keep_prob_one_gives_zero_covariance():
    m = small_twin(2, keep=1.0)
    pred = m.predict_uncertain(np.ones((4, 12)), n_mc=10, seed=0)
    assert np.all(pred.cov == 0)
    with pytest.raises(ValueError):
        m.predict_uncertain(np.ones((4, 12)), n_mc=1)


def test_two_sample_covariance_formula():
    s = np.array([[1.0, 2.0], [3.0, -1.0]])
    d = s[0] - s[1]
    np.testing.assert_allclose(sample_covariance(s), 0.5 * np.outer(d, d), atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_mc_covariance_brute_force(seed):
    m = small_twin(seed, hidden=8)
    pred = m.predict_uncertain(np.random.default_rng(seed).standard_normal((4, 12)), n_mc=50, seed=seed)
    S = pred.samples
    mean = sum(S) / len(S)
    C = np.zeros((9, 9))
    for s in S:
        C += np.outer(s - mean, s - mean)
    C /= len(S) - 1
    np.testing.assert_allclose(pred.mean, mean, atol=1e-12)
    assert np.max(np.abs(pred.cov - C)) < 1e-12
    assert np.array_equal(pred.cov, pred.cov.T)
    assert np.linalg.eigvalsh(pred.cov).min() >= -1e-9


def test_mc_reproducible_by_seed():
    m = small_twin(3, hidden=8)
    ctx = np.ones((4, 12))
    a, b = m.predict_uncertain(ctx, 20, seed=5), m.predict_uncertain(ctx, 20, seed=5)
    assert a.cov.tobytes() == b.cov.tobytes()


# -- physics terms ------------------------------------------------------------------
def conservation_trajectory(rng, T):
    """Flows random, levels integrated with the backward difference, pressures from the pipe law."""
    Y = np.zeros((T, 9))
    Y[:, 3:6] = rng.uniform(0.001, 0.012, (T, 3))
    Y[0, :3] = rng.uniform(0.5, 1.5, 3)
    for t in range(1, T):
        for k, lv in enumerate(PM.level_idx):
            Y[t, lv] = Y[t - 1, lv] + (Y[t] @ PM.flow_net[k]) / PM.area[k]
    # T3 drain is unmetered, so only T1 and T2 are balanced
    Y[:, PM.pipe_press] = PM.pipe_coef * Y[:, PM.pipe_flow] ** 1.852
    return Y


def test_physics_zero_on_consistent_trajectory():
    Y = conservation_trajectory(np.random.default_rng(0), 30)
    Lm, Lp = physics_residuals(Y, TOPO)
    assert Lm < 1e-12 and Lp < 1e-24
    Y[5, PM.pipe_press[0]] += 0.1
    assert physics_residuals(Y, PM)[1] > 0
    with pytest.raises(ValueError):
        physics_residuals(Y[:1], PM)


@pytest.mark.parametrize("seed", range(100))
def test_physics_gradient(seed):
    rng = np.random.default_rng(seed)
    T, lam_p = int(rng.integers(2, 6)), 0.02
    Y = conservation_trajectory(rng, T) + rng.standard_normal((T, 9)) * 0.01
    Y[:, 3:6] = np.abs(Y[:, 3:6]) + 0.001
    _, _, gm, gp = physics_residuals(Y, PM, return_grad=True)

    def f():
        Lm, Lp = physics_residuals(Y, PM)
        return Lm + lam_p * Lp
    assert_grad(gm + lam_p * gp, f, Y)


def test_adaptive_weight_examples():
    assert adaptive_physics_weight(0.0, 0.05, 2.0) == 0.05
    assert adaptive_physics_weight(1e9, 0.05, 2.0) == pytest.approx(0.1)
    assert adaptive_physics_weight(2.0, 0.05, 2.0) / 0.05 == pytest.approx(1.7615941559557649)
    with pytest.raises(ValueError):
        adaptive_physics_weight(1.0, 0.05, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(1e-6, 1e3))
def test_adaptive_weight_range_and_monotone(a, b, theta):
    lo, hi = sorted((a, b))
    wl, wh = adaptive_physics_weight(lo, 0.05, theta), adaptive_physics_weight(hi, 0.05, theta)
    assert 0.05 <= wl <= wh <= 0.1
    assert adaptive_physics_weight(lo, 0.05, theta) < 0.1 or lo / theta > 15


# -- composite loss -----------------------------------------------------------------
def composite_case(seed):
    rng = np.random.default_rng(seed)
    m = small_twin(seed)
    B = int(rng.integers(1, 4))
    ctx = rng.standard_normal((B, m.tau, 12)) * 0.5 + 1.0
    tgt = rng.standard_normal((B, 9)) * 0.5 + 1.0
    masks = m.sample_masks(B, rng)
    lam = rng.uniform(0.05, 0.1, B)
    scales = PhysicsScales(PM, m.y_std)
    return m, ctx, tgt, masks, lam, scales


@pytest.mark.parametrize("seed", range(100))
def test_composite_loss_gradient_end_to_end(seed):
    m, ctx, tgt, masks, lam, scales = composite_case(seed)
    _, grads = composite_loss(m, ctx, tgt, PM, scales, 0.7, lam, 0.02, masks)
    f = lambda: composite_loss(m, ctx, tgt, PM, scales, 0.7, lam, 0.02, masks)[0]
    for k in ("in.W", "b0.W", "b1.b", "fc.W", "fc.b"):
        assert_grad(grads[k], f, m.eff[k])


def test_alpha_zero_is_pure_prediction():
    m, ctx, tgt, masks, _, scales = composite_case(0)
    loss, _ = composite_loss(m, ctx, tgt, PM, scales, 0.5, 0.0, 0.02, masks)
    out, _ = m.forward(m.normalize(ctx), masks)
    tn = (tgt - m.y_mean) / m.y_std
    assert loss == pytest.approx(((out - tn) ** 2).sum(axis=1).mean() / 0.5, rel=1e-14)


def test_single_step_descent():
    m, ctx, tgt, masks, lam, scales = composite_case(4)
    ctx, tgt, lam = ctx[:1], tgt[:1], lam[:1]
    masks = [mk[:1] for mk in masks]
    l0, g = composite_loss(m, ctx, tgt, PM, scales, 1.0, lam, 0.02, masks)
    # step sized for a first-order decrease of 1e-4 l0
    eps = 1e-4 * l0 / sum(np.sum(v * v) for v in g.values())
    for k in m.eff:
        m.eff[k] = m.eff[k] - eps * g[k]
    l1, _ = composite_loss(m, ctx, tgt, PM, scales, 1.0, lam, 0.02, masks)
    assert l1 < l0


# -- Jacobians and Lipschitz -------------------------------------------------------------
def test_linear_twin_jacobians_are_weights():
    rng = np.random.default_rng(0)
    A, B = rng.standard_normal((3, 3)), rng.standard_normal((3, 2))
    tw = LinearTwin(A, B)
    Aj, Bj = tw.jacobians(rng.standard_normal((2, 5)))
    np.testing.assert_array_equal(Aj, A)
    np.testing.assert_array_equal(Bj, B)


@pytest.mark.parametrize("seed", range(20))
def test_tcn_jacobian_matches_finite_differences(seed):
    m = small_twin(seed, hidden=6)
    ctx = np.random.default_rng(seed).standard_normal((m.tau, 12))
    J = m.jacobians_full(ctx)[0]
    G = np.random.default_rng(seed + 1).standard_normal(9)
    num = numeric_grad(lambda: float(G @ m.predict(ctx)), ctx)
    assert rel_error(np.einsum("a,atx->tx", G, J), num) < 1e-4


def test_lipschitz_identity_and_scaling():
    ctx = np.random.default_rng(0).standard_normal((100, 2, 4))
    assert LinearTwin(np.eye(2), np.zeros((2, 2))).estimate_lipschitz(ctx).L_f == pytest.approx(1.0)
    assert LinearTwin(3 * np.eye(2), np.zeros((2, 2))).estimate_lipschitz(ctx).L_f == pytest.approx(3.0)
    est = small_twin(1).estimate_lipschitz(np.random.default_rng(2).standard_normal((100, 4, 12)))
    assert est.L_f >= est.norms.max() - 1e-15


def test_residual_mean_vanishes_for_exact_model():
    rng = np.random.default_rng(0)
    A = np.array([[0.9, 0.05], [0.0, 0.8]])
    B = np.array([[0.1], [0.2]])
    tw = LinearTwin(A, B)
    y, res = np.zeros(2), []
    for _ in range(20_000):
        u = rng.uniform(-1, 1, 1)
        ctx = np.array([np.r_[y, u], np.r_[y, u]])
        y_next = A @ y + B @ u + rng.standard_normal(2) * 0.01
        res.append(y_next - tw.predict(ctx))
        y = y_next
    res = np.array(res)
    stderr = res.std(axis=0) / np.sqrt(len(res))
    assert np.all(np.abs(res.mean(axis=0)) < 3 * stderr)


@pytest.mark.parametrize("seed", range(10))
def test_tail_forward_matches_full_forward(seed):
    m = small_twin(seed, tau=7)
    xn = np.random.default_rng(seed).standard_normal((5, 7, 12))
    full, _ = m.forward(xn)
    np.testing.assert_allclose(m._tail_forward(xn)[0], full, atol=1e-13)
