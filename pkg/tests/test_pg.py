import json

import numpy as np
import pytest

from leqg import duality, pg, solver
from leqg import model as M

from conftest import random_scalar_model, scalar_model


@pytest.fixture(scope="module")
def K_opt():
    return M.AffinePolicy.from_gains(solver.solve(M.table2()).gains)


def test_objective_mc_at_optimum(table2, K_opt):
    est, se = pg.objective_estimate(table2, K_opt, 20_000, seed=0)
    assert abs(est - 19.6786) < 3 * se


def test_exact_objective_at_optimum(table2, K_opt):
    assert pg.exact_objective(table2, K_opt) == pytest.approx(19.6786, abs=5e-5)


def test_objective_zero_cost_model():
    mod = scalar_model(M=0, N=1e-300, Q=0, m=0, n=0, M_T=0, m_T=0, T=3)
    K = M.AffinePolicy.zeros(mod)
    assert pg.objective_estimate(mod, K, 100, seed=0)[0] == pytest.approx(0, abs=1e-12)
    K.e[:] = 0.3
    expected = -3 * 0.5 * 0.09 / 0.15
    assert pg.objective_estimate(mod, K, 100, seed=0)[0] == pytest.approx(expected)


def test_objective_variance_scaling(table2, K_opt):
    _, se1 = pg.objective_estimate(table2, K_opt, 4000, seed=1)
    _, se2 = pg.objective_estimate(table2, K_opt, 8000, seed=2)
    assert (se1 / se2) ** 2 == pytest.approx(2, rel=0.15)


def test_objective_requires_rollouts(table2, K_opt):
    with pytest.raises(ValueError):
        pg.objective_estimate(table2, K_opt, 0, seed=0)


def test_exact_gradient_fixed_point(table2, K_opt):
    assert pg.exact_gradient(table2, K_opt).max_abs() <= 1e-8
    assert pg.exact_natural_gradient(table2, K_opt).max_abs() <= 1e-8


def test_exact_gradient_matches_finite_differences():
    mod = M.table2().replace(T=3)
    rng = np.random.default_rng(0)
    K = M.AffinePolicy.from_gains(solver.solve(mod).gains)
    K = K.with_flat(K.flat() + 0.05 * rng.normal(size=K.flat().size))
    grad = pg.exact_gradient(mod, K).as_policy().flat()
    flat, h = K.flat(), 1e-5
    fd = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        fd[i] = (pg.exact_objective(mod, K.with_flat(flat + e)) - pg.exact_objective(mod, K.with_flat(flat - e))) / (2 * h)
    assert np.abs(grad - fd).max() < 1e-6


def test_npg_zero_gradient(table2, K_opt):
    zero = pg.Gradient({k: np.zeros((25, 1, 2)) for k in ("u", "gamma", "eta")})
    assert np.array_equal(pg.npg_step(K_opt, zero, None, 0.1).flat(), K_opt.flat())


def test_npg_step_at_optimum(table2, K_opt):
    K1 = pg.npg_step(K_opt, pg.exact_natural_gradient(table2, K_opt), None, 0.01)
    assert np.abs(K1.flat() - K_opt.flat()).max() < 1e-10


def test_npg_sign_descends_in_d(table2, K_opt):
    K = K_opt.copy()
    K.d[:] += 0.2
    C0 = pg.exact_objective(table2, K)
    g = pg.exact_gradient(table2, K)
    assert g.as_policy().d.sum() > 0  # raising d increases C
    only_u = pg.Gradient({"u": g.blocks["u"], "gamma": 0 * g.blocks["gamma"], "eta": 0 * g.blocks["eta"]})
    with pytest.warns(pg.SingularCovariance):
        K1 = pg.npg_step(K, only_u, pg.augmented_moments(table2, K), 1e-3)
    assert pg.exact_objective(table2, K1) < C0


def test_npg_sign_ascends_in_shift(table2, K_opt):
    K = K_opt.copy()
    K.e[:] -= 0.2
    C0 = pg.exact_objective(table2, K)
    g = pg.exact_natural_gradient(table2, K)
    only_g = pg.Gradient({"u": 0 * g.blocks["u"], "gamma": g.blocks["gamma"], "eta": 0 * g.blocks["eta"]})
    assert pg.exact_objective(table2, pg.npg_step(K, only_g, None, 1e-3)) > C0


def test_natural_gradient_is_preconditioned(table2, K_opt):
    K = K_opt.copy()
    K.D[:] += 0.1
    plain = pg.exact_gradient(table2, K)
    nat = pg.exact_natural_gradient(table2, K)
    Sig = pg.augmented_moments(table2, K)
    # t >= 1 covariances are PD, so the preconditioned plain gradient is the natural one
    with pytest.warns(pg.SingularCovariance):
        a = pg.npg_step(K, plain, Sig, 1e-3)
    b = pg.npg_step(K, nat, None, 1e-3)
    assert np.allclose(a.D[1:], b.D[1:], atol=1e-10) and np.allclose(a.d[1:], b.d[1:], atol=1e-10)


def test_npg_singular_covariance_warns(table2, K_opt):
    g = pg.exact_gradient(table2, K_opt)
    with pytest.warns(pg.SingularCovariance):
        pg.npg_step(K_opt, g, pg.augmented_moments(table2, K_opt), 1e-3)  # t = 0 is rank one


def test_critic_zero_lr(table2, K_opt):
    c = pg.CriticParams.from_solution(solver.solve(table2))
    batch = pg._rollouts(table2, K_opt, 16, seed=0)
    out = pg.critic_td_update(c, batch, 0.0, table2)
    assert np.array_equal(out.P, c.P) and np.array_equal(out.r, c.r)


def test_critic_empty_batch(table2):
    c = pg.CriticParams.zeros(table2)
    empty = {"x": np.zeros((0, 26, 1)), "u": np.zeros((0, 25, 1)), "gamma": np.zeros((0, 25, 1)),
             "eta": np.zeros((0, 25, 1))}
    with pytest.raises(ValueError):
        pg.critic_td_update(c, empty, 0.1, table2)


def test_critic_drift_at_fixed_point(table2, K_opt):
    # at the true value function the TD error has mean zero: updates only jitter
    c0 = pg.CriticParams.from_solution(solver.solve(table2))
    lr, n = 0.01, 512
    drifts = []
    for s in range(40):
        c1 = pg.critic_td_update(c0, pg._rollouts(table2, K_opt, n, seed=s, x0_spread=1.0, stream="critic"),
                                 lr, table2)
        drifts.append(c1.r[:-1] - c0.r[:-1])
    drifts = np.array(drifts)
    mean, se = drifts.mean(axis=0), drifts.std(axis=0, ddof=1) / np.sqrt(len(drifts))
    assert np.all(np.abs(mean) < 3 * se)


def test_critic_converges_T2():
    mod = M.table2().replace(T=2)
    sol = solver.solve(mod)
    K = M.AffinePolicy.from_gains(sol.gains)
    c = pg.CriticParams.zeros(mod)
    for i in range(10_000):
        c = pg.critic_td_update(c, pg._rollouts(mod, K, 32, seed=i, x0_spread=1.0, stream="critic"), 0.05, mod)
    assert c.P[0, 0, 0] == pytest.approx(sol.value[0].P.item(), rel=0.05)


def test_train_zero_episodes(table2):
    K0 = M.AffinePolicy.zeros(table2)
    K0.d[:] = 0.3
    res = pg.train(table2, {"episodes": 0}, K0=K0)
    assert np.array_equal(res.K.flat(), K0.flat()) and len(res.history) == 1


def test_train_from_optimum_is_flat(table2, K_opt):
    res = pg.train(table2, {"episodes": 50}, K0=K_opt)
    C = np.array([h.C_estimate for h in res.history])
    assert np.ptp(C) < 1e-9 and res.history[-1].gain_gap < 1e-10


def test_train_mc_objective_flat_at_optimum(table2, K_opt):
    with pytest.warns(pg.SingularCovariance):  # x0 is fixed, so the t = 0 moment is rank one
        res = pg.train(table2, {"episodes": 5, "mode": "zeroth-order", "delta0": 0.0, "rollouts": 2000}, K0=K_opt)
    C = np.array([h.C_estimate for h in res.history])
    _, se = pg.objective_estimate(table2, K_opt, 2000, seed=0)
    assert np.all(np.abs(C - 19.6786) < 4 * se)


def test_train_improves_short_horizon():
    mod = M.table2().replace(T=3)
    res = pg.train(mod, {"episodes": 2000, "delta0": 0.1})
    assert res.history[-1].gain_gap < 1e-3 and res.history[-1].eta_norm < 1e-3
    lines = res.history_jsonl().splitlines()
    assert set(json.loads(lines[0])) == {"episode", "C_estimate", "gain_gap", "eta_norm"}


def test_train_diverges_with_large_step(table2):
    with pytest.raises(pg.Diverged):
        pg.train(table2, {"episodes": 200, "delta0": 0.3})


def test_train_config_rejects_unknown_keys(table2):
    with pytest.raises(ValueError):
        pg.train(table2, {"episods": 3})


@pytest.mark.parametrize("seed", range(10))
def test_objective_sandwich(seed):
    rng = np.random.default_rng(300 + seed)
    mod = random_scalar_model(rng, T=3)
    opt = M.AffinePolicy.from_gains(solver.solve(mod).gains)
    K = opt.with_flat(opt.flat() + 0.3 * rng.normal(size=opt.flat().size))
    lower = M.AffinePolicy(opt.D, opt.d, K.E, K.e, K.F, K.f)
    upper = M.AffinePolicy(K.D, K.d, opt.E, opt.e, opt.F, opt.f)
    C = lambda P: pg.exact_objective(mod, P)
    assert C(lower) <= C(opt) + 1e-10 <= C(upper) + 2e-10


def test_objective_consistent_with_duality(table2, K_opt):
    assert pg.exact_objective(table2, K_opt) == duality.game_objective(table2, K_opt)
