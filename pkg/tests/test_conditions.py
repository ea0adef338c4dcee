import json

import numpy as np
import pytest

from leqg import conditions, solver
from leqg.model import FrakturSet

from conftest import random_scalar_model, scalar_model


def scalar_fraktur(B1=4.64, B2=-2.6667, B3=-2.0267, C=1.6):
    z = np.zeros((1, 1))
    return FrakturSet(z, np.zeros(1), z, np.zeros(1), np.array([[B1]]), np.array([[B2]]),
                      np.array([[B3]]), np.array([[C]]), np.array([[C * C / B1 - B2]]))


def test_row25_passes(table2_sol):
    rec = conditions.check_assumption1(table2_sol.fraktur[24], t=24)
    assert rec.ok and rec.b1_pass and rec.negH_pass
    assert round(rec.det_negH, 4) == 2.8444
    assert rec.det_H == pytest.approx(rec.det_negH)  # even dimension


def test_row1_passes(table2_sol):
    rec = conditions.check_assumption1(table2_sol.fraktur[0], t=0)
    assert rec.ok and round(rec.det_negH, 4) == 0.6749


def test_b2_positive_tagged():
    rec = conditions.check_assumption1(scalar_fraktur(B2=1.0))
    assert "B2 not negative definite" in rec.violations
    assert not rec.ok


def test_sylvester_row25(table2_sol):
    flags = conditions.sylvester_conditions(table2_sol.fraktur[24])
    assert flags.all and flags.det_ok and flags.b2_negative and flags.b3_negative


def test_sylvester_diffuse_exploration():
    # Xi^{-1} = 0 makes B3 = B1 > 0
    flags = conditions.sylvester_conditions(scalar_fraktur(B3=4.64))
    assert not flags.b3_negative and not flags.all


@pytest.mark.parametrize("seed", range(100))
def test_sylvester_matches_eigen_oracle(seed):
    rng = np.random.default_rng(seed)
    f = scalar_fraktur(B1=rng.uniform(0.1, 5), B2=rng.uniform(-5, 2), B3=rng.uniform(-5, 2), C=rng.uniform(-3, 3))
    eig = np.linalg.eigvalsh(f.negH)
    assert conditions.sylvester_conditions(f).det_ok == bool(eig.min() > 0)
    rec = conditions.check_assumption1(f)
    assert rec.ok == bool(eig.min() > 1e-10 * max(1, abs(eig).max()) and f.B1.item() > 0)


def test_prop4_row24(table2):
    b = conditions.prop4_bounds(table2, 4.0, 24)
    assert b.Xi_inv_lower == pytest.approx(2 * 1 * 2 + 0.16 * 4)
    assert b.Xi_inv == pytest.approx(1 / 0.15)
    assert b.Lambda_inv_lower == 4.0 and b.Lambda_inv > 4.0
    assert b.satisfied


def test_prop4_zero_P(table2):
    assert conditions.prop4_bounds(table2, 0.0, 0).N_lower == 0.0


def test_prop4_negative_P(table2):
    b = conditions.prop4_bounds(table2, -1.0, 0)
    assert b.N_lower == pytest.approx(0.16 / 2)
    assert b.Lambda_inv_lower == -1.0


def test_prop4_scalar_only():
    mod = scalar_model()
    import dataclasses
    wide = dataclasses.replace(mod, A=np.eye(2))
    with pytest.raises(solver.NotScalar):
        conditions.prop4_bounds(wide, 1.0, 0)


def test_full_horizon_table2(table2_sol):
    rep = conditions.check_full_horizon(table2_sol)
    assert rep.ok and len(rep.records) == 25
    published = [0.6749] * 14 + [0.6750, 0.6751, 0.6755, 0.6765, 0.6792, 0.6867, 0.7073, 0.7638, 0.9217,
                                 1.3778, 2.8444]
    # record t holds the coefficients displayed on row t+1
    assert [round(r.det_negH, 4) for r in rep.records] == published
    assert all(r.prop4.satisfied for r in rep.records)


def test_diffuse_exploration_violates():
    rep = conditions.check_full_horizon(solver.solve(scalar_model(Xi=1e3)))
    assert not rep.ok
    assert any(v == "B3 not negative definite" for _, v in rep.violations)


def test_small_theta_matches_eigen_oracle():
    sol = solver.solve(scalar_model(theta=1e-6, N=1, Lambda=1e-4))
    for rec, f in zip(conditions.check_full_horizon(sol).records, sol.fraktur):
        eig = np.linalg.eigvalsh(f.negH)
        assert rec.negH_pass == bool(eig.min() > 1e-10 * max(1, abs(eig).max()))


def _prop4_instance(seed):
    # the bounds' own setting: Q = m = n = 0 and A, B, M positive
    rng = np.random.default_rng(500 + seed)
    return scalar_model(A=rng.uniform(0.1, 1), B=rng.uniform(0.1, 1), M=rng.uniform(0.1, 3),
                        N=rng.uniform(0.1, 3), Q=0, m=0, n=0, a=rng.uniform(-1, 1),
                        Lambda=rng.uniform(0.01, 0.5), Xi=rng.uniform(0.01, 0.5),
                        M_T=rng.uniform(0, 4), theta=rng.uniform(0.1, 2), T=int(rng.integers(1, 6)))


@pytest.mark.parametrize("seed", range(50))
def test_bounds_imply_diagonal_conditions(seed):
    sol = solver.solve(_prop4_instance(seed))
    for rec, f in zip(conditions.check_full_horizon(sol).records, sol.fraktur):
        assert not rec.prop4.caveat
        if rec.prop4.satisfied:
            flags = conditions.sylvester_conditions(f)
            assert rec.b1_pass and flags.b2_negative and flags.b3_negative


@pytest.mark.parametrize("seed", range(50))
def test_determinant_bound_implies_saddle(seed):
    sol = solver.solve(_prop4_instance(seed))
    for rec in conditions.check_full_horizon(sol).records:
        if rec.prop4.det_satisfied:
            assert rec.ok
        elif rec.prop4.Lambda_inv > rec.prop4.Lambda_inv_lower and rec.prop4.N > rec.prop4.N_lower:
            assert not rec.negH_pass


def test_positive_P_bound_does_not_control_determinant():
    # with P_{t+1} > 0 the printed Xi bound omits B^2 P^2 / (Lambda^{-1} - P)
    sol = solver.solve(_prop4_instance(11))
    rec = conditions.check_full_horizon(sol).records[0]
    assert rec.prop4.satisfied and not rec.prop4.det_satisfied
    assert rec.det_negH < 0 and not rec.ok


def test_det_bound_row24(table2):
    b = conditions.prop4_bounds(table2, 4.0, 24)
    assert b.Xi_inv_det_lower == pytest.approx(4 + 0.16 * 4 * (1 / 0.15) / (1 / 0.15 - 4))
    assert b.det_satisfied


def test_reports(table2_sol):
    rep = conditions.check_full_horizon(table2_sol)
    text = conditions.report_csv(rep)
    assert text.splitlines()[0] == "t,b1_pass,negH_pass,det_negH,violations"
    doc = json.loads(conditions.report_json(rep))
    assert doc["ok"] and doc["records"][0]["prop4"]["satisfied"]
