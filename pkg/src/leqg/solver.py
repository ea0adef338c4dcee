"""Backward recursion for the quadratic value function of the dual LQG game."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from leqg import conditions
from leqg.model import FrakturSet, GainSet, ModelSpec, ValueQuad, terminal_value

COND_LIMIT = 1e12


class NumericalError(ArithmeticError):
    pass


class SingularB1(NumericalError):
    pass


class SingularG(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class NotScalar(ValueError):
    pass


@dataclass(eq=False)
class Solution:
    """Everything produced by one backward sweep.

    ``value[t]`` for t=0..T, ``gains[t]`` and ``fraktur[t]`` for t=0..T-1,
    where ``fraktur[t]`` is built from ``value[t+1]`` and model data at t.
    """

    model: ModelSpec
    value: list
    gains: list
    fraktur: list
    terminal: str = "theorem"
    checks: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.model.T

    @property
    def saddle_verified(self) -> bool:
        return all(not c.violations for c in self.checks)

    @property
    def status(self) -> str:
        return "saddle-verified" if self.saddle_verified else "saddle-unverified"


def _factor(X, err, name):
    if not np.all(np.isfinite(X)) or np.linalg.cond(X) > COND_LIMIT:
        raise err(f"{name} is numerically singular (condition number {np.linalg.cond(X):.3g})")
    return lu_factor(X)


def fraktur_coeffs(vnext: ValueQuad, t: int, model: ModelSpec) -> FrakturSet:
    if not 0 <= t < model.T:
        raise IndexError(f"t={t} outside [0, {model.T - 1}]")
    P, p = vnext.P, vnext.p
    th, A, B, a = model.theta, model.A, model.B, model.a
    BtP = B.T @ P
    B1 = BtP @ B + 2.0 * th * model.N[t]
    B2 = P - model.Lambda_inv(t)
    C = BtP
    lu = _factor(B1, SingularB1, "B1")
    G = C.T @ lu_solve(lu, C) - B2
    return FrakturSet(
        A1=BtP @ A + th * model.Q,
        a1=BtP @ a + B.T @ p + th * model.n,
        A2=P.T @ A,
        a2=P.T @ a + p,
        B1=B1,
        B2=B2,
        B3=-model.Xi_inv(t) + B1,
        C=C,
        G=G,
    )


def _saddle_quadratic(f: FrakturSet):
    """Quadratic coefficients (Qf, qf, kf) of F at its stationary point.

    Eliminating u leaves -1/2 s'B1^{-1}s + 1/2 k'G^{-1}k with s = A1 x + a1 and
    k = (A2 - C'B1^{-1}A1) x + (a2 - C'B1^{-1}a1); expanding gives the
    recursion terms in symmetric form.
    """
    lu = _factor(f.B1, SingularB1, "B1")
    glu = _factor(f.G, SingularG, "G")
    dx = f.A1.shape[1]
    rhs = lu_solve(lu, np.column_stack([f.A1, f.a1]))
    Binv_A1, Binv_a1 = rhs[:, :dx], rhs[:, dx]
    K2 = f.A2 - f.C.T @ Binv_A1
    k2 = f.a2 - f.C.T @ Binv_a1
    Ginv = lu_solve(glu, np.column_stack([K2, k2]))
    Ginv_K2, Ginv_k2 = Ginv[:, :dx], Ginv[:, dx]
    Qf = -f.A1.T @ Binv_A1 + K2.T @ Ginv_K2
    qf = -f.A1.T @ Binv_a1 + K2.T @ Ginv_k2
    kf = -0.5 * f.a1 @ Binv_a1 + 0.5 * k2 @ Ginv_k2
    return Qf, qf, float(kf)


def stationary_controls(f: FrakturSet, x):
    """Stationary point (u*, gamma*, eta*) of F at state x; eta* is exactly zero."""
    x = np.asarray(x, dtype=float)
    g = gains_from_fraktur(f)
    u, gam, eta = g.controls(x)
    return u, gam, eta


def _kkt(f: FrakturSet):
    return np.block([[f.B1, f.C], [f.C.T, f.B2]])


def gains_from_fraktur(f: FrakturSet) -> GainSet:
    """Solve the first-order system for the affine gains.

    B1 u + C g = -(A1 x + a1),  C'u + B2 g = -(A2 x + a2), with eta = 0.
    All columns of [x-basis | constant] are solved against one factorization.
    """
    du, dx = f.A1.shape
    K = _kkt(f)
    if not np.all(np.isfinite(K)) or np.linalg.cond(K) > COND_LIMIT:
        raise SingularSystem("first-order system for (u, gamma) is singular")
    rhs = -np.block([[f.A1, f.a1[:, None]], [f.A2, f.a2[:, None]]])
    sol = np.linalg.solve(K, rhs)
    return GainSet(
        Du=sol[:du, :dx], du=sol[:du, dx],
        Dg=sol[du:, :dx], dg=sol[du:, dx],
        Deta=np.zeros((du, dx)), deta=np.zeros(du),
    )


def closed_form_controls(f: FrakturSet, x):
    """Scalar-case explicit formulas for (u*, gamma*); kept only as a cross-check."""
    if f.B1.shape != (1, 1) or f.B2.shape != (1, 1):
        raise NotScalar("explicit control formulas only type-check in the scalar case")
    B1, B2, C = f.B1.item(), f.B2.item(), f.C.item()
    A1, A2, a1, a2 = f.A1.item(), f.A2.item(), f.a1.item(), f.a2.item()
    x = float(np.asarray(x).reshape(-1)[0])
    det = B1 * B2 - C * C
    u = ((A2 * C - A1 * B2) * x + (C * a2 - B2 * a1)) / det
    g = ((A1 * C - A2 * B1) * x + (C * a1 - B1 * a2)) / det
    return np.array([u]), np.array([g]), np.zeros(1)


def backward_step(vnext: ValueQuad, t: int, model: ModelSpec):
    """One step of the recursion: value at t from value at t+1."""
    f = fraktur_coeffs(vnext, t, model)
    Qf, qf, kf = _saddle_quadratic(f)
    P1, p1, r1 = vnext.P, vnext.p, vnext.r
    A, B, a, th = model.A, model.B, model.a, model.theta
    Lam, Xi, N = model.Lambda[t], model.Xi[t], model.N[t]
    P = Qf + 2.0 * (th * model.M + 0.5 * A.T @ P1 @ A)
    P = 0.5 * (P + P.T)
    p = qf + A.T @ P1 @ a + th * model.m + A.T @ p1
    # B Xi B' is the covariance of B v; the trace is invariant to that ordering
    r = (kf + 0.5 * np.trace(B @ Xi @ B.T @ P1) + 0.5 * np.trace(Lam @ P1) + r1
         + 0.5 * a @ P1 @ a + a @ p1 + th * np.trace(Xi @ N))
    return ValueQuad(P, p, float(r)), f, gains_from_fraktur(f)


def solve(model: ModelSpec, terminal: str = "theorem") -> Solution:
    """Full backward sweep t = T-1, ..., 0.

    Saddle conditions are evaluated at every step; a failure does not stop
    the sweep but marks the solution ``saddle-unverified``.
    """
    T = model.T
    value = [None] * (T + 1)
    gains = [None] * T
    fraktur = [None] * T
    value[T] = terminal_value(model, terminal)
    for t in range(T - 1, -1, -1):
        value[t], fraktur[t], gains[t] = backward_step(value[t + 1], t, model)
    checks = [conditions.check_assumption1(f, t=t) for t, f in enumerate(fraktur)]
    return Solution(model, value, gains, fraktur, terminal, checks)


def value_at(sol: Solution, t: int, x) -> float:
    return sol.value[t](x)


@dataclass(frozen=True)
class CriterionValues:
    log_inf_I: float
    inf_I: float
    sup_J: float
    overflow: bool


def criterion_transforms(sol: Solution) -> CriterionValues:
    """inf I = exp(V_0(x0)) and sup J = -V_0(x0)/theta."""
    v0 = value_at(sol, 0, sol.model.x0)
    overflow = v0 > math.log(np.finfo(float).max)
    inf_I = math.inf if overflow else math.exp(v0)
    return CriterionValues(v0, inf_I, -v0 / sol.model.theta, overflow)


def lemma1_expectation(vnext: ValueQuad, x, u, gamma, eta, t: int, model: ModelSpec,
                       Lambda=None, Xi=None) -> float:
    """Closed-form E[V_{t+1}(x_{t+1})] under the shifted measure.

    ``Lambda``/``Xi`` override the covariances used in the trace terms.
    """
    P, p, r = vnext.P, vnext.p, vnext.r
    Lam = model.Lambda[t] if Lambda is None else np.atleast_2d(Lambda)
    Xi_ = model.Xi[t] if Xi is None else np.atleast_2d(Xi)
    B = model.B
    x, u, gamma, eta = (np.asarray(v, dtype=float) for v in (x, u, gamma, eta))
    mean = model.a + model.A @ x + B @ u
    Beta = B @ eta
    val = (0.5 * mean @ P @ mean + 0.5 * gamma @ P @ gamma + 0.5 * Beta @ P @ Beta
           + Beta @ P @ gamma + mean @ p + gamma @ p + Beta @ p
           + mean @ P @ gamma + mean @ P @ Beta
           + 0.5 * np.trace(B @ Xi_ @ B.T @ P) + 0.5 * np.trace(Lam @ P) + r)
    return float(val)


def running_cost(x, u, eta, t: int, model: ModelSpec) -> float:
    """Exploration-integrated running cost at time t (without theta)."""
    w = np.asarray(u, dtype=float) + np.asarray(eta, dtype=float)
    x = np.asarray(x, dtype=float)
    N = model.N[t]
    return float(x @ model.M @ x + np.trace(model.Xi[t] @ N) + w @ N @ w
                 + w @ model.Q @ x + x @ model.m + w @ model.n)


def hamiltonian(vnext: ValueQuad, x, u, gamma, eta, t: int, model: ModelSpec) -> float:
    """Right-hand side of the dynamic programming equation for a fixed control triple."""
    gamma = np.asarray(gamma, dtype=float)
    eta = np.asarray(eta, dtype=float)
    penalty = 0.5 * (gamma @ np.linalg.solve(model.Lambda[t], gamma)
                     + eta @ np.linalg.solve(model.Xi[t], eta))
    return (model.theta * running_cost(x, u, eta, t, model) - penalty
            + lemma1_expectation(vnext, x, u, gamma, eta, t, model))


# --- export -------------------------------------------------------------------

SOLUTION_COLUMNS = ("t", "P", "p", "r", "Du", "du", "Dg", "dg", "B1", "B2", "B3", "C", "det_negH")


def _flatten(name, value):
    arr = np.asarray(value, dtype=float)
    if arr.size == 1:
        return {name: float(arr.reshape(()))}
    return {f"{name}_{'_'.join(map(str, idx))}": float(v) for idx, v in np.ndenumerate(arr)}


def solution_rows(sol: Solution) -> list[dict]:
    """One record per t; gains and coefficients at t are those applied at time t."""
    rows = []
    for t in range(sol.T + 1):
        v = sol.value[t]
        row = {"t": t}
        row.update(_flatten("P", v.P))
        row.update(_flatten("p", v.p))
        row["r"] = v.r
        if t < sol.T:
            g, f = sol.gains[t], sol.fraktur[t]
            parts = [("Du", g.Du), ("du", g.du), ("Dg", g.Dg), ("dg", g.dg),
                     ("B1", f.B1), ("B2", f.B2), ("B3", f.B3), ("C", f.C)]
            for name, val in parts:
                row.update(_flatten(name, val))
            row["det_negH"] = float(np.linalg.det(f.negH))
        rows.append(row)
    return rows


def _columns(rows):
    cols = []
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    return cols


def solution_csv(sol: Solution) -> str:
    rows = solution_rows(sol)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_columns(rows), restval="", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def solution_json(sol: Solution) -> str:
    doc = {
        "model": sol.model.digest(),
        "terminal": sol.terminal,
        "status": sol.status,
        "rows": solution_rows(sol),
    }
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"
