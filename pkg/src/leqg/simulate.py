"""Forward simulation, re-estimation of (A, B) and the episodic procedure."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from leqg import conditions, duality, sampling, solver
from leqg.model import AffinePolicy, ModelSpec, terminal_cost_weights

MEASURES = ("reference", "shifted")


class RankDeficient(np.linalg.LinAlgError):
    pass


class ConditionsUnsatisfiable(RuntimeError):
    pass


@dataclass(eq=False)
class Trajectory:
    """One realized path. ``running_cost[t]`` excludes theta."""

    x: np.ndarray  # (T+1, dx)
    u: np.ndarray  # (T, du)
    gamma: np.ndarray  # (T, dx)
    eta: np.ndarray  # (T, du)
    w: np.ndarray  # (T, dx)
    v: np.ndarray  # (T, du)
    running_cost: np.ndarray  # (T,)
    terminal_cost: float
    measure: str
    seed: int

    @property
    def T(self):
        return len(self.u)

    def transitions(self):
        """(x_t, applied control u_t + v_t, x_{t+1}) triples."""
        return [(self.x[t], self.u[t] + self.v[t], self.x[t + 1]) for t in range(self.T)]


@dataclass(eq=False)
class EstimateRecord:
    A_hat: np.ndarray
    B_hat: np.ndarray
    residual_cov: np.ndarray
    n: int
    A_std: np.ndarray = None
    B_std: np.ndarray = None


def _running_costs(model, x, u, eta):
    """Per-step exploration-integrated costs, batched: returns (..., T)."""
    xs = x[..., :-1, :]
    w = u + eta
    trXN = np.einsum("tij,tji->t", model.Xi, model.N)
    return (np.einsum("...ti,ij,...tj->...t", xs, model.M, xs)
            + np.einsum("...ti,tij,...tj->...t", w, model.N, w)
            + np.einsum("...ti,ij,...tj->...t", w, model.Q, xs)
            + xs @ model.m + w @ model.n + trXN)


def _check_measure(measure):
    if measure not in MEASURES:
        raise ValueError(f"measure must be one of {MEASURES}, got {measure!r}")


def _batch(model, sol, measure, n, seed, start=0):
    _check_measure(measure)
    pol = AffinePolicy.from_gains(sol.gains)
    paths = sampling.sample_paths(model, pol, n, seed, shifted=(measure == "shifted"),
                                  start=start, stream="trajectory")
    MT, mT = terminal_cost_weights(model, sol.terminal)
    xT = paths["x"][:, -1]
    paths["running_cost"] = _running_costs(model, paths["x"], paths["u"], paths["eta"])
    paths["terminal_cost"] = np.einsum("ni,ij,nj->n", xT, MT, xT) + xT @ mT
    return paths


def run_trajectory(model: ModelSpec, sol, measure: str, seed: int, run_index: int = 0) -> Trajectory:
    """Simulate one path with the solution's feedback gains.

    Under ``reference`` the noises are centred; under ``shifted`` they are
    centred at gamma*(x_t) and eta*(x_t) evaluated at the realized state.
    """
    p = _batch(model, sol, measure, 1, seed, start=run_index)
    return Trajectory(x=p["x"][0], u=p["u"][0], gamma=p["gamma"][0], eta=p["eta"][0],
                      w=p["w"][0], v=p["v"][0], running_cost=p["running_cost"][0],
                      terminal_cost=float(p["terminal_cost"][0]), measure=measure, seed=seed)


@dataclass(eq=False)
class BatchSummary:
    x_mean: np.ndarray
    x_var: np.ndarray
    u_mean: np.ndarray
    u_var: np.ndarray
    w_mean: np.ndarray
    gamma_mean: np.ndarray
    theta_G_mean: float
    theta_G: np.ndarray
    n_runs: int
    seed: int


def run_batch(model: ModelSpec, sol, measure: str, n_runs: int, seed: int) -> BatchSummary:
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    p = _batch(model, sol, measure, n_runs, seed)
    thG = model.theta * (p["running_cost"].sum(axis=1) + p["terminal_cost"])
    ddof = 1 if n_runs > 1 else 0
    return BatchSummary(
        x_mean=p["x"].mean(axis=0), x_var=p["x"].var(axis=0, ddof=ddof),
        u_mean=p["u"].mean(axis=0), u_var=p["u"].var(axis=0, ddof=ddof),
        w_mean=p["w"].mean(axis=0), gamma_mean=p["gamma"].mean(axis=0),
        theta_G_mean=float(thG.mean()), theta_G=thG, n_runs=n_runs, seed=seed,
    )


def estimate_ab(transitions, prior: ModelSpec) -> EstimateRecord:
    """Least-squares fit of x_{t+1} - a on [x_t; applied control], drift a known."""
    X = np.array([np.concatenate([np.atleast_1d(x), np.atleast_1d(u)]) for x, u, _ in transitions])
    Y = np.array([np.atleast_1d(y) for _, _, y in transitions]) - prior.a
    dx = prior.dx
    k = X.shape[1]
    if len(X) < k:
        raise RankDeficient(f"need at least {k} transitions, got {len(X)}")
    coef, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    if rank < k:
        raise RankDeficient(f"regressor matrix has rank {rank} < {k}")
    resid = Y - X @ coef
    dof = len(X) - k
    cov = resid.T @ resid / dof if dof > 0 else np.zeros((dx, dx))
    XtX_inv = np.linalg.inv(X.T @ X)
    # coef[:, i] are the coefficients for state component i; no residual dof -> unknown spread
    std = np.sqrt(np.outer(np.diag(XtX_inv), np.diag(cov))) if dof > 0 else np.full((k, dx), np.nan)
    theta = coef.T
    return EstimateRecord(A_hat=theta[:, :dx], B_hat=theta[:, dx:], residual_cov=cov, n=len(X),
                          A_std=std.T[:, :dx], B_std=std.T[:, dx:])


# --- the episodic procedure -----------------------------------------------------

def _choose_xi(model, sol, margin=2.0):
    """Shrink Xi_t where the exploration bound fails; returns (Xi schedule, reports)."""
    Xi = model.Xi.copy()
    bounds = []
    for t in range(model.T):
        b = conditions.prop4_bounds(model, sol.value[t + 1].P, t)
        if not np.isfinite(b.Xi_inv_lower):
            raise ConditionsUnsatisfiable(f"t={t}: exploration bound is not finite")
        # the printed bound alone does not force det(-H) > 0 when P_{t+1} > 0
        lower = max(b.Xi_inv_lower, b.Xi_inv_det_lower) if np.isfinite(b.Xi_inv_det_lower) else b.Xi_inv_lower
        if b.Xi_inv <= lower:
            if lower <= 0:
                raise ConditionsUnsatisfiable(f"t={t}: no positive definite Xi satisfies the bound")
            Xi[t] = 1.0 / (margin * lower)
        bounds.append(b)
    return Xi, bounds


@dataclass
class Episode:
    episode: int
    A_hat: list
    B_hat: list
    A_std: list | None
    B_std: list | None
    n_transitions: int
    saddle_ok: bool
    bounds_ok: bool
    violations: list
    mean_cost: float | None
    V0: float

    def to_json(self):
        return json.dumps(self.__dict__)


def procedure_recursion(A_hat, B_hat, true_model: ModelSpec, n_episodes: int, seed: int,
                        transitions: int = 1000, measure: str = "reference", pool: bool = True,
                        terminal: str = "theorem"):
    """Alternate backward solves on estimated (A, B) with data collection and re-estimation.

    Data come from the true system driven by the current estimated gains plus
    unbiased exploration. Returns the list of per-episode records; entry 0 is
    the initial backward pass.
    """
    _check_measure(measure)
    A_hat = np.atleast_2d(np.asarray(A_hat, dtype=float))
    B_hat = np.atleast_2d(np.asarray(B_hat, dtype=float))
    log = []
    data = []
    est = None
    runs_per_episode = math.ceil(transitions / true_model.T)
    run_counter = 0
    for ep in range(n_episodes + 1):
        est_model = true_model.replace(A=A_hat, B=B_hat)
        sol = solver.solve(est_model, terminal=terminal)
        bounds_ok, violations = True, []
        if est_model.is_scalar and est_model.theta > 0:
            Xi, bounds = _choose_xi(est_model, sol)
            bounds_ok = all(b.satisfied for b in bounds)
            if not np.array_equal(Xi, est_model.Xi):
                est_model = est_model.replace(Xi=Xi)
                sol = solver.solve(est_model, terminal=terminal)
        report = conditions.check_full_horizon(sol)
        violations = [f"t={t}: {v}" for t, v in report.violations]
        mean_cost = None
        if ep < n_episodes:
            # the real system: true (A, B), gains from the estimated model
            sim_model = true_model.replace(Xi=est_model.Xi)
            sim_sol = solver.Solution(sim_model, sol.value, sol.gains, sol.fraktur, sol.terminal)
            p = _batch(sim_model, sim_sol, measure, runs_per_episode, seed, start=run_counter)
            run_counter += runs_per_episode
            x, ua = p["x"], p["u"] + p["v"]
            new = [(x[i, t], ua[i, t], x[i, t + 1]) for i in range(x.shape[0]) for t in range(true_model.T)]
            new = new[:transitions]
            data = data + new if pool else new
            mean_cost = float((p["running_cost"].sum(axis=1) + p["terminal_cost"]).mean())
        log.append(Episode(
            episode=ep, A_hat=A_hat.tolist(), B_hat=B_hat.tolist(),
            A_std=None if est is None else est.A_std.tolist(),
            B_std=None if est is None else est.B_std.tolist(),
            n_transitions=len(data), saddle_ok=report.ok, bounds_ok=bounds_ok,
            violations=violations, mean_cost=mean_cost, V0=sol.value[0](true_model.x0),
        ))
        if ep < n_episodes:
            est = estimate_ab(data, true_model)
            A_hat, B_hat = est.A_hat, est.B_hat
    if est is not None:
        log[-1].A_std, log[-1].B_std = est.A_std.tolist(), est.B_std.tolist()
        log.append(Episode(episode=n_episodes + 1, A_hat=A_hat.tolist(), B_hat=B_hat.tolist(),
                           A_std=est.A_std.tolist(), B_std=est.B_std.tolist(), n_transitions=len(data),
                           saddle_ok=report.ok, bounds_ok=bounds_ok, violations=[], mean_cost=None,
                           V0=solver.solve(true_model.replace(A=A_hat, B=B_hat), terminal=terminal).value[0](true_model.x0)))
    return log


def episodes_jsonl(log) -> str:
    return "".join(e.to_json() + "\n" for e in log)


# --- table export ---------------------------------------------------------------

TABLE_COLUMNS = ("t", "x_P", "x_Pstar", "P", "p", "r", "V", "u_star", "gamma_star", "eta_star",
                 "B1", "B2", "B3", "C", "det_negH")
DETERMINISTIC_COLUMNS = ("P", "p", "r", "B1", "B2", "B3", "C", "det_negH")


def table3_rows(sol, ref: Trajectory, shifted: Trajectory) -> list[dict]:
    """Rows t=0..T in the published layout (scalar models).

    Row t carries the coefficients built from P_t (so row 0 has none), while
    the controls at row t come from the coefficients built from P_{t+1}; V
    and the controls are evaluated at the state under the shifted measure.
    """
    if not sol.model.is_scalar:
        raise solver.NotScalar("the published table layout is scalar-only")
    T = sol.T
    rows = []
    for t in range(T + 1):
        v = sol.value[t]
        xs = shifted.x[t]
        row = {"t": t, "x_P": ref.x[t].item(), "x_Pstar": xs.item(), "P": v.P.item(),
               "p": v.p.item(), "r": v.r, "V": v(xs)}
        if t < T:
            u, g, e = sol.gains[t].controls(xs)
            row.update(u_star=u.item(), gamma_star=g.item(), eta_star=e.item())
        if t >= 1:
            f = sol.fraktur[t - 1]
            row.update(B1=f.B1.item(), B2=f.B2.item(), B3=f.B3.item(), C=f.C.item(),
                       det_negH=float(np.linalg.det(f.negH)))
        rows.append(row)
    return rows


def table3_csv(rows, decimals=None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, restval="", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        if decimals is None:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        else:
            writer.writerow({k: (f"{v:.{decimals}f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
