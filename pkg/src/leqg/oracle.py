"""Brute-force cross-checks for the analytic solver.

Everything here is deliberately naive: F is evaluated term by term, saddles
are found by repeated exact best responses, expectations by tensor
Gauss-Hermite quadrature, and the dynamic programming step by grid search.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from leqg import solver
from leqg.model import AffinePolicy, FrakturSet, ModelSpec, ValueQuad, terminal_cost_weights, terminal_value


class NoConvergence(RuntimeError):
    pass


class GridTooCoarse(RuntimeError):
    pass


def _vec(v):
    return np.atleast_1d(np.asarray(v, dtype=float))


def eval_F(f: FrakturSet, x, u, gamma, eta) -> float:
    """F(u, gamma, eta) at state x, one line per printed term."""
    x, u, g, e = _vec(x), _vec(u), _vec(gamma), _vec(eta)
    s1 = f.A1 @ x + f.a1
    s2 = f.A2 @ x + f.a2
    return float(
        0.5 * u @ f.B1 @ u
        + u @ s1
        + 0.5 * g @ f.B2 @ g
        + g @ s2
        + 0.5 * e @ f.B3 @ e
        + e @ s1
        + u @ f.C @ g
        + u @ f.B1 @ e
        + e @ f.C @ g
    )


def fd_gradient_F(f: FrakturSet, x, u, gamma, eta, h=1e-5):
    """Central-difference gradient of F with respect to (u, gamma, eta), stacked."""
    z0 = np.concatenate([_vec(u), _vec(gamma), _vec(eta)])
    du, dx = len(_vec(u)), len(_vec(gamma))

    def F(z):
        return eval_F(f, x, z[:du], z[du:du + dx], z[du + dx:])

    grad = np.empty_like(z0)
    for i in range(len(z0)):
        step = np.zeros_like(z0)
        step[i] = h
        grad[i] = (F(z0 + step) - F(z0 - step)) / (2 * h)
    return grad


def _fd_quadratic(fun, z0, h=1.0):
    """Gradient and Hessian of a quadratic by central differences (exact up to round-off)."""
    n = len(z0)
    E = np.eye(n) * h
    f0 = fun(z0)
    g = np.array([(fun(z0 + E[i]) - fun(z0 - E[i])) / (2 * h) for i in range(n)])
    H = np.empty((n, n))
    for i in range(n):
        H[i, i] = (fun(z0 + E[i]) - 2 * f0 + fun(z0 - E[i])) / h**2
        for j in range(i):
            H[i, j] = H[j, i] = (fun(z0 + E[i] + E[j]) - fun(z0 + E[i] - E[j])
                                 - fun(z0 - E[i] + E[j]) + fun(z0 - E[i] - E[j])) / (4 * h * h)
    return g, H


def _inner_best_response(f, x, u, z0):
    """Exact maximizer of F(u, ., .) over (gamma, eta) from finite-difference derivatives."""
    dx = f.A2.shape[0]
    fun = lambda z: eval_F(f, x, u, z[:dx], z[dx:])
    g, H = _fd_quadratic(fun, z0)
    if np.linalg.eigvalsh(0.5 * (H + H.T)).max() >= 0:
        raise NoConvergence("F is not strictly concave in (gamma, eta)")
    return z0 - np.linalg.solve(H, g)


def numeric_saddle_F(f: FrakturSet, x, tol=1e-10, max_sweeps=10_000, method="nested"):
    """Numeric saddle point of F at state x by exact best responses.

    ``nested`` (default) alternates an exact inner maximization over
    (gamma, eta) with an exact Newton step on u for the resulting upper
    envelope. ``alternating`` swaps plain best responses between u and
    (gamma, eta); it is kept for comparison and does not converge when the
    u-eta coupling through B1 is strong.
    """
    du, dx = f.A1.shape
    x = _vec(x)
    u = np.zeros(du)
    z = np.zeros(dx + du)
    for _ in range(max_sweeps):
        if max(np.abs(u).max(), np.abs(z).max()) > 1e6 * max(1.0, np.abs(x).max()):
            break  # diverging; finite differences would lose all precision
        if method == "nested":
            def phi(uu):
                zz = _inner_best_response(f, x, uu, z)
                return eval_F(f, x, uu, zz[:dx], zz[dx:])
            g, H = _fd_quadratic(phi, u)
            if np.linalg.eigvalsh(0.5 * (H + H.T)).min() <= 0:
                raise NoConvergence("upper envelope of F is not strictly convex in u")
            u_new = u - np.linalg.solve(H, g)
        elif method == "alternating":
            g, H = _fd_quadratic(lambda uu: eval_F(f, x, uu, z[:dx], z[dx:]), u)
            if np.linalg.eigvalsh(0.5 * (H + H.T)).min() <= 0:
                raise NoConvergence("F is not strictly convex in u")
            u_new = u - np.linalg.solve(H, g)
        else:
            raise ValueError(f"unknown method {method!r}")
        z_new = _inner_best_response(f, x, u_new, z)
        step = max(np.abs(u_new - u).max(), np.abs(z_new - z).max())
        u, z = u_new, z_new
        if step < tol * max(1.0, np.abs(np.concatenate([u, z])).max()):
            return u, z[:dx], z[dx:]
    raise NoConvergence(f"best-response iteration did not settle within {max_sweeps} sweeps "
                        "(diverged or conditions likely violated)")


# --- exponential criterion ------------------------------------------------------------

def _u_gains(model, gains):
    pol = gains if isinstance(gains, AffinePolicy) else AffinePolicy.from_gains(gains)
    return pol.D, pol.d


def _check_scalar_tiny(model, T_max=3):
    if not model.is_scalar:
        raise solver.NotScalar("quadrature and grid oracles are scalar-only")
    if model.T > T_max:
        raise ValueError(f"horizon {model.T} too long for brute force (max {T_max})")


def _theta_G_paths(model, D, d, eps, tw):
    """theta * G_T for scalar paths driven by combined noises eps (..., T)."""
    x = np.full(eps.shape[:-1], float(model.x0[0]))
    A, B, a = model.A.item(), model.B.item(), model.a.item()
    M, Q, m, n = model.M.item(), model.Q.item(), model.m.item(), model.n.item()
    total = np.zeros_like(x)
    for t in range(model.T):
        N = model.N[t].item()
        u = D[t].item() * x + d[t].item()
        total += M * x * x + N * u * u + u * Q * x + m * x + n * u + model.Xi[t].item() * N
        x = a + A * x + B * u + eps[..., t]
    MT, mT = tw[0].item(), tw[1].item()
    total += MT * x * x + mT * x
    return model.theta * total


def quadrature_log_moment(model: ModelSpec, gains, nodes: int = 64, terminal: str = "theorem",
                          chunk: int = 1 << 20) -> float:
    """ln E_P[exp(theta G_T)] by tensor Gauss-Hermite quadrature, feedback u = D x + d.

    For T <= 2 the product rule runs over every w_t and v_t separately. For
    T = 3 each pair enters the state only through w_t + B v_t, a scalar
    Gaussian, so the rule runs over those T sums instead.
    """
    _check_scalar_tiny(model)
    D, d = _u_gains(model, gains)
    tw = terminal_cost_weights(model, terminal)
    z, wts = hermegauss(nodes)
    logw = np.log(wts / math.sqrt(2 * math.pi))
    T = model.T
    sl = np.sqrt(model.Lambda[:, 0, 0])
    sv = np.sqrt(model.Xi[:, 0, 0]) * model.B.item()
    full = T <= 2
    if full:
        dims = 2 * T
        scale = None
    else:
        dims = T
        scale = np.sqrt(sl**2 + sv**2)
    total = nodes**dims
    parts = []
    for start in range(0, total, chunk):
        idx = np.unravel_index(np.arange(start, min(start + chunk, total)), (nodes,) * dims)
        idx = np.stack(idx, axis=-1)
        lw = logw[idx].sum(axis=-1)
        zz = z[idx]
        if full:
            eps = zz[:, :T] * sl + zz[:, T:] * sv
        else:
            eps = zz * scale
        parts.append(logsumexp(lw + _theta_G_paths(model, D, d, eps, tw)))
    return float(logsumexp(parts))


def exact_log_moment(model: ModelSpec, gains, terminal: str = "theorem") -> float:
    """ln E_P[exp(theta G_T)] in closed form for a Gaussian quadratic form.

    Writing theta G_T = z'Sz/2 + b'z + c in the stacked standard normals z,
    the moment is -1/2 logdet(I - S) + 1/2 b'(I - S)^{-1} b + c, and +inf
    when I - S is not positive definite.
    """
    D, d = _u_gains(model, gains)
    MT, mT = terminal_cost_weights(model, terminal)
    T, dx, du = model.T, model.dx, model.du
    nz = T * (dx + du)
    th = model.theta
    mean = np.asarray(model.x0, dtype=float).copy()
    X = np.zeros((dx, nz))
    S = np.zeros((nz, nz))
    b = np.zeros(nz)
    c = 0.0

    def add(W, omega, const, mean, X):
        nonlocal S, b, c
        W = 0.5 * (W + W.T)
        S += 2 * th * X.T @ W @ X
        b += th * X.T @ (2 * W @ mean + omega)
        c += th * (mean @ W @ mean + omega @ mean + const)

    for t in range(T):
        N = model.N[t]
        # running cost as a quadratic in x with u = D x + d
        W = model.M + D[t].T @ N @ D[t] + D[t].T @ model.Q
        omega = 2 * D[t].T @ N @ d[t] + model.Q.T @ d[t] + model.m + D[t].T @ model.n
        const = d[t] @ N @ d[t] + model.n @ d[t] + np.trace(model.Xi[t] @ N)
        add(W, omega, const, mean, X)
        Acl = model.A + model.B @ D[t]
        noise = np.zeros((dx, nz))
        off = t * (dx + du)
        noise[:, off:off + dx] = np.linalg.cholesky(model.Lambda[t])
        noise[:, off + dx:off + dx + du] = model.B @ np.linalg.cholesky(model.Xi[t])
        mean = Acl @ mean + model.a + model.B @ d[t]
        X = Acl @ X + noise
    add(MT, mT, 0.0, mean, X)
    IS = np.eye(nz) - S
    eig = np.linalg.eigvalsh(IS)
    if eig.min() <= 0:
        return math.inf
    _, logdet = np.linalg.slogdet(IS)
    return float(-0.5 * logdet + 0.5 * b @ np.linalg.solve(IS, b) + c)


# --- grid dynamic programming -----------------------------------------------------------

def _scalar_hamiltonian(vnext: ValueQuad, x, u, g, e, t, model):
    """Vectorized scalar transcription of the one-step DPP right-hand side."""
    P, p, r = vnext.P.item(), vnext.p.item(), vnext.r
    A, B, a = model.A.item(), model.B.item(), model.a.item()
    M, Q, m, n = model.M.item(), model.Q.item(), model.m.item(), model.n.item()
    lam, xi, N = model.Lambda[t].item(), model.Xi[t].item(), model.N[t].item()
    w = u + e
    run = M * x * x + xi * N + N * w * w + w * Q * x + m * x + n * w
    mean = a + A * x + B * u
    be = B * e
    cont = (0.5 * P * (mean + g + be) ** 2 + p * (mean + g + be)
            + 0.5 * B * B * xi * P + 0.5 * lam * P + r)
    return model.theta * run - 0.5 * (g * g / lam + e * e / xi) + cont


def _zoom_inner(Hfun, us, box, n, tol, max_levels):
    """Per-u grid maximization over (gamma, eta); returns (values, g, e, first-level boundary flags)."""
    lin = np.linspace(-1.0, 1.0, n)
    k = len(us)
    gc = np.full(k, 0.5 * (box[1][0] + box[1][1]))
    ec = np.full(k, 0.5 * (box[2][0] + box[2][1]))
    gw = np.full(k, 0.5 * (box[1][1] - box[1][0]))
    ew = np.full(k, 0.5 * (box[2][1] - box[2][0]))
    edge = None
    rows = np.arange(k)
    for level in range(max_levels):
        gs = gc[:, None] + gw[:, None] * lin
        es = ec[:, None] + ew[:, None] * lin
        H = Hfun(us[:, None, None], gs[:, :, None], es[:, None, :])
        flat = H.reshape(k, -1).argmax(axis=1)
        ig, ie = np.unravel_index(flat, (n, n))
        if level == 0:
            edge = (ig == 0) | (ig == n - 1) | (ie == 0) | (ie == n - 1)
        gc, ec = gs[rows, ig], es[rows, ie]
        # shrink only when the maximizer sits well inside the window
        inside_g = (ig >= n // 4) & (ig <= n - 1 - n // 4)
        inside_e = (ie >= n // 4) & (ie <= n - 1 - n // 4)
        gw = np.where(inside_g & inside_e, gw * 0.25, gw)
        ew = np.where(inside_g & inside_e, ew * 0.25, ew)
        if max(gw.max(), ew.max()) < tol:
            break
    vals = Hfun(us, gc, ec)
    return vals, gc, ec, edge


def _inf_sup(Hfun, box, n=21, tol=1e-9, max_levels=120):
    lin = np.linspace(-1.0, 1.0, n)
    uc = 0.5 * (box[0][0] + box[0][1])
    uw = 0.5 * (box[0][1] - box[0][0])
    for level in range(max_levels):
        us = uc + uw * lin
        vals, gc, ec, edge = _zoom_inner(Hfun, us, box, n, tol, max_levels)
        iu = int(np.argmin(vals))
        if level == 0 and (iu in (0, n - 1) or edge[iu]):
            raise GridTooCoarse("the inf-sup over the control grid hits the grid boundary")
        uc = us[iu]
        if n // 4 <= iu <= n - 1 - n // 4:
            uw *= 0.25
        if uw < tol:
            break
    vals, gc, ec, _ = _zoom_inner(Hfun, np.array([uc]), box, n, tol, max_levels)
    return float(vals[0]), (float(uc), float(gc[0]), float(ec[0]))


@dataclass(eq=False)
class GridDPResult:
    states: np.ndarray
    values: list  # values[t] on the state grid, t = 0..T
    controls: list  # controls[t] (n_states, 3)
    fits: list  # quadratic fits ValueQuad per t

    @property
    def V0(self):
        return self.values[0]


def fit_quadratic(states, values) -> ValueQuad:
    """Least-squares V(x) = P x^2 / 2 + p x + r on a scalar grid."""
    X = np.column_stack([0.5 * states**2, states, np.ones_like(states)])
    coef, *_ = np.linalg.lstsq(X, values, rcond=None)
    return ValueQuad(np.array([[coef[0]]]), np.array([coef[1]]), float(coef[2]))


def dp_grid_value(model: ModelSpec, state_grid, control_box=((-5, 5), (-5, 5), (-5, 5)),
                  terminal: str = "theorem", n_controls: int = 21) -> GridDPResult:
    """Backward grid dynamic programming with inf over u and sup over (gamma, eta).

    The expectation of the next value is taken in closed form; for t < T-1
    the next value is the quadratic least-squares fit of the gridded one.
    ``control_box`` gives (lo, hi) for u, gamma and eta.
    """
    _check_scalar_tiny(model)
    states = np.asarray(state_grid, dtype=float)
    T = model.T
    vT = terminal_value(model, terminal)
    values = [None] * (T + 1)
    controls = [None] * T
    fits = [None] * (T + 1)
    values[T] = np.array([vT(np.array([s])) for s in states])
    fits[T] = vT
    vnext = vT
    for t in range(T - 1, -1, -1):
        vals = np.empty(len(states))
        ctrl = np.empty((len(states), 3))
        for i, s in enumerate(states):
            Hfun = lambda u, g, e, s=s, t=t, vn=vnext: _scalar_hamiltonian(vn, s, u, g, e, t, model)
            vals[i], ctrl[i] = _inf_sup(Hfun, control_box, n=n_controls)
        values[t], controls[t] = vals, ctrl
        fits[t] = fit_quadratic(states, vals)
        vnext = fits[t]
    return GridDPResult(states, values, controls, fits)


# --- reporting ---------------------------------------------------------------------------

def comparison_record(model: ModelSpec, deviations, tol, check: str | None = None) -> dict:
    """{instance_hash, max_deviation, pass} for a set of oracle deviations."""
    dev = np.abs(np.asarray(deviations, dtype=float))
    worst = float(dev.max()) if dev.size else 0.0
    rec = {"instance_hash": model.digest(), "max_deviation": worst, "pass": bool(worst <= tol)}
    if check is not None:
        rec = {"check": check, **rec, "tol": tol}
    return rec


def comparison_report(model: ModelSpec, deviations, tol) -> str:
    return json.dumps(comparison_record(model, deviations, tol), sort_keys=True)


def run_suite(model: ModelSpec, seed: int = 0, terminal: str = "theorem", n_dpp: int = 50,
              brute_horizon: int = 2) -> list[dict]:
    """Every oracle against the analytic solution; one record per check.

    Brute-force checks (quadrature, grid DP) run on the instance truncated
    to ``brute_horizon`` steps and only for scalar models.
    """
    sol = solver.solve(model, terminal=terminal)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x0AC1E])))
    xs = rng.uniform(-2.0, 2.0, size=(model.T, model.dx))
    saddle, station = [], []
    for t, f in enumerate(sol.fraktur):
        ua, ga, ea = solver.stationary_controls(f, xs[t])
        try:
            un, gn, en = numeric_saddle_F(f, xs[t])
            saddle.append(np.abs(np.concatenate([un - ua, gn - ga, en - ea])).max())
        except NoConvergence:
            saddle.append(math.inf)
        station.append(np.abs(fd_gradient_F(f, xs[t], ua, ga, ea)).max())
    resid = []
    for _ in range(n_dpp):
        t = int(rng.integers(model.T))
        x = rng.uniform(-2.0, 2.0, size=model.dx)
        u, g, e = sol.gains[t].controls(x)
        v = sol.value[t](x)
        h = solver.hamiltonian(sol.value[t + 1], x, u, g, e, t, model)
        resid.append(abs(v - h) / max(1.0, abs(v)))
    out = [comparison_record(model, saddle, 1e-8, "numeric_saddle"),
           comparison_record(model, station, 1e-6, "stationarity"),
           comparison_record(model, resid, 1e-8, "dpp_residual")]
    if model.is_scalar:
        small = model.replace(T=min(model.T, brute_horizon))
        ssol = solver.solve(small, terminal=terminal)
        v0 = ssol.value[0](small.x0)
        quad = quadrature_log_moment(small, ssol.gains, terminal=terminal)
        out.append(comparison_record(small, [quad - exact_log_moment(small, ssol.gains, terminal)],
                                     1e-6, "quadrature_vs_exact_moment"))
        out.append(comparison_record(small, [quad - v0], 1e-6, "quadrature_vs_value"))
        try:
            grid = dp_grid_value(small, np.linspace(-2.0, 2.0, 11) + float(small.x0[0]), terminal=terminal)
            dev = [grid.fits[0](small.x0) - v0]
        except GridTooCoarse:
            dev = [math.inf]
        out.append(comparison_record(small, dev, 1e-3, "grid_dp"))
    return out
