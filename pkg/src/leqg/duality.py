"""Free energy, relative entropy and the change of measure behind the dual game.

Nature's controls shift the means of the system noise (gamma) and of the
exploration noise (eta). Everything here is Gaussian-quadratic, so the game
objective is computed exactly by propagating state means and covariances;
Monte Carlo routines exist to check those identities.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from leqg import sampling
from leqg.model import AffinePolicy, ModelSpec, terminal_cost_weights


class DegenerateSample(ArithmeticError):
    pass


@dataclass(eq=False)
class MeasureShift:
    gamma: np.ndarray  # (T, d_x)
    eta: np.ndarray  # (T, d_u)

    def __post_init__(self):
        self.gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        self.eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        if len(self.gamma) != len(self.eta):
            raise ValueError("gamma and eta schedules must have equal length")

    @classmethod
    def zeros(cls, model):
        return cls(np.zeros((model.T, model.dx)), np.zeros((model.T, model.du)))


@dataclass(eq=False)
class NoiseRealization:
    w: np.ndarray  # (..., T, d_x)
    v: np.ndarray  # (..., T, d_u)


@dataclass(frozen=True)
class MCEstimate:
    estimate: float
    std_error: float
    samples: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _inv_quad(S, z):
    """Batched z' S^{-1} z over the time axis; S (T,d,d), z (..., T, d)."""
    Sinv = np.linalg.inv(S)
    return np.einsum("...ti,tij,...tj->...", z, Sinv, z)


def relative_entropy(shift: MeasureShift, model: ModelSpec) -> float:
    """KL divergence of the shifted measure from the reference one."""
    return 0.5 * float(_inv_quad(model.Lambda, shift.gamma) + _inv_quad(model.Xi, shift.eta))


def log_rn_derivative(shift: MeasureShift, noise: NoiseRealization, model: ModelSpec):
    """log dP^{gamma,eta}/dP evaluated on sample path(s); batched over leading axes."""
    Li = np.linalg.inv(model.Lambda)
    Xi = np.linalg.inv(model.Xi)
    g, e = shift.gamma, shift.eta
    lin = np.einsum("ti,tij,...tj->...", g, Li, noise.w) + np.einsum("ti,tij,...tj->...", e, Xi, noise.v)
    return lin - relative_entropy(shift, model)


def cost_G(states, controls, eta, model: ModelSpec, terminal_weights=None):
    """Exploration-integrated cost G_T along state path(s).

    ``states`` (..., T+1, d_x), ``controls`` and ``eta`` (..., T, d_u); eta
    may be None. ``terminal_weights`` = (M_T, m_T) overrides the model's.
    """
    x = np.asarray(states, dtype=float)
    ub = np.asarray(controls, dtype=float)
    w = ub if eta is None else ub + np.asarray(eta, dtype=float)
    xs = x[..., :-1, :]
    xT = x[..., -1, :]
    MT, mT = (model.M_T, model.m_T) if terminal_weights is None else terminal_weights
    trXN = np.einsum("tij,tji->", model.Xi, model.N)
    run = (np.einsum("...ti,ij,...tj->...", xs, model.M, xs)
           + np.einsum("...ti,tij,...tj->...", w, model.N, w)
           + np.einsum("...ti,ij,...tj->...", w, model.Q, xs)
           + np.einsum("...ti,i->...", xs, model.m)
           + np.einsum("...ti,i->...", w, model.n))
    return run + trXN + np.einsum("...i,ij,...j->...", xT, MT, xT) + xT @ mT


def log_mean_exp(values):
    """(log of the sample mean of exp(values), delta-method standard error)."""
    values = np.asarray(values, dtype=float)
    mx = values.max()
    if not np.isfinite(mx):
        raise DegenerateSample("all exponential weights underflowed")
    weights = np.exp(values - mx)
    mean = weights.mean()
    n = len(values)
    se = weights.std(ddof=1) / (math.sqrt(n) * mean) if n > 1 else math.inf
    return float(mx + math.log(mean)), float(se)


def _policy(gains):
    if isinstance(gains, AffinePolicy):
        return gains
    return AffinePolicy.from_gains(gains)


def free_energy_mc(model: ModelSpec, gains, samples: int, seed: int, terminal="theorem",
                   workers=1, chunk=1 << 17) -> MCEstimate:
    """Monte Carlo estimate of ln E_P[exp(theta G_T)] under the feedback u = Du x + du."""
    if samples < 1000:
        raise ValueError("free_energy_mc needs at least 1000 samples")
    pol = _policy(gains)
    ref = AffinePolicy(pol.D, pol.d, np.zeros_like(pol.E), np.zeros_like(pol.e),
                       np.zeros_like(pol.F), np.zeros_like(pol.f))
    tw = terminal_cost_weights(model, terminal)
    vals = np.empty(samples)
    for start in range(0, samples, chunk):
        n = min(chunk, samples - start)
        paths = sampling.sample_paths(model, ref, n, seed, shifted=False, start=start,
                                      workers=workers, stream="free-energy")
        vals[start:start + n] = model.theta * cost_G(paths["x"], paths["u"], None, model, tw)
    est, se = log_mean_exp(vals)
    return MCEstimate(est, se, samples, seed)


def propagate_moments(model: ModelSpec, policy: AffinePolicy):
    """State means (T+1, d_x) and covariances (T+1, d_x, d_x) under the shifted measure."""
    T, dx = model.T, model.dx
    mu = np.empty((T + 1, dx))
    Sig = np.empty((T + 1, dx, dx))
    mu[0], Sig[0] = model.x0, 0.0
    B = model.B
    for t in range(T):
        Acl = model.A + B @ (policy.D[t] + policy.F[t]) + policy.E[t]
        c = model.a + B @ (policy.d[t] + policy.f[t]) + policy.e[t]
        mu[t + 1] = Acl @ mu[t] + c
        Sig[t + 1] = Acl @ Sig[t] @ Acl.T + model.Lambda[t] + B @ model.Xi[t] @ B.T
    return mu, Sig


def _expect_quad(S, mu, Sig, L=None, l=None):
    """E[(Lx+l)' S (Lx+l)] for x ~ (mu, Sig)."""
    if L is None:
        return float(mu @ S @ mu + np.trace(S @ Sig))
    m = L @ mu + l
    return float(m @ S @ m + np.trace(L.T @ S @ L @ Sig))


def game_objective(model: ModelSpec, policy, shift: MeasureShift | None = None,
                   terminal="theorem") -> float:
    """Exact E^{gamma,eta}[theta G_T] minus the relative-entropy penalty.

    ``policy`` is an AffinePolicy or a list of GainSets; an open-loop ``shift``
    replaces the policy's feedback shifts.
    """
    if not isinstance(policy, AffinePolicy):
        pol = AffinePolicy.from_gains(policy, shift)
    elif shift is not None:
        pol = AffinePolicy(policy.D, policy.d, np.zeros_like(policy.E), shift.gamma,
                           np.zeros_like(policy.F), shift.eta)
    else:
        pol = policy
    mu, Sig = propagate_moments(model, pol)
    th = model.theta
    total = 0.0
    for t in range(model.T):
        m, S = mu[t], Sig[t]
        W, c = pol.D[t] + pol.F[t], pol.d[t] + pol.f[t]
        N = model.N[t]
        wm = W @ m + c
        run = (_expect_quad(model.M, m, S) + np.trace(model.Xi[t] @ N)
               + _expect_quad(N, m, S, W, c)
               + float(m @ W.T @ model.Q @ m + np.trace(W.T @ model.Q @ S) + c @ model.Q @ m)
               + m @ model.m + wm @ model.n)
        pen = (_expect_quad(np.linalg.inv(model.Lambda[t]), m, S, pol.E[t], pol.e[t])
               + _expect_quad(np.linalg.inv(model.Xi[t]), m, S, pol.F[t], pol.f[t]))
        total += th * run - 0.5 * pen
    MT, mT = terminal_cost_weights(model, terminal)
    total += th * (_expect_quad(MT, mu[-1], Sig[-1]) + mu[-1] @ mT)
    return float(total)


def rn_shape_check(model: ModelSpec, gains, samples: int, seed: int, terminal="theorem"):
    """Compare log of the exponentially tilted density with the mean-shift density.

    On paths drawn under P, returns the correlation between
    theta G_T - ln mean(exp(theta G_T)) and log dP^{gamma*,eta*}/dP with the
    shifts evaluated along each path, plus the mean absolute gap after
    removing the best additive constant.
    """
    pol = _policy(gains)
    paths = sampling.sample_paths(model, pol, samples, seed, shifted=False, stream="rn-shape")
    tw = terminal_cost_weights(model, terminal)
    tilt = model.theta * cost_G(paths["x"], paths["u"], None, model, tw)
    tilt = tilt - log_mean_exp(tilt)[0]
    Li = np.linalg.inv(model.Lambda)
    Xi = np.linalg.inv(model.Xi)
    g, e = paths["gamma"], paths["eta"]
    lrn = (np.einsum("nti,tij,ntj->n", g, Li, paths["w"]) - 0.5 * np.einsum("nti,tij,ntj->n", g, Li, g)
           + np.einsum("nti,tij,ntj->n", e, Xi, paths["v"]) - 0.5 * np.einsum("nti,tij,ntj->n", e, Xi, e))
    corr = float(np.corrcoef(tilt, lrn)[0, 1])
    gap = tilt - lrn
    return {"correlation": corr, "gap_spread": float(np.mean(np.abs(gap - gap.mean())))}
