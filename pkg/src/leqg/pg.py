"""Natural policy gradient and actor-critic baseline for the affine game.

The controller plays u = D x + d, Nature plays gamma = E x + e and
eta = F x + f. For a fixed policy the value of the game is quadratic, so
with the model known the objective and its gradient are exact (moment
propagation plus a backward policy evaluation); without it, two-point
zeroth-order estimates on simulated rollouts are used.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from leqg import conditions, duality, sampling, solver
from leqg.model import AffinePolicy, ModelSpec, ValueQuad, terminal_cost_weights, terminal_value

log = logging.getLogger(__name__)

PolicyParams = AffinePolicy
EPS_COV = 1e-8


class Diverged(RuntimeError):
    pass


class SingularCovariance(RuntimeWarning):
    pass


@dataclass(eq=False)
class CriticParams:
    """Per-t quadratic critic V_t(x) = x'P x / 2 + p'x + r (same scaling as the solver)."""

    P: np.ndarray  # (T+1, dx, dx)
    p: np.ndarray  # (T+1, dx)
    r: np.ndarray  # (T+1,)

    @classmethod
    def zeros(cls, model, terminal="theorem"):
        T, dx = model.T, model.dx
        c = cls(np.zeros((T + 1, dx, dx)), np.zeros((T + 1, dx)), np.zeros(T + 1))
        vT = terminal_value(model, terminal)
        c.P[T], c.p[T], c.r[T] = vT.P, vT.p, vT.r
        return c

    @classmethod
    def from_solution(cls, sol):
        return cls(np.stack([v.P for v in sol.value]), np.stack([v.p for v in sol.value]),
                   np.array([v.r for v in sol.value]))

    def copy(self):
        return CriticParams(self.P.copy(), self.p.copy(), self.r.copy())

    def value(self, t, x):
        """Critic at time t on states x (..., dx)."""
        return (0.5 * np.einsum("...i,ij,...j->...", x, self.P[t], x) + x @ self.p[t] + self.r[t])


# --- objective ----------------------------------------------------------------------

def _penalties(model, gamma, eta):
    """Per-step entropy penalties 1/2 (g'L^{-1}g + e'X^{-1}e); (..., T)."""
    Li = np.linalg.inv(model.Lambda)
    Xi = np.linalg.inv(model.Xi)
    return 0.5 * (np.einsum("...ti,tij,...tj->...t", gamma, Li, gamma)
                  + np.einsum("...ti,tij,...tj->...t", eta, Xi, eta))


def _running(model, x, u, eta):
    xs = x[..., :-1, :]
    w = u + eta
    return (np.einsum("...ti,ij,...tj->...t", xs, model.M, xs)
            + np.einsum("...ti,tij,...tj->...t", w, model.N, w)
            + np.einsum("...ti,ij,...tj->...t", w, model.Q, xs)
            + xs @ model.m + w @ model.n + np.einsum("tij,tji->t", model.Xi, model.N))


def _rollouts(model, K, n, seed, x0_spread=0.0, stream="pg"):
    x0 = None
    if x0_spread > 0:
        z0 = sampling.standard_normals(seed, stream + "-x0", 0, n, (model.dx,))
        x0 = model.x0 + x0_spread * z0
    return sampling.sample_paths(model, K, n, seed, shifted=True, x0=x0, stream=stream)


def _path_objective(model, paths, terminal):
    MT, mT = terminal_cost_weights(model, terminal)
    xT = paths["x"][:, -1]
    G = _running(model, paths["x"], paths["u"], paths["eta"]).sum(axis=1)
    G = G + np.einsum("ni,ij,nj->n", xT, MT, xT) + xT @ mT
    return model.theta * G - _penalties(model, paths["gamma"], paths["eta"]).sum(axis=1)


def objective_estimate(model: ModelSpec, K: AffinePolicy, n_rollouts: int, seed: int,
                       terminal: str = "theorem"):
    """Monte Carlo objective C(K) under the shifted measure: (estimate, standard error)."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    vals = _path_objective(model, _rollouts(model, K, n_rollouts, seed), terminal)
    se = vals.std(ddof=1) / math.sqrt(n_rollouts) if n_rollouts > 1 else math.inf
    return float(vals.mean()), float(se)


def exact_objective(model: ModelSpec, K: AffinePolicy, terminal: str = "theorem") -> float:
    return duality.game_objective(model, K, terminal=terminal)


# --- exact policy evaluation and gradients -------------------------------------------

def _q_matrix(model, t, S, s, c):
    """Hamiltonian at t as 1/2 y'Q y in y = [x; u; gamma; eta; 1], continuation 1/2 x'Sx + s'x + c."""
    dx, du = model.dx, model.du
    n = 2 * dx + 2 * du + 1
    I = np.eye(n)
    Sx, Su = I[:dx], I[dx:dx + du]
    Sg, Se = I[dx + du:2 * dx + du], I[2 * dx + du:2 * dx + 2 * du]
    S1 = I[-1:]
    Sw = Su + Se
    th = model.theta
    N = model.N[t]

    def sym(X):
        return X + X.T

    # theta * running cost
    Q = 2 * th * (Sx.T @ model.M @ Sx + Sw.T @ N @ Sw) + th * sym(Sw.T @ model.Q @ Sx)
    Q += th * sym(np.outer(Sx.T @ model.m, S1) + np.outer(Sw.T @ model.n, S1))
    const = th * np.trace(model.Xi[t] @ N)
    # entropy penalties
    Q -= Sg.T @ np.linalg.inv(model.Lambda[t]) @ Sg + Se.T @ np.linalg.inv(model.Xi[t]) @ Se
    # continuation at the mean of the next state
    J = model.A @ Sx + model.B @ Su + Sg + model.B @ Se + np.outer(model.a, S1)
    Q += J.T @ S @ J + sym(np.outer(J.T @ s, S1))
    B = model.B
    const += c + 0.5 * np.trace(S @ (model.Lambda[t] + B @ model.Xi[t] @ B.T))
    Q[-1, -1] += 2 * const
    return 0.5 * (Q + Q.T)


def _lift(model, K, t):
    """Linear map [x; 1] -> [x; u; gamma; eta; 1] of policy K at time t."""
    dx = model.dx
    top = np.hstack([np.eye(dx), np.zeros((dx, 1))])
    rows = [top,
            np.hstack([K.D[t], K.d[t][:, None]]),
            np.hstack([K.E[t], K.e[t][:, None]]),
            np.hstack([K.F[t], K.f[t][:, None]]),
            np.hstack([np.zeros((1, dx)), np.ones((1, 1))])]
    return np.vstack(rows)


@dataclass(eq=False)
class PolicyEvaluation:
    value: list  # ValueQuad per t = 0..T
    natural: dict  # block name -> (T, rows, dx+1) coefficient of dQ/d(action) in [x; 1]


def evaluate_policy(model: ModelSpec, K: AffinePolicy, terminal: str = "theorem") -> PolicyEvaluation:
    """Backward evaluation of the quadratic value of a fixed affine policy.

    Also returns, per t and player, the affine map x -> dQ_t/d(action); this is
    the natural gradient, i.e. the plain gradient with the augmented state
    second moment divided out.
    """
    T, dx, du = model.T, model.dx, model.du
    vT = terminal_value(model, terminal)
    value = [None] * (T + 1)
    value[T] = vT
    nat = {k: np.empty((T, r, dx + 1)) for k, r in (("u", du), ("gamma", dx), ("eta", du))}
    S, s, c = vT.P, vT.p, vT.r
    iu = slice(dx, dx + du)
    ig = slice(dx + du, 2 * dx + du)
    ie = slice(2 * dx + du, 2 * dx + 2 * du)
    for t in range(T - 1, -1, -1):
        Q = _q_matrix(model, t, S, s, c)
        L = _lift(model, K, t)
        QL = Q @ L
        nat["u"][t], nat["gamma"][t], nat["eta"][t] = QL[iu], QL[ig], QL[ie]
        W = L.T @ QL
        W = 0.5 * (W + W.T)
        S, s, c = W[:dx, :dx], W[:dx, dx], 0.5 * W[dx, dx]
        value[t] = ValueQuad(S.copy(), s.copy(), float(c))
    return PolicyEvaluation(value, nat)


def augmented_moments(model: ModelSpec, K: AffinePolicy):
    """E[[x;1][x;1]'] per t = 0..T-1 under the shifted measure of K."""
    mu, Sig = duality.propagate_moments(model, K)
    dx = model.dx
    out = np.empty((model.T, dx + 1, dx + 1))
    for t in range(model.T):
        out[t, :dx, :dx] = Sig[t] + np.outer(mu[t], mu[t])
        out[t, :dx, dx] = out[t, dx, :dx] = mu[t]
        out[t, dx, dx] = 1.0
    return out


@dataclass(eq=False)
class Gradient:
    """Per-player gradient in augmented form: blocks[k][t] = [dC/dGain_t, dC/dOffset_t]."""

    blocks: dict

    def as_policy(self) -> AffinePolicy:
        b = self.blocks
        return AffinePolicy(b["u"][..., :-1], b["u"][..., -1], b["gamma"][..., :-1], b["gamma"][..., -1],
                            b["eta"][..., :-1], b["eta"][..., -1])

    def max_abs(self) -> float:
        return float(max(np.abs(v).max() for v in self.blocks.values()))


def exact_gradient(model: ModelSpec, K: AffinePolicy, terminal: str = "theorem") -> Gradient:
    """Gradient of the exact objective: E[dQ_t/da (x;1)'] per player and t."""
    ev = evaluate_policy(model, K, terminal)
    Sig = augmented_moments(model, K)
    return Gradient({k: np.einsum("tij,tjk->tik", v, Sig) for k, v in ev.natural.items()})


def exact_natural_gradient(model: ModelSpec, K: AffinePolicy, terminal: str = "theorem") -> Gradient:
    return Gradient(evaluate_policy(model, K, terminal).natural)


# --- updates ------------------------------------------------------------------------

SIGNS = {"u": -1.0, "gamma": 1.0, "eta": 1.0}


def npg_step(K: AffinePolicy, grad: Gradient, cov, delta: float) -> AffinePolicy:
    """K' = K -/+ delta * grad * cov^{-1}; descent on (D, d), ascent on the rest.

    ``cov`` is the per-t augmented state second moment (T, dx+1, dx+1), or
    None when ``grad`` is already the natural gradient. Singular covariances
    are regularized with 1e-8 I and a SingularCovariance warning.
    """
    blocks = {}
    for k, g in grad.blocks.items():
        if cov is not None:
            pre = np.empty_like(g)
            for t in range(len(g)):
                C = np.asarray(cov[t], dtype=float)
                if not conditions.is_positive_definite(C) or np.linalg.cond(C) > 1e12:
                    warnings.warn(f"state covariance at t={t} is singular; regularizing",
                                  SingularCovariance, stacklevel=2)
                    C = C + EPS_COV * np.eye(len(C))
                pre[t] = np.linalg.solve(C.T, g[t].T).T
            g = pre
        blocks[k] = SIGNS[k] * delta * g
    step = Gradient(blocks).as_policy()
    return AffinePolicy(K.D + step.D, K.d + step.d, K.E + step.E, K.e + step.e,
                        K.F + step.F, K.f + step.f)


def critic_td_update(critic: CriticParams, batch: dict, lr: float, model: ModelSpec,
                     terminal: str = "theorem") -> CriticParams:
    """One TD(0) least-mean-squares step for every t.

    ``batch`` holds shifted-measure rollouts (arrays x, u, gamma, eta). The
    target for V_t(x_t) is the realized one-step reward plus the current
    critic at x_{t+1}; the terminal critic is left at its known value.
    """
    out = critic.copy()
    if lr == 0:
        return out
    x = batch["x"]
    if len(x) == 0:
        raise ValueError("empty batch")
    rew = model.theta * _running(model, x, batch["u"], batch["eta"]) - _penalties(model, batch["gamma"], batch["eta"])
    for t in range(model.T):
        xt = x[:, t]
        target = rew[:, t] + critic.value(t + 1, x[:, t + 1])
        err = target - critic.value(t, xt)
        gP = 0.5 * np.einsum("n,ni,nj->ij", err, xt, xt) / len(xt)
        out.P[t] = critic.P[t] + lr * 0.5 * (gP + gP.T)
        out.p[t] = critic.p[t] + lr * (err @ xt) / len(xt)
        out.r[t] = critic.r[t] + lr * err.mean()
    return out


def zeroth_order_gradient(model: ModelSpec, K: AffinePolicy, n_rollouts: int, seed: int,
                          radius: float = 1e-2, directions: int = 20, terminal: str = "theorem") -> Gradient:
    """Two-point random-direction gradient estimate with common random numbers."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x20])))
    flat = K.flat()
    n = flat.size
    est = np.zeros(n)
    for j in range(directions):
        U = rng.standard_normal(n)
        U /= np.linalg.norm(U)
        cp, _ = objective_estimate(model, K.with_flat(flat + radius * U), n_rollouts, seed + j, terminal)
        cm, _ = objective_estimate(model, K.with_flat(flat - radius * U), n_rollouts, seed + j, terminal)
        est += n * (cp - cm) / (2 * radius) * U
    g = K.with_flat(est / directions)
    return Gradient({"u": np.concatenate([g.D, g.d[..., None]], axis=-1),
                     "gamma": np.concatenate([g.E, g.e[..., None]], axis=-1),
                     "eta": np.concatenate([g.F, g.f[..., None]], axis=-1)})


def empirical_moments(paths, T):
    x = paths["x"][:, :T]
    aug = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
    return np.einsum("nti,ntj->tij", aug, aug) / len(x)


# --- training ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    episodes: int = 2000
    rollouts: int = 256
    delta0: float = 1e-2
    decay: float = 100.0  # delta_m = delta0 / (1 + m / decay)
    seed: int = 0
    mode: str = "exact"  # "exact" (model known) or "zeroth-order"
    critic_lr: float = 0.0  # 0 disables the critic
    x0_spread: float = 0.0  # initial-state dispersion for critic rollouts
    terminal: str = "theorem"
    directions: int = 20
    radius: float = 1e-2

    def step(self, m):
        return self.delta0 / (1.0 + m / self.decay)

    @classmethod
    def from_mapping(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class HistoryRecord:
    episode: int
    C_estimate: float
    gain_gap: float
    eta_norm: float

    def to_json(self):
        return json.dumps(self.__dict__)


@dataclass(eq=False)
class TrainResult:
    K: AffinePolicy
    history: list
    critic: CriticParams | None = None

    def history_jsonl(self) -> str:
        return "".join(h.to_json() + "\n" for h in self.history)


def gain_gap(K: AffinePolicy, ref: AffinePolicy) -> float:
    return float(max(np.abs(K.D - ref.D).max(), np.abs(K.d - ref.d).max()))


def train(model: ModelSpec, config: TrainConfig | dict | None = None, K0: AffinePolicy | None = None) -> TrainResult:
    """Alternate actor (natural gradient) and critic (TD) updates.

    Raises Diverged when the objective leaves 10x its initial magnitude.
    """
    cfg = config if isinstance(config, TrainConfig) else TrainConfig.from_mapping(config or {})
    sol = solver.solve(model, terminal=cfg.terminal)
    if not conditions.check_full_horizon(sol).ok:
        log.warning("saddle conditions fail for this model; training may not converge")
    ref = AffinePolicy.from_gains(sol.gains)
    K = AffinePolicy.zeros(model) if K0 is None else K0.copy()
    critic = CriticParams.zeros(model, cfg.terminal) if cfg.critic_lr > 0 else None

    def objective(K, m):
        if cfg.mode == "exact":
            return exact_objective(model, K, cfg.terminal)
        return objective_estimate(model, K, cfg.rollouts, cfg.seed + m, cfg.terminal)[0]

    C0 = objective(K, 0)
    history = [HistoryRecord(0, C0, gain_gap(K, ref), float(max(np.abs(K.F).max(), np.abs(K.f).max())))]
    limit = 10.0 * max(abs(C0), 1.0)
    for m in range(cfg.episodes):
        delta = cfg.step(m)
        if cfg.mode == "exact":
            K = npg_step(K, exact_natural_gradient(model, K, cfg.terminal), None, delta)
        elif cfg.mode == "zeroth-order":
            g = zeroth_order_gradient(model, K, cfg.rollouts, cfg.seed + m, cfg.radius, cfg.directions, cfg.terminal)
            paths = _rollouts(model, K, cfg.rollouts, cfg.seed + m)
            K = npg_step(K, g, empirical_moments(paths, model.T), delta)
        else:
            raise ValueError(f"unknown training mode {cfg.mode!r}")
        if critic is not None:
            batch = _rollouts(model, K, cfg.rollouts, cfg.seed + m, cfg.x0_spread, stream="critic")
            critic = critic_td_update(critic, batch, cfg.critic_lr, model, cfg.terminal)
        C = objective(K, m + 1)
        if not np.isfinite(C) or abs(C) > limit:
            raise Diverged(f"objective {C} left 10x its initial magnitude at episode {m + 1}")
        history.append(HistoryRecord(m + 1, C, gain_gap(K, ref),
                                     float(max(np.abs(K.F).max(), np.abs(K.f).max()))))
    return TrainResult(K, history, critic)
