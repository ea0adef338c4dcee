"""Problem data for the randomized LEQG control problem.

A ``ModelSpec`` bundles the linear dynamics, the quadratic cost, the noise
and exploration covariance schedules, the risk sensitivity and the horizon.
Per-time schedules (``Lambda``, ``Xi``, ``N``) are always stored with a
leading time axis of length ``T``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

CONFIG_KEYS = ("a", "A", "B", "Lambda", "Xi", "M", "N", "Q", "m", "n",
               "M_T", "m_T", "theta", "T", "x0")
SCHEDULE_KEYS = ("Lambda", "Xi", "N")

# minimum eigenvalue relative to the largest absolute eigenvalue
PSD_RTOL = 1e-10


class ModelError(ValueError):
    """Base class for problems with model data."""


class ParseError(ModelError):
    def __init__(self, message, location=None):
        self.location = location
        where = f" at {location}" if location else ""
        super().__init__(f"{message}{where}")


class MissingKey(ModelError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"missing required key {name!r}")


@dataclass(frozen=True)
class Issue:
    """One violated model invariant."""

    kind: str  # "dimension", "psd", "pd", "theta"
    field: str
    message: str
    min_eig: float | None = None


class InvalidModel(ModelError):
    """Raised by :func:`validate`; ``issues`` lists every violated invariant."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(i.message for i in self.issues))


class DimensionMismatch(InvalidModel):
    pass


class NotPSD(InvalidModel):
    pass


class ThetaOutOfRange(InvalidModel):
    pass


_ISSUE_ERRORS = {"dimension": DimensionMismatch, "psd": NotPSD, "pd": NotPSD,
                 "theta": ThetaOutOfRange}


@dataclass(frozen=True, eq=False)
class ModelSpec:
    a: np.ndarray
    A: np.ndarray
    B: np.ndarray
    Lambda: np.ndarray
    Xi: np.ndarray
    M: np.ndarray
    N: np.ndarray
    Q: np.ndarray
    m: np.ndarray
    n: np.ndarray
    M_T: np.ndarray
    m_T: np.ndarray
    theta: float
    T: int
    x0: np.ndarray

    @property
    def dx(self) -> int:
        return self.A.shape[0]

    @property
    def du(self) -> int:
        return self.B.shape[1]

    @property
    def is_scalar(self) -> bool:
        return self.dx == 1 and self.du == 1

    def replace(self, **changes) -> "ModelSpec":
        """Copy with some fields replaced; schedules given as constants are broadcast."""
        for key in SCHEDULE_KEYS:
            if key in changes:
                changes[key] = _schedule(key, changes[key], changes.get("T", self.T),
                                         self.dx if key == "Lambda" else self.du)
        if "T" in changes and changes["T"] != self.T:
            T = changes["T"]
            for key in SCHEDULE_KEYS:
                if key not in changes:
                    sched = getattr(self, key)
                    changes[key] = sched[:T] if T <= len(sched) else _schedule(key, sched[-1], T, sched.shape[1])
        return dataclasses.replace(self, **changes)

    def Lambda_inv(self, t: int) -> np.ndarray:
        return np.linalg.inv(self.Lambda[t])

    def Xi_inv(self, t: int) -> np.ndarray:
        return np.linalg.inv(self.Xi[t])

    def digest(self) -> str:
        """Short content hash, stable across runs."""
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return all(np.array_equal(np.asarray(getattr(self, f.name)), np.asarray(getattr(other, f.name)))
                   for f in dataclasses.fields(self))


@dataclass(frozen=True, eq=False)
class ValueQuad:
    """Coefficients of V(x) = 1/2 x'Px + x'p + r at one time index."""

    P: np.ndarray
    p: np.ndarray
    r: float

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + x @ self.p + self.r)


@dataclass(frozen=True, eq=False)
class FrakturSet:
    """Shorthand coefficients built from the value at t+1 and model data at t.

    Naming: ``A1``/``a1`` drive the control and exploration-shift terms,
    ``A2``/``a2`` the noise-shift term; ``B1``, ``B2``, ``B3`` are the
    diagonal Hessian blocks for (u, gamma, eta) and ``C`` the u-gamma
    coupling. ``G = C' B1^{-1} C - B2``.
    """

    A1: np.ndarray
    a1: np.ndarray
    A2: np.ndarray
    a2: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    B3: np.ndarray
    C: np.ndarray
    G: np.ndarray

    @property
    def negH(self) -> np.ndarray:
        """Negated (gamma, eta) Hessian block."""
        return -np.block([[self.B2, self.C.T], [self.C, self.B3]])


@dataclass(frozen=True, eq=False)
class GainSet:
    """Affine feedback u* = Du x + du, gamma* = Dg x + dg, eta* = Deta x + deta."""

    Du: np.ndarray
    du: np.ndarray
    Dg: np.ndarray
    dg: np.ndarray
    Deta: np.ndarray
    deta: np.ndarray

    def controls(self, x):
        x = np.asarray(x, dtype=float)
        return (x @ self.Du.T + self.du, x @ self.Dg.T + self.dg, x @ self.Deta.T + self.deta)


@dataclass(eq=False)
class AffinePolicy:
    """Time-varying affine policies for all three players.

    u_t = D_t x + d_t, gamma_t = E_t x + e_t, eta_t = F_t x + f_t. Arrays carry
    a leading time axis of length T.
    """

    D: np.ndarray
    d: np.ndarray
    E: np.ndarray
    e: np.ndarray
    F: np.ndarray
    f: np.ndarray

    BLOCKS = ("D", "d", "E", "e", "F", "f")

    @property
    def T(self) -> int:
        return self.D.shape[0]

    @classmethod
    def zeros(cls, model: ModelSpec) -> "AffinePolicy":
        T, dx, du = model.T, model.dx, model.du
        return cls(np.zeros((T, du, dx)), np.zeros((T, du)), np.zeros((T, dx, dx)),
                   np.zeros((T, dx)), np.zeros((T, du, dx)), np.zeros((T, du)))

    @classmethod
    def from_gains(cls, gains, shift=None) -> "AffinePolicy":
        """Stack per-time GainSets; an open-loop ``shift`` replaces the feedback shifts."""
        D = np.stack([g.Du for g in gains])
        d = np.stack([g.du for g in gains])
        if shift is None:
            E = np.stack([g.Dg for g in gains])
            e = np.stack([g.dg for g in gains])
            F = np.stack([g.Deta for g in gains])
            f = np.stack([g.deta for g in gains])
        else:
            E = np.zeros((len(gains),) + gains[0].Dg.shape)
            F = np.zeros((len(gains),) + gains[0].Deta.shape)
            e = np.asarray(shift.gamma, dtype=float)
            f = np.asarray(shift.eta, dtype=float)
        return cls(D, d, E, e, F, f)

    def copy(self) -> "AffinePolicy":
        return AffinePolicy(*(getattr(self, k).copy() for k in self.BLOCKS))

    def blocks(self):
        return [getattr(self, k) for k in self.BLOCKS]

    def flat(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.blocks()])

    def with_flat(self, vec) -> "AffinePolicy":
        out, pos = [], 0
        for b in self.blocks():
            out.append(np.asarray(vec[pos:pos + b.size], dtype=float).reshape(b.shape))
            pos += b.size
        return AffinePolicy(*out)


# --- validation ---------------------------------------------------------------

def _sym(X):
    return 0.5 * (X + X.T)


def _definiteness_issue(name, X, strict):
    eig = np.linalg.eigvalsh(X)
    scale = max(np.max(np.abs(eig)), 0.0)
    tol = PSD_RTOL * scale
    lo = float(eig.min())
    if strict:
        if lo <= tol or not np.isfinite(lo):
            return Issue("pd", name, f"{name} is not positive definite (min eigenvalue {lo:.6g})", lo)
    elif lo < -tol:
        return Issue("psd", name, f"{name} is not positive semidefinite (min eigenvalue {lo:.6g})", lo)
    return None


def check_model(spec: ModelSpec) -> list[Issue]:
    """Return every violated invariant (empty list when the model is valid)."""
    issues = []
    dx = spec.A.shape[0] if spec.A.ndim == 2 else -1
    du = spec.B.shape[1] if spec.B.ndim == 2 else -1
    T = spec.T
    expected = {
        "a": (dx,), "A": (dx, dx), "B": (dx, du), "Lambda": (T, dx, dx), "Xi": (T, du, du),
        "M": (dx, dx), "N": (T, du, du), "Q": (du, dx), "m": (dx,), "n": (du,),
        "M_T": (dx, dx), "m_T": (dx,), "x0": (dx,),
    }
    if not isinstance(T, (int, np.integer)) or T < 1:
        issues.append(Issue("dimension", "T", f"T must be a positive integer, got {T!r}"))
    for name, shape in expected.items():
        got = np.shape(getattr(spec, name))
        if got != shape:
            issues.append(Issue("dimension", name, f"{name} has shape {got}, expected {shape}"))
    theta = spec.theta
    if not np.isfinite(theta) or not (-1.0 < theta < 0.0 or theta > 0.0):
        issues.append(Issue("theta", "theta", f"theta={theta!r} outside (-1,0) U (0,inf)"))
    if any(i.kind == "dimension" for i in issues):
        return issues
    for name in ("M", "M_T"):
        issue = _definiteness_issue(name, _sym(getattr(spec, name)), strict=False)
        if issue:
            issues.append(issue)
    for name, strict in (("N", False), ("Lambda", True), ("Xi", True)):
        sched = getattr(spec, name)
        for t in range(T):
            X = sched[t]
            if name != "N" and not np.allclose(X, X.T, rtol=0, atol=1e-12 * max(1.0, np.abs(X).max())):
                issues.append(Issue("pd", f"{name}[{t}]", f"{name}[{t}] is not symmetric"))
                continue
            issue = _definiteness_issue(f"{name}[{t}]", _sym(X), strict)
            if issue:
                issues.append(issue)
    return issues


def validate(spec: ModelSpec) -> ModelSpec:
    """Symmetrize the cost matrices and check every model invariant.

    Returns the validated (symmetrized) model. Raises a subclass of
    :class:`InvalidModel` chosen by the first violation; its ``issues``
    attribute lists all of them.
    """
    issues = check_model(spec)
    if issues:
        raise _ISSUE_ERRORS[issues[0].kind](issues)
    return dataclasses.replace(
        spec,
        M=_sym(spec.M), M_T=_sym(spec.M_T),
        N=0.5 * (spec.N + np.swapaxes(spec.N, 1, 2)),
        theta=float(spec.theta), T=int(spec.T),
    )


# --- configuration documents --------------------------------------------------

def _as_array(key, value, ndim):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{key}: not numeric ({exc})", key) from None
    if arr.ndim == 0 and ndim > 0:
        arr = arr.reshape((1,) * ndim)
    if arr.ndim != ndim:
        raise DimensionMismatch([Issue("dimension", key, f"{key} must be {ndim}-dimensional, got shape {arr.shape}")])
    return arr


def _schedule(key, value, T, dim):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.broadcast_to(arr.reshape(1, 1), (T, 1, 1))
    elif arr.ndim == 1:
        if dim != 1 or len(arr) != T:
            raise DimensionMismatch([Issue("dimension", key,
                                           f"{key}: a flat list is a schedule of {T} scalars, got {len(arr)} entries")])
        arr = arr.reshape(T, 1, 1)
    elif arr.ndim == 2:
        arr = np.broadcast_to(arr, (T,) + arr.shape)
    elif arr.ndim == 3:
        if arr.shape[0] != T:
            raise DimensionMismatch([Issue("dimension", key, f"{key}: schedule has {arr.shape[0]} entries, expected T={T}")])
    else:
        raise DimensionMismatch([Issue("dimension", key, f"{key}: unsupported shape {arr.shape}")])
    return np.array(arr, dtype=float)


def from_mapping(doc: dict) -> ModelSpec:
    """Build a ModelSpec from a parsed configuration mapping."""
    if not isinstance(doc, dict):
        raise ParseError("configuration must be a key/value mapping")
    unknown = sorted(set(doc) - set(CONFIG_KEYS))
    if unknown:
        raise ParseError(f"unknown keys {unknown}", unknown[0])
    for key in CONFIG_KEYS:
        if key not in doc:
            raise MissingKey(key)
    T = doc["T"]
    if isinstance(T, bool) or not isinstance(T, int) or T < 1:
        raise ParseError(f"T must be a positive integer, got {T!r}", "T")
    theta = doc["theta"]
    if isinstance(theta, bool) or not isinstance(theta, (int, float)):
        raise ParseError(f"theta must be a number, got {theta!r}", "theta")
    A = _as_array("A", doc["A"], 2)
    B = _as_array("B", doc["B"], 2)
    dx, du = A.shape[0], B.shape[1]
    return ModelSpec(
        a=_as_array("a", doc["a"], 1), A=A, B=B,
        Lambda=_schedule("Lambda", doc["Lambda"], T, dx),
        Xi=_schedule("Xi", doc["Xi"], T, du),
        M=_as_array("M", doc["M"], 2),
        N=_schedule("N", doc["N"], T, du),
        Q=_as_array("Q", doc["Q"], 2),
        m=_as_array("m", doc["m"], 1), n=_as_array("n", doc["n"], 1),
        M_T=_as_array("M_T", doc["M_T"], 2), m_T=_as_array("m_T", doc["m_T"], 1),
        theta=float(theta), T=T, x0=_as_array("x0", doc["x0"], 1),
    )


def load_config(text: str) -> ModelSpec:
    """Parse a YAML (or JSON) configuration document into a ModelSpec."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f"line {mark.line + 1}, column {mark.column + 1}" if mark else None
        raise ParseError(f"malformed configuration: {getattr(exc, 'problem', exc)}", loc) from None
    return from_mapping(doc)


def _plain(arr):
    arr = np.asarray(arr, dtype=float)
    if arr.size == 1:
        return float(arr.reshape(()))
    return arr.tolist()


def to_mapping(spec: ModelSpec) -> dict:
    doc = {}
    for key in CONFIG_KEYS:
        value = getattr(spec, key)
        if key in SCHEDULE_KEYS:
            value = value[0] if np.all(value == value[0]) else value
            if np.size(value) == 1 and np.ndim(value) == 3:
                value = value.reshape(-1)
        if key == "T":
            doc[key] = int(value)
        elif key == "theta":
            doc[key] = float(value)
        else:
            doc[key] = _plain(value)
    return doc


def dump_config(spec: ModelSpec) -> str:
    """Serialize to the configuration format; ``load_config`` inverts it."""
    buf = io.StringIO()
    yaml.safe_dump(to_mapping(spec), buf, sort_keys=False, default_flow_style=None)
    return buf.getvalue()


def builtin(name: str) -> ModelSpec:
    """Load a named instance shipped with the package (``table2``)."""
    try:
        text = resources.files("leqg.data").joinpath(f"{name}.yaml").read_text()
    except FileNotFoundError:
        raise KeyError(f"no built-in instance named {name!r}") from None
    return load_config(text)


def table2() -> ModelSpec:
    """The scalar reference instance with constant coefficients and T=25."""
    return validate(builtin("table2"))


def terminal_value(model: ModelSpec, terminal: str = "theorem") -> ValueQuad:
    """Terminal coefficients of the stored value function.

    ``"theorem"`` sets P_T = M_T and p_T = m_T; ``"dpp"`` sets
    V_T(x) = theta (x'M_T x + x'm_T), i.e. P_T = 2 theta M_T, p_T = theta m_T.
    """
    if terminal == "theorem":
        return ValueQuad(model.M_T.copy(), model.m_T.copy(), 0.0)
    if terminal == "dpp":
        return ValueQuad(2.0 * model.theta * model.M_T, model.theta * model.m_T, 0.0)
    raise ValueError(f"unknown terminal convention {terminal!r}")


def terminal_cost_weights(model: ModelSpec, terminal: str = "theorem"):
    """(M_T, m_T) to use in the cost G_T so that theta * terminal cost equals V_T."""
    vt = terminal_value(model, terminal)
    return 0.5 * vt.P / model.theta, vt.p / model.theta
