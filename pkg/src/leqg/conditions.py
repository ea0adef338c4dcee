"""Second-order checks that the stationary point of F is a saddle point.

The controller's block B1 must be positive definite and the negated
(gamma, eta) Hessian block must be positive definite. For scalar models the
explicit parameter bounds on N, Lambda^{-1} and Xi^{-1} are also reported.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from leqg.model import FrakturSet, ModelSpec

DEF_RTOL = 1e-10


def is_positive_definite(X) -> bool:
    """Minimum eigenvalue above 1e-10 * max(1, spectral radius)."""
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        return False
    eig = np.linalg.eigvalsh(0.5 * (X + X.T))
    return bool(eig.min() > DEF_RTOL * max(1.0, np.abs(eig).max()))


@dataclass(frozen=True)
class Prop4Bounds:
    N_lower: float
    Lambda_inv_lower: float
    Xi_inv_lower: float
    N: float
    Lambda_inv: float
    Xi_inv: float
    caveat: bool  # model departs from the bounds' setting (Q, m, n nonzero or A, B, M not positive)
    Xi_inv_det_lower: float = float("nan")  # bound that also makes det(-H) > 0, given Lambda

    @property
    def det_satisfied(self) -> bool:
        """Bounds i)-ii) plus the exact scalar determinant bound on Xi^{-1}."""
        return (self.N > self.N_lower and self.Lambda_inv > self.Lambda_inv_lower
                and self.Xi_inv > self.Xi_inv_det_lower)

    @property
    def satisfied(self) -> bool:
        return (self.N > self.N_lower and self.Lambda_inv > self.Lambda_inv_lower
                and self.Xi_inv > self.Xi_inv_lower)


@dataclass
class ConditionRecord:
    t: int | None
    b1_min_eig: float
    b1_pass: bool
    negH_pass: bool
    negH_leading_minors_ok: bool
    det_negH: float
    det_H: float
    violations: list = field(default_factory=list)
    prop4: Prop4Bounds | None = None

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class SylvesterFlags:
    det_ok: bool
    b2_negative: bool
    b3_negative: bool

    @property
    def all(self) -> bool:
        return self.det_ok and self.b2_negative and self.b3_negative


def _leading_minors(X):
    return [float(np.linalg.det(X[:k, :k])) for k in range(1, X.shape[0] + 1)]


def sylvester_conditions(f: FrakturSet) -> SylvesterFlags:
    """Leading-minor test on -H in (gamma, eta) order plus the two diagonal blocks."""
    negH = f.negH
    minors = _leading_minors(negH)
    return SylvesterFlags(
        det_ok=all(mi > 0 for mi in minors),
        b2_negative=is_positive_definite(-f.B2),
        b3_negative=is_positive_definite(-f.B3),
    )


def check_assumption1(f: FrakturSet, t: int | None = None) -> ConditionRecord:
    b1_eig = np.linalg.eigvalsh(0.5 * (f.B1 + f.B1.T))
    b1_pass = is_positive_definite(f.B1)
    negH = f.negH
    negH_pass = is_positive_definite(negH)
    flags = sylvester_conditions(f)
    det_negH = float(np.linalg.det(negH))
    det_H = float(np.linalg.det(-negH))
    violations = []
    if not b1_pass:
        violations.append("B1 not positive definite")
    if not flags.b2_negative:
        violations.append("B2 not negative definite")
    if not flags.b3_negative:
        violations.append("B3 not negative definite")
    if not negH_pass:
        violations.append("-H not positive definite")
    return ConditionRecord(
        t=t, b1_min_eig=float(b1_eig.min()), b1_pass=b1_pass, negH_pass=negH_pass,
        negH_leading_minors_ok=flags.det_ok, det_negH=det_negH, det_H=det_H,
        violations=violations,
    )


def prop4_bounds(model: ModelSpec, P_next, t: int) -> Prop4Bounds:
    """Explicit scalar bounds on N_t, Lambda_t^{-1} and Xi_t^{-1} given P_{t+1}."""
    if not model.is_scalar:
        from leqg.solver import NotScalar
        raise NotScalar("parameter bounds are only available for scalar models")
    th = model.theta
    if th <= 0:
        raise ValueError("parameter bounds require theta > 0")
    P = float(np.asarray(P_next).reshape(-1)[0])
    B = model.B.item()
    N = model.N[t].item()
    lam_inv = 1.0 / model.Lambda[t].item()
    N_lower = max(0.0, -B * B * P / (2.0 * th))
    if P > 0:
        xi_lower = 2.0 * th * N + B * B * P
    elif P < 0:
        xi_lower = 2.0 * th * N + lam_inv * B * B * P / (P - lam_inv)
    else:
        xi_lower = 2.0 * th * N
    # det(-H) = (lam_inv - P)(Xi^{-1} - 2 theta N - B^2 P) - B^2 P^2 > 0
    xi_det = (2.0 * th * N + lam_inv * B * B * P / (lam_inv - P)) if lam_inv > P else float("inf")
    caveat = bool(model.Q.item() != 0 or model.m.item() != 0 or model.n.item() != 0
                  or model.A.item() <= 0 or B <= 0 or model.M.item() <= 0)
    return Prop4Bounds(N_lower=N_lower, Lambda_inv_lower=P, Xi_inv_lower=xi_lower,
                       N=N, Lambda_inv=lam_inv, Xi_inv=1.0 / model.Xi[t].item(), caveat=caveat,
                       Xi_inv_det_lower=xi_det)


@dataclass
class SaddleReport:
    records: list

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.records)

    @property
    def violations(self) -> list:
        return [(r.t, v) for r in self.records for v in r.violations]


def check_full_horizon(sol) -> SaddleReport:
    """Run the saddle checks for every t (and the scalar bounds when available)."""
    records = []
    model = sol.model
    for t, f in enumerate(sol.fraktur):
        rec = check_assumption1(f, t=t)
        if model.is_scalar and model.theta > 0:
            rec.prop4 = prop4_bounds(model, sol.value[t + 1].P, t)
        records.append(rec)
    return SaddleReport(records)


REPORT_COLUMNS = ("t", "b1_pass", "negH_pass", "det_negH", "violations")


def report_csv(report: SaddleReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in report.records:
        writer.writerow([r.t, int(r.b1_pass), int(r.negH_pass), repr(r.det_negH), ";".join(r.violations)])
    return buf.getvalue()


def report_json(report: SaddleReport) -> str:
    recs = []
    for r in report.records:
        d = asdict(r)
        if r.prop4 is not None:
            d["prop4"]["satisfied"] = r.prop4.satisfied
            d["prop4"]["det_satisfied"] = r.prop4.det_satisfied
            if not np.isfinite(r.prop4.Xi_inv_det_lower):
                d["prop4"]["Xi_inv_det_lower"] = None
        recs.append(d)
    return json.dumps({"ok": report.ok, "records": recs}, indent=2) + "\n"
