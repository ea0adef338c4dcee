import numpy as np
import pytest

from leqg import model as M
from leqg import solver


@pytest.fixture(scope="session")
def table2():
    return M.table2()


@pytest.fixture(scope="session")
def table2_sol(table2):
    return solver.solve(table2)


def scalar_model(**overrides):
    """Table 2 instance with selected scalar fields replaced, validated."""
    doc = M.to_mapping(M.table2())
    doc.update(overrides)
    return M.validate(M.from_mapping(doc))


def random_scalar_model(rng, T=None, require_saddle=True):
    """Random scalar instance; by default redrawn until the saddle conditions hold."""
    while True:
        doc = {
            "a": rng.uniform(-0.5, 0.5), "A": rng.uniform(-1, 1), "B": rng.uniform(0.1, 1.0),
            "Lambda": rng.uniform(0.05, 0.3), "Xi": rng.uniform(0.05, 0.3),
            "M": rng.uniform(0, 3), "N": rng.uniform(0.5, 3), "Q": rng.uniform(-1, 1),
            "m": rng.uniform(-0.5, 0.5), "n": rng.uniform(-0.5, 0.5),
            "M_T": rng.uniform(0, 4), "m_T": rng.uniform(-0.5, 0.5),
            "theta": rng.uniform(0.2, 1.5), "T": int(T or rng.integers(1, 5)),
            "x0": rng.uniform(-1, 1),
        }
        mod = M.validate(M.from_mapping(doc))
        if not require_saddle or solver.solve(mod).saddle_verified:
            return mod


def literal_scalar_recursion(model):
    """Straight-line scalar transcription of the printed P, p, r recursions.

    Written independently of the package's symmetric assembly; only valid
    for scalar models with constant coefficients.
    """
    g = lambda X: float(np.asarray(X).reshape(-1)[0])
    a, A, B = g(model.a), g(model.A), g(model.B)
    Lam, Xi, Mm, N, Q = g(model.Lambda[0]), g(model.Xi[0]), g(model.M), g(model.N[0]), g(model.Q)
    m, n, th = g(model.m), g(model.n), model.theta
    P, p, r = g(model.M_T), g(model.m_T), 0.0
    out = [(P, p, r)]
    for _ in range(model.T):
        A1 = B * P * A + th * Q
        a1 = B * P * a + B * p + th * n
        A2 = P * A
        a2 = P * a + p
        B1 = B * P * B + 2 * th * N
        B2 = -1 / Lam + P
        C = B * P
        G = C / B1 * C - B2
        Pn = (-A1 / B1 * A1 - 2 * A1 / B1 * C / G * A2 + A1 / B1 * C / G * C / B1 * A1
              + A2 / G * A2 + 2 * (th * Mm + 0.5 * A * P * A))
        pn = (-A1 / B1 * a1 - A1 / B1 * C / G * a2 + A1 / B1 * C / G * C / B1 * a1
              - A2 / G * C / B1 * a1 + A2 / G * a2 + A * P * a + th * m + A * p)
        rn = (-0.5 * a1 / B1 * a1 - a1 / B1 * C / G * a2 + 0.5 * a1 / B1 * C / G * C / B1 * a1
              + 0.5 * a2 / G * a2 + 0.5 * B * Xi * B * P + 0.5 * Lam * P + r
              + 0.5 * a * P * a + a * p + th * Xi * N)
        P, p, r = Pn, pn, rn
        out.append((P, p, r))
    return out[::-1]


ACCEPTANCE_LINES = []


def report_criterion(number, title, passed, detail):
    line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
