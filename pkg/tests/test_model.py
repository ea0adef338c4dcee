import dataclasses

import numpy as np
import pytest
import yaml

from leqg import model as M

TABLE2_DOC = """
a: 0
A: -0.2
B: 0.4
Lambda: 0.15
Xi: 0.15
M: 2
N: 2
Q: 1
m: 0
n: 0
M_T: 4
m_T: 0
theta: 1
T: 25
x0: 1
"""


def test_table2_is_valid(table2):
    assert M.check_model(table2) == []
    assert table2.T == 25 and table2.is_scalar
    assert table2.A.item() == -0.2 and table2.B.item() == 0.4
    assert table2.Lambda.shape == (25, 1, 1)


def test_load_config_table2(table2):
    assert M.validate(M.load_config(TABLE2_DOC)) == table2


def test_missing_theta():
    doc = "\n".join(l for l in TABLE2_DOC.splitlines() if not l.startswith("theta"))
    with pytest.raises(M.MissingKey) as err:
        M.load_config(doc)
    assert err.value.name == "theta"


def test_scalar_lambda_broadcast():
    spec = M.load_config(TABLE2_DOC)
    assert spec.Lambda.shape == (25, 1, 1)
    assert np.all(spec.Lambda == 0.15)


def test_per_time_schedule():
    doc = yaml.safe_load(TABLE2_DOC)
    doc["T"] = 3
    doc["Xi"] = [0.1, 0.2, 0.3]
    spec = M.from_mapping(doc)
    assert spec.Xi[:, 0, 0].tolist() == [0.1, 0.2, 0.3]
    doc["Xi"] = [0.1, 0.2]
    with pytest.raises(M.DimensionMismatch):
        M.from_mapping(doc)


def test_parse_error_has_location():
    with pytest.raises(M.ParseError) as err:
        M.load_config("a: [1, 2\nB: 3")
    assert err.value.location is not None and "line" in err.value.location


def test_unknown_key_rejected():
    with pytest.raises(M.ParseError):
        M.load_config(TABLE2_DOC + "bogus: 1\n")


def test_theta_zero(table2):
    with pytest.raises(M.ThetaOutOfRange):
        M.validate(dataclasses.replace(table2, theta=0.0))
    with pytest.raises(M.ThetaOutOfRange):
        M.validate(dataclasses.replace(table2, theta=-1.0))
    M.validate(dataclasses.replace(table2, theta=-0.5))


def test_negative_lambda(table2):
    with pytest.raises(M.NotPSD) as err:
        M.validate(table2.replace(Lambda=-0.1))
    assert err.value.issues[0].min_eig < 0


def test_all_issues_collected(table2):
    bad = dataclasses.replace(table2.replace(Lambda=-0.1, Xi=-0.2), theta=0.0)
    with pytest.raises(M.InvalidModel) as err:
        M.validate(bad)
    kinds = {i.kind for i in err.value.issues}
    assert kinds == {"theta", "pd"}
    assert len(err.value.issues) == 1 + 2 * 25


def test_dimension_mismatch(table2):
    bad = dataclasses.replace(table2, B=np.ones((2, 1)))
    with pytest.raises(M.DimensionMismatch):
        M.validate(bad)


def test_symmetrized_on_ingest(table2):
    X = np.array([[2.0, 1.0 + 1e-13], [1.0, 2.0]])
    doc = {
        "a": [0, 0], "A": np.eye(2).tolist(), "B": [[1.0], [0.0]], "Lambda": np.eye(2).tolist(),
        "Xi": 0.1, "M": X.tolist(), "N": 1.0, "Q": [[0.0, 0.0]], "m": [0, 0], "n": [0],
        "M_T": X.tolist(), "m_T": [0, 0], "theta": 0.5, "T": 2, "x0": [1, 0],
    }
    spec = M.validate(M.from_mapping(doc))
    assert np.array_equal(spec.M, spec.M.T)


def test_validate_idempotent(table2):
    assert M.check_model(M.validate(table2)) == []
    assert M.validate(M.validate(table2)) == table2


def test_round_trip(table2):
    assert M.validate(M.load_config(M.dump_config(table2))) == table2


def test_round_trip_time_varying(table2):
    spec = table2.replace(T=3, Lambda=np.array([0.1, 0.2, 0.3]))
    assert M.load_config(M.dump_config(spec)) == spec


def test_replace_changes_horizon(table2):
    short = table2.replace(T=2)
    assert short.Lambda.shape == (2, 1, 1) and short.T == 2
    longer = table2.replace(T=30)
    assert longer.Xi.shape == (30, 1, 1)


def test_digest_stable(table2):
    assert table2.digest() == M.table2().digest()
    assert table2.digest() != table2.replace(T=2).digest()


def test_terminal_conventions(table2):
    v = M.terminal_value(table2, "theorem")
    assert v.P.item() == 4.0 and v.r == 0.0
    d = M.terminal_value(dataclasses.replace(table2, theta=0.5), "dpp")
    assert d.P.item() == pytest.approx(4.0)
    with pytest.raises(ValueError):
        M.terminal_value(table2, "other")


def test_policy_flat_round_trip(table2):
    K = M.AffinePolicy.zeros(table2)
    vec = np.arange(K.flat().size, dtype=float)
    assert np.array_equal(K.with_flat(vec).flat(), vec)
