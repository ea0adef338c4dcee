import numpy as np

from leqg import model as M
from leqg import sampling, solver


def test_same_seed_bit_identical():
    a = sampling.standard_normals(7, "paths", 0, 5000, (3, 2))
    b = sampling.standard_normals(7, "paths", 0, 5000, (3, 2))
    assert np.array_equal(a, b)


def test_streams_and_seeds_differ():
    a = sampling.standard_normals(7, "paths", 0, 100, (2,))
    assert not np.array_equal(a, sampling.standard_normals(8, "paths", 0, 100, (2,)))
    assert not np.array_equal(a, sampling.standard_normals(7, "other", 0, 100, (2,)))


def test_worker_count_independent():
    a = sampling.standard_normals(1, "s", 0, 3 * sampling.BLOCK + 17, (4,))
    b = sampling.standard_normals(1, "s", 0, 3 * sampling.BLOCK + 17, (4,), workers=4)
    assert np.array_equal(a, b)


def test_split_independent():
    whole = sampling.standard_normals(2, "s", 0, 10_000, (1,))
    parts = [sampling.standard_normals(2, "s", s, n, (1,)) for s, n in ((0, 1234), (1234, 5000), (6234, 3766))]
    assert np.array_equal(whole, np.concatenate(parts))


def test_zero_count():
    assert sampling.standard_normals(0, "s", 0, 0, (2,)).shape == (0, 2)


def test_rollout_dynamics_identity():
    mod = M.table2().replace(T=5)
    pol = M.AffinePolicy.from_gains(solver.solve(mod).gains)
    p = sampling.sample_paths(mod, pol, 50, seed=3, shifted=True)
    x, u, v, w = p["x"], p["u"], p["v"], p["w"]
    assert np.allclose(x[:, 1:], mod.a + x[:, :-1] * -0.2 + 0.4 * (u + v) + w, rtol=0, atol=1e-15)


def test_shifted_noise_centred_at_gamma():
    mod = M.table2().replace(T=2)
    pol = M.AffinePolicy.from_gains(solver.solve(mod).gains)
    p = sampling.sample_paths(mod, pol, 200_000, seed=0, shifted=True)
    resid = (p["w"] - p["gamma"])[:, 0, 0]
    assert abs(resid.mean()) < 3 * np.sqrt(0.15 / resid.size)
    assert abs((p["v"] - p["eta"]).mean()) < 3 * np.sqrt(0.15 / resid.size)
