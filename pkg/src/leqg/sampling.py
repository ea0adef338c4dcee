"""Seeded noise streams and batched forward simulation.

Standard normal draws for sample ``i`` come from a Philox generator keyed by
``(seed, stream, i // BLOCK)``, so a given sample index always receives the
same numbers however the work is split across workers.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK = 4096


def _stream_id(stream: str) -> int:
    return zlib.crc32(stream.encode())


def _block(seed, stream, b, per_sample):
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _stream_id(stream), int(b)])
    gen = np.random.Generator(np.random.Philox(ss))
    return gen.standard_normal((BLOCK,) + per_sample)


def standard_normals(seed, stream, start, count, per_sample, workers=1):
    """Draws for samples [start, start+count), shape (count,) + per_sample."""
    per_sample = tuple(per_sample)
    if count <= 0:
        return np.empty((0,) + per_sample)
    first, last = start // BLOCK, (start + count - 1) // BLOCK
    blocks = range(first, last + 1)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda b: _block(seed, stream, b, per_sample), blocks))
    else:
        parts = [_block(seed, stream, b, per_sample) for b in blocks]
    out = np.concatenate(parts)
    off = start - first * BLOCK
    return out[off:off + count]


def chol_schedule(S):
    return np.stack([np.linalg.cholesky(s) for s in S])


def rollout(model, policy, zw, zv, shifted, x0=None):
    """Simulate a batch of paths under an affine policy.

    ``zw``/``zv`` are standard normals of shape (n, T, d_x) / (n, T, d_u).
    Under ``shifted`` the noises are centred at the policy's gamma/eta;
    otherwise they are centred at zero and gamma/eta are only recorded.
    Returns a dict of arrays: x (n,T+1,dx), u, gamma, eta, w, v.
    """
    n, T = zw.shape[0], model.T
    dx, du = model.dx, model.du
    Lw, Lv = chol_schedule(model.Lambda), chol_schedule(model.Xi)
    x = np.empty((n, T + 1, dx))
    x[:, 0] = model.x0 if x0 is None else x0
    u = np.empty((n, T, du))
    gam = np.empty((n, T, dx))
    eta = np.empty((n, T, du))
    w = np.empty((n, T, dx))
    v = np.empty((n, T, du))
    for t in range(T):
        xt = x[:, t]
        u[:, t] = xt @ policy.D[t].T + policy.d[t]
        gam[:, t] = xt @ policy.E[t].T + policy.e[t]
        eta[:, t] = xt @ policy.F[t].T + policy.f[t]
        w[:, t] = zw[:, t] @ Lw[t].T
        v[:, t] = zv[:, t] @ Lv[t].T
        if shifted:
            w[:, t] += gam[:, t]
            v[:, t] += eta[:, t]
        x[:, t + 1] = model.a + xt @ model.A.T + (u[:, t] + v[:, t]) @ model.B.T + w[:, t]
    return {"x": x, "u": u, "gamma": gam, "eta": eta, "w": w, "v": v}


def sample_paths(model, policy, n, seed, shifted, start=0, workers=1, x0=None, stream="paths"):
    z = standard_normals(seed, stream, start, n, (model.T, model.dx + model.du), workers)
    return rollout(model, policy, z[..., :model.dx], z[..., model.dx:], shifted, x0=x0)
