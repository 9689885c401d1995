"""Pure numpy implementations of the hot loops.

Same signatures and semantics as the compiled ``_ckernels`` module; used when
the extension is not built or ``FACEGEOM_BACKEND=python`` is set.
"""
import numpy as np

_CHUNK = 64


def detail_displacement(vertices, normals, mu, indptr, indices, num_threads=0):
    n = len(vertices)
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(n), counts)
    d = vertices[rows] - vertices[indices]
    length = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
    nr = normals[rows]
    proj = np.abs(d[:, 0] * nr[:, 0] + d[:, 1] * nr[:, 1] + d[:, 2] * nr[:, 2])
    a = np.exp(-length)
    term = a * (mu[rows] - mu[indices]) * (1.0 - proj / length)
    num = np.bincount(rows, weights=term, minlength=n)
    den = np.bincount(rows, weights=a, minlength=n)
    out = np.zeros(n)
    has = counts > 0
    out[has] = num[has] / den[has]
    return out


def affine_consensus(src, dst, models, threshold, num_threads=0):
    thr2 = threshold * threshold
    k = len(models)
    counts = np.empty(k, dtype=np.int64)
    sse = np.empty(k)
    for start in range(0, k, _CHUNK):
        m = models[start:start + _CHUNK]
        pred = np.einsum("kij,nj->kni", m[:, :, :3], src) + m[:, None, :, 3]
        r2 = ((pred - dst[None]) ** 2).sum(axis=2)
        inl = r2 <= thr2
        counts[start:start + _CHUNK] = inl.sum(axis=1)
        sse[start:start + _CHUNK] = np.where(inl, r2, 0.0).sum(axis=1)
    return counts, sse


def line_consensus(est, gt, models, threshold, num_threads=0):
    k = len(models)
    counts = np.empty(k, dtype=np.int64)
    sse = np.empty(k)
    for start in range(0, k, _CHUNK):
        m = models[start:start + _CHUNK]
        r = np.abs((est[None] - m[:, 1:2]) / m[:, 0:1] - gt[None])
        inl = r <= threshold
        counts[start:start + _CHUNK] = inl.sum(axis=1)
        sse[start:start + _CHUNK] = np.where(inl, r * r, 0.0).sum(axis=1)
    return counts, sse
