"""Slow but obviously correct reference implementations used as oracles."""
import numpy as np


def normals_face_loop(vertices, faces):
    n = np.zeros_like(vertices)
    for f in faces:
        a, b, c = vertices[f[0]], vertices[f[1]], vertices[f[2]]
        u, w = b - a, c - a
        cross = np.array([u[1] * w[2] - u[2] * w[1],
                          u[2] * w[0] - u[0] * w[2],
                          u[0] * w[1] - u[1] * w[0]])
        for i in f:
            n[i] = n[i] + cross
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, length, out=np.zeros_like(n), where=length > 0)


def dense_cotangent_laplacian(vertices, faces):
    n = len(vertices)
    lap = np.zeros((n, n))
    for f in faces:
        for k in range(3):
            o, i, j = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
            u, w = vertices[i] - vertices[o], vertices[j] - vertices[o]
            cot = np.dot(u, w) / np.linalg.norm(np.cross(u, w))
            lap[i, j] += 0.5 * cot
            lap[j, i] += 0.5 * cot
    lap -= np.diag(lap.sum(axis=1))
    return lap


def detail_term_double_loop(vertices, faces, normals, mu):
    n = len(vertices)
    nbrs = [set() for _ in range(n)]
    for f in faces:
        for a in f:
            for b in f:
                if a != b:
                    nbrs[a].add(int(b))
    out = np.zeros(n)
    for v in range(n):
        num = den = 0.0
        for i in sorted(nbrs[v]):
            d = vertices[v] - vertices[i]
            length = np.sqrt(d @ d)
            alpha = np.exp(-length)
            num += alpha * (mu[v] - mu[i]) * (1.0 - abs(d @ normals[v]) / length)
            den += alpha
        out[v] = num / den if den > 0 else 0.0
    return out


def quad_count(mask):
    m = np.asarray(mask, bool)
    return int((m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1] & m[1:, 1:]).sum())


def random_mesh(rng, n_side=15, jitter=0.25, bend=0.3, n_rows=None):
    """Jittered, gently curved grid patch with ``n_side * n_rows`` vertices
    (``n_rows`` defaults to ``n_side``)."""
    n_rows = n_side if n_rows is None else n_rows
    xs, ys = np.meshgrid(np.arange(n_side, dtype=float), np.arange(n_rows, dtype=float))
    xy = np.stack([xs.ravel(), ys.ravel()], axis=1)
    xy += rng.uniform(-jitter, jitter, xy.shape)
    z = bend * np.sin(0.5 * xy[:, 0]) * np.cos(0.4 * xy[:, 1]) + rng.normal(0, 0.05, len(xy))
    verts = np.column_stack([xy, z])
    idx = np.arange(n_side * n_rows).reshape(n_rows, n_side)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    return verts, faces
