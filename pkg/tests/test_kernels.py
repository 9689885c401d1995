import os
import subprocess
import sys

import numpy as np
import pytest

from facegeom import kernels
from facegeom.mesh import TriangleMesh, vertex_normals
from tests.helpers import random_mesh

BACKENDS = kernels.available_backends()


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
class TestParity:
    def test_detail_displacement(self, rng):
        v, f = random_mesh(rng, n_side=20)
        m = TriangleMesh(v, f)
        n = vertex_normals(m)
        mu = rng.normal(size=len(v))
        indptr, indices = m.adjacency
        a = kernels.detail_displacement(v, n, mu, indptr, indices, backend="python")
        b = kernels.detail_displacement(v, n, mu, indptr, indices, backend="cython")
        assert np.abs(a - b).max() < 1e-13

    def test_affine_consensus(self, rng):
        src = rng.normal(size=(500, 3)) * 10
        dst = src + rng.normal(size=(500, 3))
        models = np.tile(np.hstack([np.eye(3), np.zeros((3, 1))]), (70, 1, 1))
        models += rng.normal(0, 0.01, models.shape)
        ca, sa = kernels.affine_consensus(src, dst, models, 1.5, backend="python")
        cb, sb = kernels.affine_consensus(src, dst, models, 1.5, backend="cython")
        assert np.array_equal(ca, cb)
        assert np.allclose(sa, sb, rtol=1e-12)

    def test_line_consensus(self, rng):
        gt = rng.random(1000)
        est = 2 * gt + 1 + rng.normal(0, 0.05, 1000)
        models = np.column_stack([2 + rng.normal(0, 0.1, 50), 1 + rng.normal(0, 0.1, 50)])
        ca, sa = kernels.line_consensus(est, gt, models, 0.03, backend="python")
        cb, sb = kernels.line_consensus(est, gt, models, 0.03, backend="cython")
        assert np.array_equal(ca, cb)
        assert np.allclose(sa, sb, rtol=1e-12)


def test_thread_count_independent(rng, monkeypatch):
    v, f = random_mesh(rng, n_side=20)
    m = TriangleMesh(v, f)
    n = vertex_normals(m)
    mu = rng.normal(size=len(v))
    indptr, indices = m.adjacency
    out = []
    for threads in ("1", "4"):
        monkeypatch.setenv("FACEGEOM_THREADS", threads)
        out.append(kernels.detail_displacement(v, n, mu, indptr, indices))
    assert np.array_equal(out[0], out[1])


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("FACEGEOM_THREADS", "3")
    assert kernels.thread_count() == 3
    monkeypatch.setenv("FACEGEOM_THREADS", "0")
    assert kernels.thread_count() == (os.cpu_count() or 1)
    monkeypatch.setenv("FACEGEOM_THREADS", "junk")
    assert kernels.thread_count() >= 1


def test_forced_python_backend():
    code = "from facegeom import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, FACEGEOM_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
