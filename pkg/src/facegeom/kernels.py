"""Backend selection for the hot loops.

The compiled extension is used when importable; ``FACEGEOM_BACKEND=python``
forces the numpy fallback. ``FACEGEOM_THREADS`` caps internal parallelism
(0 or unset means one thread per CPU). Results never depend on the thread
count: every parallel loop writes disjoint outputs.
"""
import os

import numpy as np

from facegeom import _pykernels

try:
    from facegeom import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_forced = os.environ.get("FACEGEOM_BACKEND", "").strip().lower()
if _ckernels is not None and _forced != "python":
    _impl = _ckernels
    BACKEND = "cython"
else:
    _impl = _pykernels
    BACKEND = "python"


def thread_count():
    raw = os.environ.get("FACEGEOM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython' or 'python'), default active."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    return ["python"] + (["cython"] if _ckernels is not None else [])


def detail_displacement(vertices, normals, mu, indptr, indices, backend=None):
    return get_backend(backend).detail_displacement(
        np.ascontiguousarray(vertices, dtype=np.float64),
        np.ascontiguousarray(normals, dtype=np.float64),
        np.ascontiguousarray(mu, dtype=np.float64),
        np.ascontiguousarray(indptr, dtype=np.int64),
        np.ascontiguousarray(indices, dtype=np.int64),
        num_threads=thread_count(),
    )


def affine_consensus(src, dst, models, threshold, backend=None):
    return get_backend(backend).affine_consensus(
        np.ascontiguousarray(src, dtype=np.float64),
        np.ascontiguousarray(dst, dtype=np.float64),
        np.ascontiguousarray(models, dtype=np.float64),
        float(threshold),
        num_threads=thread_count(),
    )


def line_consensus(est, gt, models, threshold, backend=None):
    return get_backend(backend).line_consensus(
        np.ascontiguousarray(est, dtype=np.float64),
        np.ascontiguousarray(gt, dtype=np.float64),
        np.ascontiguousarray(models, dtype=np.float64),
        float(threshold),
        num_threads=thread_count(),
    )
