"""Embedding-space matching and robust affine initialisation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from facegeom import kernels
from facegeom.errors import DegenerateSample, TooFewPairs

DAMPING = 1e-12
COPLANAR_TOL = 1e-6
MAX_REFITS = 20


@dataclass(frozen=True)
class AffineTransform:
    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        lin = np.array(self.linear, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(t))):
            raise ValueError("affine transform entries must be finite")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    def matrix(self) -> np.ndarray:
        """3x4 row-major ``[linear | translation]``."""
        return np.hstack([self.linear, self.translation[:, None]])

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.linear.T + self.translation

    def to_json(self) -> str:
        return json.dumps(self.matrix().tolist())

    @classmethod
    def from_json(cls, text):
        return cls.from_matrix(json.loads(text))


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    inlier_threshold: float = 3.0
    min_sample: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be > 0")
        if self.min_sample != 4:
            raise ValueError("an affine map in 3D needs minimal samples of 4 pairs")


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Template-to-target vertex pairs with per-pair active flags."""

    template_idx: np.ndarray
    target_idx: np.ndarray
    active: np.ndarray = None
    match_space: str = "embedding"

    def __post_init__(self):
        src = np.asarray(self.template_idx, dtype=np.int64)
        dst = np.asarray(self.target_idx, dtype=np.int64)
        if src.shape != dst.shape or src.ndim != 1:
            raise ValueError("template_idx and target_idx must be equal-length vectors")
        act = np.ones(len(src), dtype=bool) if self.active is None else np.asarray(self.active, bool)
        if act.shape != src.shape:
            raise ValueError("active flags must match the pair count")
        if self.match_space not in ("embedding", "euclidean"):
            raise ValueError(f"unknown match space {self.match_space!r}")
        object.__setattr__(self, "template_idx", src)
        object.__setattr__(self, "target_idx", dst)
        object.__setattr__(self, "active", act)

    def __len__(self):
        return len(self.template_idx)

    @property
    def active_count(self) -> int:
        return int(self.active.sum())

    def with_active(self, active):
        return replace(self, active=np.asarray(active, dtype=bool))

    def active_pairs(self):
        return self.template_idx[self.active], self.target_idx[self.active]


def nearest_lowest_index(points, queries, workers=1):
    """Nearest ``points`` row for each query; exact distance ties go to the
    smallest index."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    tree = cKDTree(points)
    k = min(4, len(points))
    dist, idx = tree.query(queries, k=k, workers=workers)
    if k == 1:
        return np.asarray(idx, dtype=np.int64).reshape(-1)
    dist = dist.reshape(len(queries), k)
    idx = idx.reshape(len(queries), k)
    tied = dist == dist[:, :1]
    return np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1).astype(np.int64)


def match_embedding_nn(template, target) -> CorrespondenceSet:
    """Pair every template vertex with the target vertex closest in embedding space."""
    idx = nearest_lowest_index(target.embedding, template.embedding, kernels.thread_count())
    return CorrespondenceSet(np.arange(len(idx)), idx, match_space="embedding")


def match_euclidean_nn(vertices, target) -> CorrespondenceSet:
    """Pair each of ``vertices`` with the physically nearest target vertex."""
    idx = nearest_lowest_index(target.vertices, vertices, kernels.thread_count())
    return CorrespondenceSet(np.arange(len(idx)), idx, match_space="euclidean")


def fit_affine_lstsq(src, dst, damping=DAMPING) -> AffineTransform:
    """Least-squares affine map via damped normal equations."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    design = np.hstack([src, np.ones((len(src), 1))])
    normal = design.T @ design + damping * np.eye(4)
    sol = np.linalg.solve(normal, design.T @ dst)
    return AffineTransform(sol[:3].T, sol[3])


def _minimal_models(src, dst, samples):
    """Exact affine maps through each 4-point sample, plus a validity flag."""
    p = src[samples]
    q = dst[samples]
    e = p[:, 1:] - p[:, :1]
    vol = np.abs(np.linalg.det(e))
    lengths = np.linalg.norm(e, axis=2).prod(axis=1)
    ok = vol > COPLANAR_TOL * np.where(lengths > 0, lengths, 1.0)
    ok &= lengths > 0
    design = np.concatenate([p, np.ones(p.shape[:2] + (1,))], axis=2)
    design[~ok] = np.eye(4)
    sol = np.linalg.solve(design, q)
    models = np.concatenate([sol[:, :3].transpose(0, 2, 1), sol[:, 3][:, :, None]], axis=2)
    det = np.linalg.det(models[:, :, :3])
    ok &= np.abs(det) > 1e-9
    ok &= np.all(np.isfinite(models), axis=(1, 2))
    return models, ok


def sample_indices(n, cfg: RansacConfig, size):
    """Minimal-sample index sequence for a RANSAC run.

    A Philox generator keyed by ``cfg.seed`` draws, for iteration ``k`` in
    order, ``rng.choice(n, size, replace=False)``.
    """
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    return np.stack([rng.choice(n, size, replace=False) for _ in range(cfg.iterations)])


def best_model_index(counts, sse):
    """Most inliers, then smallest inlier error, then earliest iteration."""
    order = np.lexsort((np.arange(len(counts)), sse, -counts))
    return int(order[0])


def estimate_affine_ransac(pairs: CorrespondenceSet, template, target, cfg: RansacConfig = None):
    """Robust affine map carrying template vertices onto their target partners.

    Returns ``(AffineTransform, inliers)`` with ``inliers`` a boolean mask over
    all pairs (inactive pairs are never inliers). The winning minimal model is
    refit by least squares on its consensus set, and the refit/re-select cycle
    repeats until the inlier set is stable.
    """
    cfg = cfg or RansacConfig()
    t_idx, c_idx = pairs.active_pairs()
    n = len(t_idx)
    if n < cfg.min_sample:
        raise TooFewPairs(f"{n} active pair(s); affine RANSAC needs at least {cfg.min_sample}")
    src = np.asarray(template.vertices)[t_idx]
    dst = np.asarray(target.vertices)[c_idx]

    samples = sample_indices(n, cfg, cfg.min_sample)
    models, ok = _minimal_models(src, dst, samples)
    if not ok.any():
        raise DegenerateSample("every RANSAC sample was coplanar or singular")
    counts, sse = kernels.affine_consensus(src, dst, models, cfg.inlier_threshold)
    counts = np.where(ok, counts, -1)
    sse = np.where(ok, sse, np.inf)
    best = best_model_index(counts, sse)

    model = AffineTransform.from_matrix(models[best])
    thr2 = cfg.inlier_threshold ** 2

    def select(m):
        r = m.apply(src) - dst
        return (r * r).sum(axis=1) <= thr2

    inl = select(model)
    for _ in range(MAX_REFITS):
        if inl.sum() < cfg.min_sample:
            break
        refit = fit_affine_lstsq(src[inl], dst[inl])
        if abs(np.linalg.det(refit.linear)) <= 1e-9:
            break
        model = refit
        new = select(model)
        if np.array_equal(new, inl):
            break
        inl = new

    inliers = np.zeros(len(pairs), dtype=bool)
    inliers[np.flatnonzero(pairs.active)[inl]] = True
    return model, inliers
