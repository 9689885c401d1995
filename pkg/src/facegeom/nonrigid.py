"""Iterative non-rigid registration of a template onto a lifted target mesh.

Energy per solve (target normals and pairings frozen)::

    E(V) = a_point  * sum_J |v_i - c_i|^2
         + a_plane  * sum_J (n(c_i) . (v_i - c_i))^2
         + a_memb   * sum_i sum_{j in N(i)} w_ij |(v_i - r_i) - (v_j - r_j)|^2

``R`` is the reference configuration. By default it is the affinely
initialised template, so the membrane penalises non-smooth displacement
rather than edge length and a rigid or affine fit costs nothing. With
``R = 0`` the membrane term is the literal edge-length form; with
``membrane_reference="previous"`` each solve is anchored at the previous
iterate (a proximal walk towards the data).

Each inner iteration re-pairs, prunes and solves one sparse SPD system of
dimension 3N; the factorisation is reused while the active pairs stay put.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from facegeom.errors import EmptyPairSet, NoActivePairs, SingularSystem
from facegeom.mesh import MEMBRANE_SCHEMES, SparseOperator, SPDSolver, TriangleMesh, \
    membrane_weights, vertex_normals
from facegeom.rigid import AffineTransform, CorrespondenceSet, match_embedding_nn, \
    match_euclidean_nn


WEIGHT_NORMALIZATIONS = ("balanced", "total", "none")
MEMBRANE_REFERENCES = ("initial", "previous", "none")


@dataclass(frozen=True)
class RegistrationConfig:
    alpha_p2point: float = 0.1
    alpha_p2plane: float = 1.0
    alpha_memb_init: float = 1e8
    alpha_memb_stop: float = 1e6
    prune_distance: float = 1.0
    prune_angle: float = 5.0
    inner_tol: float = 0.01
    outer_motion_tol: float = 0.1
    pair_diff_switch: int = 500
    max_outer_iterations: int = 200
    max_inner_iterations: int = 200
    membrane_scheme: str = "bilaplacian"
    # "balanced" scales the weights so the mean per-vertex membrane stiffness
    # at alpha_memb_init equals the data weight a_point + a_plane; "total"
    # makes them sum to one; "none" uses them raw
    weight_normalization: str = "balanced"
    # "initial", "previous" or "none"; see the module docstring
    membrane_reference: str = "initial"
    # "decaying" widens both prune thresholds by prune_schedule_start at the
    # initial stiffness and shrinks them log-linearly to 1x at alpha_memb_stop
    prune_schedule: str = "fixed"
    prune_schedule_start: float = 10.0
    # re-match and re-prune before every inner solve; False freezes the pairs
    # for the whole outer iteration
    inner_rematch: bool = True

    def __post_init__(self):
        if self.alpha_p2point < 0 or self.alpha_p2plane < 0:
            raise ValueError("data term weights must be >= 0")
        if not (self.alpha_memb_init > 0 and self.alpha_memb_stop > 0):
            raise ValueError("stiffness weights must be > 0")
        if not (self.prune_distance > 0 and self.prune_angle > 0):
            raise ValueError("prune thresholds must be > 0")
        if not (self.inner_tol > 0 and self.outer_motion_tol > 0):
            raise ValueError("tolerances must be > 0")
        if self.max_outer_iterations < 1 or self.max_inner_iterations < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.membrane_scheme not in MEMBRANE_SCHEMES:
            raise ValueError(f"membrane_scheme must be one of {MEMBRANE_SCHEMES}")
        if self.weight_normalization not in WEIGHT_NORMALIZATIONS:
            raise ValueError(f"weight_normalization must be one of {WEIGHT_NORMALIZATIONS}")
        if self.membrane_reference not in MEMBRANE_REFERENCES:
            raise ValueError(f"membrane_reference must be one of {MEMBRANE_REFERENCES}")
        if self.prune_schedule not in ("fixed", "decaying"):
            raise ValueError("prune_schedule must be 'fixed' or 'decaying'")

    def prune_thresholds(self, alpha_memb):
        """(distance mm, angle degrees) in effect at stiffness ``alpha_memb``."""
        if self.prune_schedule == "fixed" or self.alpha_memb_init <= self.alpha_memb_stop:
            return self.prune_distance, self.prune_angle
        span = np.log(self.alpha_memb_init) - np.log(self.alpha_memb_stop)
        frac = np.clip((np.log(alpha_memb) - np.log(self.alpha_memb_stop)) / span, 0.0, 1.0)
        factor = self.prune_schedule_start ** frac
        return self.prune_distance * factor, min(90.0, self.prune_angle * factor)


@dataclass
class InnerStep:
    energy_before: float
    energy_after: float
    change: float


@dataclass
class OuterRecord:
    iteration: int
    alpha_memb: float
    active_pairs: int
    energy: float
    mean_motion: float
    match_space: str
    inner: list = field(default_factory=list)
    # stiffness in effect for the next iteration (alpha_memb or its half)
    alpha_next: float = None

    def to_dict(self):
        d = asdict(self)
        d["inner_steps"] = len(self.inner)
        return d


@dataclass
class RegistrationTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def alphas(self):
        """Stiffness sequence including the value the loop stopped at."""
        if not self.records:
            return []
        return [r.alpha_memb for r in self.records] + [self.records[-1].alpha_next]

    def inner_steps(self):
        return [s for r in self.records for s in r.inner]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def normalized_weights(mesh: TriangleMesh, cfg: RegistrationConfig) -> SparseOperator:
    w = membrane_weights(mesh, cfg.membrane_scheme)
    if cfg.weight_normalization == "none":
        return w
    total = w.matrix.sum()
    if not total > 0:
        return w
    if cfg.weight_normalization == "total":
        return SparseOperator(w.matrix / total)
    data = cfg.alpha_p2point + cfg.alpha_p2plane
    if not data > 0:
        data = 1.0
    mean_row = total / mesh.vertex_count
    return SparseOperator(w.matrix * (data / (cfg.alpha_memb_init * mean_row)))


def _mesh_vertices(m):
    return np.asarray(m.vertices if hasattr(m, "vertices") else m, dtype=np.float64)


def prune_pairs(pairs: CorrespondenceSet, template, target, cfg: RegistrationConfig,
                distance=None, angle=None) -> CorrespondenceSet:
    """Deactivate pairs farther apart than ``distance`` (mm) or whose vertex
    normals differ by more than ``angle`` (degrees); defaults come from ``cfg``.
    Pairs touching a vertex without a normal are deactivated too."""
    distance = cfg.prune_distance if distance is None else distance
    angle = cfg.prune_angle if angle is None else angle
    mesh = template.mesh if hasattr(template, "mesh") else template
    tn, tvalid = vertex_normals(mesh, return_valid=True)
    cn, cvalid = target.normals
    i, c = pairs.template_idx, pairs.target_idx
    gap = np.linalg.norm(np.asarray(mesh.vertices)[i] - np.asarray(target.vertices)[c], axis=1)
    cos = np.clip((tn[i] * cn[c]).sum(axis=1), -1.0, 1.0)
    keep = pairs.active & (gap <= distance) & tvalid[i] & cvalid[c]
    keep &= np.degrees(np.arccos(cos)) <= angle
    return pairs.with_active(keep)


def deformation_energy(template, target, pairs: CorrespondenceSet, weights: SparseOperator,
                       cfg: RegistrationConfig, alpha_memb=None, reference=None) -> float:
    """Registration energy of ``template``'s current positions.

    ``alpha_memb`` defaults to ``cfg.alpha_memb_init``; ``reference=None``
    evaluates the membrane on raw positions.
    """
    i, c = pairs.active_pairs()
    if len(i) == 0:
        raise EmptyPairSet("no active pairs")
    alpha = cfg.alpha_memb_init if alpha_memb is None else alpha_memb
    v = _mesh_vertices(template)
    d = v[i] - np.asarray(target.vertices)[c]
    n = target.normals[0][c]
    p2point = (d * d).sum()
    p2plane = ((n * d).sum(axis=1) ** 2).sum()
    disp = v if reference is None else v - _mesh_vertices(reference)
    rows, cols, w = weights.triplets()
    diff = disp[rows] - disp[cols]
    memb = (w * (diff * diff).sum(axis=1)).sum()
    return float(cfg.alpha_p2point * p2point + cfg.alpha_p2plane * p2plane + alpha * memb)


class _StepSystem:
    """Factorised normal equations for one set of frozen pairs."""

    def __init__(self, n, target, pairs, weights, cfg, alpha):
        i, c = pairs.active_pairs()
        if len(i) == 0:
            raise EmptyPairSet("no active pairs")
        self.n = n
        self._check_constrained(n, i, weights, alpha)
        nrm = target.normals[0][c]
        tgt = np.asarray(target.vertices)[c]
        blocks = cfg.alpha_p2point * np.eye(3)[None] + cfg.alpha_p2plane * nrm[:, :, None] * nrm[:, None, :]
        rows = (3 * i[:, None, None] + np.arange(3)[None, :, None]).repeat(3, axis=2)
        cols = (3 * i[:, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1)
        data = sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * n, 3 * n))
        w = weights.matrix
        lap = sp.diags(np.asarray(w.sum(axis=1)).ravel()) - w
        self.stiff = (2.0 * alpha) * sp.kron(lap, sp.identity(3), format="csr")
        self.matrix = (data + self.stiff).tocsc()
        self.base_rhs = np.zeros(3 * n)
        np.add.at(self.base_rhs.reshape(n, 3), i, np.einsum("kab,kb->ka", blocks, tgt))
        self.solver = SPDSolver(self.matrix)

    @staticmethod
    def _check_constrained(n, paired, weights, alpha):
        has_pair = np.zeros(n, dtype=bool)
        has_pair[paired] = True
        if alpha <= 0:
            if not has_pair.all():
                raise SingularSystem("unpaired vertices with zero stiffness")
            return
        w = weights.matrix
        graph = (abs(w) > 0).astype(np.int8)
        ncomp, labels = connected_components(graph, directed=False)
        covered = np.zeros(ncomp, dtype=bool)
        covered[labels[has_pair]] = True
        if not covered.all():
            raise SingularSystem(
                f"{int((~covered).sum())} mesh component(s) carry no active pair")

    def step(self, reference):
        """Minimiser of the energy with membrane reference ``reference``
        (``None`` for the literal edge-length form)."""
        rhs = self.base_rhs if reference is None else self.base_rhs + self.stiff @ reference.ravel()
        return self.solver.solve(rhs).reshape(self.n, 3)


def _same_pairs(a, b):
    return a is not None and np.array_equal(a.active, b.active) and \
        np.array_equal(a.template_idx, b.template_idx) and np.array_equal(a.target_idx, b.target_idx)


def _inner_loop(v, target, pair_fn, weights, cfg, alpha, max_iter, initial):
    """Repeat {pair, solve} from ``v`` until the Frobenius norm of the vertex
    change drops below ``cfg.inner_tol``. ``pair_fn(v)`` returns the pairs
    to freeze for the next solve. Returns ``(v, steps, pairs)``."""
    steps = []
    system = pairs = None
    for _ in range(max_iter):
        new_pairs = pair_fn(v)
        if new_pairs.active_count == 0:
            raise EmptyPairSet("no active pairs")
        if system is None or not _same_pairs(pairs, new_pairs):
            system = _StepSystem(len(v), target, new_pairs, weights, cfg, alpha)
        pairs = new_pairs
        if cfg.membrane_reference == "initial":
            ref = initial
        elif cfg.membrane_reference == "previous":
            ref = v
        else:
            ref = None
        new = system.step(ref)
        before = deformation_energy(v, target, pairs, weights, cfg, alpha, reference=ref)
        after = deformation_energy(new, target, pairs, weights, cfg, alpha, reference=ref)
        change = float(np.linalg.norm(new - v))
        steps.append(InnerStep(before, after, change))
        v = new
        if change < cfg.inner_tol:
            break
    return v, steps, pairs


def solve_deformation_step(template, target, pairs: CorrespondenceSet, weights: SparseOperator,
                           cfg: RegistrationConfig, alpha_memb=None, max_inner=None,
                           reference=None, return_steps=False):
    """Minimise the registration energy for frozen pairs and target normals.

    ``reference`` is the membrane reference configuration (defaults to the
    input positions for ``membrane_reference`` "initial" or "previous", and
    to none for "none"). With "previous" the anchored solve is repeated until
    the vertex change norm is below ``cfg.inner_tol``. The returned mesh keeps
    the template's triangulation; ``return_steps=True`` also returns the
    per-solve :class:`InnerStep` log.
    """
    mesh = template.mesh if hasattr(template, "mesh") else template
    alpha = cfg.alpha_memb_init if alpha_memb is None else alpha_memb
    cap = cfg.max_inner_iterations if max_inner is None else max_inner
    v0 = np.array(mesh.vertices)
    if reference is None and cfg.membrane_reference != "none":
        reference = v0
    elif reference is not None:
        reference = _mesh_vertices(reference)
    v, steps, _ = _inner_loop(v0, target, lambda _v: pairs, weights, cfg, alpha, cap, reference)
    if return_steps:
        return mesh.with_vertices(v), steps
    return mesh.with_vertices(v)


def register(template, target, init: AffineTransform = None, cfg: RegistrationConfig = None,
             log=None):
    """Deform ``template`` (TemplateMesh) onto ``target`` (TargetMesh).

    Each outer iteration runs the inner loop, where every step matches
    (embedding space first, physical nearest neighbour once the active-pair
    count settles between outer iterations), prunes and solves, then halves the stiffness when the mesh moved less than
    ``outer_motion_tol`` on average. Stops once the stiffness falls below
    ``alpha_memb_stop``. Returns ``(TriangleMesh, RegistrationTrace)``.
    """
    cfg = cfg or RegistrationConfig()
    init = init or AffineTransform.identity()
    trace = RegistrationTrace()
    alpha = float(cfg.alpha_memb_init)
    if alpha < cfg.alpha_memb_stop:
        return template.mesh, trace

    mesh = template.mesh.with_vertices(init.apply(template.vertices))
    weights = normalized_weights(mesh, cfg)
    initial = np.array(mesh.vertices)
    v = initial.copy()
    embedding_pairs = match_embedding_nn(template, target)
    match_space = "embedding"
    prev_active = None
    iteration = 0
    while alpha >= cfg.alpha_memb_stop and iteration < cfg.max_outer_iterations:
        dist, angle = cfg.prune_thresholds(alpha)

        frozen = []

        def pair_fn(x, space=match_space, dist=dist, angle=angle, frozen=frozen):
            if frozen:
                return frozen[0]
            raw = embedding_pairs if space == "embedding" else match_euclidean_nn(x, target)
            pairs = prune_pairs(raw, mesh.with_vertices(x), target, cfg, dist, angle)
            if not cfg.inner_rematch:
                frozen.append(pairs)
            return pairs

        try:
            new, steps, pairs = _inner_loop(v, target, pair_fn, weights, cfg, alpha,
                                            cfg.max_inner_iterations, initial)
        except EmptyPairSet:
            raise NoActivePairs(f"all pairs pruned at outer iteration {iteration}", trace) from None
        active = pairs.active_count
        motion = float(np.linalg.norm(new - v, axis=1).mean())
        alpha_next = alpha / 2.0 if motion < cfg.outer_motion_tol else alpha
        trace.records.append(OuterRecord(iteration, alpha, active, steps[-1].energy_after,
                                         motion, match_space, steps, alpha_next))
        if log is not None:
            log(trace.records[-1])
        if prev_active is not None and abs(active - prev_active) < cfg.pair_diff_switch:
            match_space = "euclidean"
        prev_active = active
        alpha = alpha_next
        v = new
        iteration += 1
    return mesh.with_vertices(v), trace
