"""Analytic test scenes with exact ground truth.

Every scene is a parametric surface over the unit disk ``u = (u1, u2)``:

* ``sphere``: ``r * (u1, u2, sqrt(1 - |u|^2))``
* ``paraboloid``: ``(R u1, R u2, h (1 - |u|^2))``
* ``embossed_plane``: a shallow paraboloid (sag ``h``) whose intensity
  carries sinusoidal stripes along x; the stripes are not in the geometry.

The canonical embedding of a surface point is its undeformed shape coordinate
(``e(u)``, within [-1, 1]). The target surface is
``A (base(u) + d(u) n(u)) + t`` with an optional Gaussian bump ``d`` along
the base normal ``n`` and a planted affine ``(A, t)``; it is rendered with an
orthographic camera by solving ``S_xy(u) = pixel`` per pixel with Newton's
method.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from facegeom.maps import CameraMeta, MapStack, save_map_stack
from facegeom.mesh import TemplateMesh, TriangleMesh, icosphere
from facegeom.meshio import write_ply
from facegeom.rigid import AffineTransform

KINDS = ("sphere", "paraboloid", "embossed_plane")
_NEWTON_TOL = 1e-11


@dataclass(frozen=True)
class PlantedAffine:
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def transform(self) -> AffineTransform:
        rot = Rotation.from_euler("xyz", self.rotation_deg, degrees=True).as_matrix()
        return AffineTransform(rot @ np.diag(self.scale), np.asarray(self.translation, float))


@dataclass(frozen=True)
class Bump:
    """Gaussian displacement along the base normal, centred in parameter space."""

    amplitude: float = 0.0
    center: tuple = (0.0, 0.0)
    width: float = 0.3


@dataclass(frozen=True)
class FixtureSpec:
    kind: str = "sphere"
    resolution: int = 128
    radius: float = 50.0
    height: float | None = None
    pixel_scale: float | None = None
    deformation: Bump = field(default_factory=Bump)
    affine: PlantedAffine = field(default_factory=PlantedAffine)
    noise: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0
    template_level: int = 5
    template_cap_deg: float = 62.0
    template_spacing: float = 2.5
    # parameter radius of the visible (masked) region; None keeps it a small
    # margin beyond the template so correspondences stay near its bounding box
    render_limit: float | None = None
    stripe_period_px: float = 8.0
    stripe_amplitude: float = 0.25

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16")
        if not self.radius > 0:
            raise ValueError("radius must be > 0")
        if not 0.0 <= self.outlier_fraction <= 0.5:
            raise ValueError("outlier_fraction must be in [0, 0.5]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if isinstance(self.deformation, dict):
            object.__setattr__(self, "deformation", Bump(**self.deformation))
        if isinstance(self.affine, dict):
            object.__setattr__(self, "affine", PlantedAffine(**self.affine))

    @property
    def surface_height(self) -> float:
        if self.height is not None:
            return self.height
        return {"sphere": self.radius, "paraboloid": 0.6 * self.radius,
                "embossed_plane": 0.08 * self.radius}[self.kind]

    @property
    def visible_limit(self) -> float:
        if self.render_limit is not None:
            return self.render_limit
        if self.kind == "sphere":
            return float(np.sin(np.radians(min(self.template_cap_deg + 3.0, 90.0))))
        return 0.93

    @property
    def scale(self) -> float:
        """Millimetres per pixel."""
        if self.pixel_scale is not None:
            return self.pixel_scale
        return 2.4 * self.radius / self.resolution

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "FixtureSpec":
        data = dict(data)
        if isinstance(data.get("deformation"), dict):
            bump = dict(data["deformation"])
            bump["center"] = tuple(bump.get("center", (0.0, 0.0)))
            data["deformation"] = Bump(**bump)
        if isinstance(data.get("affine"), dict):
            data["affine"] = PlantedAffine(**{k: tuple(v) for k, v in data["affine"].items()})
        return cls(**data)


@dataclass(frozen=True, eq=False)
class Fixture:
    spec: FixtureSpec
    stack: MapStack
    template: TemplateMesh
    ground_truth: TriangleMesh
    transform: AffineTransform
    scrambled: np.ndarray


class _Surface:
    """Base shape, normal and embedding of a fixture kind."""

    def __init__(self, spec: FixtureSpec):
        self.kind = spec.kind
        self.r = spec.radius
        self.h = spec.surface_height

    def embedding(self, u):
        u1, u2 = u[..., 0], u[..., 1]
        rho2 = u1 * u1 + u2 * u2
        if self.kind == "sphere":
            return np.stack([u1, u2, np.sqrt(np.maximum(0.0, 1.0 - rho2))], axis=-1)
        return np.stack([u1, u2, 1.0 - rho2], axis=-1)

    def base(self, u):
        e = self.embedding(u)
        if self.kind == "sphere":
            return self.r * e
        return np.stack([self.r * e[..., 0], self.r * e[..., 1], self.h * e[..., 2]], axis=-1)

    def normal(self, u):
        if self.kind == "sphere":
            return self.embedding(u)
        # z = h (1 - (x^2 + y^2) / r^2)
        u1, u2 = u[..., 0], u[..., 1]
        gx = -2.0 * self.h * u1 / self.r
        gy = -2.0 * self.h * u2 / self.r
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _bump(bump: Bump, u):
    if bump.amplitude == 0.0:
        return np.zeros(u.shape[:-1])
    d2 = ((u - np.asarray(bump.center)) ** 2).sum(axis=-1)
    return bump.amplitude * np.exp(-d2 / (2.0 * bump.width ** 2))


def _deformed(surface, bump, points, u):
    """Apply the bump to base ``points`` located at parameters ``u``."""
    d = _bump(bump, u)
    if bump.amplitude == 0.0:
        return points
    return points + d[..., None] * surface.normal(u)


def _render(spec, surface, transform, camera):
    """Solve for the surface parameter seen at each pixel centre."""
    res = spec.resolution
    rows, cols = np.mgrid[0:res, 0:res]
    px, py = camera.unproject(rows.ravel().astype(float), cols.ravel().astype(float))
    target = np.stack([px, py], axis=1)

    def forward(u):
        pts = _deformed(surface, spec.deformation, surface.base(u), u)
        return transform.apply(pts.reshape(-1, 3)).reshape(pts.shape)

    g = np.linspace(-1.0, 1.0, 401)
    gu = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    gu = gu[(gu ** 2).sum(axis=1) <= spec.visible_limit ** 2]
    tree = cKDTree(forward(gu)[:, :2])
    dist, nearest = tree.query(target)
    candidate = dist <= 3.0 * camera.scale
    u = gu[nearest].copy()

    h = 1e-7
    converged = np.zeros(len(u), dtype=bool)
    active = candidate.copy()
    for _ in range(60):
        if not active.any():
            break
        ua = u[active]
        f0 = forward(ua)[:, :2] - target[active]
        res_norm = np.linalg.norm(f0, axis=1)
        done = res_norm < _NEWTON_TOL
        jac = np.empty((len(ua), 2, 2))
        for k in range(2):
            step = np.zeros(2)
            step[k] = h
            jac[:, :, k] = (forward(ua + step)[:, :2] - forward(ua - step)[:, :2]) / (2 * h)
        det = np.linalg.det(jac)
        safe = np.abs(det) > 1e-14
        jac[~safe] = np.eye(2)
        delta = np.linalg.solve(jac, f0[:, :, None])[:, :, 0]
        ua_new = np.where(done[:, None], ua, ua - delta)
        idx = np.flatnonzero(active)
        u[idx] = ua_new
        converged[idx[done]] = True
        still = ~done & safe & ((ua_new ** 2).sum(axis=1) < 1.0)
        active[idx[~still]] = False
    final = forward(u)[:, :2] - target
    ok = candidate & (np.linalg.norm(final, axis=1) < 1e-9)
    ok &= (u ** 2).sum(axis=1) <= spec.visible_limit ** 2
    return u.reshape(res, res, 2), ok.reshape(res, res)


def _sphere_template(spec):
    ico = icosphere(spec.template_level, 1.0)
    e = np.asarray(ico.vertices)
    keep = e[:, 2] >= np.cos(np.radians(spec.template_cap_deg))
    return _submesh(e, ico.faces, keep)


def _grid_template(spec):
    step = spec.template_spacing / spec.radius
    n = int(np.floor(0.9 / step))
    g = np.arange(-n, n + 1) * step
    u1, u2 = np.meshgrid(g, g)
    uv = np.stack([u1.ravel(), u2.ravel()], axis=1)
    m = len(g)
    idx = np.arange(m * m).reshape(m, m)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    keep = (uv ** 2).sum(axis=1) <= 0.9 ** 2 + 1e-12
    return _submesh(uv, faces, keep)


def _submesh(params, faces, keep):
    faces = faces[keep[faces].all(axis=1)]
    used = np.zeros(len(params), dtype=bool)
    used[faces.ravel()] = True
    remap = np.full(len(params), -1, dtype=np.int64)
    remap[used] = np.arange(used.sum())
    return params[used], remap[faces]


def generate_fixture(spec: FixtureSpec) -> Fixture:
    """Render ``spec`` to a MapStack and build the matching template and truth.

    Deterministic in ``spec`` (all randomness comes from ``spec.seed``).
    """
    rng = np.random.Generator(np.random.Philox(spec.seed))
    surface = _Surface(spec)
    transform = spec.affine.transform()
    res = spec.resolution
    camera = CameraMeta(scale=spec.scale, cx=res / 2.0, cy=res / 2.0)

    u, ok = _render(spec, surface, transform, camera)
    pts = _deformed(surface, spec.deformation, surface.base(u), u)
    xyz = transform.apply(pts.reshape(-1, 3)).reshape(res, res, 3)
    corr = surface.embedding(u)
    xyz[~ok] = np.nan
    corr[~ok] = np.nan

    if spec.noise > 0:
        noise = rng.normal(0.0, spec.noise, size=(res, res))
        xyz[..., 2] = np.where(ok, xyz[..., 2] + noise, np.nan)
    depth = xyz[..., 2].copy()

    # template in canonical position
    if spec.kind == "sphere":
        params, faces = _sphere_template(spec)
        emb = params
        tverts = spec.radius * params
        tparams = params[:, :2]
    else:
        tparams, faces = _grid_template(spec)
        emb = surface.embedding(tparams)
        tverts = surface.base(tparams)
    template = TemplateMesh(TriangleMesh(tverts, faces), emb)

    scrambled = np.zeros((res, res), dtype=bool)
    valid_idx = np.flatnonzero(ok.ravel())
    count = int(np.floor(spec.outlier_fraction * len(valid_idx)))
    if count:
        pick = rng.choice(valid_idx, count, replace=False)
        lo, hi = emb.min(axis=0), emb.max(axis=0)
        flat = corr.reshape(-1, 3)
        flat[pick] = lo + (hi - lo) * rng.random((count, 3))
        scrambled.ravel()[pick] = True

    if spec.kind == "embossed_plane":
        x = xyz[..., 0]
        period = spec.stripe_period_px * camera.scale
        intensity = 0.5 + spec.stripe_amplitude * np.sin(2.0 * np.pi * x / period)
    else:
        n = surface.normal(u)
        intensity = 0.2 + 0.6 * np.clip(n[..., 2], 0.0, 1.0)
    intensity = np.where(ok, intensity, 0.0)

    gt_pts = _deformed(surface, spec.deformation, tverts, tparams)
    ground_truth = TriangleMesh(transform.apply(gt_pts), faces)
    stack = MapStack(intensity, depth, xyz, corr, ok, camera)
    return Fixture(spec, stack, template, ground_truth, transform, scrambled)


def write_fixture(fixture: Fixture, out_dir, stem="sample"):
    """Write maps, template, truth mesh, transform and spec under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_map_stack(fixture.stack, out / stem)
    write_ply(out / "template.ply", fixture.template)
    write_ply(out / "ground_truth.ply", fixture.ground_truth)
    (out / "transform.json").write_text(fixture.transform.to_json() + "\n")
    spec = json.dumps(fixture.spec.to_dict(), indent=2, sort_keys=True)
    (out / "spec.json").write_text(spec + "\n")
