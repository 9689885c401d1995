"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line in ``conftest.ACCEPTANCE`` before
asserting; the lines are printed in the terminal summary.
"""
import os
import time
import types

import numpy as np
import pytest

from facegeom import cli, kernels
from facegeom.evaluation import error_statistics, normalize_depth_ransac
from facegeom.fixtures import FixtureSpec, generate_fixture
from facegeom.lifting import lift_maps_to_mesh
from facegeom.maps import CameraMeta, MapStack
from facegeom.mesh import TriangleMesh, subdivide_midpoint, vertex_normals
from facegeom.nonrigid import register
from facegeom.refine import data_driven_displacement, heat_operator, highpass_texture, \
    refine_mesh
from facegeom.rigid import CorrespondenceSet, RansacConfig, estimate_affine_ransac, \
    match_embedding_nn
from tests.conftest import ACCEPTANCE, BUMP, PLANTED
from tests.helpers import detail_term_double_loop, quad_count, random_mesh


def record(n, ok, line):
    ACCEPTANCE[n] = (bool(ok), line)
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {line}")


@pytest.fixture(scope="module")
def registration_run():
    """Sphere with planted affine and a 5 mm bump, rendered at 256 px,
    registered single-threaded."""
    spec = FixtureSpec(resolution=256, affine=PLANTED, deformation=BUMP)
    fx = generate_fixture(spec)
    target = lift_maps_to_mesh(fx.stack)
    old = os.environ.get("FACEGEOM_THREADS")
    os.environ["FACEGEOM_THREADS"] = "1"
    try:
        start = time.perf_counter()
        pairs = match_embedding_nn(fx.template, target)
        init, _ = estimate_affine_ransac(pairs, fx.template, target, RansacConfig())
        mesh, trace = register(fx.template, target, init)
        elapsed = time.perf_counter() - start
    finally:
        if old is None:
            del os.environ["FACEGEOM_THREADS"]
        else:
            os.environ["FACEGEOM_THREADS"] = old
    return types.SimpleNamespace(fixture=fx, mesh=mesh, trace=trace, elapsed=elapsed)


def test_criterion_01_registration_accuracy(registration_run):
    run = registration_run
    n = run.fixture.template.vertex_count
    err = np.linalg.norm(np.asarray(run.mesh.vertices) - run.fixture.ground_truth.vertices, axis=1)
    ok = n >= 2562 and err.mean() < 0.5 and run.elapsed < 60.0
    record(1, ok, f"mean vertex error {err.mean():.3f} mm (< 0.5) over {n} vertices, "
                  f"{run.elapsed:.1f} s single-threaded (< 60)")
    assert ok


def test_criterion_02_energy_monotone(registration_run):
    steps = registration_run.trace.inner_steps()
    rel = [(s.energy_after - s.energy_before) / max(abs(s.energy_before), 1e-300) for s in steps]
    worst = max(rel)
    ok = len(steps) >= 50 and worst <= 1e-8
    record(2, ok, f"{len(steps)} inner steps (>= 50), largest relative energy rise {worst:.2e} "
                  "(<= 1e-8)")
    assert ok


def test_criterion_03_stiffness_schedule(registration_run):
    alphas = registration_run.trace.alphas()
    pairs = list(zip(alphas, alphas[1:]))
    halvings = sum(1 for a, b in pairs if b == a / 2)
    only_halvings = all(b == a or b == a / 2 for a, b in pairs)
    ok = alphas[0] == 1e8 and only_halvings and alphas[-1] < 1e6 and halvings >= 7
    record(3, ok, f"alpha {alphas[0]:.0e} -> {alphas[-1]:.4g} in {halvings} exact halvings")
    assert ok


def test_criterion_04_heat_filter():
    rng = np.random.default_rng(4)
    v, f = random_mesh(rng, n_side=22)
    mesh = TriangleMesh(v, f)
    tau = rng.random(mesh.vertex_count)
    oracle = tau - np.linalg.solve(heat_operator(mesh, 0.2).toarray(), tau)
    dev = np.abs(highpass_texture(mesh, tau) - oracle).max()
    const = np.abs(highpass_texture(mesh, np.full(mesh.vertex_count, 0.7))).max()
    ok = mesh.vertex_count <= 500 and dev <= 1e-8 and const <= 1e-10
    record(4, ok, f"{mesh.vertex_count} vertices: max deviation from dense solve {dev:.1e} "
                  f"(<= 1e-8), constant texture {const:.1e} (<= 1e-10)")
    assert ok


def test_criterion_05_detail_term_oracle():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        v, f = random_mesh(rng, n_side=10, n_rows=20, bend=1.0)
        mesh = TriangleMesh(v, f)
        n = vertex_normals(mesh)
        mu = rng.normal(size=len(v))
        oracle = detail_term_double_loop(v, f, n, mu)
        for backend in kernels.available_backends():
            got = data_driven_displacement(mesh, mu, normals=n, backend=backend)
            worst = max(worst, float(np.abs(got - oracle).max()))
    ok = worst <= 1e-12
    record(5, ok, f"100 random 200-vertex meshes, backends {kernels.available_backends()}: "
                  f"max deviation {worst:.1e} (<= 1e-12)")
    assert ok


def _ransac_trial(vertices, affine, seed, gross):
    rng = np.random.default_rng(1000 + seed)
    dst = affine.apply(vertices)
    k = int(0.3 * len(vertices))
    pick = rng.choice(len(vertices), k, replace=False)
    lo, hi = dst.min(axis=0), dst.max(axis=0)
    true = dst[pick].copy()
    redraw = np.ones(k, dtype=bool)
    while redraw.any():
        dst[pick[redraw]] = lo + (hi - lo) * rng.random((redraw.sum(), 3))
        if not gross:
            break
        redraw = np.linalg.norm(dst[pick] - true, axis=1) <= 3.0
    n = len(vertices)
    pairs = CorrespondenceSet(np.arange(n), np.arange(n))
    model, _ = estimate_affine_ransac(pairs, types.SimpleNamespace(vertices=vertices),
                                      types.SimpleNamespace(vertices=dst), RansacConfig(seed=seed))
    return float(np.abs(model.matrix() - affine.matrix()).max())


def test_criterion_06_ransac_affine(sphere_fixture):
    vertices = np.asarray(sphere_fixture.template.vertices)
    affine = PLANTED.transform()
    gross = [_ransac_trial(vertices, affine, s, gross=True) for s in range(100)]
    passed = sum(e <= 1e-3 for e in gross)
    # outliers drawn without the gross constraint can land inside the 3 mm
    # threshold and bias the refit; reported for information
    loose = sum(_ransac_trial(vertices, affine, s, gross=False) <= 1e-3 for s in range(100))
    ok = passed >= 99
    record(6, ok, f"{passed}/100 trials within 1e-3 (>= 99), worst {max(gross):.1e}; "
                  f"unconstrained outliers: {loose}/100")
    assert ok


def test_criterion_07_evaluation_metric():
    rng = np.random.default_rng(7)
    rows, cols = np.mgrid[0:80, 0:90]
    z = 40 + 0.25 * rows + 3 * np.sin(cols / 9.0) + rng.normal(0, 0.02, rows.shape)
    a, b, inl = normalize_depth_ransac(2 * z + 5, z)
    rep = error_statistics(2 * z + 5, z, None, a, b, inl)
    zero = max(rep.mean_err, rep.std_err, rep.median_err, rep.p90_err)
    est = z + rng.normal(0, 0.1, z.shape)
    noisy = error_statistics(est, z)
    err = sorted((100 * np.abs(est - z) / (z.max() - z.min())).ravel().tolist())
    oracle = sum(err) / len(err)
    ok = abs(a - 2) <= 1e-9 and abs(b - 5) <= 1e-9 and zero <= 1e-12 \
        and abs(noisy.mean_err - oracle) <= 1e-12
    record(7, ok, f"(a, b) error ({abs(a - 2):.1e}, {abs(b - 5):.1e}) (<= 1e-9), "
                  f"largest statistic {zero:.1e}, noisy mean vs sort oracle "
                  f"{abs(noisy.mean_err - oracle):.1e} (<= 1e-12)")
    assert ok


def test_criterion_08_lifting(sphere_fixture, paraboloid_fixture):
    rng = np.random.default_rng(8)
    bad = 0
    for _ in range(1000):
        h, w = rng.integers(2, 40, size=2)
        mask = rng.random((h, w)) < rng.uniform(0.2, 1.0)
        if mask.sum() < 3:
            mask.flat[:3] = True
        rows, cols = np.mgrid[0:h, 0:w]
        xyz = np.stack([cols, -rows, np.zeros((h, w))], axis=-1).astype(float)
        xyz[~mask] = np.nan
        stack = MapStack(np.zeros((h, w)), xyz[..., 2], xyz, xyz, mask, CameraMeta())
        bad += lift_maps_to_mesh(stack).mesh.face_count != 2 * quad_count(mask)
    dev = 0.0
    for fx in (sphere_fixture, paraboloid_fixture):
        v = np.asarray(lift_maps_to_mesh(fx.stack).vertices)
        r, hgt = fx.spec.radius, fx.spec.surface_height
        rr = v[:, 0] ** 2 + v[:, 1] ** 2
        z = np.sqrt(r * r - rr) if fx.spec.kind == "sphere" else hgt * (1 - rr / r ** 2)
        dev = max(dev, float(np.abs(v[:, 2] - z).max()))
    ok = bad == 0 and dev <= 1e-9
    record(8, ok, f"face law violated on {bad}/1000 random masks, fixture vertices within "
                  f"{dev:.1e} mm (<= 1e-9)")
    assert ok


def test_criterion_09_determinism(tmp_path):
    scene = tmp_path / "scene"
    assert cli.main(["fixtures", "sphere", "--res", "96", "--seed", "3", "--bump", "4",
                     "--rotation", "3", "-4", "2", "--out", str(scene)]) == 0
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli.main(["reconstruct", "--maps", str(scene / "sample"), "--template",
                         str(scene / "template.ply"), "--out", str(out), "--seed", "0"])
        assert code == 0
        outs.append(out)
    files = ("deformed.ply", "refined.ply", "trace.jsonl", "transform.json")
    same = [(outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files]
    ok = all(same)
    record(9, ok, "byte-identical " + ", ".join(f for f, s in zip(files, same) if s)
           + (" (differs: " + ", ".join(f for f, s in zip(files, same) if not s) + ")"
              if not ok else ""))
    assert ok


def stripe_amplitude(mesh, period):
    """Amplitude of the stripe-frequency component of z after removing a
    quadratic trend."""
    v = np.asarray(mesh.vertices)
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    k = 2 * np.pi / period
    design = np.stack([np.ones_like(x), x, y, x * x, x * y, y * y,
                       np.sin(k * x), np.cos(k * x)], axis=1)
    coef, *_ = np.linalg.lstsq(design, z, rcond=None)
    return float(np.hypot(coef[6], coef[7]))


def test_criterion_10_refinement_signal(plane_fixture):
    fx = plane_fixture
    target = lift_maps_to_mesh(fx.stack)
    pairs = match_embedding_nn(fx.template, target)
    init, _ = estimate_affine_ransac(pairs, fx.template, target)
    deformed, _ = register(fx.template, target, init)
    refined = refine_mesh(deformed, fx.stack)
    period = fx.spec.stripe_period_px * fx.stack.camera.scale
    a_ref = stripe_amplitude(refined, period)
    a_def = stripe_amplitude(deformed, period)
    a_sub = stripe_amplitude(subdivide_midpoint(deformed, 1), period)
    ratio = a_ref / a_def
    ok = ratio >= 10
    record(10, ok, f"stripe amplitude {a_ref:.2e} mm refined vs {a_def:.2e} mm deformed, "
                   f"ratio {ratio:.0f} (>= 10); vs subdivided input {a_ref / a_sub:.1f}")
    assert ok
