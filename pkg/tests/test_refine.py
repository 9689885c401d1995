import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from facegeom import kernels
from facegeom.errors import NoValidPixels, ZeroLengthEdge
from facegeom.maps import CameraMeta, MapStack
from facegeom.mesh import TriangleMesh, cotangent_laplacian, grid_mesh, icosphere, \
    subdivide_midpoint, vertex_normals
from facegeom.meshio import read_ply
from facegeom.refine import RefineConfig, VertexTexture, apply_detail_displacement, \
    data_driven_displacement, fairing_displacement, heat_operator, highpass_texture, \
    refine_mesh, sample_intensity, write_refined_ply
from tests.helpers import detail_term_double_loop, random_mesh


def image_stack(intensity, scale=1.0, mask=None):
    h, w = intensity.shape
    mask = np.ones((h, w), bool) if mask is None else mask
    cam = CameraMeta(scale, w / 2, h / 2)
    rows, cols = np.mgrid[0:h, 0:w]
    x, y = cam.unproject(rows, cols)
    xyz = np.stack([x, y, np.zeros_like(x)], axis=-1)
    xyz[~mask] = np.nan
    return MapStack(intensity, xyz[..., 2], xyz, np.where(mask[..., None], xyz, np.nan), mask, cam)


def mesh_over_image(h, w, scale=1.0):
    """Grid mesh whose vertices sit on pixel centres of an ``h`` x ``w`` image."""
    g = grid_mesh(w, h, scale)
    v = np.asarray(g.vertices) - [w / 2 * scale, 0, 0]
    v[:, 1] = h / 2 * scale - v[:, 1]
    return g.with_vertices(v)


def curvature_energy(mesh):
    lv = cotangent_laplacian(mesh) @ np.asarray(mesh.vertices)
    return float(((lv * lv).sum(axis=1) / mesh.mixed_vertex_areas()).sum())


class TestSampling:
    def test_pixel_centres(self, rng):
        img = rng.random((6, 7))
        tex = sample_intensity(mesh_over_image(6, 7), image_stack(img))
        assert np.array_equal(tex.tau, img.ravel())
        assert not tex.filled.any()

    def test_constant(self, rng):
        mesh = TriangleMesh(rng.uniform(-3, 3, (30, 3)), [[0, 1, 2]])
        tex = sample_intensity(mesh, image_stack(np.full((8, 8), 0.4)))
        assert np.all(tex.tau == 0.4)

    def test_checkerboard_brute_force(self, plane_fixture, rng):
        stack = plane_fixture.stack
        rows, cols = np.mgrid[0:stack.height, 0:stack.width]
        board = ((rows // 4 + cols // 4) % 2).astype(float)
        stack = MapStack(board, stack.depth, stack.xyz, stack.correspondence, stack.mask,
                         stack.camera)
        v = np.asarray(plane_fixture.template.vertices) + rng.normal(0, 0.3, (1, 3))
        mesh = plane_fixture.template.mesh.with_vertices(v)
        tex = sample_intensity(mesh, stack)
        r, c = stack.camera.project(v)
        vr, vc = np.nonzero(stack.mask)
        d = (r[:, None] - vr) ** 2 + (c[:, None] - vc) ** 2
        best = d.argmin(axis=1)
        near = np.sqrt(d.min(axis=1)) <= 5.0
        assert np.array_equal(tex.tau[near], board[vr[best], vc[best]][near])

    def test_far_vertices_filled(self):
        img = np.zeros((10, 10))
        img[:, :5] = 1.0
        mask = np.zeros((10, 10), bool)
        mask[:, :5] = True
        # a strip running from inside the mask to 20 px outside
        g = grid_mesh(30, 2)
        v = np.asarray(g.vertices) - [5, 0.5, 0]
        tex = sample_intensity(g.with_vertices(v), image_stack(img, mask=mask))
        assert tex.filled.any() and not tex.filled.all()
        assert np.allclose(tex.tau, 1.0)

    def test_no_valid_pixels(self):
        mask = np.zeros((4, 4), bool)
        with pytest.raises(NoValidPixels):
            sample_intensity(grid_mesh(2, 2), image_stack(np.zeros((4, 4)), mask=mask))


class TestHighpass:
    def test_constant(self, rng):
        v, f = random_mesh(rng, n_side=12)
        mesh = TriangleMesh(v, f)
        assert np.abs(highpass_texture(mesh, np.full(mesh.vertex_count, 3.7))).max() < 1e-10

    def test_small_dt(self, rng):
        v, f = random_mesh(rng, n_side=12)
        mesh = TriangleMesh(v, f)
        mu = highpass_texture(mesh, rng.random(mesh.vertex_count), RefineConfig(dt=1e-12))
        assert np.abs(mu).max() < 1e-6

    def test_dense_oracle(self, rng):
        v, f = random_mesh(rng, n_side=22)
        mesh = TriangleMesh(v, f)
        assert mesh.vertex_count <= 500
        tau = rng.random(mesh.vertex_count)
        dense = heat_operator(mesh, 0.2).toarray()
        oracle = tau - np.linalg.solve(dense, tau)
        assert np.abs(highpass_texture(mesh, tau) - oracle).max() < 1e-8

    @given(st.integers(0, 2 ** 32 - 1), st.floats(-5, 5), st.floats(-5, 5))
    def test_linear(self, seed, a, b):
        rng = np.random.default_rng(seed)
        v, f = random_mesh(rng, n_side=8)
        mesh = TriangleMesh(v, f)
        t1, t2 = rng.random((2, mesh.vertex_count))
        lhs = highpass_texture(mesh, a * t1 + b * t2)
        rhs = a * highpass_texture(mesh, t1) + b * highpass_texture(mesh, t2)
        assert np.abs(lhs - rhs).max() < 1e-8


class TestDataTerm:
    def test_constant_mu(self, rng):
        v, f = random_mesh(rng, n_side=8)
        mesh = TriangleMesh(v, f)
        assert np.all(data_driven_displacement(mesh, np.full(len(v), 2.0)) == 0)

    def test_hand_case(self):
        # vertex 0 has exactly one neighbour, at unit distance in its tangent
        # plane; a one-edge neighbourhood is not expressible as triangles, so
        # the adjacency goes straight to the kernel
        v = np.array([[0, 0, 0], [1, 0, 0], [5, 5, 0], [6, 5, 0], [5, 6, 0]], float)
        indptr = np.array([0, 1, 2, 4, 6, 8])
        indices = np.array([1, 0, 3, 4, 2, 4, 2, 3])
        normals = np.tile([0.0, 0.0, 1.0], (5, 1))
        mu = np.array([0.1, 0.0, 0, 0, 0])
        out = kernels.detail_displacement(v, normals, mu, indptr, indices)
        assert out[0] == pytest.approx(0.1, abs=1e-15)
        assert out[1] == pytest.approx(-0.1, abs=1e-15)

    def test_isolated_vertex_zero(self, rng):
        v = np.vstack([grid_mesh(3, 3).vertices, [[9.0, 9.0, 9.0]]])
        mesh = TriangleMesh(v, grid_mesh(3, 3).faces)
        out = data_driven_displacement(mesh, rng.random(10), normals=np.tile([0, 0, 1.0], (10, 1)))
        assert out[9] == 0.0

    def test_zero_length_edge(self):
        v = np.array([[0, 0, 0], [0, 0, 0], [0, 1, 0]], float)
        mesh = TriangleMesh(v, [[0, 1, 2]])
        with pytest.raises(ZeroLengthEdge):
            data_driven_displacement(mesh, np.zeros(3), normals=np.tile([0, 0, 1.0], (3, 1)))

    def test_double_loop(self, rng):
        v, f = random_mesh(rng, n_side=14)
        mesh = TriangleMesh(v, f)
        n = vertex_normals(mesh)
        mu = rng.normal(size=len(v))
        got = data_driven_displacement(mesh, mu, normals=n)
        assert np.abs(got - detail_term_double_loop(v, f, n, mu)).max() < 1e-12

    @given(st.integers(0, 2 ** 32 - 1), st.floats(-100, 100))
    def test_shift_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        v, f = random_mesh(rng, n_side=6)
        mesh = TriangleMesh(v, f)
        mu = rng.normal(size=len(v))
        a = data_driven_displacement(mesh, mu)
        b = data_driven_displacement(mesh, mu + c)
        assert np.abs(a - b).max() < 1e-9 * max(1.0, abs(c))


class TestFairing:
    def test_plane(self):
        g = grid_mesh(7, 6, 0.8)
        ds = fairing_displacement(g)
        assert np.abs(ds[~g.boundary_vertices()]).max() < 1e-9

    def test_sphere(self):
        m = icosphere(4, 10.0)
        cfg = RefineConfig(fairing_step=0.5)
        ds = fairing_displacement(m, cfg)
        # inward, -step * 2H with H = 1/r
        assert np.all(ds < 0)
        assert np.abs(ds / (-0.5 * 0.2) - 1).max() < 0.1

    def test_zero_step(self):
        assert np.all(fairing_displacement(icosphere(1), RefineConfig(fairing_step=0)) == 0)


class TestApply:
    def test_identity(self, rng):
        v, f = random_mesh(rng, n_side=6)
        mesh = TriangleMesh(v, f)
        z = np.zeros(len(v))
        out = apply_detail_displacement(mesh, z, z)
        assert np.array_equal(out.vertices, mesh.vertices)
        assert np.array_equal(out.faces, mesh.faces)

    def test_eta_zero_is_fairing(self, rng):
        m = icosphere(2, 10.0)
        cfg = RefineConfig(eta=0.0)
        ds = fairing_displacement(m, cfg)
        out = apply_detail_displacement(m, rng.normal(size=m.vertex_count), ds, cfg)
        assert np.allclose(out.vertices, np.asarray(m.vertices) + ds[:, None] * vertex_normals(m))

    def test_shape_check(self):
        m = grid_mesh(2, 2)
        with pytest.raises(ValueError):
            apply_detail_displacement(m, np.zeros(3), np.zeros(4))

    @pytest.mark.parametrize("eta,gain", [(0.2, 1.0), (0.5, 1.0), (0.2, 3.0)])
    def test_planted_sinusoid(self, eta, gain):
        # on a regular grid every interior vertex has neighbours at
        # +-(h,0), +-(0,h), +-(h,h); for mu = sin(kx) the symmetric
        # neighbourhood gives delta_mu = sin(kx) * sum a (1 - cos k dx) / sum a
        h, k = 0.5, 2 * np.pi / 4.0
        g = grid_mesh(30, 12, h)
        x = np.asarray(g.vertices)[:, 0]
        mu = np.sin(k * x)
        cfg = RefineConfig(eta=eta, gain=gain, fairing_step=0.0)
        d_mu = data_driven_displacement(g, mu, cfg)
        out = apply_detail_displacement(g, d_mu, fairing_displacement(g, cfg), cfg)
        dx = np.array([h, -h, 0, 0, h, -h])
        dist = np.array([h, h, h, h, h * np.sqrt(2), h * np.sqrt(2)])
        a = np.exp(-dist)
        amp = eta * gain * (a * (1 - np.cos(k * dx))).sum() / a.sum()
        inner = ~g.boundary_vertices()
        z = np.asarray(out.vertices)[:, 2]
        assert np.abs(z[inner] - amp * mu[inner]).max() <= 0.05 * amp


class TestRefineMesh:
    def test_identity_path(self, plane_fixture):
        cfg = RefineConfig(subdivision_levels=0, eta=0.0, fairing_step=0.0)
        m = plane_fixture.template.mesh
        out = refine_mesh(m, plane_fixture.stack, cfg)
        assert np.array_equal(out.vertices, m.vertices)

    def test_constant_intensity_is_fairing_only(self, sphere_fixture):
        s = sphere_fixture.stack
        stack = MapStack(np.where(s.mask, 0.5, 0.0), s.depth, s.xyz, s.correspondence, s.mask,
                         s.camera)
        m = sphere_fixture.template.mesh
        cfg = RefineConfig()
        out, tex = refine_mesh(m, stack, cfg, return_texture=True)
        sub = subdivide_midpoint(m, 1)
        expect = apply_detail_displacement(sub, np.zeros(sub.vertex_count),
                                           fairing_displacement(sub, cfg), cfg)
        assert np.allclose(out.vertices, expect.vertices, atol=1e-12)
        assert np.abs(tex.mu).max() < 1e-10

    def test_fairing_reduces_curvature_energy(self, rng):
        m = icosphere(3, 20.0)
        v = np.asarray(m.vertices)
        v = v * (1 + rng.normal(0, 0.01, (len(v), 1)))
        noisy = m.with_vertices(v)
        cfg = RefineConfig(eta=0.0, subdivision_levels=0, fairing_step=0.05)
        stack = image_stack(np.full((60, 60), 0.5), scale=1.0)
        out = refine_mesh(noisy, stack, cfg)
        assert curvature_energy(out) < curvature_energy(noisy)

    def test_ply_props(self, tmp_path, plane_fixture):
        out, tex = refine_mesh(plane_fixture.template.mesh, plane_fixture.stack,
                               return_texture=True)
        write_refined_ply(tmp_path / "r.ply", out, tex)
        mesh, props = read_ply(tmp_path / "r.ply")
        assert np.array_equal(props["tau"], tex.tau) and np.array_equal(props["mu"], tex.mu)
        assert mesh.vertex_count == out.vertex_count


def test_texture_validation():
    with pytest.raises(ValueError):
        VertexTexture(np.zeros(3), mu=np.zeros(4))
    with pytest.raises(ValueError):
        RefineConfig(eta=1.5)
