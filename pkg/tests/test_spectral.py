import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sparse

from heatgen.fields import SignalField
from heatgen.mesh import Mesh, compute_tangent_frames
from heatgen.procedural import make_grid, make_icosphere, make_tetrahedron
from heatgen.spectral import (
    SpectralOperators,
    assemble_cotan_laplacian,
    build_gradient_operator,
    build_operators,
    eigendecompose,
    heat_filter,
    load_operators,
    read_cache_header,
    save_operators,
)


def brute_force_cotan_weights(mesh):
    """Edge weights by direct angle-by-angle evaluation: for every face and
    every edge, accumulate half the cotangent of the opposite angle."""
    n = mesh.n_vertices
    W = np.zeros((n, n))
    for (i, j, k) in mesh.faces:
        for a, b, c in [(i, j, k), (j, k, i), (k, i, j)]:
            # angle at c, opposite edge (a, b)
            e1 = mesh.vertices[a] - mesh.vertices[c]
            e2 = mesh.vertices[b] - mesh.vertices[c]
            cosang = e1 @ e2 / (np.linalg.norm(e1) * np.linalg.norm(e2))
            angle = np.arccos(np.clip(cosang, -1.0, 1.0))
            W[a, b] += 0.5 / np.tan(angle)
            W[b, a] += 0.5 / np.tan(angle)
    return W


def dense_L_from_weights(W):
    L = -W
    np.fill_diagonal(L, W.sum(axis=1))
    return L


@pytest.fixture(scope="module")
def unit_square():
    # unit right-isosceles two-triangle square split along the diagonal
    verts = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    return Mesh(verts, [[0, 1, 2], [0, 2, 3]])


class TestCotanAssembly:
    def test_unit_square_hand_weights(self, unit_square):
        L, mass = assemble_cotan_laplacian(unit_square)
        # diagonal edge (0, 2): 1/2 (cot 90 + cot 90) = 0
        assert abs(L[0, 2]) < 1e-15
        # boundary edge (0, 1): 1/2 cot 45 = 1/2 (stored negated)
        assert np.isclose(L[0, 1], -0.5, atol=1e-14)
        assert np.isclose(mass.sum(), 1.0)

    @pytest.mark.parametrize("mesh_fn", [
        lambda: make_tetrahedron(),
        lambda: make_icosphere(1),
        lambda: make_grid(5, 5, height_fn=lambda x, y: 0.3 * x * y),
    ])
    def test_matches_brute_force(self, mesh_fn):
        mesh = mesh_fn()
        L, _ = assemble_cotan_laplacian(mesh)
        expect = dense_L_from_weights(brute_force_cotan_weights(mesh))
        assert np.abs(L.toarray() - expect).max() < 1e-12

    def test_row_sums_zero(self, icosphere):
        L, _ = assemble_cotan_laplacian(icosphere)
        assert np.abs(np.asarray(L.sum(axis=1))).max() < 1e-10

    def test_symmetric(self, icosphere):
        L, _ = assemble_cotan_laplacian(icosphere)
        assert abs(L - L.T).max() < 1e-12

    def test_constant_in_kernel(self, icosphere):
        L, mass = assemble_cotan_laplacian(icosphere)
        f = 3.7 * np.ones(icosphere.n_vertices)
        assert np.abs((L @ f) / mass).max() < 1e-10

    def test_psd_random_probes(self, bumpy_grid_50, rng):
        L, _ = assemble_cotan_laplacian(bumpy_grid_50)
        for _ in range(100):
            f = rng.normal(size=bumpy_grid_50.n_vertices)
            assert f @ (L @ f) >= -1e-10

    def test_barycentric_mass(self, tetra):
        _, mass = assemble_cotan_laplacian(tetra)
        # regular tetrahedron: every vertex gets 3 faces / 3
        assert np.allclose(mass, tetra.face_areas[0])
        assert (mass > 0).all()

    def test_zero_area_face_skipped_with_warning(self):
        g = make_grid(3, 2)
        m = Mesh(g.vertices, np.vstack([g.faces, [0, 2, 4]]))
        with pytest.warns(UserWarning, match="zero-area"):
            L, _ = assemble_cotan_laplacian(m)
        L_ref, _ = assemble_cotan_laplacian(g)
        assert abs(L - L_ref).max() < 1e-15

    def test_no_faces_error(self):
        m = Mesh(np.zeros((3, 3)) + np.eye(3), np.zeros((0, 3), dtype=int))
        with pytest.raises(ValueError, match="no faces"):
            assemble_cotan_laplacian(m)

    def test_cot_clamping_bounds_slivers(self):
        # a sliver whose apex angle is ~1e-6 rad: unclamped cot ~ 1e6
        verts = [[0, 0, 0], [1, 0, 0], [0.5, 0.5e-6, 0], [0.5, -1, 0]]
        m = Mesh(verts, [[0, 1, 2], [1, 0, 3]])
        L, _ = assemble_cotan_laplacian(m)
        assert np.abs(L.toarray()).max() < 2 * 0.5 * 50 + 1.0


class TestEigendecompose:
    def test_kernel_mode(self, icosphere):
        L, mass = assemble_cotan_laplacian(icosphere)
        evals, evecs = eigendecompose(L, mass, 10)
        assert evals[0] <= 1e-8
        phi0 = evecs[:, 0]
        assert np.abs(phi0 - phi0.mean()).max() < 1e-6 * abs(phi0.mean())

    def test_iterative_matches_dense(self, icosphere):
        L, mass = assemble_cotan_laplacian(icosphere)
        ev_d, ph_d = eigendecompose(L, mass, 20, method="dense")
        ev_i, ph_i = eigendecompose(L, mass, 20, method="iterative")
        assert np.abs(ev_i[0]) < 1e-8
        rel = np.abs(ev_i[1:] - ev_d[1:]) / np.abs(ev_d[1:])
        assert rel.max() < 1e-8

    def test_m_orthonormal_and_residual(self, icosphere):
        L, mass = assemble_cotan_laplacian(icosphere)
        evals, evecs = eigendecompose(L, mass, 20, method="iterative")
        gram = evecs.T @ (mass[:, None] * evecs)
        assert np.abs(gram - np.eye(20)).max() < 1e-8
        res = L @ evecs - (mass[:, None] * evecs) * evals[None, :]
        assert np.linalg.norm(res, axis=0).max() < 1e-6

    def test_ascending_order(self, icosphere):
        L, mass = assemble_cotan_laplacian(icosphere)
        evals, _ = eigendecompose(L, mass, 30)
        assert (np.diff(evals) >= 0).all()

    def test_k_out_of_range(self, tetra):
        L, mass = assemble_cotan_laplacian(tetra)
        with pytest.raises(ValueError):
            eigendecompose(L, mass, 5)
        with pytest.raises(ValueError):
            eigendecompose(L, mass, 0)

    def test_deterministic_given_seed(self, icosphere):
        L, mass = assemble_cotan_laplacian(icosphere)
        a = eigendecompose(L, mass, 12, method="iterative", seed=7)
        b = eigendecompose(L, mass, 12, method="iterative", seed=7)
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], b[1])

    def test_scale_covariance(self, icosphere):
        L1, m1 = assemble_cotan_laplacian(icosphere)
        scaled = Mesh(3.0 * icosphere.vertices, icosphere.faces)
        L2, m2 = assemble_cotan_laplacian(scaled)
        ev1, _ = eigendecompose(L1, m1, 10)
        ev2, _ = eigendecompose(L2, m2, 10)
        assert np.abs(m2 - 9.0 * m1).max() < 1e-8 * m1.max()
        rel = np.abs(ev2[1:] - ev1[1:] / 9.0) / (ev1[1:] / 9.0)
        assert rel.max() < 1e-8


def toy_operators(mesh, k=None):
    k = k or mesh.n_vertices
    L, mass = assemble_cotan_laplacian(mesh)
    evals, evecs = eigendecompose(L, mass, k)
    return SpectralOperators(
        L=L, mass=mass, evals=evals, evecs=evecs,
        grad=build_gradient_operator(mesh), mesh_hash=mesh.content_hash,
    )


class TestHeatFilter:
    def test_s_zero_is_projection(self, bumpy_grid_50, rng):
        ops = toy_operators(bumpy_grid_50, k=20)
        f = rng.normal(size=(50, 2))
        out = heat_filter(f, 0.0, ops)
        proj = ops.evecs @ (ops.evecs.T @ (ops.mass[:, None] * f))
        assert np.abs(out - proj).max() < 1e-12

    def test_s_zero_full_basis_identity(self, bumpy_grid_50, rng):
        ops = toy_operators(bumpy_grid_50)
        f = rng.normal(size=(50, 3))
        assert np.abs(heat_filter(f, 0.0, ops) - f).max() < 1e-8

    def test_large_s_reaches_mass_weighted_mean(self, bumpy_grid_50, rng):
        ops = toy_operators(bumpy_grid_50)
        f = rng.normal(size=(50, 3))
        out = heat_filter(f, 1e6, ops)
        mean = (ops.mass[:, None] * f).sum(axis=0) / ops.mass.sum()
        assert np.abs(out - mean[None, :]).max() < 1e-6

    def test_matches_dense_matrix_exponential(self, bumpy_grid_50, rng):
        ops = toy_operators(bumpy_grid_50)
        f = rng.normal(size=(50, 3))
        for s in (0.01, 0.1, 1.0):
            out = heat_filter(f, s, ops)
            dense = scipy.linalg.expm(
                -s * np.diag(1.0 / ops.mass) @ ops.L.toarray()) @ f
            rel = np.linalg.norm(out - dense) / np.linalg.norm(dense)
            assert rel < 1e-6

    def test_semigroup(self, bumpy_grid_50, rng):
        ops = toy_operators(bumpy_grid_50, k=30)
        f = rng.normal(size=(50, 3))
        a = heat_filter(heat_filter(f, 0.03, ops), 0.07, ops)
        b = heat_filter(f, 0.1, ops)
        assert np.abs(a - b).max() < 1e-8

    def test_high_frequency_energy_never_increases(self, bumpy_grid_50, rng):
        ops = toy_operators(bumpy_grid_50, k=30)
        f = rng.normal(size=50)
        coeff = ops.evecs.T @ (ops.mass * f)
        for s_small, s_big in [(0.0, 0.05), (0.05, 0.2), (0.2, 1.0)]:
            e_small = np.exp(-2 * s_small * ops.evals) * coeff**2
            e_big = np.exp(-2 * s_big * ops.evals) * coeff**2
            for tau in np.linspace(0, ops.evals[-1], 10):
                sel = ops.evals > tau
                assert e_big[sel].sum() <= e_small[sel].sum() + 1e-12

    def test_mass_weighted_mean_conserved(self, bumpy_grid_50, rng):
        ops = toy_operators(bumpy_grid_50, k=20)
        f = rng.normal(size=(50, 3))
        proj = heat_filter(f, 0.0, ops)
        for s in (0.1, 2.0, 50.0):
            out = heat_filter(f, s, ops)
            a = ops.mass @ out
            b = ops.mass @ proj
            assert np.abs(a - b).max() < 1e-8

    def test_per_channel_times(self, bumpy_grid_50, rng):
        ops = toy_operators(bumpy_grid_50, k=20)
        f = rng.normal(size=(50, 2))
        out = heat_filter(f, [0.1, 0.9], ops)
        assert np.allclose(out[:, 0], heat_filter(f[:, 0], 0.1, ops))
        assert np.allclose(out[:, 1], heat_filter(f[:, 1], 0.9, ops))

    def test_negative_time_rejected(self, bumpy_grid_50):
        ops = toy_operators(bumpy_grid_50, k=5)
        with pytest.raises(ValueError, match="nonnegative"):
            heat_filter(np.ones((50, 1)), -0.1, ops)

    def test_channel_mismatch_rejected(self, bumpy_grid_50):
        ops = toy_operators(bumpy_grid_50, k=5)
        with pytest.raises(ValueError, match="times"):
            heat_filter(np.ones((50, 3)), [0.1, 0.2], ops)

    def test_signal_field_passthrough(self, bumpy_grid_50, rng):
        ops = toy_operators(bumpy_grid_50, k=10)
        f = SignalField(rng.normal(size=(50, 3)), ops.mesh_id)
        out = heat_filter(f, 0.5, ops)
        assert isinstance(out, SignalField)
        assert out.mesh_id == ops.mesh_id

    def test_mesh_binding_enforced(self, bumpy_grid_50, rng):
        ops = toy_operators(bumpy_grid_50, k=10)
        f = SignalField(rng.normal(size=(50, 3)), "deadbeef")
        with pytest.raises(ValueError, match="mesh"):
            heat_filter(f, 0.5, ops)


class TestGradientOperator:
    def test_annihilates_constants(self, bumpy_grid_50):
        G = build_gradient_operator(bumpy_grid_50)
        assert np.abs(G @ np.ones(50)).max() < 1e-8

    def test_linear_fields_on_flat_grid(self, flat_grid_12):
        G = build_gradient_operator(flat_grid_12)
        interior = np.arange(144).reshape(12, 12)[1:-1, 1:-1].ravel()
        gx = G @ flat_grid_12.vertices[:, 0]
        gy = G @ flat_grid_12.vertices[:, 1]
        assert np.abs(gx[interior] - 1.0).max() < 1e-6
        assert np.abs(gy[interior] - 1j).max() < 1e-6

    def test_collinear_ring_rejected(self):
        # vertex 0's one-ring projects to (nearly) parallel directions
        verts = [[0, 0, 0], [1, 0, 0], [2, 0, 0], [1, 1e-9, 0]]
        m = Mesh(verts, [[0, 1, 3], [1, 2, 3]])
        with pytest.raises(ValueError, match="vertex 0"):
            build_gradient_operator(m)

    def test_rotation_covariance(self, bumpy_grid_50, rng):
        # |G f| per vertex is frame-free, hence invariant under rigid motion
        f = rng.normal(size=50)
        g0 = build_gradient_operator(bumpy_grid_50) @ f
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        rotated = Mesh(bumpy_grid_50.vertices @ q.T, bumpy_grid_50.faces)
        g1 = build_gradient_operator(rotated) @ f
        assert np.abs(np.abs(g1) - np.abs(g0)).max() < 1e-9


class TestOperatorCache:
    def test_roundtrip_bitwise(self, tmp_path, small_sphere):
        ops = build_operators(small_sphere, 16)
        path = tmp_path / "ops.hgop"
        save_operators(ops, path)
        back = load_operators(path)
        assert np.array_equal(back.evals, ops.evals)
        assert np.array_equal(back.evecs, ops.evecs)
        assert np.array_equal(back.mass, ops.mass)
        assert abs(back.L - ops.L).max() == 0.0
        assert abs(back.grad - ops.grad).max() == 0.0
        assert back.mesh_hash == ops.mesh_hash

    def test_header(self, tmp_path, small_sphere):
        ops = build_operators(small_sphere, 16)
        path = tmp_path / "ops.hgop"
        save_operators(ops, path)
        version, n, k, mesh_hash = read_cache_header(path)
        assert (version, n, k) == (1, 42, 16)
        assert mesh_hash == small_sphere.content_hash

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.hgop"
        p.write_bytes(b"NOPE" + b"\x00" * 60)
        with pytest.raises(ValueError, match="not an operator cache"):
            load_operators(p)

    def test_default_k_is_128(self):
        from heatgen.net import NetConfig

        assert NetConfig().k == 128
