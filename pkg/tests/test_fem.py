import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from mftd import fem


def _symbolic_element(a, b, nu):
    """Exact K_e of a bilinear a-by-b element (E = t = 1) by symbolic integration."""
    x, y = sympy.symbols("x y")
    N = [(1 - x / a) * (1 - y / b), x / a * (1 - y / b), x / a * y / b, (1 - x / a) * y / b]
    B = sympy.zeros(3, 8)
    for k, Nk in enumerate(N):
        B[0, 2 * k] = sympy.diff(Nk, x)
        B[1, 2 * k + 1] = sympy.diff(Nk, y)
        B[2, 2 * k] = sympy.diff(Nk, y)
        B[2, 2 * k + 1] = sympy.diff(Nk, x)
    D = 1 / (1 - nu**2) * sympy.Matrix([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])
    K = (B.T * D * B).applyfunc(lambda f: sympy.integrate(f, (x, 0, a), (y, 0, b)))
    return np.array(K.evalf(), dtype=float)


def _textbook_square(nu):
    k = np.array([1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
                  -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8])
    idx = [[0, 1, 2, 3, 4, 5, 6, 7], [1, 0, 7, 6, 5, 4, 3, 2], [2, 7, 0, 5, 6, 3, 4, 1],
           [3, 6, 5, 0, 7, 2, 1, 4], [4, 5, 6, 7, 0, 1, 2, 3], [5, 4, 3, 2, 1, 0, 7, 6],
           [6, 3, 4, 1, 2, 7, 0, 5], [7, 2, 1, 4, 3, 6, 5, 0]]
    return k[np.array(idx)] / (1 - nu**2)


def _problem(mesh, F=None, fixed=None, modulus=1.0, thickness=1.0):
    if F is None:
        F, fixed = fem.cantilever_bc(mesh)
    n = mesh.n_elements
    return fem.FemProblem(mesh, np.full(n, modulus) if np.isscalar(modulus) else modulus,
                          np.full(n, thickness) if np.isscalar(thickness) else thickness, F, fixed)


class TestElement:
    def test_unit_square_matches_symbolic_and_textbook(self):
        ke = fem.element_stiffness(1.0, 1.0, 0.3)
        assert_allclose(ke, _symbolic_element(1, 1, sympy.Rational(3, 10)), atol=1e-14)
        assert_allclose(ke, _textbook_square(0.3), atol=1e-14)

    def test_rectangle_matches_symbolic(self):
        ke = fem.element_stiffness(2.0, 0.5, 0.3)
        assert_allclose(ke, _symbolic_element(2, sympy.Rational(1, 2), sympy.Rational(3, 10)),
                        atol=1e-13)

    def test_one_element_assembly_is_element_matrix(self):
        mesh = fem.QuadMesh(1, 1)
        K = fem.assemble_stiffness(_problem(mesh)).toarray()
        e = mesh.edofs[0]
        assert_allclose(K[np.ix_(e, e)], _textbook_square(0.3), atol=1e-14)


class TestAssembly:
    mesh = fem.QuadMesh(6, 4, 1.5, 1.0)

    def test_symmetric_exactly(self):
        rng = np.random.default_rng(1)
        p = _problem(self.mesh, modulus=rng.uniform(0.1, 2, 24), thickness=rng.uniform(0.1, 1, 24))
        K = fem.assemble_stiffness(p)
        assert abs(K - K.T).max() == 0.0
        assert K.shape == (self.mesh.n_dofs, self.mesh.n_dofs)

    @pytest.mark.parametrize("field", ["modulus", "thickness"])
    def test_linear_in_modulus_and_thickness(self, field):
        K1 = fem.assemble_stiffness(_problem(self.mesh, **{field: 1.0}))
        K2 = fem.assemble_stiffness(_problem(self.mesh, **{field: 2.0}))
        assert abs(K2 - 2 * K1).max() == 0.0

    def test_positive_definite_after_constraints(self):
        p = _problem(self.mesh)
        K = fem.assemble_stiffness(p).toarray()
        free = p.free_dofs
        assert np.linalg.eigvalsh(K[np.ix_(free, free)]).min() > 0

    def test_invariants_checked(self):
        F, fixed = fem.cantilever_bc(self.mesh)
        with pytest.raises(ValueError):
            _problem(self.mesh, F, fixed, modulus=0.0)
        with pytest.raises(ValueError):
            fem.QuadMesh(0, 3)

    @pytest.mark.parametrize("fixed_nodes,comps,mode", [
        ([0, 7, 14], (0,), "translation-y"),
        ([0, 7, 14], (1,), "translation-x"),
        ([0], (0, 1), "rotation"),
    ])
    def test_singular_constraints_name_null_mode(self, fixed_nodes, comps, mode):
        F, _ = fem.cantilever_bc(self.mesh)
        fixed = [2 * n + c for n in fixed_nodes for c in comps]
        with pytest.raises(fem.SingularSystemError) as err:
            fem.assemble_stiffness(_problem(self.mesh, F, fixed))
        assert err.value.mode == mode

    def test_mesh_counts(self):
        m = fem.QuadMesh(5, 3)
        assert m.n_nodes == 24 and m.n_dofs == 48
        # counterclockwise: positive signed area for every element
        xy = m.nodes[m.connectivity]
        x, y = xy[..., 0], xy[..., 1]
        area = 0.5 * np.sum(x * np.roll(y, -1, 1) - np.roll(x, -1, 1) * y, axis=1)
        assert np.all(area > 0)


def _uniaxial(s=2.0, E=3.0, t=0.5, lx=2.0, ly=1.0, nx=1, ny=1):
    mesh = fem.QuadMesh(nx, ny, lx, ly)
    left = mesh.node_index(0, np.arange(ny + 1))
    fixed = np.concatenate([2 * left, [2 * left[0] + 1]])
    right = mesh.node_index(nx, np.arange(ny + 1))
    F = np.zeros(mesh.n_dofs)
    w = np.full(ny + 1, 1.0)
    w[[0, -1]] = 0.5
    F[2 * right] = s * t * mesh.dy * w
    return mesh, _problem(mesh, F, fixed, modulus=E, thickness=t)


class TestSolve:
    def test_zero_load_gives_zero(self):
        p = _problem(fem.QuadMesh(4, 4), F=np.zeros(50), fixed=np.arange(10))
        assert np.all(fem.solve(p).displacement == 0.0)

    def test_single_element_uniaxial_closed_form(self):
        s, E, t, lx, ly, nu = 2.0, 3.0, 0.5, 2.0, 1.0, 0.3
        mesh, p = _uniaxial(s, E, t, lx, ly)
        sol = fem.solve(p)
        U = sol.displacement.reshape(-1, 2)
        # hand solution: eps_x = s/E, eps_y = -nu s/E
        assert_allclose(U[:, 0], mesh.nodes[:, 0] * s / E, atol=1e-12)
        assert_allclose(U[:, 1], -nu * mesh.nodes[:, 1] * s / E, atol=1e-12)
        assert_allclose(sol.von_mises, s, rtol=1e-12)
        # strain energy of a uniform bar: s^2 V / E
        assert_allclose(sol.compliance, s**2 * lx * ly * t / E, rtol=1e-12)

    def test_cantilever_tip_deflection_beam_theory(self):
        mesh = fem.QuadMesh(64, 8, 8.0, 1.0)
        left = mesh.node_index(0, np.arange(9))
        tip = mesh.node_index(64, np.arange(9))
        F = np.zeros(mesh.n_dofs)
        F[2 * tip + 1] = -1.0 / 8
        F[2 * tip[[0, -1]] + 1] = -1.0 / 16
        sol = fem.solve(_problem(mesh, F, np.concatenate([2 * left, 2 * left + 1])))
        deflection = -sol.displacement[2 * tip + 1].mean()
        euler_bernoulli = 8.0**3 / (3 * 1.0 * (1.0 / 12))
        # Timoshenko shear correction adds L / (kappa G A) ~ 1.2%
        assert abs(deflection / euler_bernoulli - 1) < 0.05

    def test_residual_and_fixed_dofs(self):
        p = _problem(fem.QuadMesh(10, 6))
        K = fem.assemble_stiffness(p)
        U = fem.solve_static(K, p.load, p.fixed_dofs)
        free = p.free_dofs
        r = K[free] @ U - p.load[free]
        assert np.linalg.norm(r) <= 1e-9 * np.linalg.norm(p.load[free])
        assert np.all(U[p.fixed_dofs] == 0)

    def test_cg_matches_cholesky(self):
        p = _problem(fem.QuadMesh(12, 9))
        K = fem.assemble_stiffness(p)
        a = fem.solve_static(K, p.load, p.fixed_dofs, method="cholesky")
        b = fem.solve_static(K, p.load, p.fixed_dofs, method="cg")
        assert_allclose(a, b, rtol=1e-7, atol=1e-12 * np.abs(a).max())

    @given(alpha=st.floats(0.01, 100.0))
    @settings(max_examples=20, deadline=None)
    def test_scaling(self, alpha):
        p = _problem(fem.QuadMesh(5, 4))
        K = fem.assemble_stiffness(p)
        U = fem.solve_static(K, p.load, p.fixed_dofs)
        Ua = fem.solve_static(alpha * K, p.load, p.fixed_dofs)
        assert_allclose(Ua, U / alpha, rtol=1e-10, atol=1e-14)

    def test_patch_test_constant_strain(self):
        mesh = fem.QuadMesh(5, 4, 1.3, 0.9)
        A = np.array([[1e-3, 4e-4], [-2e-4, 7e-4]])
        c = np.array([1e-3, -2e-3])
        exact = mesh.nodes @ A.T + c
        i, j = np.divmod(np.arange(mesh.n_nodes), mesh.nx + 1)[::-1]
        boundary = np.flatnonzero((i == 0) | (i == mesh.nx) | (j == 0) | (j == mesh.ny))
        fixed = np.sort(np.concatenate([2 * boundary, 2 * boundary + 1]))
        p = _problem(mesh, np.zeros(mesh.n_dofs), fixed)
        K = fem.assemble_stiffness(p)
        Ub = exact.ravel()
        # move prescribed values to the right-hand side
        F = -(K @ np.where(np.isin(np.arange(mesh.n_dofs), fixed), Ub, 0.0))
        U = fem.solve_static(K, F, fixed)
        U[fixed] = Ub[fixed]
        assert_allclose(U, Ub, atol=1e-10)
        stress = fem.element_stress(U, mesh, np.ones(mesh.n_elements))
        assert np.ptp(stress, axis=0).max() < 1e-10


class TestVonMises:
    def test_uniaxial_and_shear(self):
        assert fem.von_mises_from_stress(np.array([2.5, 0.0, 0.0])) == pytest.approx(2.5)
        assert fem.von_mises_from_stress(np.array([0.0, 0.0, 1.5])) == pytest.approx(1.5 * np.sqrt(3))

    def test_random_field_matches_independent_b_matrix(self):
        mesh = fem.QuadMesh(3, 2, 1.5, 0.8)
        rng = np.random.default_rng(7)
        U = rng.normal(size=mesh.n_dofs)
        E = rng.uniform(0.5, 2.0, mesh.n_elements)
        p = _problem(mesh, np.zeros(mesh.n_dofs), np.arange(4), modulus=E)
        a, b = mesh.dx, mesh.dy
        # centroid derivatives of the bilinear shape functions, written out by hand
        dNdx = np.array([-1, 1, 1, -1]) / (2 * a)
        dNdy = np.array([-1, -1, 1, 1]) / (2 * b)
        nu = 0.3
        for e in range(mesh.n_elements):
            ue = U[mesh.edofs[e]].reshape(4, 2)
            exx = dNdx @ ue[:, 0]
            eyy = dNdy @ ue[:, 1]
            gxy = dNdy @ ue[:, 0] + dNdx @ ue[:, 1]
            sx = E[e] / (1 - nu**2) * (exx + nu * eyy)
            sy = E[e] / (1 - nu**2) * (eyy + nu * exx)
            txy = E[e] / (2 * (1 + nu)) * gxy
            vm = np.sqrt(sx**2 - sx * sy + sy**2 + 3 * txy**2)
            assert fem.element_von_mises(U, p, e) == pytest.approx(vm, rel=1e-12)
        assert np.all(fem.von_mises(U, p) >= 0)


class TestCompliance:
    p = _problem(fem.QuadMesh(8, 5))

    def test_zero_displacement(self):
        K = fem.assemble_stiffness(self.p)
        assert fem.compliance(np.zeros(K.shape[0]), K) == 0.0

    @given(c=st.floats(0.1, 10.0))
    @settings(max_examples=15, deadline=None)
    def test_quadratic_in_load(self, c):
        K = fem.assemble_stiffness(self.p)
        U = fem.solve_static(K, self.p.load, self.p.fixed_dofs)
        Uc = fem.solve_static(K, c * self.p.load, self.p.fixed_dofs)
        assert fem.compliance(Uc, K) == pytest.approx(c**2 * fem.compliance(U, K), rel=1e-10)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=15, deadline=None)
    def test_work_identity(self, seed):
        rng = np.random.default_rng(seed)
        mesh = fem.QuadMesh(6, 4)
        p = _problem(mesh, modulus=rng.uniform(1e-3, 1.0, 24), thickness=rng.uniform(0.1, 1.0, 24))
        K = fem.assemble_stiffness(p)
        U = fem.solve_static(K, p.load, p.fixed_dofs)
        W = fem.compliance(U, K)
        assert W >= 0
        assert abs(W - p.load @ U) <= 1e-8 * abs(p.load @ U)


def test_cantilever_bc_total_load():
    mesh = fem.QuadMesh(16, 16)
    F, fixed = fem.cantilever_bc(mesh, 0.1)
    assert F.sum() == pytest.approx(-1.0)
    assert np.all(F[0::2] == 0)
    assert fixed.size == 2 * 17
