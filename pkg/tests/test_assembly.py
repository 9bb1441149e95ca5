"""Assembly: closed-form energy values, gradient/Jacobian consistency by
finite differences, symmetry and determinism."""

import numpy as np
import pytest

from cavityfem.assembly import assemble_energy, assemble_residual, assemble_tangent
from cavityfem.errors import OrientationError
from cavityfem.fem import AffineBoundary, FemSpace, identity_state, interpolate
from cavityfem.generate import make_ring_mesh
from cavityfem.material import MaterialParams
from cavityfem.mesh import DefectSpec, MeshParams, annulus_patch, square_patch

MAT = MaterialParams()


@pytest.fixture
def patch_space():
    mesh = annulus_patch(0.5, 0.8, 0.1, 0.7, 1, 2)
    bc = AffineBoundary(np.eye(2))
    return mesh, FemSpace(mesh, bc)


def randomized_state(space, mesh, scale=0.02, seed=42):
    bc = space.bc
    st = identity_state(mesh, space.dofmap, bc, pressure=-1.0)
    rng = np.random.default_rng(seed)
    st.u = st.u + scale * rng.standard_normal(space.n_disp)
    st.p = st.p + 0.1 * rng.standard_normal(space.n_press)
    return st


class TestEnergy:
    def test_annulus_closed_form(self):
        # identity on the full annulus: area * (mu*2^(s/2) + d(1)); the ring
        # is angularly fine enough that the curved-geometry area error sits
        # below the quadrature tolerance
        mesh = make_ring_mesh(DefectSpec((0.0, 0.0), 0.01, 1.0),
                              MeshParams(h=0.02, angular_span=12.0))
        bc = AffineBoundary(np.eye(2))
        space = FemSpace(mesh, bc)
        st = identity_state(mesh, space.dofmap, bc, pressure=0.7)
        closed = np.pi * (1.0 - 1e-4) * ((2.0 / 3.0) * 2.0 ** 0.75 + 1.0)
        assert assemble_energy(space, st, MAT) == pytest.approx(closed, abs=1e-8)

    def test_pressure_independent_when_incompressible(self, patch_space):
        mesh, space = patch_space
        st = identity_state(mesh, space.dofmap, space.bc, pressure=0.0)
        e0 = assemble_energy(space, st, MAT)
        st.p = st.p + 3.7
        assert assemble_energy(space, st, MAT) == pytest.approx(e0, rel=1e-14)

    def test_quadrature_refinement_stable(self):
        # on the finest documented ring mesh a one-step quadrature
        # refinement moves the energy of a cavitated field below 1e-8
        # relative (coarser rings see up to ~1e-6 from the near-cavity
        # integrand)
        mesh = make_ring_mesh(DefectSpec((0.0, 0.0), 0.01, 1.0), MeshParams(h=0.02))
        bc = AffineBoundary(np.eye(2))
        space = FemSpace(mesh, bc)

        def radial(x):
            r = np.linalg.norm(x, axis=1)
            return x * (np.sqrt(r * r + 0.2) / r)[:, None]

        st = interpolate(mesh, space.dofmap, radial, bc)
        st.p[0::3] = -1.0
        e0 = assemble_energy(space, st, MAT)
        space_fine = FemSpace(mesh, bc, quad_orders={"quad9": 5, "tri6": 10})
        e1 = assemble_energy(space_fine, st, MAT)
        assert abs(e1 - e0) / abs(e0) <= 1e-8

    def test_orientation_error_carries_element(self, patch_space):
        mesh, space = patch_space
        st = identity_state(mesh, space.dofmap, space.bc)
        # collapse one element by folding a vertex
        vid = mesh.elements[1].node_ids[0]
        st.u[2 * vid:2 * vid + 2] = st.u[2 * vid:2 * vid + 2] * -3.0
        with pytest.raises(OrientationError) as err:
            assemble_energy(space, st, MAT)
        assert err.value.element_id is not None


class TestResidual:
    def test_incompressible_state_has_zero_rg(self, patch_space):
        mesh, space = patch_space
        st = identity_state(mesh, space.dofmap, space.bc, pressure=-1.0)
        _, rg = assemble_residual(space, st, MAT)
        assert np.abs(rg).max() <= 1e-12

    def test_gradient_oracle(self, patch_space):
        mesh, space = patch_space
        st = randomized_state(space, mesh)
        rf, rg = assemble_residual(space, st, MAT)
        rng = np.random.default_rng(1)
        eps = 1e-6
        free = np.nonzero(space.dofmap.free_mask)[0]
        for i in rng.choice(free, 10, replace=False):
            u0 = st.u[i]
            st.u[i] = u0 + eps
            ep = assemble_energy(space, st, MAT)
            st.u[i] = u0 - eps
            em = assemble_energy(space, st, MAT)
            st.u[i] = u0
            assert rf[i] == pytest.approx(-(ep - em) / (2 * eps), rel=1e-6, abs=1e-10)
        for j in rng.choice(space.n_press, 5, replace=False):
            p0 = st.p[j]
            st.p[j] = p0 + eps
            ep = assemble_energy(space, st, MAT)
            st.p[j] = p0 - eps
            em = assemble_energy(space, st, MAT)
            st.p[j] = p0
            assert rg[j] == pytest.approx((ep - em) / (2 * eps), rel=1e-6, abs=1e-10)

    def test_dirichlet_entries_zeroed(self, patch_space):
        mesh, space = patch_space
        st = randomized_state(space, mesh)
        rf, _ = assemble_residual(space, st, MAT)
        assert np.all(rf[space.dofmap.dirichlet_idx] == 0.0)


class TestTangent:
    def test_jacobian_oracle(self, patch_space):
        mesh, space = patch_space
        st = randomized_state(space, mesh)
        sys = assemble_tangent(space, st, MAT)
        rng = np.random.default_rng(2)
        w = rng.standard_normal(space.n_disp)
        w[space.dofmap.dirichlet_idx] = 0.0
        q = rng.standard_normal(space.n_press)
        eps = 1e-7
        up, um = st.copy(), st.copy()
        up.u += eps * w
        up.p += eps * q
        um.u -= eps * w
        um.p -= eps * q
        rfp, rgp = assemble_residual(space, up, MAT)
        rfm, rgm = assemble_residual(space, um, MAT)
        fd_f = (rfp - rfm) / (2 * eps)
        fd_g = (rgp - rgm) / (2 * eps)
        df, dg = sys.residual_derivative(w, q)
        assert np.abs(fd_f - df).max() / np.abs(fd_f).max() <= 1e-6
        assert np.abs(fd_g - dg).max() / max(np.abs(fd_g).max(), 1e-12) <= 1e-6

    def test_symmetry(self):
        mesh = make_ring_mesh(DefectSpec((0.0, 0.0), 0.01, 1.0), MeshParams(h=0.06))
        space = FemSpace(mesh, AffineBoundary(np.eye(2)))

        def smooth(x):  # cavitated plus a gentle non-radial component
            r = np.linalg.norm(x, axis=1)
            u = x * (np.sqrt(r * r + 0.2) / r)[:, None]
            u[:, 0] += 0.02 * np.sin(2.0 * x[:, 1])
            u[:, 1] += 0.02 * np.cos(1.5 * x[:, 0])
            return u

        st = interpolate(mesh, space.dofmap, smooth, space.bc)
        st.p[0::3] = -1.0
        st.p += 0.05 * np.random.default_rng(9).standard_normal(space.n_press)
        sys = assemble_tangent(space, st, MAT)
        num = abs(sys.A - sys.A.T).max()
        den = abs(sys.A).max()
        assert num / den <= 1e-10

    def test_divergence_free_at_identity(self, patch_space):
        # cof I = I, so B against the constant pressure component is the
        # integral of div v
        mesh, space = patch_space
        st = identity_state(mesh, space.dofmap, space.bc)
        sys = assemble_tangent(space, st, MAT)
        rng = np.random.default_rng(3)
        w = rng.standard_normal(space.n_disp)
        w[space.dofmap.dirichlet_idx] = 0.0
        div_total = (sys.B @ w)[0::3].sum()
        # the total flux of w through all element boundaries telescopes to
        # the domain boundary where w carries free (cavity-like) values;
        # here just check B has the divergence structure on one element
        g = space.groups[0]
        el = 0
        w_el = w[g.disp_dofs[el]].reshape(-1, 2)
        div = np.einsum("qnc,nc->q", g.phys_grads[el], w_el)
        expected = float(np.sum(g.JxW[el] * div))
        assert (sys.B @ w)[3 * g.el_indices[el]] == pytest.approx(expected, rel=1e-12)

    def test_bubble_rows_of_constant_pressure_vanish(self):
        # for interior-bubble test functions, int_T cof(grad u) : grad v
        # equals a boundary flux that vanishes on the element boundary
        nodes = np.array([[0, 0], [1, 0], [0, 1], [0.5, 0], [0.5, 0.5], [0, 0.5]],
                         dtype=float)
        from cavityfem.mesh import Element, Mesh
        mesh = Mesh(nodes=nodes, elements=[Element("tri6", (0, 1, 2, 3, 4, 5), None, False)],
                    dirichlet_boundary=np.array([], dtype=np.int64),
                    cavity_loops=[], interface_loops=[], layers=[], defects=[],
                    domain_radius=1.0, h=1.0)
        space = FemSpace(mesh, AffineBoundary(np.eye(2)))
        st = randomized_state(space, mesh, scale=0.05, seed=5)
        sys = assemble_tangent(space, st, MAT)
        bubble_slot = space.dofmap.bubble_slot[0]
        for comp in range(2):
            assert abs(sys.B[0, 2 * bubble_slot + comp]) <= 1e-13

    def test_deterministic_assembly(self, patch_space):
        mesh, space = patch_space
        st = randomized_state(space, mesh)
        s1 = assemble_tangent(space, st, MAT)
        s2 = assemble_tangent(space, st, MAT)
        assert (s1.A != s2.A).nnz == 0
        assert (s1.B != s2.B).nnz == 0
        assert np.array_equal(s1.rhs_f, s2.rhs_f)
