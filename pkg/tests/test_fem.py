"""Reference elements, quadrature, DOF numbering and field evaluation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cavityfem.errors import ConfigError
from cavityfem.fem import (AffineBoundary, FemSpace, build_dof_map,
                           eval_gradient, identity_state, interpolate,
                           pressure_basis, quadrature, shape_quad_q1,
                           shape_quad_q2, shape_quad_s2, shape_tri_p1,
                           shape_tri_p2, shape_tri_p2plus)
from cavityfem.generate import make_ring_mesh
from cavityfem.mesh import DefectSpec, Element, Mesh, MeshParams, annulus_patch

TRI_NODES = np.array([[0, 0], [1, 0], [0, 1],
                      [0.5, 0], [0.5, 0.5], [0, 0.5],
                      [1 / 3, 1 / 3]], dtype=float)
QUAD_NODES = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1],
                       [0, -1], [1, 0], [0, 1], [-1, 0], [0, 0]], dtype=float)


def tri_points(n=20, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.random((n, 2))
    flip = p.sum(axis=1) > 1.0
    p[flip] = 1.0 - p[flip]
    return p


class TestShapes:
    @pytest.mark.parametrize("fun,nodes", [
        (shape_tri_p2plus, TRI_NODES),
        (shape_quad_q2, QUAD_NODES),
        (shape_tri_p2, TRI_NODES[:6]),
        (shape_tri_p1, TRI_NODES[:3]),
        (shape_quad_q1, QUAD_NODES[:4]),
        (shape_quad_s2, QUAD_NODES[:8]),
    ])
    def test_nodal_property(self, fun, nodes):
        vals, _ = fun(nodes)
        np.testing.assert_allclose(vals, np.eye(len(nodes)), atol=1e-14)

    @pytest.mark.parametrize("fun,pts", [
        (shape_tri_p2plus, tri_points()),
        (shape_tri_p2, tri_points(seed=1)),
        (shape_quad_q2, np.random.default_rng(2).uniform(-1, 1, (20, 2))),
        (shape_quad_s2, np.random.default_rng(3).uniform(-1, 1, (20, 2))),
    ])
    def test_partition_of_unity(self, fun, pts):
        vals, grads = fun(pts)
        np.testing.assert_allclose(vals.sum(-1), 1.0, atol=1e-13)
        np.testing.assert_allclose(grads.sum(-2), 0.0, atol=1e-12)

    @pytest.mark.parametrize("fun,pts", [
        (shape_tri_p2plus, tri_points(12, seed=5) * 0.8 + 0.05),
        (shape_quad_q2, np.random.default_rng(6).uniform(-0.9, 0.9, (12, 2))),
    ])
    def test_gradients_match_finite_differences(self, fun, pts):
        h = 1e-6
        _, grads = fun(pts)
        for c in range(2):
            dp = pts.copy()
            dp[:, c] += h
            dm = pts.copy()
            dm[:, c] -= h
            fd = (fun(dp)[0] - fun(dm)[0]) / (2 * h)
            np.testing.assert_allclose(grads[..., c], fd, rtol=1e-7, atol=1e-8)

    def test_q2_reproduces_bilinear_monomial(self):
        coeff = QUAD_NODES[:, 0] * QUAD_NODES[:, 1]
        pts = np.random.default_rng(8).uniform(-1, 1, (30, 2))
        vals, _ = shape_quad_q2(pts)
        np.testing.assert_allclose(vals @ coeff, pts[:, 0] * pts[:, 1], atol=1e-14)

    def test_pressure_basis(self):
        np.testing.assert_allclose(pressure_basis(np.zeros(2)), [1.0, 0.0, 0.0])
        p = np.array([0.3, 0.4])
        np.testing.assert_allclose(pressure_basis(p), [1.0, 0.3, 0.4])


class TestQuadrature:
    def test_quad_rule_exactness(self):
        q = quadrature("quad9")
        val = float(np.sum(q.weights * q.points[:, 0] ** 6 * q.points[:, 1] ** 6))
        assert val == pytest.approx((2.0 / 7.0) ** 2, abs=1e-13)
        assert float(q.weights.sum()) == pytest.approx(4.0, abs=1e-13)

    def test_triangle_rule_degree6(self):
        q = quadrature("tri6")
        assert float(q.weights.sum()) == pytest.approx(0.5, abs=1e-13)
        for a in range(7):
            for b in range(7 - a):
                exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
                val = float(np.sum(q.weights * q.points[:, 0] ** a * q.points[:, 1] ** b))
                assert val == pytest.approx(exact, abs=2e-13), (a, b)

    def test_refined_triangle_rule(self):
        q = quadrature("tri6", order=8)
        assert np.all(q.weights > 0)
        assert float(q.weights.sum()) == pytest.approx(0.5, rel=1e-13)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            quadrature("hex27")


def two_quad_mesh():
    return annulus_patch(0.6, 0.9, 0.2, 0.9, 1, 2)


def one_tri_mesh():
    nodes = np.array([[0, 0], [1, 0], [0, 1], [0.5, 0], [0.5, 0.5], [0, 0.5]],
                     dtype=float)
    el = Element("tri6", (0, 1, 2, 3, 4, 5), None, False)
    return Mesh(nodes=nodes, elements=[el],
                dirichlet_boundary=np.array([], dtype=np.int64),
                cavity_loops=[], interface_loops=[], layers=[], defects=[],
                domain_radius=1.0, h=1.0)


class TestDofMap:
    def test_single_triangle_counts(self):
        mesh = one_tri_mesh()
        dm = build_dof_map(mesh, AffineBoundary(np.eye(2)))
        assert dm.n_disp == 14  # 7 slots x 2
        assert dm.n_press == 3

    def test_single_quad_counts(self):
        mesh = two_quad_mesh()
        dm = build_dof_map(mesh, AffineBoundary(np.eye(2)))
        # two quads sharing an edge: 2*18 - 6 displacement dofs
        assert dm.n_disp == 30
        assert dm.n_press == 6

    def test_dirichlet_values(self):
        mesh = two_quad_mesh()
        A = np.array([[2.0, 0.5], [0.0, 1.5]])
        dm = build_dof_map(mesh, AffineBoundary(A))
        nodes = dm.dirichlet_idx[0::2] // 2
        vals = dm.dirichlet_vals.reshape(-1, 2)
        np.testing.assert_allclose(vals, mesh.nodes[nodes] @ A.T, atol=1e-15)


class TestEvaluation:
    def test_identity_field(self):
        mesh = two_quad_mesh()
        bc = AffineBoundary(np.eye(2))
        space = FemSpace(mesh, bc)
        st = identity_state(mesh, space.dofmap, bc)
        for g in space.groups:
            F, _ = g.gradients(st)
            np.testing.assert_allclose(F, np.broadcast_to(np.eye(2), F.shape),
                                       atol=1e-12)
        F, det, cof, p = eval_gradient(space, st, 0, np.array([0.3, -0.2]))
        np.testing.assert_allclose(F, np.eye(2), atol=1e-12)
        assert det == pytest.approx(1.0, abs=1e-12)

    def test_affine_reproduction_on_straight_element(self):
        mesh = one_tri_mesh()
        bc = AffineBoundary(np.eye(2))
        space = FemSpace(mesh, bc)
        A = np.array([[1.3, 0.2], [-0.1, 0.8]])
        st = interpolate(mesh, space.dofmap, lambda x: x @ A.T, bc)
        F, det, _, _ = eval_gradient(space, st, 0, np.array([0.25, 0.25]))
        np.testing.assert_allclose(F, A, atol=1e-13)

    def test_radial_map_det_converges(self):
        # nodal interpolant of the incompressible radial inflation map:
        # the det error must shrink under refinement
        amp = 0.3

        def radial(x):
            r = np.linalg.norm(x, axis=1)
            return x * (np.sqrt(r * r + amp) / r)[:, None]

        errs = []
        for h in (0.06, 0.03):
            mesh = make_ring_mesh(DefectSpec((0.0, 0.0), 0.01, 1.0), MeshParams(h=h))
            bc = AffineBoundary(np.eye(2))
            space = FemSpace(mesh, bc)
            st = interpolate(mesh, space.dofmap, radial, bc)
            worst = 0.0
            for g in space.groups:
                F, _ = g.gradients(st)
                det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
                worst = max(worst, float(np.abs(det - 1.0).max()))
            errs.append(worst)
        assert errs[1] < errs[0]

    def test_set_boundary_updates_values(self):
        mesh = two_quad_mesh()
        space = FemSpace(mesh, AffineBoundary.uniform(1.0))
        v0 = space.dofmap.dirichlet_vals.copy()
        space.set_boundary(AffineBoundary.uniform(2.0))
        np.testing.assert_allclose(space.dofmap.dirichlet_vals, 2.0 * v0)
