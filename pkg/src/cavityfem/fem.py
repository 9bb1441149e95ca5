"""Reference elements, quadrature, DOF numbering and discrete-field evaluation.

Displacements use a biquadratic 9-node basis on quadrilaterals and a
quadratic 6-node basis enriched with an interior cubic bubble on triangles
(the bubble is made nodal at the barycenter so every displacement DOF is a
point value).  Pressure is discontinuous and spanned per element by the
reference monomials {1, x1, x2}; the physical pressure is the reference
polynomial composed with the inverse geometry map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, GeometryError
from .mesh import Mesh

__all__ = [
    "QuadratureRule",
    "quadrature",
    "shape_tri_p2plus",
    "shape_quad_q2",
    "shape_tri_p2",
    "shape_tri_p1",
    "shape_quad_q1",
    "pressure_basis",
    "AffineBoundary",
    "DofMap",
    "build_dof_map",
    "State",
    "FemSpace",
    "interpolate",
    "identity_state",
    "eval_gradient",
]

TRI_BARYCENTER = np.array([1.0 / 3.0, 1.0 / 3.0])


# ---------------------------------------------------------------------------
# quadrature

@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray   # (nq, 2) reference coordinates
    weights: np.ndarray  # (nq,)


# Degree-6 symmetric rule on the unit triangle, 12 points.  Orbit data
# (barycentric representative, weight w.r.t. unit total weight).
_TRI6_ORBITS = [
    ((0.501426509658179, 0.249286745170910, 0.249286745170910), 0.116786275726379),
    ((0.873821971016996, 0.063089014491502, 0.063089014491502), 0.050844906370207),
    ((0.053145049844817, 0.310352451033784, 0.636502499121399), 0.082851075618374),
]


def _tri_rule_degree6() -> QuadratureRule:
    pts, wts = [], []
    for bary, w in _TRI6_ORBITS:
        a, b, c = bary
        if abs(b - c) < 1e-14:
            perms = [(a, b, c), (b, a, c), (c, b, a)]
        else:
            perms = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
        for l1, l2, l3 in perms:
            pts.append((l2, l3))
            wts.append(0.5 * w)
    return QuadratureRule(np.array(pts), np.array(wts))


def quadrature(kind: str, order: int | None = None) -> QuadratureRule:
    """Default integration rules per element kind.

    Quadrilaterals use a tensor-product Gauss rule (4x4 by default),
    triangles the 12-point degree-6 symmetric rule.  ``order`` raises the
    number of Gauss points per direction on quads; on triangles any
    requested order falls back to a dense tensorized Gauss rule mapped by
    the Duffy transform (used for refined-quadrature checks).
    """
    if kind == "quad9":
        n = 4 if order is None else order
        x, w = np.polynomial.legendre.leggauss(n)
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        W = np.outer(w, w)
        return QuadratureRule(
            np.column_stack([X1.ravel(), X2.ravel()]), W.ravel())
    if kind == "tri6":
        if order is None:
            return _tri_rule_degree6()
        # Duffy-mapped tensor rule: exact for high degree, positive weights.
        x, w = np.polynomial.legendre.leggauss(order)
        u = 0.5 * (x + 1.0)
        wu = 0.5 * w
        pts, wts = [], []
        for i in range(order):
            for j in range(order):
                pts.append((u[i], u[j] * (1.0 - u[i])))
                wts.append(wu[i] * wu[j] * (1.0 - u[i]))
        return QuadratureRule(np.array(pts), np.array(wts))
    raise ConfigError(f"unknown element kind {kind!r}")


# ---------------------------------------------------------------------------
# reference shape functions
#
# All routines return (values, gradients) with values of shape (..., n) and
# gradients (..., n, 2) for input points of shape (..., 2).

def _tri_lambdas(xhat):
    xhat = np.asarray(xhat, dtype=float)
    x, y = xhat[..., 0], xhat[..., 1]
    lam = np.stack([1.0 - x - y, x, y], axis=-1)
    grad = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    grad = np.broadcast_to(grad, xhat.shape[:-1] + (3, 2))
    return lam, grad


def shape_tri_p2(xhat):
    """Quadratic 6-node Lagrange basis on the unit triangle (geometry basis).

    Node order: vertices (0,0), (1,0), (0,1), then edge midpoints 12, 23, 31.
    """
    lam, dlam = _tri_lambdas(xhat)
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    g1, g2, g3 = dlam[..., 0, :], dlam[..., 1, :], dlam[..., 2, :]
    vals = np.stack([
        l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), l3 * (2 * l3 - 1),
        4 * l1 * l2, 4 * l2 * l3, 4 * l3 * l1,
    ], axis=-1)
    grads = np.stack([
        (4 * l1 - 1)[..., None] * g1,
        (4 * l2 - 1)[..., None] * g2,
        (4 * l3 - 1)[..., None] * g3,
        4 * (l2[..., None] * g1 + l1[..., None] * g2),
        4 * (l3[..., None] * g2 + l2[..., None] * g3),
        4 * (l1[..., None] * g3 + l3[..., None] * g1),
    ], axis=-2)
    return vals, grads


def shape_tri_p2plus(xhat):
    """Nodal quadratic-plus-bubble basis on the unit triangle (7 functions).

    The cubic bubble 27*l1*l2*l3 is node 7 (value 1 at the barycenter); the
    six quadratic functions are corrected to vanish there, so the basis is
    nodal at 3 vertices, 3 edge midpoints and the barycenter.
    """
    lam, dlam = _tri_lambdas(xhat)
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    g1, g2, g3 = dlam[..., 0, :], dlam[..., 1, :], dlam[..., 2, :]
    bub = 27.0 * l1 * l2 * l3
    dbub = 27.0 * (l2 * l3)[..., None] * g1 \
        + 27.0 * (l1 * l3)[..., None] * g2 \
        + 27.0 * (l1 * l2)[..., None] * g3
    p2_vals, p2_grads = shape_tri_p2(xhat)
    # values of the raw quadratics at the barycenter: -1/9 (vertices), 4/9 (midpoints)
    at_c = np.array([-1.0, -1.0, -1.0, 4.0, 4.0, 4.0]) / 9.0
    vals = np.concatenate([
        p2_vals - at_c * bub[..., None], bub[..., None]], axis=-1)
    grads = np.concatenate([
        p2_grads - at_c[:, None] * dbub[..., None, :], dbub[..., None, :]], axis=-2)
    return vals, grads


def _lag1d(t):
    vals = np.stack([0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)], axis=-1)
    ders = np.stack([t - 0.5, -2.0 * t, t + 0.5], axis=-1)
    return vals, ders


# (i, j) indices into the 1D node set {-1, 0, +1} for the 9-node layout:
# 4 vertices, 4 edge midpoints (bottom, right, top, left), center.
_Q2_IDX = [(0, 0), (2, 0), (2, 2), (0, 2), (1, 0), (2, 1), (1, 2), (0, 1), (1, 1)]


def shape_quad_q2(xhat):
    """Tensor-product biquadratic Lagrange basis on [-1,1]^2 (9 functions)."""
    xhat = np.asarray(xhat, dtype=float)
    v1, d1 = _lag1d(xhat[..., 0])
    v2, d2 = _lag1d(xhat[..., 1])
    vals = np.stack([v1[..., i] * v2[..., j] for i, j in _Q2_IDX], axis=-1)
    grads = np.stack([
        np.stack([d1[..., i] * v2[..., j], v1[..., i] * d2[..., j]], axis=-1)
        for i, j in _Q2_IDX], axis=-2)
    return vals, grads


def shape_tri_p1(xhat):
    """Linear vertex basis on the unit triangle (diagnostic element pair)."""
    lam, dlam = _tri_lambdas(xhat)
    return lam, dlam


def shape_quad_s2(xhat):
    """8-node serendipity basis on [-1,1]^2 (diagnostic element pair:
    biquadratic with the interior node removed)."""
    xhat = np.asarray(xhat, dtype=float)
    x, y = xhat[..., 0], xhat[..., 1]
    corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
    vals = [(1 + a * x) * (1 + b * y) * (a * x + b * y - 1) / 4.0 for a, b in corners]
    grads = [np.stack([a * (1 + b * y) * (2 * a * x + b * y) / 4.0,
                       b * (1 + a * x) * (a * x + 2 * b * y) / 4.0], axis=-1)
             for a, b in corners]
    mids = [(0.0, -1.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)]
    for a, b in mids:
        if a == 0.0:
            vals.append((1 - x * x) * (1 + b * y) / 2.0)
            grads.append(np.stack([-x * (1 + b * y), b * (1 - x * x) / 2.0], axis=-1))
        else:
            vals.append((1 + a * x) * (1 - y * y) / 2.0)
            grads.append(np.stack([a * (1 - y * y) / 2.0, -y * (1 + a * x)], axis=-1))
    return np.stack(vals, axis=-1), np.stack(grads, axis=-2)


def shape_quad_q1(xhat):
    """Bilinear corner basis on [-1,1]^2 (diagnostic element pair)."""
    xhat = np.asarray(xhat, dtype=float)
    x, y = xhat[..., 0], xhat[..., 1]
    corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
    vals = np.stack([(1 + a * x) * (1 + b * y) / 4.0 for a, b in corners], axis=-1)
    grads = np.stack([
        np.stack([a * (1 + b * y) / 4.0, b * (1 + a * x) / 4.0], axis=-1)
        for a, b in corners], axis=-2)
    return vals, grads


def pressure_basis(xhat):
    """Reference monomials {1, x1, x2}; physical pressure is mapped, not
    re-expressed in physical coordinates."""
    xhat = np.asarray(xhat, dtype=float)
    ones = np.ones(xhat.shape[:-1])
    return np.stack([ones, xhat[..., 0], xhat[..., 1]], axis=-1)


_GEO_BASIS = {"quad9": shape_quad_q2, "tri6": shape_tri_p2}
_DISP_BASIS = {"quad9": shape_quad_q2, "tri6": shape_tri_p2plus}


# ---------------------------------------------------------------------------
# boundary data

@dataclass(frozen=True)
class AffineBoundary:
    """Dirichlet map u0(x) = A x on the outer boundary."""

    matrix: np.ndarray

    @staticmethod
    def uniform(lam: float) -> "AffineBoundary":
        return AffineBoundary(lam * np.eye(2))

    def value(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=float) @ np.asarray(self.matrix, dtype=float).T


# ---------------------------------------------------------------------------
# DOF numbering

@dataclass
class DofMap:
    """Global numbering: two displacement DOFs per node slot (geometric
    nodes first, then one interior slot per triangle), and three
    discontinuous pressure DOFs per element."""

    n_slots: int
    n_disp: int
    n_press: int
    bubble_slot: dict              # element index -> interior node slot
    dirichlet_idx: np.ndarray      # constrained displacement dof indices
    dirichlet_vals: np.ndarray
    free_mask: np.ndarray          # boolean, len n_disp

    def disp_dofs_of_slots(self, slots: np.ndarray) -> np.ndarray:
        """Interleaved (x, y) displacement dof indices for node slots."""
        slots = np.asarray(slots)
        out = np.empty(slots.shape + (2,), dtype=np.int64)
        out[..., 0] = 2 * slots
        out[..., 1] = 2 * slots + 1
        return out.reshape(slots.shape[:-1] + (-1,)) if slots.ndim > 1 else out.ravel()

    def pressure_dofs(self, el_index: int) -> np.ndarray:
        return np.arange(3 * el_index, 3 * el_index + 3)


def build_dof_map(mesh: Mesh, bc: AffineBoundary) -> DofMap:
    """Deterministic global numbering with Dirichlet data from ``bc``.

    Every node on the outer boundary is constrained in both components to
    ``bc.value``; interior-bubble slots of triangles are appended after the
    geometric node slots.
    """
    n_nodes = len(mesh.nodes)
    bubble_slot = {}
    slot = n_nodes
    for ei, el in enumerate(mesh.elements):
        if el.kind == "tri6":
            bubble_slot[ei] = slot
            slot += 1
    n_slots = slot
    n_disp = 2 * n_slots
    n_press = 3 * len(mesh.elements)

    bnd = np.array(sorted(mesh.dirichlet_boundary), dtype=np.int64)
    if bnd.size and bnd.max() >= n_nodes:
        raise ConfigError("dirichlet boundary refers to unknown nodes")
    vals = bc.value(mesh.nodes[bnd]) if bnd.size else np.zeros((0, 2))
    didx = np.empty(2 * bnd.size, dtype=np.int64)
    didx[0::2] = 2 * bnd
    didx[1::2] = 2 * bnd + 1
    dvals = vals.reshape(-1)
    free = np.ones(n_disp, dtype=bool)
    free[didx] = False
    return DofMap(n_slots=n_slots, n_disp=n_disp, n_press=n_press,
                  bubble_slot=bubble_slot, dirichlet_idx=didx,
                  dirichlet_vals=dvals, free_mask=free)


# ---------------------------------------------------------------------------
# state

@dataclass
class State:
    """Coefficients of one deformation/pressure iterate.

    ``u`` stores deformed positions at the node slots (interleaved x, y);
    ``p`` stores per-element reference-monomial coefficients; ``bc`` is the
    boundary descriptor the state was solved under.
    """

    u: np.ndarray
    p: np.ndarray
    bc: AffineBoundary

    def copy(self) -> "State":
        return State(self.u.copy(), self.p.copy(), self.bc)


# ---------------------------------------------------------------------------
# element groups with precomputed reference tables

class ElementGroup:
    """All elements of one kind, with reference tables at the group rule."""

    def __init__(self, kind: str, el_indices: list, mesh: Mesh, dofmap: DofMap,
                 rule: QuadratureRule):
        self.kind = kind
        self.el_indices = np.asarray(el_indices, dtype=np.int64)
        self.rule = rule
        geo_fun = _GEO_BASIS[kind]
        disp_fun = _DISP_BASIS[kind]
        self.geo_vals, self.geo_grads = geo_fun(rule.points)
        self.disp_vals, self.disp_grads = disp_fun(rule.points)
        self.press_vals = pressure_basis(rule.points)

        conn = np.array([mesh.elements[ei].node_ids for ei in el_indices],
                        dtype=np.int64)
        self.geo_nodes = conn
        if kind == "tri6":
            bub = np.array([[dofmap.bubble_slot[ei]] for ei in el_indices],
                           dtype=np.int64)
            slots = np.concatenate([conn, bub], axis=1)
        else:
            slots = conn
        self.disp_slots = slots
        nd = slots.shape[1]
        dd = np.empty((len(el_indices), 2 * nd), dtype=np.int64)
        dd[:, 0::2] = 2 * slots
        dd[:, 1::2] = 2 * slots + 1
        self.disp_dofs = dd
        self.press_dofs = np.array([[3 * ei, 3 * ei + 1, 3 * ei + 2]
                                    for ei in el_indices], dtype=np.int64)

        coords = mesh.nodes[conn]                        # (ne, ngeo, 2)
        self.coords = coords
        # DF[e,q,i,j] = d x_i / d xhat_j
        DF = np.einsum("eni,qnj->eqij", coords, self.geo_grads)
        det = DF[..., 0, 0] * DF[..., 1, 1] - DF[..., 0, 1] * DF[..., 1, 0]
        if np.any(det <= 0.0):
            bad = self.el_indices[np.any(det <= 0.0, axis=1)]
            raise GeometryError(
                f"singular/inverted geometry map in elements {bad[:5].tolist()}")
        inv = np.empty_like(DF)
        inv[..., 0, 0] = DF[..., 1, 1]
        inv[..., 0, 1] = -DF[..., 0, 1]
        inv[..., 1, 0] = -DF[..., 1, 0]
        inv[..., 1, 1] = DF[..., 0, 0]
        inv /= det[..., None, None]
        self.DF = DF
        self.detDF = det
        self.JxW = rule.weights[None, :] * det
        # phys_grads[e,q,n,i] = sum_j dNhat_n/dxj * (DF^-1)_{j i}
        self.phys_grads = np.einsum("eqji,qnj->eqni", inv, self.disp_grads)
        # physical quadrature points
        self.qpoints = np.einsum("eni,qn->eqi", coords, self.geo_vals)

    @property
    def n_el(self):
        return len(self.el_indices)

    @property
    def n_qp(self):
        return len(self.rule.weights)

    def gradients(self, state: State):
        """Deformation gradient F (ne, nq, 2, 2) and pressure (ne, nq)."""
        u_el = state.u[self.disp_dofs].reshape(self.n_el, -1, 2)
        F = np.einsum("enc,eqni->eqci", u_el, self.phys_grads)
        p_el = state.p[self.press_dofs]
        p = np.einsum("ek,qk->eq", p_el, self.press_vals)
        return F, p


class FemSpace:
    """Discretization of a mesh: DOF map plus per-kind element groups."""

    def __init__(self, mesh: Mesh, bc: AffineBoundary,
                 quad_orders: dict | None = None):
        self.mesh = mesh
        self.bc = bc
        self.dofmap = build_dof_map(mesh, bc)
        by_kind: dict = {}
        for ei, el in enumerate(mesh.elements):
            by_kind.setdefault(el.kind, []).append(ei)
        orders = quad_orders or {}
        self.groups = [
            ElementGroup(kind, idx, mesh, self.dofmap,
                         quadrature(kind, orders.get(kind)))
            for kind, idx in sorted(by_kind.items())
        ]

    @property
    def n_disp(self):
        return self.dofmap.n_disp

    @property
    def n_press(self):
        return self.dofmap.n_press

    def set_boundary(self, bc: AffineBoundary) -> None:
        """Swap the Dirichlet data; the discretization tables are unchanged."""
        self.bc = bc
        bnd = self.dofmap.dirichlet_idx[0::2] // 2
        self.dofmap.dirichlet_vals = bc.value(self.mesh.nodes[bnd]).reshape(-1)

    def slot_positions(self) -> np.ndarray:
        """Reference position of every displacement slot (geometric nodes,
        then the triangle interior points)."""
        if getattr(self, "_slot_pos", None) is None:
            pos = np.zeros((self.dofmap.n_slots, 2))
            pos[:len(self.mesh.nodes)] = self.mesh.nodes
            if self.dofmap.bubble_slot:
                gv, _ = shape_tri_p2(TRI_BARYCENTER)
                for ei, slot in self.dofmap.bubble_slot.items():
                    coords = self.mesh.nodes[list(self.mesh.elements[ei].node_ids)]
                    pos[slot] = gv @ coords
            self._slot_pos = pos
        return self._slot_pos

    def apply_dirichlet(self, state: State) -> None:
        state.u[self.dofmap.dirichlet_idx] = self.dofmap.dirichlet_vals

    def min_quadrature_det(self, state: State) -> float:
        """Smallest det of the deformation gradient over all quadrature points."""
        m = np.inf
        for g in self.groups:
            F, _ = g.gradients(state)
            det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
            m = min(m, float(det.min()))
        return m


# ---------------------------------------------------------------------------
# interpolation / pointwise evaluation

def interpolate(mesh: Mesh, dofmap: DofMap, fn: Callable, bc: AffineBoundary) -> State:
    """Nodal interpolation of a field fn: (n, 2) coords -> (n, 2) values.

    Bubble slots receive the value at the image of the reference barycenter.
    """
    u = np.zeros(dofmap.n_disp)
    vals = np.asarray(fn(mesh.nodes), dtype=float)
    u[0:2 * len(mesh.nodes):2] = vals[:, 0]
    u[1:2 * len(mesh.nodes):2] = vals[:, 1]
    if dofmap.bubble_slot:
        eis = sorted(dofmap.bubble_slot)
        centers = []
        gv, _ = shape_tri_p2(TRI_BARYCENTER)
        for ei in eis:
            coords = mesh.nodes[list(mesh.elements[ei].node_ids)]
            centers.append(gv @ coords)
        cv = np.asarray(fn(np.array(centers)), dtype=float)
        for k, ei in enumerate(eis):
            slot = dofmap.bubble_slot[ei]
            u[2 * slot:2 * slot + 2] = cv[k]
    return State(u=u, p=np.zeros(dofmap.n_press), bc=bc)


def identity_state(mesh: Mesh, dofmap: DofMap, bc: AffineBoundary,
                   pressure: float = 0.0) -> State:
    """The undeformed configuration with spatially constant pressure."""
    st = interpolate(mesh, dofmap, lambda x: x, bc)
    st.p[0::3] = pressure
    return st


def eval_gradient(space: FemSpace, state: State, el_index: int, xhat):
    """Deformation gradient, det, cofactor and pressure at one reference point."""
    el = space.mesh.elements[el_index]
    geo_fun = _GEO_BASIS[el.kind]
    disp_fun = _DISP_BASIS[el.kind]
    xhat = np.asarray(xhat, dtype=float)
    coords = space.mesh.nodes[list(el.node_ids)]
    _, ggrad = geo_fun(xhat)
    DF = np.einsum("ni,nj->ij", coords, ggrad)
    det = DF[0, 0] * DF[1, 1] - DF[0, 1] * DF[1, 0]
    if det <= 0.0:
        raise GeometryError(f"singular geometry map in element {el_index}")
    inv = np.array([[DF[1, 1], -DF[0, 1]], [-DF[1, 0], DF[0, 0]]]) / det
    _, dgrad = disp_fun(xhat)
    slots = list(el.node_ids)
    if el.kind == "tri6":
        slots = slots + [space.dofmap.bubble_slot[el_index]]
    dofs = np.empty(2 * len(slots), dtype=np.int64)
    dofs[0::2] = 2 * np.asarray(slots)
    dofs[1::2] = 2 * np.asarray(slots) + 1
    u_el = state.u[dofs].reshape(-1, 2)
    phys = dgrad @ inv  # (n, 2): row n = grad of basis n
    F = np.einsum("nc,ni->ci", u_el, phys)
    detF = F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]
    cof = np.array([[F[1, 1], -F[1, 0]], [-F[0, 1], F[0, 0]]])
    p = float(state.p[3 * el_index:3 * el_index + 3] @ pressure_basis(xhat))
    return F, detF, cof, p
