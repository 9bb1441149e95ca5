"""Assembly of the energy, the nonlinear residual and the tangent
saddle-point system over a discretized mesh.

The residual pairs are the negative gradient of the pressure-relaxed
energy with respect to the displacement coefficients and its positive
gradient with respect to the pressure coefficients; the tangent blocks
are their derivatives, so every Newton step solves the symmetric block
system [[A, B^T], [B, 0]].  Dirichlet constraints are imposed by
symmetric elimination (unit diagonal rows/columns, zeroed right-hand
side) because trial states carry the boundary values exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import OrientationError
from .fem import FemSpace, State
from .material import MaterialParams, d_derivatives

__all__ = ["SaddleSystem", "assemble_energy", "assemble_residual", "assemble_tangent"]


@dataclass
class SaddleSystem:
    """Constrained tangent blocks and right-hand sides of one Newton step."""

    A: sp.csr_matrix          # displacement x displacement, symmetric
    B: sp.csr_matrix          # pressure x displacement
    rhs_f: np.ndarray
    rhs_g: np.ndarray
    constrained: np.ndarray   # eliminated displacement dof indices

    def block_matrix(self) -> sp.csc_matrix:
        return sp.bmat([[self.A, self.B.T], [self.B, None]], format="csc")

    def residual_derivative(self, w: np.ndarray, q: np.ndarray):
        """Directional derivative of the (constrained) residual pair along
        an increment (w, q): (-A w + B^T q, -B w)."""
        return -self.A @ w + self.B.T @ q, -self.B @ w


def _group_kinematics(group, state: State, material: MaterialParams):
    F, p = group.gradients(state)
    det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if det.min() <= 0.0:
        e, q = np.unravel_index(np.argmin(det), det.shape)
        raise OrientationError(
            f"non-positive det {det[e, q]:.3g} at a quadrature point",
            element_id=int(group.el_indices[e]))
    cof = np.empty_like(F)
    cof[..., 0, 0] = F[..., 1, 1]
    cof[..., 0, 1] = -F[..., 1, 0]
    cof[..., 1, 0] = -F[..., 0, 1]
    cof[..., 1, 1] = F[..., 0, 0]
    nrm = np.sqrt(np.sum(F * F, axis=(-2, -1)))
    return F, p, det, cof, nrm


def assemble_energy(space: FemSpace, state: State, material: MaterialParams) -> float:
    """Quadrature value of the pressure-relaxed energy
    int W(F) - p (det F - 1)."""
    total = 0.0
    for g in space.groups:
        F, p, det, _, nrm = _group_kinematics(g, state, material)
        d, _, _ = d_derivatives(det, material)
        W = material.mu * nrm ** material.s + d
        total += float(np.sum(g.JxW * (W - p * (det - 1.0))))
    return total


def assemble_residual(space: FemSpace, state: State, material: MaterialParams):
    """Residual pair (rf, rg); Dirichlet entries of rf are zeroed."""
    mu, s = material.mu, material.s
    rf = np.zeros(space.n_disp)
    rg = np.zeros(space.n_press)
    for g in space.groups:
        F, p, det, cof, nrm = _group_kinematics(g, state, material)
        _, dp, _ = d_derivatives(det, material)
        P = (mu * s * nrm ** (s - 2.0))[..., None, None] * F \
            + (dp - p)[..., None, None] * cof
        # rf_local[e, n, a] = -sum_q JxW P[a, c] grad[n, c]; flattening the
        # trailing (n, a) axes matches the interleaved dof order 2n + a
        loc = -np.einsum("eq,eqac,eqnc->ena", g.JxW, P, g.phys_grads, optimize=True)
        np.add.at(rf, g.disp_dofs.ravel(), loc.reshape(g.n_el, -1).ravel())
        locg = -np.einsum("eq,qk,eq->ek", g.JxW, g.press_vals, det - 1.0, optimize=True)
        np.add.at(rg, g.press_dofs.ravel(), locg.ravel())
    rf[space.dofmap.dirichlet_idx] = 0.0
    return rf, rg


def assemble_tangent(space: FemSpace, state: State, material: MaterialParams) -> SaddleSystem:
    """Tangent blocks A (displacement) and B (pressure coupling) with the
    residual pair as right-hand side, after symmetric constraint
    elimination."""
    mu, s = material.mu, material.s
    rf, rg = assemble_residual(space, state, material)

    rows_A, cols_A, vals_A = [], [], []
    rows_B, cols_B, vals_B = [], [], []
    for g in space.groups:
        F, p, det, cof, nrm = _group_kinematics(g, state, material)
        _, dp, dpp = d_derivatives(det, material)
        c1 = mu * s * (s - 2.0) * nrm ** (s - 4.0)
        c2 = mu * s * nrm ** (s - 2.0)
        c3 = dpp
        c4 = dp - p

        grads = g.phys_grads                              # (e, q, n, c)
        FG = np.einsum("eqac,eqnc->eqna", F, grads)       # (F : e_a x g_n)
        CG = np.einsum("eqac,eqnc->eqna", cof, grads)
        nd = 2 * grads.shape[2]
        ne = g.n_el

        FGl = FG.reshape(ne, g.n_qp, nd)                  # l = 2n + a
        CGl = CG.reshape(ne, g.n_qp, nd)
        A_loc = np.einsum("eq,eql,eqm->elm", g.JxW * c1, FGl, FGl, optimize=True)
        A_loc += np.einsum("eq,eql,eqm->elm", g.JxW * c3, CGl, CGl, optimize=True)
        gdot = np.einsum("eq,eqnc,eqmc->enm", g.JxW * c2, grads, grads, optimize=True)
        A_loc[:, 0::2, 0::2] += gdot
        A_loc[:, 1::2, 1::2] += gdot
        # cof-of-increment coupling: entries eps_ab * (g_n x g_m) with the
        # weighted outer product cross[n,m] = sum_q JxW c4 g_n,1 g_m,2
        cross = np.einsum("eq,eqn,eqm->enm", g.JxW * c4,
                          grads[..., 0], grads[..., 1], optimize=True)
        crossT = cross.transpose(0, 2, 1)
        A_loc[:, 0::2, 1::2] += cross - crossT
        A_loc[:, 1::2, 0::2] += crossT - cross

        B_loc = np.einsum("eq,qk,eql->ekl", g.JxW, g.press_vals, CGl, optimize=True)

        dd = g.disp_dofs
        rows_A.append(np.repeat(dd, nd, axis=1).ravel())
        cols_A.append(np.tile(dd, (1, nd)).ravel())
        vals_A.append(A_loc.ravel())
        rows_B.append(np.repeat(g.press_dofs, nd, axis=1).ravel())
        cols_B.append(np.tile(dd, (1, 3)).ravel())
        vals_B.append(B_loc.ravel())

    n, m = space.n_disp, space.n_press
    A = sp.coo_matrix((np.concatenate(vals_A),
                       (np.concatenate(rows_A), np.concatenate(cols_A))),
                      shape=(n, n)).tocsr()
    B = sp.coo_matrix((np.concatenate(vals_B),
                       (np.concatenate(rows_B), np.concatenate(cols_B))),
                      shape=(m, n)).tocsr()

    free = space.dofmap.free_mask.astype(float)
    P = sp.diags(free)
    A = (P @ A @ P) + sp.diags(1.0 - free)
    B = B @ P
    return SaddleSystem(A=A.tocsr(), B=B.tocsr(), rhs_f=rf, rhs_g=rg,
                        constrained=space.dofmap.dirichlet_idx)
