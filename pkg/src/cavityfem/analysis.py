"""Post-processing: constraint and self-convergence norms, cavity volumes,
a numerical inf-sup estimator and rate/bifurcation tables."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .errors import FieldLookupError, GeometryError, SolverError
from .fem import (FemSpace, State, pressure_basis, shape_quad_q1, shape_quad_q2,
                  shape_quad_s2, shape_tri_p1, shape_tri_p2, shape_tri_p2plus)
from .material import MaterialParams

__all__ = [
    "det_error_norms",
    "cavity_volumes",
    "FieldProbe",
    "field_diff_norms",
    "infsup_constant",
    "ConvergenceRow",
    "rate_table",
    "fit_order",
    "BifurcationRow",
    "bifurcation_report",
]


# ---------------------------------------------------------------------------
# constraint norms

def det_error_norms(space: FemSpace, state: State):
    """L1 and L2 norms of det(grad u) - 1 by quadrature."""
    l1 = 0.0
    l2 = 0.0
    for g in space.groups:
        F, _ = g.gradients(state)
        det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
        l1 += float(np.sum(g.JxW * np.abs(det - 1.0)))
        l2 += float(np.sum(g.JxW * (det - 1.0) ** 2))
    return l1, math.sqrt(l2)


def constraint_functional_max(space: FemSpace, state: State) -> float:
    """max over pressure basis functions of |int q (det - 1)|."""
    from .assembly import assemble_residual
    from .material import MaterialParams as _MP
    # rg is exactly the tested functional (with a sign); material params do
    # not enter it, so defaults suffice
    _, rg = assemble_residual(space, state, _MP())
    return float(np.abs(rg).max())


# ---------------------------------------------------------------------------
# cavity volumes

_EDGE_GAUSS = np.polynomial.legendre.leggauss(3)


def cavity_volumes(space: FemSpace, state: State):
    """Area enclosed by each deformed cavity loop.

    Every loop edge is the trace of the displacement on one element edge,
    a quadratic in the edge parameter through (vertex, midpoint, vertex);
    the shoelace line integral (1/2) oint (u1 du2 - u2 du1) is integrated
    per edge with a 3-point Gauss rule.
    """
    mesh = space.mesh
    xs, ws = _EDGE_GAUSS
    # quadratic 1D Lagrange basis on nodes {-1, 0, +1} and its derivative
    L = np.stack([0.5 * xs * (xs - 1.0), 1.0 - xs * xs, 0.5 * xs * (xs + 1.0)], axis=1)
    dL = np.stack([xs - 0.5, -2.0 * xs, xs + 0.5], axis=1)
    out = []
    for loop in mesh.cavity_loops:
        n = len(loop)
        if n < 4 or n % 2:
            raise GeometryError("cavity loop must alternate vertices and midpoints")
        total = 0.0
        for i in range(0, n, 2):
            ids = [loop[i], loop[(i + 1) % n], loop[(i + 2) % n]]
            uv = np.array([state.u[2 * int(j):2 * int(j) + 2] for j in ids])
            upt = L @ uv          # (3 gauss, 2)
            dupt = dL @ uv
            total += 0.5 * float(np.sum(ws * (upt[:, 0] * dupt[:, 1]
                                              - upt[:, 1] * dupt[:, 0])))
        out.append(total)
    return out


# ---------------------------------------------------------------------------
# cross-mesh evaluation

_DISP_FUN = {"quad9": shape_quad_q2, "tri6": shape_tri_p2plus}
_GEO_FUN = {"quad9": shape_quad_q2, "tri6": shape_tri_p2}


class FieldProbe:
    """Evaluate a discrete state of one mesh at arbitrary physical points
    via inverse iso-parametric lookup (per-element Newton on the reference
    coordinates with KD-tree candidate filtering)."""

    def __init__(self, space: FemSpace, state: State, candidates: int = 16,
                 inside_tol: float = 1e-9, accept_tol: float = 5e-3):
        self.space = space
        self.state = state
        self.candidates = candidates
        self.inside_tol = inside_tol
        self.accept_tol = accept_tol
        cents, self._el_group, self._el_local = [], [], []
        for gi, g in enumerate(space.groups):
            c = g.coords.mean(axis=1)
            cents.append(c)
            self._el_group.extend([gi] * g.n_el)
            self._el_local.extend(range(g.n_el))
        self._cents = np.vstack(cents)
        self._tree = cKDTree(self._cents)
        self._el_group = np.array(self._el_group)
        self._el_local = np.array(self._el_local)

    def _ref_start_and_funcs(self, kind):
        if kind == "quad9":
            return np.zeros(2), _GEO_FUN[kind]
        return np.full(2, 1.0 / 3.0), _GEO_FUN[kind]

    def _violation(self, kind, xh):
        if kind == "quad9":
            return np.maximum(np.abs(xh) - 1.0, 0.0).max(axis=-1)
        v = np.maximum(-xh, 0.0).max(axis=-1)
        return np.maximum(v, np.maximum(xh.sum(axis=-1) - 1.0, 0.0))

    def _invert(self, g, local_idx, pts):
        """Vectorized reference-coordinate Newton for one element group."""
        kind = g.kind
        start, fun = self._ref_start_and_funcs(kind)
        xh = np.tile(start, (len(pts), 1))
        coords = g.coords[local_idx]
        for _ in range(25):
            vals, grads = fun(xh)
            x = np.einsum("pn,pni->pi", vals, coords)
            DF = np.einsum("pnj,pni->pij", grads, coords)
            r = pts - x
            det = DF[:, 0, 0] * DF[:, 1, 1] - DF[:, 0, 1] * DF[:, 1, 0]
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            dx = np.empty_like(r)
            dx[:, 0] = (DF[:, 1, 1] * r[:, 0] - DF[:, 0, 1] * r[:, 1]) / det
            dx[:, 1] = (-DF[:, 1, 0] * r[:, 0] + DF[:, 0, 0] * r[:, 1]) / det
            xh = xh + np.clip(dx, -0.5, 0.5)
            if np.abs(dx).max() < 1e-14:
                break
        vals, _ = fun(xh)
        x = np.einsum("pn,pni->pi", vals, coords)
        resid = np.linalg.norm(pts - x, axis=1)
        return xh, resid

    def locate(self, points):
        """Element index (global) and reference coordinates per point."""
        points = np.asarray(points, dtype=float)
        npts = len(points)
        k = min(self.candidates, len(self._cents))
        _, cand = self._tree.query(points, k=k)
        cand = np.atleast_2d(cand)
        best_el = np.full(npts, -1, dtype=np.int64)
        best_xh = np.zeros((npts, 2))
        best_vio = np.full(npts, np.inf)
        for rank in range(k):
            open_pts = best_vio > self.inside_tol
            if not np.any(open_pts):
                break
            idx = np.nonzero(open_pts)[0]
            els = cand[idx, rank]
            for gi, g in enumerate(self.space.groups):
                m = self._el_group[els] == gi
                if not np.any(m):
                    continue
                sub = idx[m]
                loc = self._el_local[els[m]]
                xh, resid = self._invert(g, loc, points[sub])
                vio = self._violation(g.kind, xh) + np.where(
                    resid > 1e-8 * (1.0 + np.abs(points[sub]).max()), np.inf, 0.0)
                better = vio < best_vio[sub]
                tgt = sub[better]
                best_vio[tgt] = vio[better]
                best_el[tgt] = els[m][better]
                best_xh[tgt] = xh[better]
        bad = best_vio > self.accept_tol
        if np.any(bad):
            i = int(np.argmax(bad))
            raise FieldLookupError(
                f"point {points[i]} not found in target mesh "
                f"(best violation {best_vio[i]:.3g})")
        return best_el, best_xh

    def evaluate(self, points):
        """(grad u, pressure) of the probed state at physical points."""
        points = np.asarray(points, dtype=float)
        els, xhs = self.locate(points)
        gradu = np.zeros((len(points), 2, 2))
        press = np.zeros(len(points))
        for gi, g in enumerate(self.space.groups):
            m = self._el_group[els] == gi
            if not np.any(m):
                continue
            loc = self._el_local[els[m]]
            xh = xhs[m]
            _, ggrads = _GEO_FUN[g.kind](xh)
            coords = g.coords[loc]
            DF = np.einsum("pnj,pni->pij", ggrads, coords)
            det = DF[:, 0, 0] * DF[:, 1, 1] - DF[:, 0, 1] * DF[:, 1, 0]
            inv = np.empty_like(DF)
            inv[:, 0, 0] = DF[:, 1, 1]
            inv[:, 0, 1] = -DF[:, 0, 1]
            inv[:, 1, 0] = -DF[:, 1, 0]
            inv[:, 1, 1] = DF[:, 0, 0]
            inv /= det[:, None, None]
            _, dgr = _DISP_FUN[g.kind](xh)
            phys = np.einsum("pji,pnj->pni", inv, dgr)
            u_el = self.state.u[g.disp_dofs[loc]].reshape(len(loc), -1, 2)
            gradu[m] = np.einsum("pnc,pni->pci", u_el, phys)
            p_el = self.state.p[g.press_dofs[loc]]
            press[m] = np.einsum("pk,pk->p", p_el, pressure_basis(xh))
        return gradu, press


def field_diff_norms(space_a: FemSpace, state_a: State,
                     space_b: FemSpace, state_b: State, s: float = 1.5):
    """W^(1,s) seminorm and pressure L2 norm of the difference between two
    states, integrated on the first mesh with the second evaluated by
    inverse lookup at the physical quadrature points."""
    probe = FieldProbe(space_b, state_b)
    acc_w = 0.0
    acc_p = 0.0
    for g in space_a.groups:
        F_a, p_a = g.gradients(state_a)
        pts = g.qpoints.reshape(-1, 2)
        F_b, p_b = probe.evaluate(pts)
        F_b = F_b.reshape(F_a.shape)
        p_b = p_b.reshape(p_a.shape)
        diff = np.sqrt(np.sum((F_a - F_b) ** 2, axis=(-2, -1)))
        acc_w += float(np.sum(g.JxW * diff ** s))
        acc_p += float(np.sum(g.JxW * (p_a - p_b) ** 2))
    return acc_w ** (1.0 / s), math.sqrt(acc_p)


# ---------------------------------------------------------------------------
# numerical inf-sup constant

def _linear_family_arrays(space: FemSpace):
    """Equal-order continuous linear pair on the element corners: a
    deliberately unstable diagnostic discretization sharing the curved
    geometry."""
    mesh = space.mesh
    vert_ids = sorted({int(i) for el in mesh.elements
                       for i in el.node_ids[:4 if el.kind == "quad9" else 3]})
    remap = {v: i for i, v in enumerate(vert_ids)}
    nv = len(vert_ids)
    rows_X, cols_X, vals_X = [], [], []
    rows_B, cols_B, vals_B = [], [], []
    rows_M, cols_M, vals_M = [], [], []
    for g in space.groups:
        fun = shape_quad_q1 if g.kind == "quad9" else shape_tri_p1
        vals, grads = fun(g.rule.points)
        nb = vals.shape[-1]
        conn = np.array([[remap[int(i)] for i in mesh.elements[ei].node_ids[:nb]]
                         for ei in g.el_indices], dtype=np.int64)
        # physical gradients of the linear basis through the curved maps
        inv = np.empty_like(g.DF)
        inv[..., 0, 0] = g.DF[..., 1, 1]
        inv[..., 0, 1] = -g.DF[..., 0, 1]
        inv[..., 1, 0] = -g.DF[..., 1, 0]
        inv[..., 1, 1] = g.DF[..., 0, 0]
        inv /= g.detDF[..., None, None]
        phys = np.einsum("eqji,qnj->eqni", inv, grads)
        mass = np.einsum("eq,qn,qm->enm", g.JxW, vals, vals, optimize=True)
        stiff = np.einsum("eq,eqnc,eqmc->enm", g.JxW, phys, phys, optimize=True)
        h1 = mass + stiff
        bdiv = np.einsum("eq,qk,eqmc->ekmc", g.JxW, vals, phys, optimize=True)
        dd = np.empty((g.n_el, 2 * nb), dtype=np.int64)
        dd[:, 0::2] = 2 * conn
        dd[:, 1::2] = 2 * conn + 1
        for a in range(2):
            sub = dd[:, a::2]
            rows_X.append(np.repeat(sub, nb, axis=1).ravel())
            cols_X.append(np.tile(sub, (1, nb)).ravel())
            vals_X.append(h1.ravel())
        bl = bdiv.reshape(g.n_el, nb, 2 * nb)  # k, (m,c) -> 2m+c
        rows_B.append(np.repeat(conn, 2 * nb, axis=1).ravel())
        cols_B.append(np.tile(dd, (1, nb)).ravel())
        vals_B.append(bl.ravel())
        rows_M.append(np.repeat(conn, nb, axis=1).ravel())
        cols_M.append(np.tile(conn, (1, nb)).ravel())
        vals_M.append(mass.ravel())
    X = sp.coo_matrix((np.concatenate(vals_X),
                       (np.concatenate(rows_X), np.concatenate(cols_X))),
                      shape=(2 * nv, 2 * nv)).tocsc()
    B = sp.coo_matrix((np.concatenate(vals_B),
                       (np.concatenate(rows_B), np.concatenate(cols_B))),
                      shape=(nv, 2 * nv)).tocsc()
    Mp = sp.coo_matrix((np.concatenate(vals_M),
                        (np.concatenate(rows_M), np.concatenate(cols_M))),
                       shape=(nv, nv)).tocsc()
    constrained = {remap[int(i)] for i in space.mesh.dirichlet_boundary
                   if int(i) in remap}
    free = np.ones(2 * nv, dtype=bool)
    for v in constrained:
        free[2 * v] = free[2 * v + 1] = False
    return X, B, Mp, free


def _mixed_family_arrays(space: FemSpace, state: State | None, family: str):
    """H1 Gram matrix, the pressure-coupling block at ``state`` (identity
    if None) and the pressure mass matrix.

    ``family='native'`` uses the full displacement spaces; ``'reduced'``
    drops the quad interior node and the triangle bubble (the classically
    unstable variant), keeping the discontinuous linear pressure.
    """
    rows_X, cols_X, vals_X = [], [], []
    rows_B, cols_B, vals_B = [], [], []
    rows_M, cols_M, vals_M = [], [], []
    used = np.zeros(space.n_disp, dtype=bool)
    for g in space.groups:
        if state is None:
            cof = np.broadcast_to(np.eye(2), (g.n_el, g.n_qp, 2, 2))
        else:
            F, _ = g.gradients(state)
            cof = np.empty_like(F)
            cof[..., 0, 0] = F[..., 1, 1]
            cof[..., 0, 1] = -F[..., 1, 0]
            cof[..., 1, 0] = -F[..., 0, 1]
            cof[..., 1, 1] = F[..., 0, 0]
        if family == "native":
            vals, grads = g.disp_vals, None
            phys = g.phys_grads
            dd = g.disp_dofs
        else:
            fun = shape_quad_s2 if g.kind == "quad9" else shape_tri_p2
            vals, rgrads = fun(g.rule.points)
            inv = np.empty_like(g.DF)
            inv[..., 0, 0] = g.DF[..., 1, 1]
            inv[..., 0, 1] = -g.DF[..., 0, 1]
            inv[..., 1, 0] = -g.DF[..., 1, 0]
            inv[..., 1, 1] = g.DF[..., 0, 0]
            inv /= g.detDF[..., None, None]
            phys = np.einsum("eqji,qnj->eqni", inv, rgrads)
            nb_red = vals.shape[-1]
            dd = g.disp_dofs[:, :2 * nb_red]
        nb = vals.shape[-1]
        used[dd.ravel()] = True
        mass = np.einsum("eq,qn,qm->enm", g.JxW, vals, vals, optimize=True)
        stiff = np.einsum("eq,eqnc,eqmc->enm", g.JxW, phys, phys, optimize=True)
        h1 = mass + stiff
        CG = np.einsum("eqac,eqnc->eqna", cof, phys).reshape(g.n_el, g.n_qp, -1)
        bl = np.einsum("eq,qk,eql->ekl", g.JxW, g.press_vals, CG, optimize=True)
        pm = np.einsum("eq,qk,ql->ekl", g.JxW, g.press_vals, g.press_vals,
                       optimize=True)
        for a in range(2):
            rows_X.append(np.repeat(dd[:, a::2], nb, axis=1).ravel())
            cols_X.append(np.tile(dd[:, a::2], (1, nb)).ravel())
            vals_X.append(h1.ravel())
        rows_B.append(np.repeat(g.press_dofs, dd.shape[1], axis=1).ravel())
        cols_B.append(np.tile(dd, (1, 3)).ravel())
        vals_B.append(bl.ravel())
        rows_M.append(np.repeat(g.press_dofs, 3, axis=1).ravel())
        cols_M.append(np.tile(g.press_dofs, (1, 3)).ravel())
        vals_M.append(pm.ravel())
    n, m = space.n_disp, space.n_press
    X = sp.coo_matrix((np.concatenate(vals_X),
                       (np.concatenate(rows_X), np.concatenate(cols_X))),
                      shape=(n, n)).tocsc()
    B = sp.coo_matrix((np.concatenate(vals_B),
                       (np.concatenate(rows_B), np.concatenate(cols_B))),
                      shape=(m, n)).tocsc()
    Mp = sp.coo_matrix((np.concatenate(vals_M),
                        (np.concatenate(rows_M), np.concatenate(cols_M))),
                       shape=(m, m)).tocsc()
    return X, B, Mp, space.dofmap.free_mask & used


def infsup_constant(space: FemSpace, state: State | None = None,
                    family: str = "native", dense_limit: int = 4200) -> float:
    """Smallest generalized singular value of the pressure coupling:

        beta^2 = min eig of (B X^-1 B^T, Mp)

    with X the H1 Gram matrix on the constrained displacement space and Mp
    the pressure mass matrix.  On fully enclosed meshes (no traction-free
    cavity boundary) the constant-pressure mode is deflated exactly, so
    the value matches the classical quotient-space constant.  The
    ``'reduced'`` and ``'linear'`` families are deliberately unstable
    diagnostic pairs used to validate the estimator.
    """
    if family in ("native", "reduced"):
        X, B, Mp, free = _mixed_family_arrays(space, state, family)
    elif family == "linear":
        if state is not None:
            raise SolverError("the linear control pair is evaluated at identity only")
        X, B, Mp, free = _linear_family_arrays(space)
    else:
        raise SolverError(f"unknown element family {family!r}")
    idx = np.nonzero(free)[0]
    Xf = X[idx][:, idx].tocsc()
    Bf = B[:, idx].tocsc()
    m = Bf.shape[0]
    lu = spla.splu(Xf)
    enclosed = not any(len(l) for l in space.mesh.cavity_loops)
    w_defl = None
    if enclosed:
        ones = np.ones(m)
        w = Mp @ ones
        w_defl = w / math.sqrt(float(ones @ w))  # eigenvalue of the mode = shift
    shift = 100.0
    if m <= dense_limit:
        Z = lu.solve(np.asarray(Bf.todense()).T)
        S = np.asarray(Bf @ Z)
        S = 0.5 * (S + S.T)
        if w_defl is not None:
            S = S + shift * np.outer(w_defl, w_defl)
        Mpd = np.asarray(Mp.todense())
        w = scipy.linalg.eigh(S, Mpd, subset_by_index=[0, 0], eigvals_only=True)
        lam = float(w[0])
    else:
        def matvec(q):
            out = Bf @ lu.solve(Bf.T @ q)
            if w_defl is not None:
                out = out + shift * w_defl * float(w_defl @ q)
            return out
        S_op = spla.LinearOperator((m, m), matvec=matvec)
        rng = np.random.default_rng(1234)
        X0 = rng.standard_normal((m, 6))
        vals, _ = spla.lobpcg(S_op, X0, B=Mp, largest=False, tol=1e-9,
                              maxiter=400)
        lam = float(np.min(vals))
    return math.sqrt(max(lam, 0.0))


# ---------------------------------------------------------------------------
# tables

@dataclass
class ConvergenceRow:
    h: float
    energy: float
    det_err_l2: float
    det_err_l1: float
    w1s_diff: float
    p_diff: float
    infsup: float

    csv_header = ["h", "energy", "det_err_l2", "det_err_l1",
                  "w1s_diff_to_finest", "p_diff_to_finest", "infsup_beta"]

    def row(self):
        return (self.h, self.energy, self.det_err_l2, self.det_err_l1,
                self.w1s_diff, self.p_diff, self.infsup)


def fit_order(hs, errs):
    """Least-squares slope of log(err) against log(h); positive values mean
    the error decreases under refinement."""
    hs = np.asarray(hs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    keep = errs > 0
    if keep.sum() < 2:
        return float("nan"), int(keep.sum())
    slope = np.polyfit(np.log(hs[keep]), np.log(errs[keep]), 1)[0]
    return float(slope), int(keep.sum())


def rate_table(rows):
    """Fitted order per error column; rows must be sorted by decreasing h."""
    hs = [r.h for r in rows]
    if len(hs) < 2:
        raise SolverError("a rate table needs at least two rows")
    if any(b >= a for a, b in zip(hs, hs[1:])):
        raise SolverError("rate-table rows must have strictly decreasing h")
    out = {}
    for key in ("det_err_l2", "det_err_l1", "w1s_diff", "p_diff"):
        vals = [getattr(r, key) for r in rows]
        slope, used = fit_order(hs, vals)
        out[key] = {"order": slope, "points": used}
    return out


def energy_rate(rows):
    """Fitted order of |E(h) - E(h_finest)| excluding the reference row."""
    hs = [r.h for r in rows[:-1]]
    diffs = [abs(r.energy - rows[-1].energy) for r in rows[:-1]]
    return fit_order(hs, diffs)


@dataclass
class BifurcationRow:
    lam: float
    branch: str
    energy: float
    v1: float
    v2: float

    csv_header = ["lambda", "branch", "energy", "v1", "v2", "ratio"]

    @property
    def ratio(self):
        return self.v2 / self.v1 if self.v1 > 0 else float("nan")

    def row(self):
        return (self.lam, self.branch, self.energy, self.v1, self.v2, self.ratio)


def bifurcation_report(rows, energy_floor: float = 1e-4,
                       ratio_threshold: float = 0.02):
    """Critical-load estimate from two-branch sweep rows.

    Reports the smallest load where the symmetric/dominant energy gap
    exceeds ``energy_floor`` while the dominant volume ratio exceeds
    1 + ratio_threshold, together with the gap and ratio curves.
    """
    sym = {r.lam: r for r in rows if r.branch == "symmetric"}
    dom = {r.lam: r for r in rows if r.branch in ("right", "left")}
    common = sorted(set(sym) & set(dom))
    curve = []
    lam_c = None
    for lam in common:
        gap = sym[lam].energy - dom[lam].energy
        r = dom[lam]
        ratio = r.ratio if r.branch == "right" else (1.0 / r.ratio if r.ratio else float("nan"))
        curve.append({"lambda": lam, "energy_gap": gap, "dominant_ratio": ratio})
        if lam_c is None and abs(gap) > energy_floor and ratio > 1.0 + ratio_threshold:
            lam_c = lam
    return {"lambda_c": lam_c, "curve": curve,
            "branches_present": sorted({r.branch for r in rows})}
