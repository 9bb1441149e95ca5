"""Damped Newton solution of the discrete saddle-point system.

Each iteration assembles the tangent blocks, solves the symmetric
indefinite system [[A, B^T], [B, 0]] (w, dp) = (rf, rg) by sparse direct
factorization and updates (u, p) <- (u + alpha*w, p - alpha*dp); the sign
of the pressure update follows from the residual pair being (-grad_u E,
+grad_p E) and is pinned by the finite-difference oracles in the tests.
The incomplete line search accepts the largest halved step that keeps the
iterate orientation preserving, inside the singular-value/determinant
safeguard box, and strictly decreases the residual norm.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

log = logging.getLogger("cavityfem.solver")

from .assembly import SaddleSystem, assemble_energy, assemble_residual, assemble_tangent
from .errors import (ConfigError, LineSearchError, NonConvergenceError,
                     OrientationError, SolverError)
from .fem import AffineBoundary, FemSpace, State, interpolate
from .material import MaterialParams, d_derivatives

__all__ = [
    "NewtonConfig",
    "SolveTrace",
    "SweepPoint",
    "solve_saddle_linear",
    "admissibility",
    "line_search",
    "newton_solve",
    "initial_guess",
    "transform_state",
    "continuation_sweep",
]


@dataclass(frozen=True)
class NewtonConfig:
    """Tolerances, damping rule and safeguard box for accepted iterates.

    ``singular_floor`` bounds the singular values of the deformation
    gradient into [floor, 1/floor]; ``det_floor``/``det_ceiling`` box its
    determinant.  The defaults are permissive a-posteriori safeguards.
    """

    tol_abs: float = 1e-10
    tol_rel: float = 0.0
    max_iter: int = 40
    alpha_min: float = 1e-6
    backtrack: float = 0.5
    singular_floor: float = 1e-3
    det_floor: float = 1e-3
    det_ceiling: float = 1e3

    def __post_init__(self):
        if not 0.0 < self.singular_floor < 1.0:
            raise ConfigError("singular_floor must lie in (0, 1)")
        if not 0.0 < self.det_floor < 1.0 < self.det_ceiling:
            raise ConfigError("determinant box must satisfy 0 < floor < 1 < ceiling")
        if self.tol_abs <= 0 and self.tol_rel <= 0:
            raise ConfigError("at least one tolerance must be positive")


@dataclass
class SolveTrace:
    """Per-iteration history: residual norms, accepted steps, smallest
    quadrature-point determinant and energy."""

    residuals: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    min_dets: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    converged: bool = False

    def append(self, residual, alpha, min_det, energy):
        self.residuals.append(float(residual))
        self.alphas.append(float(alpha))
        self.min_dets.append(float(min_det))
        self.energies.append(float(energy))

    @property
    def iterations(self):
        return len(self.residuals) - 1

    def rows(self):
        return [(k, self.residuals[k], self.alphas[k], self.min_dets[k],
                 self.energies[k]) for k in range(len(self.residuals))]

    csv_header = ["iteration", "residual", "alpha", "min_det", "energy"]


def solve_saddle_linear(sys: SaddleSystem, rel_tol: float = 5e-12,
                        max_refine: int = 12):
    """Sparse direct solve of the indefinite block system; returns the
    displacement increment and the (sign-flipped) pressure increment.

    The zero pressure block defeats the default ordering/pivoting, so the
    system is factored in quasi-definite form (a tiny negative
    pressure-mass shift, bandwidth-reducing symmetric permutation, no
    dynamic pivoting) and the unperturbed solution is recovered by
    iterative refinement against the true matrix.  A pivoting
    factorization remains as the fallback.
    """
    n = len(sys.rhs_f)
    K = sys.block_matrix()
    rhs = np.concatenate([sys.rhs_f, sys.rhs_g])
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros(n), np.zeros(len(sys.rhs_g))
    perm = reverse_cuthill_mckee(K + K.T, symmetric_mode=True)
    Kp = K[perm][:, perm].tocsr()
    bp = rhs[perm]
    mp_scale = np.asarray(abs(sys.B).sum(axis=1)).ravel() + 1e-300

    def attempt(eps, pivot):
        reg = sparse.diags(np.concatenate([np.zeros(n), -eps * mp_scale]))
        Kr = (K + reg)[perm][:, perm].tocsc()
        try:
            lu = spla.splu(Kr, permc_spec="NATURAL",
                           options=dict(SymmetricMode=True,
                                        DiagPivotThresh=pivot))
        except RuntimeError:
            return None
        x = lu.solve(bp)
        best = None
        for _ in range(max_refine):
            if not np.all(np.isfinite(x)):
                return None
            r = bp - Kp @ x
            rel = float(np.linalg.norm(r)) / rhs_norm
            if best is not None and rel >= 0.5 * best:
                break
            best = rel if best is None else min(best, rel)
            if rel <= rel_tol:
                return x
            x = x + lu.solve(r)
        return x if (best is not None and best <= 1e-8) else None

    x = attempt(1e-9, 0.0)
    if x is None:
        x = attempt(1e-6, 0.1)
    if x is None:
        try:
            lu = spla.splu(K.tocsc())
            xf = lu.solve(rhs)
        except RuntimeError as exc:
            raise SolverError(f"saddle factorization failed: {exc}") from exc
        if not np.all(np.isfinite(xf)):
            raise SolverError("saddle solve produced non-finite values "
                              "(system numerically singular)")
        return xf[:n], xf[n:]
    out = np.empty_like(x)
    out[perm] = x
    return out[:n], out[n:]


def _singular_value_bounds(F):
    """(min, max) singular value over a stacked batch of 2x2 matrices."""
    sq = np.sum(F * F, axis=(-2, -1))
    det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    disc = np.sqrt(np.maximum(sq * sq - 4.0 * det * det, 0.0))
    smin = np.sqrt(np.maximum(0.5 * (sq - disc), 0.0))
    smax = np.sqrt(0.5 * (sq + disc))
    return float(smin.min()), float(smax.max())


def admissibility(space: FemSpace, state: State, config: NewtonConfig):
    """Check orientation and the safeguard box at every quadrature point.

    Returns (ok, min_det, message)."""
    min_det, max_det = math.inf, -math.inf
    sv_lo, sv_hi = math.inf, 0.0
    for g in space.groups:
        F, _ = g.gradients(state)
        det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
        min_det = min(min_det, float(det.min()))
        max_det = max(max_det, float(det.max()))
        lo, hi = _singular_value_bounds(F)
        sv_lo, sv_hi = min(sv_lo, lo), max(sv_hi, hi)
    if min_det <= 0.0:
        return False, min_det, f"orientation lost (min det {min_det:.3g})"
    if min_det < config.det_floor or max_det > config.det_ceiling:
        return False, min_det, (f"determinant range [{min_det:.3g}, {max_det:.3g}] "
                                "outside safeguard box")
    if sv_lo < config.singular_floor or sv_hi > 1.0 / config.singular_floor:
        return False, min_det, (f"singular values [{sv_lo:.3g}, {sv_hi:.3g}] "
                                "outside safeguard box")
    return True, min_det, ""


def _residual_norm(space, state, material):
    rf, rg = assemble_residual(space, state, material)
    return math.sqrt(float(rf @ rf) + float(rg @ rg)), (rf, rg)


def line_search(space: FemSpace, state: State, direction, material: MaterialParams,
                config: NewtonConfig, current_residual: float):
    """Largest step alpha in {1, 1/2, ...} >= alpha_min whose trial iterate
    is orientation preserving, satisfies the safeguard box and strictly
    decreases the residual norm.

    Returns (alpha, trial state, trial residual norm, trial min det).
    A zero direction returns alpha = 1 with the state unchanged.
    """
    w, dp = direction
    if not (np.any(w) or np.any(dp)):
        ok, min_det, _ = admissibility(space, state, config)
        return 1.0, state, current_residual, min_det
    alpha = 1.0
    reasons = []
    while alpha >= config.alpha_min:
        trial = State(u=state.u + alpha * w, p=state.p - alpha * dp, bc=state.bc)
        try:
            ok, min_det, msg = admissibility(space, trial, config)
            if ok:
                r, _ = _residual_norm(space, trial, material)
                if r < current_residual:
                    return alpha, trial, r, min_det
                msg = f"residual did not decrease ({r:.3g} >= {current_residual:.3g})"
        except OrientationError as exc:
            msg = str(exc)
        reasons.append(f"alpha={alpha:g}: {msg}")
        alpha *= config.backtrack
    raise LineSearchError("no admissible step above alpha_min; "
                          + "; ".join(reasons[-3:]))


def newton_solve(space: FemSpace, state0: State, material: MaterialParams,
                 config: NewtonConfig = NewtonConfig()):
    """Damped Newton iteration until the residual norm satisfies
    tol_abs + tol_rel * (initial residual)."""
    state = state0.copy()
    space.apply_dirichlet(state)
    ok, min_det, msg = admissibility(space, state, config)
    if not ok:
        raise OrientationError(f"initial state is not admissible: {msg}")
    trace = SolveTrace()
    r, _ = _residual_norm(space, state, material)
    trace.append(r, 1.0, min_det, assemble_energy(space, state, material))
    target = config.tol_abs + config.tol_rel * r
    for _ in range(config.max_iter):
        if r <= target:
            trace.converged = True
            return state, trace
        sys = assemble_tangent(space, state, material)
        w, dp = solve_saddle_linear(sys)
        try:
            alpha, state, r, min_det = line_search(
                space, state, (w, dp), material, config, r)
        except LineSearchError as exc:
            raise NonConvergenceError(f"line search failed: {exc}", trace) from exc
        trace.append(r, alpha, min_det, assemble_energy(space, state, material))
    if r <= target:
        trace.converged = True
        return state, trace
    raise NonConvergenceError(
        f"no convergence in {config.max_iter} iterations "
        f"(residual {r:.3g}, target {target:.3g})", trace)


# ---------------------------------------------------------------------------
# initial guesses and continuation

def _smoothstep_down(t):
    """C1 cutoff: 1 at t=0, 0 at t=1, zero slope at both ends."""
    t = np.clip(t, 0.0, 1.0)
    return 1.0 - t * t * (3.0 - 2.0 * t)


def initial_guess(space: FemSpace, material: MaterialParams,
                  mode: str = "symmetric", perturb_index: int = 0,
                  perturb_magnitude: float = 1.0) -> State:
    """Interpolant of an incompressible radial-inflation ansatz around each
    defect, blended into the affine boundary map.

    ``mode='perturb'`` enlarges the ansatz cavity of one defect by the
    given relative magnitude, biasing Newton toward a branch dominated by
    that cavity.  The pressure starts at d'(1), which cancels the
    pressure-coupled residual term wherever the determinant is one.
    """
    mesh = space.mesh
    A = np.asarray(space.bc.matrix, dtype=float)
    detA = float(np.linalg.det(A))
    if detA <= 0.0:
        raise OrientationError("boundary map is not orientation preserving")
    base = [max(detA - 1.0, 0.0) * d.delta ** 2 for d in mesh.defects]
    if mode == "perturb":
        if not 0 <= perturb_index < len(mesh.defects):
            raise ConfigError(f"perturb index {perturb_index} out of range")
        # transfer ansatz cavity volume toward the chosen defect; the total
        # is pinned by incompressibility, so one-sided growth alone would
        # relax back to the symmetric split
        base[perturb_index] *= 1.0 + perturb_magnitude
        for k in range(len(base)):
            if k != perturb_index:
                base[k] /= 1.0 + perturb_magnitude
    elif mode != "symmetric":
        raise ConfigError(f"unknown initial-guess mode {mode!r}")

    def build(amps):
        def field_fn(x):
            u = x @ A.T
            for d, amp in zip(mesh.defects, amps):
                if amp <= 0.0:
                    continue
                c = np.asarray(d.center, dtype=float)
                rel = x - c
                R = np.linalg.norm(rel, axis=1)
                inside = R < d.delta
                if not np.any(inside):
                    continue
                Ri = R[inside]
                scale = np.sqrt(Ri * Ri + amp) / Ri
                radial = (A @ c) + rel[inside] * scale[:, None]
                t = (Ri - d.rho) / (d.delta - d.rho)
                w = _smoothstep_down(t)[:, None]
                u[inside] = w * radial + (1.0 - w) * u[inside]
            return u
        st = interpolate(mesh, space.dofmap, field_fn, space.bc)
        _, dp1, _ = d_derivatives(np.array(1.0), material)
        st.p[0::3] = float(dp1)
        space.apply_dirichlet(st)
        return st

    # the interpolated ansatz can lose orientation on coarse angular grids;
    # shrink the cavity amplitudes toward the (always admissible) affine map
    amps = list(base)
    for _ in range(12):
        st = build(amps)
        if space.min_quadrature_det(st) > 0.0:
            return st
        amps = [0.5 * a for a in amps]
    st = build([0.0] * len(base))
    if space.min_quadrature_det(st) > 0.0:
        return st
    raise OrientationError(
        "no orientation-preserving ansatz found on this mesh; reduce the load")


def transform_state(state: State, bc_new: AffineBoundary) -> State:
    """Warm start for new boundary data: compose the deformation with the
    affine map sending the old boundary values to the new ones."""
    A_old = np.asarray(state.bc.matrix, dtype=float)
    A_new = np.asarray(bc_new.matrix, dtype=float)
    T = A_new @ np.linalg.inv(A_old)
    u = state.u.reshape(-1, 2) @ T.T
    return State(u=u.reshape(-1), p=state.p.copy(), bc=bc_new)


def perturb_state(space: FemSpace, state: State, defect_index: int,
                  magnitude: float) -> State:
    """Bias an iterate toward the branch dominated by one cavity.

    Incompressibility pins the total cavity volume, so the branch degree
    of freedom is the volume split: the chosen deformed cavity is inflated
    radially (area factor about 1 + magnitude at the surface) while the
    other cavities are deflated to transfer the volume, each modification
    fading to zero at its ring interface so the boundary data are
    untouched.  Factors are halved until the biased state stays
    orientation preserving.
    """
    mesh = space.mesh
    if len(mesh.defects) < 2 or not 0 <= defect_index < len(mesh.defects):
        return state.copy()
    pos = space.slot_positions()
    u = state.u.reshape(-1, 2)
    eta = math.sqrt(1.0 + max(magnitude, 0.0)) - 1.0
    shrink = 1.0 / math.sqrt(1.0 + max(magnitude, 0.0)) - 1.0
    for _ in range(10):
        u2 = u.copy()
        for k, d in enumerate(mesh.defects):
            R = np.linalg.norm(pos - np.asarray(d.center, dtype=float), axis=1)
            inside = R < d.delta * (1 - 1e-12)
            if not np.any(inside):
                continue
            center = u[mesh.cavity_loops[k]].mean(axis=0)
            t = (R[inside] - d.rho) / (d.delta - d.rho)
            w = _smoothstep_down(t)
            amp = eta if k == defect_index else shrink
            u2[inside] = center + (1.0 + amp * w)[:, None] * (u[inside] - center)
        trial = State(u=u2.reshape(-1), p=state.p.copy(), bc=state.bc)
        if space.min_quadrature_det(trial) > 0.0:
            return trial
        eta *= 0.5
        shrink *= 0.5
    return state.copy()


@dataclass
class SweepPoint:
    value: float
    state: State | None
    trace: SolveTrace | None
    converged: bool
    message: str = ""


def continuation_sweep(space: FemSpace, material: MaterialParams,
                       bc_family, values, config: NewtonConfig = NewtonConfig(),
                       mode: str = "symmetric", perturb_index: int = 0,
                       perturb_magnitude: float = 1.0,
                       max_bisect: int = 4, anchor_max_iter: int = 150) -> list:
    """Solve a family of boundary conditions along monotone ``values``.

    The symmetric mode warm-starts each solve from the previous solution
    (mapped through the boundary-data change).  Perturb mode is meant to
    run from the strongest load downward: the first value is solved cold
    from the biased ansatz with an enlarged iteration budget (the damped
    phase toward an asymmetric branch is long), and subsequent values are
    tracked by biased warm starts, which follow the branch through its
    merge with the symmetric one.  On failure the step is bisected,
    chaining (biased) warm starts through intermediate values down to
    ``max_bisect`` levels; persistent failures are recorded and the sweep
    continues.
    """
    vals = [float(v) for v in values]
    if len(vals) > 1:
        diffs = np.diff(vals)
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ConfigError("sweep values must be monotone")

    results = []
    prev: SweepPoint | None = None

    def fresh(bc):
        space.set_boundary(bc)
        return initial_guess(space, material, mode=mode,
                             perturb_index=perturb_index,
                             perturb_magnitude=perturb_magnitude)

    def warm(bc, from_state):
        space.set_boundary(bc)
        st = transform_state(from_state, bc)
        if mode == "perturb":
            st = perturb_state(space, st, perturb_index, perturb_magnitude)
        return st

    def attempt(bc, starts, cfg):
        space.set_boundary(bc)
        last_exc = None
        for k, make in enumerate(starts):
            # fallback attempts run on a reduced budget; the bisection path
            # below handles genuinely hard steps more cheaply
            cfg_k = cfg if k == 0 else replace(cfg, max_iter=min(25, cfg.max_iter))
            try:
                st0 = make()
                return newton_solve(space, st0, material, cfg_k), None
            except (NonConvergenceError, OrientationError, SolverError) as exc:
                log.debug("start %d at this value failed: %s", k, exc)
                last_exc = exc
        return None, last_exc

    def initial_residual(bc, st):
        space.set_boundary(bc)
        try:
            ok, _, _ = admissibility(space, st, config)
            if not ok:
                return math.inf
            r, _ = _residual_norm(space, st, material)
            return r
        except (OrientationError, Exception):
            return math.inf

    for v in vals:
        bc = bc_family(v)
        cfg_here = config
        starts = []
        if mode == "perturb":
            # bias priority: the biased warm start selects the branch; the
            # plain warm start is only a fallback.  Fresh biased ansatz
            # starts are reserved for the anchor value, where the long
            # damped march onto the asymmetric branch is worth the budget.
            if prev is not None and prev.converged:
                starts.append(lambda bc=bc: warm(bc, prev.state))
                starts.append(lambda bc=bc: transform_state(prev.state, bc))
            else:
                cfg_here = replace(config, max_iter=max(config.max_iter,
                                                        anchor_max_iter))
                starts.append(lambda bc=bc: fresh(bc))
        else:
            # pick the candidate with the smaller initial residual: warm
            # starts win on fine sweeps, the radial ansatz wins on large
            # load jumps
            cands = []
            if prev is not None and prev.converged:
                cands.append(lambda bc=bc: warm(bc, prev.state))
            cands.append(lambda bc=bc: fresh(bc))
            if len(cands) > 1:
                built = []
                for make in cands:
                    try:
                        st = make()
                        built.append((initial_residual(bc, st), st))
                    except (OrientationError, ConfigError):
                        pass
                built.sort(key=lambda t: t[0])
                starts = [lambda st=st: st for _, st in built] or cands
            else:
                starts = cands

        solved, exc = attempt(bc, starts, cfg_here)
        if solved is None and prev is not None and prev.converged:
            # bisect the parameter step, chaining (biased) warm starts; the
            # chain ends exactly at v, so its last solve is the requested one
            for level in range(1, max_bisect + 1):
                mids = np.linspace(prev.value, v, 2 ** level + 1)[1:]
                cur, cur_trace = prev.state, None
                ok = True
                for mv in mids:
                    bcm = bc_family(mv)
                    try:
                        cur, cur_trace = newton_solve(
                            space, warm(bcm, cur), material, config)
                    except (NonConvergenceError, OrientationError, SolverError) as e:
                        ok = False
                        exc = e
                        break
                if ok:
                    solved = (cur, cur_trace)
                    break
        if solved is None:
            log.info("sweep value %g failed: %s", v, exc)
            results.append(SweepPoint(v, None, None, False,
                                      message=str(exc) if exc else "bisection failed"))
            continue
        state, trace = solved
        trace.converged = True
        pt = SweepPoint(v, state, trace, True)
        log.info("sweep value %g converged in %d iterations (residual %.3g)",
                 v, trace.iterations, trace.residuals[-1])
        results.append(pt)
        prev = pt
    return results
