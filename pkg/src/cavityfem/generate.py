"""Mesh generation: defect-adapted ring layers plus an unstructured exterior.

Ring layers march outward from each defect.  The layer thickness is the
tightest of the thickness cap ``C1*sqrt(eps)``, the closed-form
equidistribution step solving ``(eps+tau)^(2-s) = eps^(2-s) + C*h`` and the
optional rate cap; the remaining gap to the ring outer radius is split into
equal layers once a look-ahead shows the march would overshoot.  The
angular count obeys the documented lower bounds and halves only through a
conforming layer of three-triangle splits, so the composite mesh carries no
hanging nodes.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .errors import GeometryError, MeshStrategyError
from .mesh import DefectSpec, Element, Layer, Mesh, MeshParams

__all__ = ["ring_schedule", "make_ring_mesh", "make_outer_mesh", "build_mesh"]

_TWO_PI = 2.0 * math.pi


def check_strategy_constants(params: MeshParams, s: float) -> None:
    """Feasibility bounds tying the strategy constants to the exponent s."""
    p = 2.0 - s
    c_min = p * 2.0 ** (s - 1.0)
    if params.equi_const < c_min * (1 - 1e-12):
        raise MeshStrategyError(
            f"equidistribution constant too small: need >= {c_min:.6g}, "
            f"got {params.equi_const}")
    h_max = min(p / (2.0 ** (2.0 - s) * params.equi_const),
                p / (2.0 ** (s - 1.0) * params.equi_const))
    if params.h > h_max * (1 + 1e-12):
        raise MeshStrategyError(
            f"mesh size h={params.h} exceeds the admissible bound {h_max:.6g} "
            f"for the given constants")


# ---------------------------------------------------------------------------
# layer schedule

def ring_schedule(defect: DefectSpec, params: MeshParams, s: float) -> list:
    """Layer radii/thicknesses and angular counts for one defect ring.

    Marches with the tightest admissible thickness; when the look-ahead
    shows the next full step would overshoot the ring outer radius, the
    remaining annulus is split into equally thick layers (each no thicker
    than the admissible step).  The angular count starts from the
    innermost-layer bound and halves through conforming layers whenever
    the local bound permits.
    """
    check_strategy_constants(params, s)
    rho, delta = defect.rho, defect.delta
    h = params.h
    C, C1, C2 = params.equi_const, params.thickness_const, params.angular_const
    p = 2.0 - s

    def tau_cap(eps):
        t = min(C1 * math.sqrt(eps), (eps ** p + C * h) ** (1.0 / p) - eps)
        if params.rate_cap is not None:
            t = min(t, params.rate_cap * eps ** ((1.0 - params.grading) / 4.0) * h)
        if t <= 0:
            raise MeshStrategyError(f"no feasible layer thickness at radius {eps}")
        return t

    n_floor = params.angular_span / (C * h)

    def n_required(eps, tau, conforming):
        n = C2 * (eps * tau) ** -0.25 if conforming else C2 / math.sqrt(eps + tau)
        return max(n, n_floor)

    def even_ceil(x):
        return 2 * int(math.ceil(x / 2.0 - 1e-12))

    layers = []
    eps = rho
    tau0 = min(tau_cap(rho), delta - rho)
    N = even_ceil(n_required(rho, tau0, conforming=True))
    while True:
        if len(layers) > 100000:
            raise MeshStrategyError("layer march did not terminate")
        tau = tau_cap(eps)
        overshoot = (eps + tau >= delta * (1 - 1e-12)
                     or eps + tau + tau_cap(min(eps + tau, delta)) > delta * (1 + 1e-9))
        if overshoot:
            rem = delta - eps
            k = max(1, int(math.ceil(rem / tau - 1e-9)))
            t = rem / k
            for i in range(k):
                layers.append(Layer(eps, t if i < k - 1 else delta - eps, N, "standard"))
                eps += t
            break
        if N % 2 == 0 and N // 2 >= n_required(eps, tau, conforming=True):
            layers.append(Layer(eps, tau, N // 2, "conforming"))
            N //= 2
        else:
            layers.append(Layer(eps, tau, N, "standard"))
        eps += tau
    return layers


# ---------------------------------------------------------------------------
# node/element builder

class _Builder:
    def __init__(self):
        self.nodes = []
        self.elements = []

    def add_node(self, x, y) -> int:
        self.nodes.append((float(x), float(y)))
        return len(self.nodes) - 1

    def circle_row(self, center, r, n_arc, n_nodes_factor=2) -> np.ndarray:
        """Uniform nodes on a circle: ``n_arc`` arcs, two nodes per arc
        (corner at even positions, arc midpoint at odd positions)."""
        n = n_nodes_factor * n_arc
        ids = np.empty(n, dtype=np.int64)
        for i in range(n):
            t = _TWO_PI * i / n
            ids[i] = self.add_node(center[0] + r * math.cos(t),
                                   center[1] + r * math.sin(t))
        return ids

    def freeze(self) -> np.ndarray:
        return np.asarray(self.nodes, dtype=float)


def _build_ring(builder: _Builder, defect: DefectSpec, layers: list,
                defect_index: int):
    """Emit ring nodes and elements; returns (cavity row, interface row)."""
    cx = np.asarray(defect.center, dtype=float)
    first_arcs = 2 * layers[0].count if layers[0].kind == "conforming" else layers[0].count
    inner_row = builder.circle_row(cx, defect.rho, first_arcs)
    cavity_row = inner_row
    for m, lay in enumerate(layers):
        r0, tau, N = lay.inner, lay.thickness, lay.count
        r1 = r0 + tau
        rm = 0.5 * (r0 + r1)
        tag = (defect_index, m, lay.kind)
        outer_row = builder.circle_row(cx, r1, N)
        if lay.kind == "standard":
            if len(inner_row) != 2 * N:
                raise GeometryError("ring row mismatch on a standard layer")
            mid_row = builder.circle_row(cx, rm, N)
            for j in range(N):
                a, b = 2 * j, (2 * j + 2) % (2 * N)
                ids = (inner_row[a], outer_row[a], outer_row[b], inner_row[b],
                       mid_row[a], outer_row[a + 1], mid_row[b], inner_row[a + 1],
                       mid_row[a + 1])
                builder.elements.append(Element("quad9", tuple(int(i) for i in ids), tag))
        else:
            if len(inner_row) != 4 * N:
                raise GeometryError("ring row mismatch on a conforming layer")
            rad_mid = [builder.add_node(cx[0] + rm * math.cos(_TWO_PI * j / N),
                                        cx[1] + rm * math.sin(_TWO_PI * j / N))
                       for j in range(N)]
            for j in range(N):
                A = inner_row[4 * j]
                mAM = inner_row[4 * j + 1]
                M = inner_row[4 * j + 2]
                mMB = inner_row[4 * j + 3]
                B = inner_row[(4 * j + 4) % (4 * N)]
                D = outer_row[2 * j]
                mDC = outer_row[2 * j + 1]
                Cc = outer_row[(2 * j + 2) % (2 * N)]
                t1 = _TWO_PI * (j + 0.25) / N
                t2 = _TWO_PI * (j + 0.75) / N
                d1 = builder.add_node(cx[0] + rm * math.cos(t1), cx[1] + rm * math.sin(t1))
                d2 = builder.add_node(cx[0] + rm * math.cos(t2), cx[1] + rm * math.sin(t2))
                r_j, r_j1 = rad_mid[j], rad_mid[(j + 1) % N]
                for ids in ((A, D, M, r_j, d1, mAM),
                            (M, D, Cc, d1, mDC, d2),
                            (M, Cc, B, d2, r_j1, mMB)):
                    builder.elements.append(Element("tri6", tuple(int(i) for i in ids), tag))
        inner_row = outer_row
    return cavity_row, inner_row


def make_ring_mesh(defect: DefectSpec, params: MeshParams, s: float = 1.5,
                   defect_index: int = 0) -> Mesh:
    """Stand-alone ring mesh for one defect.

    When the ring outer radius coincides with the domain boundary this is a
    complete computational mesh; the interface circle doubles as the
    Dirichlet boundary.
    """
    layers = ring_schedule(defect, params, s)
    b = _Builder()
    cavity, interface = _build_ring(b, defect, layers, defect_index)
    return Mesh(nodes=b.freeze(), elements=b.elements,
                dirichlet_boundary=np.array(sorted(int(i) for i in interface), dtype=np.int64),
                cavity_loops=[cavity.astype(np.int64)],
                interface_loops=[interface.astype(np.int64)],
                layers=[layers], defects=[defect],
                domain_radius=defect.delta, h=params.h)


# ---------------------------------------------------------------------------
# unstructured exterior

def _hex_lattice(h, radius):
    pts = []
    dy = h * math.sqrt(3.0) / 2.0
    ny = int(math.ceil(radius / dy)) + 1
    nx = int(math.ceil(radius / h)) + 1
    for j in range(-ny, ny + 1):
        off = 0.5 * h if j % 2 else 0.0
        for i in range(-nx, nx + 1):
            pts.append((i * h + off, j * dy))
    return np.array(pts)


def make_outer_mesh(builder: _Builder, domain_radius: float, defects: list,
                    interface_rows: list, h: float):
    """Triangulate the domain minus the ring regions, conforming to the
    ring interface circles, and emit curved 6-node triangles.

    Returns the ids of the new outer (Dirichlet) boundary nodes.
    """
    R = domain_radius
    pts = []
    kind = []      # ('iface', defect, corner index) | ('circle', i) | ('free',)
    gid = []       # existing global node id or -1

    for k, row in enumerate(interface_rows):
        corners = row[0::2]
        for j, nid in enumerate(corners):
            pts.append(builder.nodes[nid])
            kind.append(("iface", k, j))
            gid.append(int(nid))

    M = max(12, int(math.ceil(_TWO_PI * R / h)))
    for i in range(M):
        t = _TWO_PI * i / M
        pts.append((R * math.cos(t), R * math.sin(t)))
        kind.append(("circle", i))
        gid.append(-1)

    centers = [np.asarray(d.center, dtype=float) for d in defects]
    deltas = [d.delta for d in defects]

    def clearance(p):
        c = R - math.hypot(p[0], p[1])
        for cc, dd in zip(centers, deltas):
            c = min(c, math.hypot(p[0] - cc[0], p[1] - cc[1]) - dd)
        return c

    guards = []
    off = h * math.sqrt(3.0) / 2.0
    for k, row in enumerate(interface_rows):
        n = len(row) // 2
        r = deltas[k] + off
        for j in range(n):
            t = _TWO_PI * (j + 0.5) / n
            guards.append((centers[k][0] + r * math.cos(t),
                           centers[k][1] + r * math.sin(t)))
    for i in range(M):
        t = _TWO_PI * (i + 0.5) / M
        r = R - off
        guards.append((r * math.cos(t), r * math.sin(t)))
    for p in guards:
        if clearance(p) > 0.55 * h:
            pts.append(p)
            kind.append(("free",))
            gid.append(-1)

    for p in _hex_lattice(h, R):
        if clearance(p) > 1.3 * h:
            pts.append(p)
            kind.append(("free",))
            gid.append(-1)

    pts = np.asarray(pts, dtype=float)
    tri = Delaunay(pts)
    simplices = tri.simplices

    cent = pts[simplices].mean(axis=1)
    keep = np.ones(len(simplices), dtype=bool)
    for cc, dd in zip(centers, deltas):
        keep &= np.linalg.norm(cent - cc, axis=1) > dd
    simplices = simplices[keep]

    # orient counterclockwise
    v = pts[simplices]
    area2 = ((v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
             - (v[:, 2, 0] - v[:, 0, 0]) * (v[:, 1, 1] - v[:, 0, 1]))
    flip = area2 < 0
    simplices[flip] = simplices[flip][:, [0, 2, 1]]

    # boundary recovery checks
    edges = set()
    for s3 in simplices:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            edges.add((min(s3[a], s3[b]), max(s3[a], s3[b])))
    circle_local = [i for i, kk in enumerate(kind) if kk[0] == "circle"]
    circle_by_index = {kind[i][1]: i for i in circle_local}
    for i in range(M):
        a, b = circle_by_index[i], circle_by_index[(i + 1) % M]
        if (min(a, b), max(a, b)) not in edges:
            raise GeometryError(
                "outer boundary was not recovered by the triangulation; "
                "refine h or adjust the defect layout")
    iface_by = {}
    for i, kk in enumerate(kind):
        if kk[0] == "iface":
            iface_by[(kk[1], kk[2])] = i
    for k, row in enumerate(interface_rows):
        n = len(row) // 2
        for j in range(n):
            a, b = iface_by[(k, j)], iface_by[(k, (j + 1) % n)]
            if (min(a, b), max(a, b)) not in edges:
                raise GeometryError(
                    f"interface circle of defect {k} was not recovered; "
                    "refine h or adjust guard spacing")

    # create vertex nodes
    local_gid = list(gid)
    for i, kk in enumerate(kind):
        if local_gid[i] < 0:
            local_gid[i] = builder.add_node(pts[i, 0], pts[i, 1])
    boundary_nodes = [local_gid[i] for i, kk in enumerate(kind) if kk[0] == "circle"]

    def adjacency(i, j):
        """Classify an edge: curved-on-circle, midpoint reuse, or straight."""
        ki, kj = kind[i], kind[j]
        if ki[0] == "circle" and kj[0] == "circle":
            di = (ki[1] - kj[1]) % M
            if di in (1, M - 1):
                return ("outer",)
        if ki[0] == "iface" and kj[0] == "iface" and ki[1] == kj[1]:
            k = ki[1]
            n = len(interface_rows[k]) // 2
            dj = (ki[2] - kj[2]) % n
            if dj in (1, n - 1):
                lo = kj[2] if dj == 1 else ki[2]
                return ("iface", k, lo)
        return ("straight",)

    mid_cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key in mid_cache:
            return mid_cache[key], False
        adj = adjacency(i, j)
        curved = adj[0] != "straight"
        if adj[0] == "outer":
            from .mesh import polar_midpoint
            p = polar_midpoint(pts[i], pts[j], (0.0, 0.0))
            nid = builder.add_node(p[0], p[1])
            boundary_nodes.append(nid)
        elif adj[0] == "iface":
            k, lo = adj[1], adj[2]
            nid = int(interface_rows[k][2 * lo + 1])
        else:
            p = 0.5 * (pts[i] + pts[j])
            nid = builder.add_node(p[0], p[1])
        mid_cache[key] = nid
        return nid, curved

    for s3 in simplices:
        i, j, k = int(s3[0]), int(s3[1]), int(s3[2])
        m12, c1 = midpoint(i, j)
        m23, c2 = midpoint(j, k)
        m31, c3 = midpoint(k, i)
        ids = (local_gid[i], local_gid[j], local_gid[k], m12, m23, m31)
        builder.elements.append(
            Element("tri6", tuple(int(x) for x in ids), None, c1 or c2 or c3))
    return boundary_nodes


# ---------------------------------------------------------------------------
# full pipeline

def build_mesh(defects: list, params: MeshParams, s: float = 1.5,
               domain_radius: float = 1.0) -> Mesh:
    """Composite mesh of the disk minus the defect disks.

    Rings are generated first; the exterior is triangulated against the
    ring interface circles.  A single defect whose ring reaches the domain
    boundary yields a ring-only mesh.
    """
    R = domain_radius
    for k, d in enumerate(defects):
        c = np.asarray(d.center, dtype=float)
        lim = np.linalg.norm(c) + d.delta
        if lim > R * (1 + 1e-12):
            raise GeometryError(f"defect {k} ring region leaves the domain")
        for l in range(k):
            o = defects[l]
            dist = np.linalg.norm(c - np.asarray(o.center))
            if dist < d.delta + o.delta - 1e-12:
                raise GeometryError(f"defect rings {l} and {k} overlap")

    ring_fills_domain = (
        len(defects) == 1
        and abs(defects[0].delta - R) < 1e-12
        and np.linalg.norm(np.asarray(defects[0].center)) < 1e-12)
    if ring_fills_domain:
        return make_ring_mesh(defects[0], params, s)
    for d in defects:
        if abs(np.linalg.norm(np.asarray(d.center)) + d.delta - R) < 1e-12:
            raise GeometryError(
                "a ring region touching the outer boundary requires a single "
                "centered defect")

    b = _Builder()
    cavity_rows, interface_rows, all_layers = [], [], []
    for k, d in enumerate(defects):
        layers = ring_schedule(d, params, s)
        cav, iface = _build_ring(b, d, layers, k)
        cavity_rows.append(cav)
        interface_rows.append(iface)
        all_layers.append(layers)

    boundary = make_outer_mesh(b, R, defects, interface_rows, params.h)

    return Mesh(nodes=b.freeze(), elements=b.elements,
                dirichlet_boundary=np.array(sorted(set(int(i) for i in boundary)),
                                            dtype=np.int64),
                cavity_loops=[r.astype(np.int64) for r in cavity_rows],
                interface_loops=[r.astype(np.int64) for r in interface_rows],
                layers=all_layers, defects=list(defects),
                domain_radius=R, h=params.h)
