"""Mesh data structures, curved-element geometry and validation.

Meshes are composites of two parts: structured ring layers of curved
9-node quadrilaterals (with occasional triangle layers absorbing an
angular-count halving) around each defect, and an unstructured 6-node
triangle mesh away from the defects.  Edge midpoints on circles are
placed by averaging polar coordinates about the relevant center, so
curved edges interpolate the circles exactly at three points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError

__all__ = [
    "DefectSpec",
    "MeshParams",
    "Layer",
    "Element",
    "Mesh",
    "polar_midpoint",
    "iso_map",
    "element_edges",
    "MeshReport",
    "validate_mesh",
    "annulus_patch",
    "square_patch",
]


@dataclass(frozen=True)
class DefectSpec:
    """A circular defect: center, defect radius and ring-region outer radius."""

    center: tuple
    rho: float
    delta: float

    def __post_init__(self):
        if not 0.0 < self.rho < self.delta:
            raise GeometryError(
                f"defect radii must satisfy 0 < rho < delta, got rho={self.rho}, delta={self.delta}")


@dataclass(frozen=True)
class MeshParams:
    """Target size and strategy constants for the ring-layer generator.

    ``equi_const``   bounds the per-layer growth of the energy-like radial
                     measure: (eps+tau)^(2-s) <= eps^(2-s) + equi_const*h.
    ``thickness_const`` caps the layer thickness against sqrt(inner radius).
    ``angular_const``   lower-bounds the angular count N (against the layer
                     outer radius on standard layers, against (eps*tau)^(1/4)
                     on halving layers and on the innermost layer).
    ``grading``      exponent in (0,1) entering the optional rate cap.
    ``angular_span`` sets the angular resolution floor N >= angular_span /
                     (equi_const*h), matching arc spacing to the target size.
    ``rate_cap``     optional multiplier enforcing tau, 1/N <=
                     rate_cap * eps^((1-grading)/4) * h; None leaves the
                     bound unenforced (it is still measured by the
                     validation report).
    """

    h: float
    equi_const: float = 2.0
    thickness_const: float = 2.0
    angular_const: float = 2.0
    grading: float = 0.5
    angular_span: float = 1.8
    rate_cap: float | None = None

    def __post_init__(self):
        if self.h <= 0:
            raise GeometryError("mesh size h must be positive")
        if min(self.equi_const, self.thickness_const, self.angular_const) <= 0:
            raise GeometryError("strategy constants must be positive")
        if not 0.0 < self.grading < 1.0:
            raise GeometryError("grading exponent must lie in (0, 1)")


@dataclass(frozen=True)
class Layer:
    """One ring layer: inner radius, thickness, angular count and kind."""

    inner: float
    thickness: float
    count: int
    kind: str  # "standard" (quads) or "conforming" (3*count triangles)


@dataclass(frozen=True)
class Element:
    """A curved element: 9 nodes for quads (4 vertices, 4 edge midpoints,
    center) or 6 for triangles (3 vertices, midpoints 12, 23, 31)."""

    kind: str                 # "quad9" | "tri6"
    node_ids: tuple
    layer_tag: tuple | None = None   # (defect index, layer index, layer kind)
    curved: bool = True


@dataclass
class Mesh:
    nodes: np.ndarray                  # (n, 2)
    elements: list
    dirichlet_boundary: np.ndarray     # node ids on the outer boundary
    cavity_loops: list                 # per defect: ordered ids [v, m, v, m, ...] CCW
    interface_loops: list              # per defect: ids on the ring outer circle
    layers: list                       # per defect: list[Layer]
    defects: list = field(default_factory=list)
    domain_radius: float = 1.0
    h: float = 0.0
    circular_boundary: bool = True  # outer boundary lies on a circle

    @property
    def n_nodes(self):
        return len(self.nodes)

    def element_counts(self):
        counts = {}
        for el in self.elements:
            counts[el.kind] = counts.get(el.kind, 0) + 1
        return counts


# ---------------------------------------------------------------------------
# geometry primitives

def polar_midpoint(a_i, a_j, center):
    """Midpoint of two points with averaged polar radius and angle.

    Angles are normalized so the two representatives differ by less than
    pi before averaging, which keeps the result on the short arc across
    the +-pi branch cut.
    """
    a_i = np.asarray(a_i, dtype=float)
    a_j = np.asarray(a_j, dtype=float)
    center = np.asarray(center, dtype=float)
    di = a_i - center
    dj = a_j - center
    ri = math.hypot(di[0], di[1])
    rj = math.hypot(dj[0], dj[1])
    if ri == 0.0 or rj == 0.0:
        raise GeometryError("polar_midpoint: point coincides with the center")
    if np.allclose(a_i, a_j):
        raise GeometryError("polar_midpoint: coincident points")
    ti = math.atan2(di[1], di[0])
    tj = math.atan2(dj[1], dj[0])
    dt = math.remainder(tj - ti, 2.0 * math.pi)
    if abs(abs(dt) - math.pi) < 1e-14:
        raise GeometryError("polar_midpoint: antipodal points are ambiguous")
    r = 0.5 * (ri + rj)
    t = ti + 0.5 * dt
    return center + np.array([r * math.cos(t), r * math.sin(t)])


def iso_map(elem: Element, mesh: Mesh, xhat):
    """Evaluate the quadratic/biquadratic geometry map and its Jacobian.

    Returns (x, DF, det DF) at reference point(s) ``xhat``.
    """
    from .fem import shape_quad_q2, shape_tri_p2

    fun = shape_quad_q2 if elem.kind == "quad9" else shape_tri_p2
    vals, grads = fun(np.asarray(xhat, dtype=float))
    coords = mesh.nodes[list(elem.node_ids)]
    x = np.einsum("...n,ni->...i", vals, coords)
    DF = np.einsum("...nj,ni->...ij", grads, coords)
    det = DF[..., 0, 0] * DF[..., 1, 1] - DF[..., 0, 1] * DF[..., 1, 0]
    return x, DF, det


def element_edges(elem: Element):
    """Edges as (vertex, vertex, midpoint) node-id triples."""
    n = elem.node_ids
    if elem.kind == "quad9":
        return [(n[0], n[1], n[4]), (n[1], n[2], n[5]),
                (n[2], n[3], n[6]), (n[3], n[0], n[7])]
    return [(n[0], n[1], n[3]), (n[1], n[2], n[4]), (n[2], n[0], n[5])]


# reference nodes per kind, used for det checks at element nodes
_REF_NODES = {
    "quad9": np.array([[-1, -1], [1, -1], [1, 1], [-1, 1],
                       [0, -1], [1, 0], [0, 1], [-1, 0], [0, 0]], dtype=float),
    "tri6": np.array([[0, 0], [1, 0], [0, 1],
                      [0.5, 0], [0.5, 0.5], [0, 0.5]], dtype=float),
}


# ---------------------------------------------------------------------------
# validation

@dataclass
class MeshReport:
    valid: bool
    min_det: float
    min_det_element: int
    h_ratios: tuple                 # (min h_T/h, max h_T/h)
    hanging_nodes: list
    orientation_failures: list
    boundary_deviation: float       # max distance of boundary nodes to their circles
    layer_checks: list              # per defect: list of per-layer dicts
    rate_constants: tuple           # measured sup of tau and 1/N against eps^((1-a)/4) h
    notes: list

    def summary(self) -> str:
        lines = [
            f"valid: {self.valid}",
            f"min det DF: {self.min_det:.6g} (element {self.min_det_element})",
            f"h_T/h range: [{self.h_ratios[0]:.3g}, {self.h_ratios[1]:.3g}]",
            f"hanging nodes: {len(self.hanging_nodes)}",
            f"boundary deviation: {self.boundary_deviation:.3g}",
            f"implied rate-cap constants (tau, 1/N): "
            f"({self.rate_constants[0]:.3g}, {self.rate_constants[1]:.3g})",
        ]
        for k, checks in enumerate(self.layer_checks):
            bad = [c for c in checks if not c["ok"]]
            lines.append(f"defect {k}: {len(checks)} layers, {len(bad)} violations")
            for c in bad:
                lines.append(f"  layer {c['index']}: {c['failed']}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def validate_mesh(mesh: Mesh, params: MeshParams | None = None,
                  s: float = 1.5) -> MeshReport:
    """Check injectivity of the geometry maps, mesh conformity, boundary
    placement and the ring-layer strategy conditions."""
    from .fem import quadrature

    notes = []
    min_det = np.inf
    min_el = -1
    orientation_failures = []
    h_min, h_max = np.inf, 0.0
    rules = {k: quadrature(k) for k in ("quad9", "tri6")}

    for ei, el in enumerate(mesh.elements):
        pts = np.vstack([rules[el.kind].points, _REF_NODES[el.kind]])
        _, _, det = iso_map(el, mesh, pts)
        d = float(det.min())
        if d < min_det:
            min_det, min_el = d, ei
        if d <= 0.0:
            orientation_failures.append(ei)
        coords = mesh.nodes[list(el.node_ids)]
        diff = coords[:, None, :] - coords[None, :, :]
        h_T = float(np.sqrt((diff ** 2).sum(-1)).max())
        h_min, h_max = min(h_min, h_T), max(h_max, h_T)

    # conformity: every shared edge must carry identical (v, v, mid) triples
    edge_map = {}
    hanging = []
    for ei, el in enumerate(mesh.elements):
        for va, vb, mid in element_edges(el):
            key = (min(va, vb), max(va, vb))
            if key in edge_map:
                prev_mid, prev_count = edge_map[key]
                if prev_mid != mid:
                    hanging.append((key, prev_mid, mid))
                edge_map[key] = (prev_mid, prev_count + 1)
            else:
                edge_map[key] = (mid, 1)
    over_used = [k for k, (_, c) in edge_map.items() if c > 2]
    if over_used:
        hanging.extend((k, None, None) for k in over_used)
    # a vertex lying in the interior of another element's edge shows up as
    # two unpaired half edges; detect leftover boundary edges not on any circle
    boundary_edges = [k for k, (_, c) in edge_map.items() if c == 1]
    known_boundary = set(int(i) for i in mesh.dirichlet_boundary)
    for loop in mesh.cavity_loops:
        known_boundary.update(int(i) for i in loop)
    stray = [k for k in boundary_edges
             if not (k[0] in known_boundary and k[1] in known_boundary)]
    if stray:
        hanging.extend((k, None, None) for k in stray)

    # boundary placement
    dev = 0.0
    if len(mesh.dirichlet_boundary) and mesh.circular_boundary:
        r = np.linalg.norm(mesh.nodes[mesh.dirichlet_boundary], axis=1)
        dev = max(dev, float(np.abs(r - mesh.domain_radius).max()))
    for k, loop in enumerate(mesh.cavity_loops):
        if len(loop) == 0:
            continue
        c = np.asarray(mesh.defects[k].center)
        r = np.linalg.norm(mesh.nodes[loop] - c, axis=1)
        dev = max(dev, float(np.abs(r - mesh.defects[k].rho).max()))

    # layer strategy conditions
    layer_checks = []
    rate_tau, rate_n = 0.0, 0.0
    h = params.h if params is not None else mesh.h
    if params is not None and h > 0:
        C = params.equi_const
        C1 = params.thickness_const
        C2 = params.angular_const
        a = params.grading
        p = 2.0 - s
        for k, layers in enumerate(mesh.layers):
            checks = []
            for m, lay in enumerate(layers):
                eps, tau, N = lay.inner, lay.thickness, lay.count
                failed = []
                if tau > C1 * math.sqrt(eps) * (1 + 1e-9):
                    failed.append("thickness cap")
                n_bound = (C2 * (eps * tau) ** -0.25 if lay.kind == "conforming"
                           else C2 / math.sqrt(eps + tau))
                if N < n_bound * (1 - 1e-9):
                    failed.append("angular lower bound")
                last = m == len(layers) - 1
                if (eps + tau) ** p > eps ** p + C * h * (1 + 1e-9) and not last:
                    failed.append("equidistribution")
                elif (eps + tau) ** p > eps ** p + C * h * (1 + 1e-9):
                    notes.append(f"defect {k}: final layer exceeds the "
                                 f"equidistribution bound (flagged, allowed)")
                scale = eps ** ((1.0 - a) / 4.0) * h
                rate_tau = max(rate_tau, tau / scale)
                rate_n = max(rate_n, 1.0 / (N * scale))
                checks.append({"index": m, "ok": not failed, "failed": failed})
            # halving pattern
            for m in range(1, len(layers)):
                n0, n1 = layers[m - 1].count, layers[m].count
                if not (n1 == n0 or 2 * n1 == n0):
                    checks[m]["ok"] = False
                    checks[m]["failed"].append("angular count transition")
                if 2 * n1 == n0 and layers[m].kind != "conforming":
                    checks[m]["ok"] = False
                    checks[m]["failed"].append("halving without conforming layer")
            layer_checks.append(checks)

    layer_ok = all(c["ok"] for checks in layer_checks for c in checks)
    valid = (min_det > 0.0 and not hanging and dev < 1e-9 and layer_ok)
    return MeshReport(
        valid=valid,
        min_det=min_det,
        min_det_element=min_el,
        h_ratios=(h_min / h if h else float("nan"),
                  h_max / h if h else float("nan")),
        hanging_nodes=hanging,
        orientation_failures=orientation_failures,
        boundary_deviation=dev,
        layer_checks=layer_checks,
        rate_constants=(rate_tau, rate_n),
        notes=notes,
    )


# ---------------------------------------------------------------------------
# small structured meshes for tests and diagnostics

def annulus_patch(r0: float, r1: float, theta0: float, theta1: float,
                  nr: int, nt: int, center=(0.0, 0.0)) -> Mesh:
    """A structured patch of curved quads on an annular sector.

    Radial edges are straight in the polar sense (constant angle), arc
    edges and centers use polar midpoints.  The outer arc nodes form the
    Dirichlet set.
    """
    center = np.asarray(center, dtype=float)
    radii = np.linspace(r0, r1, 2 * nr + 1)
    angles = np.linspace(theta0, theta1, 2 * nt + 1)
    nodes = []
    idx = {}
    for i, r in enumerate(radii):
        for j, t in enumerate(angles):
            idx[(i, j)] = len(nodes)
            nodes.append(center + r * np.array([math.cos(t), math.sin(t)]))
    elements = []
    for i in range(nr):
        for j in range(nt):
            I, J = 2 * i, 2 * j
            n = (idx[(I, J)], idx[(I + 2, J)], idx[(I + 2, J + 2)], idx[(I, J + 2)],
                 idx[(I + 1, J)], idx[(I + 2, J + 1)], idx[(I + 1, J + 2)],
                 idx[(I, J + 1)], idx[(I + 1, J + 1)])
            elements.append(Element("quad9", n, None, True))
    outer = [idx[(2 * nr, j)] for j in range(2 * nt + 1)]
    return Mesh(nodes=np.array(nodes), elements=elements,
                dirichlet_boundary=np.array(sorted(outer), dtype=np.int64),
                cavity_loops=[], interface_loops=[], layers=[],
                defects=[], domain_radius=r1, h=(r1 - r0) / nr)


def square_patch(n: int, length: float = 1.0) -> Mesh:
    """An n-by-n patch of straight 9-node quads on a square; all four sides
    form the Dirichlet set."""
    coords = np.linspace(0.0, length, 2 * n + 1)
    nodes = []
    idx = {}
    for i, x in enumerate(coords):
        for j, y in enumerate(coords):
            idx[(i, j)] = len(nodes)
            nodes.append((x, y))
    elements = []
    for i in range(n):
        for j in range(n):
            I, J = 2 * i, 2 * j
            ids = (idx[(I, J)], idx[(I + 2, J)], idx[(I + 2, J + 2)], idx[(I, J + 2)],
                   idx[(I + 1, J)], idx[(I + 2, J + 1)], idx[(I + 1, J + 2)],
                   idx[(I, J + 1)], idx[(I + 1, J + 1)])
            elements.append(Element("quad9", ids, None, False))
    m = 2 * n
    edge = [idx[(i, 0)] for i in range(m + 1)] + [idx[(i, m)] for i in range(m + 1)] \
        + [idx[(0, j)] for j in range(1, m)] + [idx[(m, j)] for j in range(1, m)]
    return Mesh(nodes=np.asarray(nodes, dtype=float), elements=elements,
                dirichlet_boundary=np.array(sorted(set(edge)), dtype=np.int64),
                cavity_loops=[], interface_loops=[], layers=[],
                defects=[], domain_radius=length, h=length / n,
                circular_boundary=False)
