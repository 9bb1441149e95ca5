"""Plain-text file formats: versioned mesh and state files, legacy-VTK
export and CSV writing.

Floats are printed with 17 significant digits so that write/read/write
round-trips are bit-exact.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, GeometryError
from .fem import AffineBoundary, State
from .mesh import DefectSpec, Element, Layer, Mesh

__all__ = [
    "fmt",
    "write_mesh",
    "read_mesh",
    "write_state",
    "read_state",
    "write_vtk",
    "write_csv",
    "write_triplets",
]

MESH_MAGIC = "cavityfem mesh 1"
STATE_MAGIC = "cavityfem state 1"


def fmt(x: float) -> str:
    """Round-trip-exact decimal representation."""
    return f"{float(x):.17g}"


def _write_ids(out, ids, per_line=16):
    ids = [int(i) for i in ids]
    for i in range(0, len(ids), per_line):
        out.append(" ".join(str(j) for j in ids[i:i + per_line]))


def write_mesh(mesh: Mesh, path, nodes_override: np.ndarray | None = None) -> None:
    """Serialize a mesh (optionally with substituted node coordinates, used
    for deformed-configuration exports)."""
    nodes = mesh.nodes if nodes_override is None else np.asarray(nodes_override)
    out = [MESH_MAGIC,
           f"domain {fmt(mesh.domain_radius)} {fmt(mesh.h)} "
           f"{int(mesh.circular_boundary)}",
           f"defects {len(mesh.defects)}"]
    for d in mesh.defects:
        out.append(f"{fmt(d.center[0])} {fmt(d.center[1])} {fmt(d.rho)} {fmt(d.delta)}")
    out.append(f"nodes {len(nodes)}")
    for x, y in nodes:
        out.append(f"{fmt(x)} {fmt(y)}")
    out.append(f"elements {len(mesh.elements)}")
    for el in mesh.elements:
        tag = "-" if el.layer_tag is None else f"{el.layer_tag[0]}:{el.layer_tag[1]}:{el.layer_tag[2]}"
        ids = " ".join(str(int(i)) for i in el.node_ids)
        out.append(f"{el.kind} {ids} {tag} {int(el.curved)}")
    out.append(f"dirichlet {len(mesh.dirichlet_boundary)}")
    _write_ids(out, mesh.dirichlet_boundary)
    out.append(f"cavities {len(mesh.cavity_loops)}")
    for k, loop in enumerate(mesh.cavity_loops):
        out.append(f"cavity {k} {len(loop)}")
        _write_ids(out, loop)
    out.append(f"interfaces {len(mesh.interface_loops)}")
    for k, loop in enumerate(mesh.interface_loops):
        out.append(f"interface {k} {len(loop)}")
        _write_ids(out, loop)
    out.append(f"layersets {len(mesh.layers)}")
    for k, layers in enumerate(mesh.layers):
        out.append(f"layers {k} {len(layers)}")
        for l in layers:
            out.append(f"{fmt(l.inner)} {fmt(l.thickness)} {l.count} {l.kind}")
    out.append("end")
    with open(path, "w") as f:
        f.write("\n".join(out) + "\n")


class _Lines:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self):
        if self.pos >= len(self.lines):
            raise GeometryError("unexpected end of mesh file")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def read_ids(self, n):
        ids = []
        while len(ids) < n:
            ids.extend(int(t) for t in self.next().split())
        if len(ids) != n:
            raise GeometryError("malformed id block in mesh file")
        return np.array(ids, dtype=np.int64)


def read_mesh(path) -> Mesh:
    with open(path) as f:
        src = _Lines(f.read())
    if src.next() != MESH_MAGIC:
        raise GeometryError(f"{path}: not a mesh file of the expected version")
    _, R, h, circ = src.next().split()
    nk = int(src.next().split()[1])
    defects = []
    for _ in range(nk):
        cx, cy, rho, delta = (float(t) for t in src.next().split())
        defects.append(DefectSpec((cx, cy), rho, delta))
    nn = int(src.next().split()[1])
    nodes = np.empty((nn, 2))
    for i in range(nn):
        a, b = src.next().split()
        nodes[i] = (float(a), float(b))
    ne = int(src.next().split()[1])
    elements = []
    for _ in range(ne):
        parts = src.next().split()
        kind = parts[0]
        n_ids = 9 if kind == "quad9" else 6
        ids = tuple(int(t) for t in parts[1:1 + n_ids])
        tag_s = parts[1 + n_ids]
        tag = None
        if tag_s != "-":
            a, b, c = tag_s.split(":")
            tag = (int(a), int(b), c)
        curved = bool(int(parts[2 + n_ids]))
        elements.append(Element(kind, ids, tag, curved))
    nd = int(src.next().split()[1])
    dirichlet = src.read_ids(nd)
    ncav = int(src.next().split()[1])
    cavity_loops = []
    for _ in range(ncav):
        cnt = int(src.next().split()[2])
        cavity_loops.append(src.read_ids(cnt))
    nif = int(src.next().split()[1])
    interface_loops = []
    for _ in range(nif):
        cnt = int(src.next().split()[2])
        interface_loops.append(src.read_ids(cnt))
    nls = int(src.next().split()[1])
    layers = []
    for _ in range(nls):
        cnt = int(src.next().split()[2])
        ls = []
        for _ in range(cnt):
            a, b, c, d = src.next().split()
            ls.append(Layer(float(a), float(b), int(c), d))
        layers.append(ls)
    if src.next() != "end":
        raise GeometryError("missing end marker in mesh file")
    return Mesh(nodes=nodes, elements=elements, dirichlet_boundary=dirichlet,
                cavity_loops=cavity_loops, interface_loops=interface_loops,
                layers=layers, defects=defects, domain_radius=float(R),
                h=float(h), circular_boundary=bool(int(circ)))


def write_state(state: State, path) -> None:
    A = np.asarray(state.bc.matrix, dtype=float)
    out = [STATE_MAGIC,
           "bc " + " ".join(fmt(v) for v in A.ravel()),
           f"u {len(state.u)}"]
    out.extend(fmt(v) for v in state.u)
    out.append(f"p {len(state.p)}")
    out.extend(fmt(v) for v in state.p)
    out.append("end")
    with open(path, "w") as f:
        f.write("\n".join(out) + "\n")


def read_state(path) -> State:
    with open(path) as f:
        src = _Lines(f.read())
    if src.next() != STATE_MAGIC:
        raise ConfigError(f"{path}: not a state file of the expected version")
    bc_vals = [float(t) for t in src.next().split()[1:]]
    bc = AffineBoundary(np.array(bc_vals).reshape(2, 2))
    nu = int(src.next().split()[1])
    u = np.array([float(src.next()) for _ in range(nu)])
    npp = int(src.next().split()[1])
    p = np.array([float(src.next()) for _ in range(npp)])
    if src.next() != "end":
        raise ConfigError("missing end marker in state file")
    return State(u=u, p=p, bc=bc)


_VTK_TYPE = {"tri6": 22, "quad9": 28}


def write_vtk(mesh: Mesh, path, point_vectors: dict | None = None,
              point_scalars: dict | None = None,
              nodes_override: np.ndarray | None = None) -> None:
    """Legacy-VTK unstructured-grid export with quadratic cells."""
    nodes = mesh.nodes if nodes_override is None else np.asarray(nodes_override)
    out = ["# vtk DataFile Version 3.0", "cavityfem export", "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {len(nodes)} double"]
    for x, y in nodes:
        out.append(f"{fmt(x)} {fmt(y)} 0")
    total = sum(len(el.node_ids) + 1 for el in mesh.elements)
    out.append(f"CELLS {len(mesh.elements)} {total}")
    for el in mesh.elements:
        out.append(str(len(el.node_ids)) + " " + " ".join(str(int(i)) for i in el.node_ids))
    out.append(f"CELL_TYPES {len(mesh.elements)}")
    out.extend(str(_VTK_TYPE[el.kind]) for el in mesh.elements)
    if point_vectors or point_scalars:
        out.append(f"POINT_DATA {len(nodes)}")
        for name, arr in (point_vectors or {}).items():
            out.append(f"VECTORS {name} double")
            for vx, vy in np.asarray(arr):
                out.append(f"{fmt(vx)} {fmt(vy)} 0")
        for name, arr in (point_scalars or {}).items():
            out.append(f"SCALARS {name} double 1")
            out.append("LOOKUP_TABLE default")
            out.extend(fmt(v) for v in np.asarray(arr))
    with open(path, "w") as f:
        f.write("\n".join(out) + "\n")


def write_csv(path, header: list, rows: list) -> None:
    """CSV with round-trip-exact float formatting."""
    out = [",".join(header)]
    for row in rows:
        cells = [fmt(v) if isinstance(v, float) else str(v) for v in row]
        out.append(",".join(cells))
    with open(path, "w") as f:
        f.write("\n".join(out) + "\n")


def write_triplets(matrix, path) -> None:
    """Debug dump of a sparse matrix as 'row col value' lines."""
    coo = matrix.tocoo()
    with open(path, "w") as f:
        f.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{i} {j} {fmt(v)}\n")
