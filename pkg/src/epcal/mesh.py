"""2D triangle meshes for the notched-plate specimen.

Generates an unstructured triangulation of a rectangular plate with
semicircular edge notches, maintains named boundary node sets, and
assembles the consistent mass matrix used by the displacement-mismatch
objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay

__all__ = [
    "Notch",
    "NotchedPlateSpec",
    "Mesh",
    "MeshError",
    "build_notched_plate",
    "assemble_mass_matrix",
    "save_mesh",
    "load_mesh",
    "notch_arc_points",
]


class MeshError(Exception):
    """Raised for infeasible geometry or malformed mesh files."""


@dataclass(frozen=True)
class Notch:
    """Semicircular notch cut from a vertical edge of the plate."""

    side: str  # "left" or "right"
    center_y: float  # [mm]
    radius: float  # [mm]


@dataclass(frozen=True)
class NotchedPlateSpec:
    """Plate geometry: rectangle minus edge notches, target element size."""

    width: float = 0.84
    height: float = 1.0
    notches: tuple[Notch, ...] = (
        Notch("left", 0.6, 0.12),
        Notch("right", 0.4, 0.12),
    )
    target_edge_length: float = 0.02

    def validate(self):
        if self.width <= 0 or self.height <= 0 or self.target_edge_length <= 0:
            raise MeshError("plate dimensions and edge length must be positive")
        for n in self.notches:
            if n.radius < 0:
                raise MeshError("notch radius must be nonnegative")
            if n.side not in ("left", "right"):
                raise MeshError(f"unknown notch side {n.side!r}")
            if n.radius > 0 and (
                n.center_y - n.radius <= 0 or n.center_y + n.radius >= self.height
            ):
                raise MeshError("notch touches the top or bottom edge")
            if 2 * n.radius >= self.width:
                raise MeshError("notch deeper than the plate width")
        for i, a in enumerate(self.notches):
            for b in self.notches[i + 1:]:
                ca = _notch_center(self, a)
                cb = _notch_center(self, b)
                if np.hypot(*(ca - cb)) <= a.radius + b.radius:
                    raise MeshError("notches intersect")


@dataclass
class Mesh:
    """Immutable triangle mesh with named node sets.

    nodes: (n_np, 2) coordinates [mm]; elements: (n_el, 3) CCW connectivity;
    node_sets: {"bottom", "top", "free_boundary"} index arrays.
    """

    nodes: np.ndarray
    elements: np.ndarray
    node_sets: dict = field(default_factory=dict)
    nominal_edge_length: float = 0.0

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def n_dof(self):
        return 2 * self.n_nodes

    def element_areas(self):
        p = self.nodes[self.elements]
        return 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )

    def shape_gradients(self):
        """Reference gradients of the linear shape functions, (n_el, 3, 2)."""
        p = self.nodes[self.elements]
        area2 = 2.0 * self.element_areas()
        g = np.empty((self.n_elements, 3, 2))
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            g[:, a, 0] = (p[:, b, 1] - p[:, c, 1]) / area2
            g[:, a, 1] = (p[:, c, 0] - p[:, b, 0]) / area2
        return g

    def validate(self):
        if self.elements.min() < 0 or self.elements.max() >= self.n_nodes:
            raise MeshError("element references an invalid node")
        areas = self.element_areas()
        if np.any(areas <= 0):
            raise MeshError("degenerate or inverted element")
        bot = set(self.node_sets.get("bottom", ()))
        top = set(self.node_sets.get("top", ()))
        if not bot or not top or bot & top:
            raise MeshError("bottom/top node sets must be non-empty and disjoint")


def _notch_center(spec, notch):
    x = 0.0 if notch.side == "left" else spec.width
    return np.array([x, notch.center_y])


def notch_arc_points(spec, notch, h):
    """Sampled points of the notch arc, endpoints on the plate edge included.

    The same sampling is used by the generator, so the discretized notch
    polygon area can be recomputed exactly by callers.
    """
    c = _notch_center(spec, notch)
    n_seg = max(6, int(np.ceil(np.pi * notch.radius / h)))
    phi = np.linspace(-0.5 * np.pi, 0.5 * np.pi, n_seg + 1)
    sx = 1.0 if notch.side == "left" else -1.0
    pts = np.column_stack(
        [c[0] + sx * notch.radius * np.cos(phi), c[1] + notch.radius * np.sin(phi)]
    )
    pts[0, 0] = c[0]
    pts[-1, 0] = c[0]
    return pts


def build_notched_plate(spec: NotchedPlateSpec) -> Mesh:
    """Triangulate the plate minus its notches at the requested resolution."""
    spec.validate()
    h = spec.target_edge_length
    nx = max(2, round(spec.width / h))
    ny = max(2, round(spec.height / h))
    xs = np.linspace(0.0, spec.width, nx + 1)
    ys = np.linspace(0.0, spec.height, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])

    notches = [n for n in spec.notches if n.radius > 0]
    arcs = [notch_arc_points(spec, n, h) for n in notches]
    clear = 0.45 * h
    keep = np.ones(len(pts), dtype=bool)
    for n in notches:
        c = _notch_center(spec, n)
        d = np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1])
        keep &= d > n.radius + clear
    pts = pts[keep]
    if arcs:
        pts = np.vstack([pts] + arcs)

    tri = Delaunay(pts)
    elements = tri.simplices.copy()

    # drop triangles whose centroid falls inside a notch
    cent = pts[elements].mean(axis=1)
    inside = np.zeros(len(elements), dtype=bool)
    for n in notches:
        c = _notch_center(spec, n)
        inside |= np.hypot(cent[:, 0] - c[0], cent[:, 1] - c[1]) < n.radius
    elements = elements[~inside]

    # enforce CCW orientation
    p = pts[elements]
    areas = 0.5 * (
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    )
    flip = areas < 0
    elements[flip] = elements[flip][:, [0, 2, 1]]
    areas = np.abs(areas)
    if np.any(areas < 1e-12 * h * h):
        elements = elements[areas >= 1e-12 * h * h]
        areas = areas[areas >= 1e-12 * h * h]

    # drop nodes that ended up unused (interior of notches keeps none, but
    # Delaunay may orphan nothing in practice; renumber defensively)
    used = np.unique(elements)
    remap = -np.ones(len(pts), dtype=int)
    remap[used] = np.arange(len(used))
    nodes = pts[used]
    elements = remap[elements]

    tol = 1e-8 * max(spec.width, spec.height)
    bottom = np.flatnonzero(np.abs(nodes[:, 1]) < tol)
    top = np.flatnonzero(np.abs(nodes[:, 1] - spec.height) < tol)
    boundary = _boundary_nodes(elements)
    free = np.setdiff1d(boundary, np.concatenate([bottom, top]))

    mesh = Mesh(
        nodes=nodes,
        elements=elements,
        node_sets={"bottom": bottom, "top": top, "free_boundary": free},
        nominal_edge_length=float(np.sqrt(2.0 * areas.mean())),
    )
    mesh.validate()
    return mesh


def _boundary_nodes(elements):
    edges = np.vstack(
        [elements[:, [0, 1]], elements[:, [1, 2]], elements[:, [2, 0]]]
    )
    edges = np.sort(edges, axis=1)
    _, idx, counts = np.unique(edges, axis=0, return_index=True, return_counts=True)
    return np.unique(edges[idx[counts == 1]])


def assemble_mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Consistent scalar mass matrix (unit density), n_np x n_np."""
    areas = mesh.element_areas()
    local = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    blocks = areas[:, None, None] * local
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    m = sp.coo_matrix(
        (blocks.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    )
    return m.tocsr()


# -- plain-text mesh file ----------------------------------------------------


def save_mesh(mesh: Mesh, path):
    with open(path, "w") as f:
        f.write(f"nodes {mesh.n_nodes} elements {mesh.n_elements}\n")
        for x, y in mesh.nodes:
            f.write(f"{x!r} {y!r}\n")
        for i, j, k in mesh.elements:
            f.write(f"{i} {j} {k}\n")
        for name, idx in mesh.node_sets.items():
            f.write(f"set {name} {len(idx)}\n")
            f.write(" ".join(str(i) for i in idx) + "\n")


def load_mesh(path) -> Mesh:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 4 or header[0] != "nodes" or header[2] != "elements":
            raise MeshError(f"bad mesh header in {path}")
        n_np, n_el = int(header[1]), int(header[3])
        nodes = np.array(
            [[float(v) for v in f.readline().split()] for _ in range(n_np)]
        )
        elements = np.array(
            [[int(v) for v in f.readline().split()] for _ in range(n_el)]
        )
        node_sets = {}
        while True:
            line = f.readline()
            if not line.strip():
                break
            tag, name, count = line.split()
            if tag != "set":
                raise MeshError(f"bad node-set block in {path}")
            idx = np.array([int(v) for v in f.readline().split()])
            if len(idx) != int(count):
                raise MeshError(f"node-set count mismatch in {path}")
            node_sets[name] = idx
    areas = Mesh(nodes, elements).element_areas()
    mesh = Mesh(
        nodes,
        elements,
        node_sets,
        nominal_edge_length=float(np.sqrt(2.0 * areas.mean())),
    )
    mesh.validate()
    return mesh
