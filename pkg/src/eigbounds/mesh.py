"""Conforming triangulations with labelled boundaries and newest vertex bisection.

Local conventions used throughout the package:

* triangles are stored counterclockwise;
* local edge ``j`` of a triangle is the edge opposite its local vertex ``j``,
  i.e. it joins local vertices ``j+1`` and ``j+2`` (mod 3);
* every edge has a global orientation from its smaller to its larger vertex
  index, and its global unit normal is the counterclockwise rotation of the
  unit tangent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

DIRICHLET = "dirichlet"
NEUMANN = "neumann"
LABELS = (DIRICHLET, NEUMANN)

# edge kinds
EDGE_INTERIOR = 0
EDGE_DIRICHLET = 1
EDGE_NEUMANN = 2

# vertex (patch) classes
PATCH_INTERIOR = "interior"
PATCH_NEUMANN = "neumann"
PATCH_DIRICHLET = "dirichlet"

_TIE_RTOL = 1e-12


class MeshError(ValueError):
    """Raised for invalid mesh input."""


def _edge_key(a, b, n):
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return lo * n + hi


@dataclass(eq=False)
class Mesh:
    """Conforming triangle mesh of a polygon with Dirichlet/Neumann boundary labels.

    Parameters
    ----------
    vertices : (N, 2) float array
    triangles : (M, 3) int array, counterclockwise
    boundary : dict mapping a sorted vertex pair to ``(label, marker)`` where
        ``label`` is ``"dirichlet"`` or ``"neumann"`` and ``marker`` is an
        integer key for boundary coefficients
    regions : (M,) int array keying piecewise-constant coefficients
    refinement_edge : (M,) int array, local index of the edge bisected next
    parent : (M,) int array or None, index of the triangle of the previous
        mesh that contains each triangle (set by :func:`bisect`)

    The constructor validates the input and derives the edge topology.
    Instances are treated as immutable.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary: dict
    regions: np.ndarray
    refinement_edge: np.ndarray
    parent: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.regions = np.asarray(self.regions, dtype=np.int64)
        self.refinement_edge = np.asarray(self.refinement_edge, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be an (N, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be an (M, 3) array")
        nt = len(self.triangles)
        if nt == 0:
            raise MeshError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle references a nonexistent vertex")
        if self.regions.shape != (nt,) or self.refinement_edge.shape != (nt,):
            raise MeshError("regions and refinement_edge need one entry per triangle")
        if np.any((self.refinement_edge < 0) | (self.refinement_edge > 2)):
            raise MeshError("refinement_edge entries must be 0, 1 or 2")
        if np.any(self.signed_areas <= 0.0):
            bad = np.flatnonzero(self.signed_areas <= 0.0)[:5]
            raise MeshError(f"degenerate or clockwise triangles: {bad.tolist()}")
        self._build_topology()

    # ------------------------------------------------------------------ topology

    def _build_topology(self):
        t = self.triangles
        n = len(self.vertices)
        a = t[:, [1, 2, 0]]
        b = t[:, [2, 0, 1]]
        keys = _edge_key(a, b, n).ravel()
        ukeys, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("non-conforming connectivity: an edge is shared by more than two triangles")
        self.edges = np.column_stack([ukeys // n, ukeys % n])
        self.tri_edges = inverse.reshape(-1, 3)
        ne = len(ukeys)

        edge_tris = np.full((ne, 2), -1, dtype=np.int64)
        edge_local = np.full((ne, 2), -1, dtype=np.int64)
        flat_tri = np.repeat(np.arange(len(t)), 3)
        flat_loc = np.tile(np.arange(3), len(t))
        order = np.argsort(inverse, kind="stable")
        sorted_e = inverse[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_e[1:] != sorted_e[:-1]
        slot = np.where(first, 0, 1)
        edge_tris[sorted_e, slot] = flat_tri[order]
        edge_local[sorted_e, slot] = flat_loc[order]
        self.edge_tris = edge_tris
        self.edge_local = edge_local

        # the same edge traversed in the same direction twice means an orientation clash
        interior = counts == 2
        if np.any(interior):
            e = np.flatnonzero(interior)
            s0 = self.edge_signs[edge_tris[e, 0], edge_local[e, 0]]
            s1 = self.edge_signs[edge_tris[e, 1], edge_local[e, 1]]
            if np.any(s0 == s1):
                raise MeshError("non-conforming connectivity: inconsistent triangle orientation")

        kind = np.zeros(ne, dtype=np.int8)
        marker = np.zeros(ne, dtype=np.int64)
        lookup = {int(k): i for i, k in enumerate(ukeys)}
        for (v0, v1), (label, mark) in self.boundary.items():
            k = int(min(v0, v1)) * n + int(max(v0, v1))
            if k not in lookup:
                raise MeshError(f"boundary label on edge {(v0, v1)} which is not a mesh edge")
            e = lookup[k]
            if counts[e] != 1:
                raise MeshError(f"boundary label on interior edge {(v0, v1)}")
            if label not in LABELS:
                raise MeshError(f"unknown boundary label {label!r}")
            kind[e] = EDGE_DIRICHLET if label == DIRICHLET else EDGE_NEUMANN
            marker[e] = mark
        unlabeled = (counts == 1) & (kind == EDGE_INTERIOR)
        if np.any(unlabeled):
            e = np.flatnonzero(unlabeled)[0]
            raise MeshError(f"unlabeled boundary edge {tuple(self.edges[e].tolist())}")
        self.edge_kind = kind
        self.edge_marker = marker

    # ------------------------------------------------------------------ geometry

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def edge_normals(self) -> np.ndarray:
        """Global unit normals (counterclockwise rotation of the oriented tangent)."""
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        d = d / self.edge_lengths[:, None]
        return np.column_stack([-d[:, 1], d[:, 0]])

    @cached_property
    def edge_signs(self) -> np.ndarray:
        """(M, 3) array: +1 where the global edge normal points out of the triangle."""
        t = self.triangles
        return np.where(t[:, [1, 2, 0]] > t[:, [2, 0, 1]], 1.0, -1.0)

    @cached_property
    def boundary_signs(self) -> np.ndarray:
        """(E,) array: +1 if the global normal of a boundary edge is outward, 0 inside."""
        s = np.zeros(self.n_edges)
        bnd = self.edge_tris[:, 1] < 0
        e = np.flatnonzero(bnd)
        s[e] = self.edge_signs[self.edge_tris[e, 0], self.edge_local[e, 0]]
        return s

    @cached_property
    def diameters(self) -> np.ndarray:
        return self.edge_lengths[self.tri_edges].max(axis=1)

    @cached_property
    def shape_ratios(self) -> np.ndarray:
        """h_K / rho_K with rho_K the diameter of the inscribed circle."""
        perim = self.edge_lengths[self.tri_edges].sum(axis=1)
        rho = 4.0 * self.areas / perim
        return self.diameters / rho

    @property
    def max_shape_ratio(self) -> float:
        return float(self.shape_ratios.max())

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    # ------------------------------------------------------------------ vertex data

    @cached_property
    def _vertex_star(self):
        flat = self.triangles.ravel()
        order = np.argsort(flat, kind="stable")
        ptr = np.zeros(self.n_vertices + 1, dtype=np.int64)
        np.add.at(ptr, flat + 1, 1)
        return np.cumsum(ptr), order // 3

    def vertex_triangles(self, vertex: int) -> np.ndarray:
        ptr, tris = self._vertex_star
        return tris[ptr[vertex]:ptr[vertex + 1]]

    @cached_property
    def vertex_classes(self) -> np.ndarray:
        """(N,) int array: 0 interior, 1 Neumann boundary, 2 Dirichlet boundary.

        A vertex touching any Dirichlet edge is Dirichlet, including vertices
        where the Dirichlet and Neumann parts meet.
        """
        cls = np.zeros(self.n_vertices, dtype=np.int8)
        for kind, code in ((EDGE_NEUMANN, 1), (EDGE_DIRICHLET, 2)):
            e = self.edges[self.edge_kind == kind].ravel()
            cls[e] = np.maximum(cls[e], code)
        return cls

    @cached_property
    def element_neighbours(self):
        """Sparse boolean (M, M) matrix: triangles sharing at least one vertex."""
        m = self.n_triangles
        inc = sp.csr_matrix(
            (np.ones(3 * m), (np.repeat(np.arange(m), 3), self.triangles.ravel())),
            shape=(m, self.n_vertices),
        )
        return (inc @ inc.T).astype(bool).tocsr()

    def boundary_edges(self, kind: int) -> np.ndarray:
        return np.flatnonzero(self.edge_kind == kind)

    # ------------------------------------------------------------------ io

    def to_document(self) -> dict:
        bnd = []
        for e in np.flatnonzero(self.edge_kind != EDGE_INTERIOR):
            entry = {
                "edge": self.edges[e].tolist(),
                "label": DIRICHLET if self.edge_kind[e] == EDGE_DIRICHLET else NEUMANN,
            }
            if self.edge_marker[e]:
                entry["marker"] = int(self.edge_marker[e])
            bnd.append(entry)
        return {
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "boundary": bnd,
            "regions": self.regions.tolist(),
            "refinement_edge": self.refinement_edge.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_document()))


@dataclass
class VertexPatch:
    """Star of the triangles sharing one vertex, with its edges sorted by role."""

    center_vertex: int
    elements: np.ndarray
    patch_class: str
    interior_edges: np.ndarray
    outer_edges: np.ndarray
    dirichlet_spoke_edges: np.ndarray
    neumann_spoke_edges: np.ndarray


def longest_edge_seed(vertices, triangles) -> np.ndarray:
    """Longest edge of each triangle; ties go to the smallest opposite vertex."""
    p = vertices[triangles]
    lengths = np.stack(
        [np.hypot(*(p[:, (j + 2) % 3] - p[:, (j + 1) % 3]).T) for j in range(3)], axis=1
    )
    longest = lengths >= lengths.max(axis=1, keepdims=True) * (1.0 - _TIE_RTOL)
    opp = np.where(longest, triangles, np.iinfo(np.int64).max)
    return np.argmin(opp, axis=1)


def mesh_from_document(doc: dict) -> Mesh:
    try:
        vertices = np.asarray(doc["vertices"], dtype=float)
        triangles = np.asarray(doc["triangles"], dtype=np.int64)
        entries = doc["boundary"]
    except KeyError as exc:
        raise MeshError(f"mesh document is missing {exc.args[0]!r}") from None
    if triangles.ndim != 2 or triangles.shape[1] != 3:
        raise MeshError("triangles must be a list of index triples")
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must be a list of coordinate pairs")
    if triangles.min() < 0 or triangles.max() >= len(vertices):
        raise MeshError("triangle references a nonexistent vertex")

    # accept clockwise input; reject degenerate triangles
    p = vertices[triangles]
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    scale = np.maximum(np.abs(d1).max(axis=1), np.abs(d2).max(axis=1)) ** 2
    if np.any(np.abs(area2) <= 1e-14 * scale):
        bad = np.flatnonzero(np.abs(area2) <= 1e-14 * scale)[:5]
        raise MeshError(f"degenerate (zero-area) triangles: {bad.tolist()}")
    cw = area2 < 0
    triangles = triangles.copy()
    triangles[cw] = triangles[cw][:, [0, 2, 1]]

    boundary = {}
    for item in entries:
        v0, v1 = (int(v) for v in item["edge"])
        key = (min(v0, v1), max(v0, v1))
        if key in boundary:
            raise MeshError(f"boundary edge {key} labelled twice")
        boundary[key] = (str(item["label"]).lower(), int(item.get("marker", 0)))

    regions = doc.get("regions")
    regions = np.zeros(len(triangles), dtype=np.int64) if regions is None else np.asarray(regions)
    ref = doc.get("refinement_edge")
    if ref is None:
        ref = longest_edge_seed(vertices, triangles)
    else:
        ref = np.asarray(ref, dtype=np.int64)
        # a reoriented triangle swaps its local edges 1 and 2
        ref = np.where(cw & (ref > 0), 3 - ref, ref)
    return Mesh(vertices, triangles, boundary, regions, ref)


def load_mesh(source) -> Mesh:
    """Load and validate a mesh document.

    ``source`` is a path to a JSON document, a JSON string or an already
    parsed dict with keys ``vertices``, ``triangles``, ``boundary`` and
    optionally ``regions`` and ``refinement_edge``.
    """
    if isinstance(source, dict):
        doc = source
    elif isinstance(source, str) and source.lstrip().startswith("{"):
        doc = json.loads(source)
    elif isinstance(source, (str, Path)):
        doc = json.loads(Path(source).read_text())
    else:
        raise MeshError(f"cannot read a mesh from {source!r}")
    return mesh_from_document(doc)


def build_patch(mesh: Mesh, vertex: int) -> VertexPatch:
    """Collect the star of ``vertex`` and classify the edges of its triangles."""
    elements = np.sort(mesh.vertex_triangles(vertex))
    edges = np.unique(mesh.tri_edges[elements].ravel())
    touches = (mesh.edges[edges] == vertex).any(axis=1)
    kind = mesh.edge_kind[edges]
    cls = {0: PATCH_INTERIOR, 1: PATCH_NEUMANN, 2: PATCH_DIRICHLET}[int(mesh.vertex_classes[vertex])]
    return VertexPatch(
        center_vertex=int(vertex),
        elements=elements,
        patch_class=cls,
        interior_edges=edges[touches & (kind == EDGE_INTERIOR)],
        outer_edges=edges[~touches],
        dirichlet_spoke_edges=edges[touches & (kind == EDGE_DIRICHLET)],
        neumann_spoke_edges=edges[touches & (kind == EDGE_NEUMANN)],
    )


def _bisect_round(tris, ref, parent, region, vertices_n, marked_keys, marked_mid):
    """Bisect every triangle whose refinement edge is in ``marked_keys``."""
    idx = np.arange(len(tris))
    p = tris[idx, ref]
    e1 = tris[idx, (ref + 1) % 3]
    e2 = tris[idx, (ref + 2) % 3]
    keys = _edge_key(e1, e2, vertices_n)
    pos = np.searchsorted(marked_keys, keys)
    pos = np.minimum(pos, len(marked_keys) - 1)
    hit = marked_keys[pos] == keys
    if not hit.any():
        return tris, ref, parent, region, hit
    m = marked_mid[pos[hit]]
    ph, e1h, e2h = p[hit], e1[hit], e2[hit]
    child_a = np.column_stack([ph, e1h, m])
    child_b = np.column_stack([ph, m, e2h])
    keep = ~hit
    tris = np.concatenate([tris[keep], child_a, child_b])
    ref = np.concatenate([ref[keep], np.full(len(m), 2), np.full(len(m), 1)])
    parent = np.concatenate([parent[keep], parent[hit], parent[hit]])
    region = np.concatenate([region[keep], region[hit], region[hit]])
    return tris, ref, parent, region, hit


def bisect(mesh: Mesh, marked) -> Mesh:
    """Refine ``marked`` triangles by newest vertex bisection with conforming closure.

    Every marked triangle is bisected at least once. The closure marks the
    refinement edge of every triangle that has a marked edge until no such
    triangle is left; each triangle is then split along its refinement edge,
    and the children are split again along any further marked edges. The
    new midpoint is the newest vertex of both children, so the edge opposite
    it becomes their refinement edge.

    The returned mesh carries ``parent``, mapping each new triangle to the
    triangle of ``mesh`` that contains it.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked, dtype=np.int64))
    nt = mesh.n_triangles
    if marked.size and (marked.min() < 0 or marked.max() >= nt):
        raise IndexError("marked triangle index out of range")
    if marked.size == 0:
        return Mesh(mesh.vertices, mesh.triangles, dict(mesh.boundary), mesh.regions,
                    mesh.refinement_edge, parent=np.arange(nt))

    ref_edge = mesh.tri_edges[np.arange(nt), mesh.refinement_edge]
    edge_marked = np.zeros(mesh.n_edges, dtype=bool)
    edge_marked[ref_edge[marked]] = True
    while True:
        has = edge_marked[mesh.tri_edges].any(axis=1)
        need = has & ~edge_marked[ref_edge]
        if not need.any():
            break
        edge_marked[ref_edge[need]] = True

    n = mesh.n_vertices
    medges = np.flatnonzero(edge_marked)
    mid = n + np.arange(len(medges))
    ev = mesh.edges[medges]
    vertices = np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[ev[:, 0]] + mesh.vertices[ev[:, 1]])])
    big_n = len(vertices)
    # keys in the new vertex numbering (old indices are unchanged)
    mkeys = _edge_key(ev[:, 0], ev[:, 1], big_n)
    order = np.argsort(mkeys)
    mkeys, mmid = mkeys[order], mid[order]

    tris, ref = mesh.triangles, mesh.refinement_edge
    parent, region = np.arange(nt), mesh.regions
    for _ in range(2):
        tris, ref, parent, region, _hit = _bisect_round(tris, ref, parent, region, big_n, mkeys, mmid)

    boundary = dict(mesh.boundary)
    for e, m in zip(medges, mid):
        if mesh.edge_kind[e] == EDGE_INTERIOR:
            continue
        a, b = (int(v) for v in mesh.edges[e])
        tag = boundary.pop((a, b))
        boundary[(a, int(m))] = tag
        boundary[(b, int(m))] = tag

    return Mesh(vertices, tris, boundary, region, ref, parent=parent)


def uniform_refine(mesh: Mesh, times: int = 1) -> Mesh:
    """Bisect all triangles ``times`` times; ``parent`` maps to the input mesh."""
    parent = np.arange(mesh.n_triangles)
    for _ in range(times):
        mesh = bisect(mesh, np.arange(mesh.n_triangles))
        parent = parent[mesh.parent]
    mesh.parent = parent
    return mesh
