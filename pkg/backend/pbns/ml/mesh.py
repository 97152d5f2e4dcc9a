"""
Triangle-mesh topology, differentiable geometry and exact nearest neighbours.

Geometry functions accept positions shaped ``(..., N, 3)`` so a whole batch of
posed meshes is processed at once; topology lives in ``TriMesh`` and is shared
read-only.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import torch

from pbns.ml import tensor as T
from pbns.utils.exceptions import MeshError
from pbns.utils.io_utils import PathLike, atomic_write

logger = logging.getLogger(__name__)

MIN_REST_FACE_AREA = 1e-12

# ring searches beyond this many cells fall back to a brute-force scan
MAX_GRID_RINGS = 12
MAX_GRID_CELLS = 8_000_000


@dataclass(eq=False)
class TriMesh:
    """
    Immutable triangle mesh topology together with its rest positions.

    Attributes:
        vertices: (N, 3) rest positions in meters
        faces: (N_F, 3) vertex indices, counter-clockwise seen from outside
        edges: (N_E, 2) unique vertex pairs, lower index first
        face_adjacency: (A, 2) pairs of faces sharing an edge
    """

    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray = field(init=False)
    face_adjacency: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be N x 3, got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError(f"faces must be N_F x 3, got {self.faces.shape}")
        n = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise MeshError(
                "face index out of range",
                details={"num_vertices": n, "min": int(self.faces.min()), "max": int(self.faces.max())},
            )
        self.edges, face_edges = _unique_edges(self.faces)
        self.face_adjacency = _face_adjacency(face_edges)
        isolated = self.isolated_vertices
        if len(isolated):
            logger.warning("Mesh has %d isolated vertices (zero normals), first: %d", len(isolated), isolated[0])

    @classmethod
    def from_arrays(cls, vertices: np.ndarray, faces: np.ndarray, check_degenerate: bool = True) -> "TriMesh":
        mesh = cls(vertices, faces)
        if check_degenerate:
            bad = mesh.degenerate_faces()
            if len(bad):
                raise MeshError(
                    f"{len(bad)} degenerate faces at rest (area <= {MIN_REST_FACE_AREA} m^2)",
                    details={"faces": bad[:20].tolist()},
                )
        return mesh

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def isolated_vertices(self) -> np.ndarray:
        used = np.zeros(self.num_vertices, dtype=bool)
        used[self.faces.ravel()] = True
        return np.flatnonzero(~used)

    @cached_property
    def face_degree(self) -> np.ndarray:
        return np.bincount(self.face_adjacency.ravel(), minlength=self.num_faces)

    @cached_property
    def vertex_adjacency(self) -> sp.csr_matrix:
        n = self.num_vertices
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        data = np.ones(len(rows), dtype=np.float64)
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    @cached_property
    def index_tensors(self) -> dict:
        return {
            "edge_a": T.as_index(self.edges[:, 0]),
            "edge_b": T.as_index(self.edges[:, 1]),
            "face_0": T.as_index(self.faces[:, 0]),
            "face_1": T.as_index(self.faces[:, 1]),
            "face_2": T.as_index(self.faces[:, 2]),
            "adj_a": T.as_index(self.face_adjacency[:, 0]),
            "adj_b": T.as_index(self.face_adjacency[:, 1]),
        }

    @cached_property
    def inverse_face_degree(self) -> Tuple[torch.Tensor, torch.Tensor]:
        degree = self.face_degree.astype(np.float64)
        has = (degree > 0).astype(np.float64)
        inv = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
        return T.as_tensor(inv[:, None]), T.as_tensor(has[:, None])

    def face_areas(self, positions: Optional[np.ndarray] = None) -> np.ndarray:
        p = self.vertices if positions is None else np.asarray(positions, dtype=np.float64)
        a, b, c = p[self.faces[:, 0]], p[self.faces[:, 1]], p[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def degenerate_faces(self, positions: Optional[np.ndarray] = None) -> np.ndarray:
        return np.flatnonzero(self.face_areas(positions) <= MIN_REST_FACE_AREA)

    def vertex_areas(self, positions: Optional[np.ndarray] = None) -> np.ndarray:
        """Per-vertex share (one third) of incident triangle areas."""
        share = np.repeat(self.face_areas(positions) / 3.0, 3)
        return np.bincount(self.faces.ravel(), weights=share, minlength=self.num_vertices)

    def ring_neighbourhood(self, rings: int) -> sp.csr_matrix:
        """Boolean matrix whose (i, j) entry is set when j is within ``rings`` edges of i."""
        step = (self.vertex_adjacency + sp.identity(self.num_vertices, format="csr")).astype(bool).astype(np.int8)
        reach = sp.identity(self.num_vertices, format="csr", dtype=np.int8)
        for _ in range(rings):
            reach = (reach @ step).astype(bool).astype(np.int8)
        return reach.tocsr()


def _unique_edges(faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    pairs = np.stack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=1).reshape(-1, 2)
    pairs = np.sort(pairs, axis=1)
    edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
    return edges.astype(np.int64), inverse.reshape(-1, 3)


def _face_adjacency(face_edges: np.ndarray) -> np.ndarray:
    if len(face_edges) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    edge_ids = face_edges.ravel()
    face_ids = np.repeat(np.arange(len(face_edges)), 3)
    order = np.argsort(edge_ids, kind="stable")
    edge_ids, face_ids = edge_ids[order], face_ids[order]
    starts = np.flatnonzero(np.r_[True, edge_ids[1:] != edge_ids[:-1]])
    counts = np.diff(np.r_[starts, len(edge_ids)])
    pairs: List[np.ndarray] = []
    two = starts[counts == 2]
    if len(two):
        pairs.append(np.stack([face_ids[two], face_ids[two + 1]], axis=1))
    for start, count in zip(starts[counts > 2], counts[counts > 2]):
        group = face_ids[start : start + count]
        ii, jj = np.triu_indices(count, k=1)
        pairs.append(np.stack([group[ii], group[jj]], axis=1))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    adjacency = np.sort(np.concatenate(pairs), axis=1)
    adjacency = adjacency[adjacency[:, 0] != adjacency[:, 1]]
    return np.unique(adjacency, axis=0).astype(np.int64)


# ---------------------------------------------------------------------------
# differentiable geometry
# ---------------------------------------------------------------------------


def _check_positions(mesh: TriMesh, positions: torch.Tensor) -> None:
    if positions.dim() < 2 or positions.shape[-2:] != (mesh.num_vertices, 3):
        raise MeshError(
            f"positions shape {list(positions.shape)} does not match mesh with {mesh.num_vertices} vertices"
        )


def edge_lengths(mesh: TriMesh, positions: torch.Tensor) -> torch.Tensor:
    """Length of every edge, shaped ``(..., N_E)``."""
    _check_positions(mesh, positions)
    idx = mesh.index_tensors
    a = T.gather_rows(positions, idx["edge_a"])
    b = T.gather_rows(positions, idx["edge_b"])
    return T.norm_rows(T.sub(b, a))


def face_cross(mesh: TriMesh, positions: torch.Tensor) -> torch.Tensor:
    """Unnormalised face normals; their length is twice the face area."""
    _check_positions(mesh, positions)
    idx = mesh.index_tensors
    v0 = T.gather_rows(positions, idx["face_0"])
    v1 = T.gather_rows(positions, idx["face_1"])
    v2 = T.gather_rows(positions, idx["face_2"])
    return T.cross_rows(T.sub(v1, v0), T.sub(v2, v0))


def face_normals(mesh: TriMesh, positions: torch.Tensor) -> torch.Tensor:
    return T.normalize_rows(face_cross(mesh, positions), eps=T.EPS_AREA)


def vertex_normals(mesh: TriMesh, positions: torch.Tensor) -> torch.Tensor:
    """Area-weighted average of incident face normals; isolated vertices get a zero normal."""
    cross = face_cross(mesh, positions)
    idx = mesh.index_tensors
    n = mesh.num_vertices
    acc = T.scatter_add_rows(cross, idx["face_0"], n)
    acc = T.add(acc, T.scatter_add_rows(cross, idx["face_1"], n))
    acc = T.add(acc, T.scatter_add_rows(cross, idx["face_2"], n))
    return T.normalize_rows(acc, eps=T.EPS_AREA)


def normal_laplacian(mesh: TriMesh, normals: torch.Tensor) -> torch.Tensor:
    """
    Uniform graph Laplacian of a per-face field over face adjacency.

    Row f is the mean of the neighbouring rows minus row f; faces without
    neighbours get a zero row.
    """
    if normals.shape[-2:] != (mesh.num_faces, 3):
        raise MeshError(f"face field shape {list(normals.shape)} does not match {mesh.num_faces} faces")
    idx = mesh.index_tensors
    f = mesh.num_faces
    acc = T.scatter_add_rows(T.gather_rows(normals, idx["adj_b"]), idx["adj_a"], f)
    acc = T.add(acc, T.scatter_add_rows(T.gather_rows(normals, idx["adj_a"]), idx["adj_b"], f))
    inv_degree, has_neighbours = mesh.inverse_face_degree
    return T.sub(T.mul(acc, inv_degree.to(normals.dtype)), T.mul(normals, has_neighbours.to(normals.dtype)))


# ---------------------------------------------------------------------------
# nearest neighbours
# ---------------------------------------------------------------------------


def _ring_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    grid = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid[np.abs(grid).max(axis=1) == radius]


_RING_CACHE = [_ring_offsets(r) for r in range(MAX_GRID_RINGS + 1)]


class NNIndex:
    """
    Exact nearest-neighbour index over a uniform hash grid.

    Queries search cells in rings of growing Chebyshev radius around the query
    cell and stop once the best distance cannot be beaten by any unvisited cell.
    Ties resolve to the lowest target index.
    """

    def __init__(self, points: np.ndarray, cell_size: float):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise MeshError("nearest-neighbour index needs a non-empty N x 3 target set")
        if not cell_size > 0:
            raise MeshError(f"cell size must be positive, got {cell_size}")
        self.points = points
        self.origin = points.min(axis=0)
        extent = points.max(axis=0) - self.origin
        # coarsen the grid instead of allocating an oversized cell table
        while np.prod(np.floor(extent / cell_size) + 1) > MAX_GRID_CELLS:
            cell_size *= 2.0
        self.cell_size = float(cell_size)
        cells = np.floor((points - self.origin) / self.cell_size).astype(np.int64)
        self.dims = cells.max(axis=0) + 1
        keys = self._keys(cells)
        self.order = np.argsort(keys, kind="stable")
        num_cells = int(np.prod(self.dims))
        self.cell_count = np.bincount(keys, minlength=num_cells)
        self.cell_start = np.concatenate([[0], np.cumsum(self.cell_count)[:-1]])

    @classmethod
    def build(cls, points: np.ndarray, cell_size: float) -> "NNIndex":
        return cls(points, cell_size)

    def _keys(self, cells: np.ndarray) -> np.ndarray:
        return (cells[..., 0] * self.dims[1] + cells[..., 1]) * self.dims[2] + cells[..., 2]

    def query(self, source: np.ndarray) -> np.ndarray:
        """Index of the exact nearest target point for every source point."""
        source = np.ascontiguousarray(source, dtype=np.float64).reshape(-1, 3)
        m = len(source)
        best_idx = np.full(m, -1, dtype=np.int64)
        best_d2 = np.full(m, np.inf)
        if m == 0:
            return best_idx
        qcell = np.floor((source - self.origin) / self.cell_size).astype(np.int64)
        # rings needed to cover the whole grid from each query cell
        cover = np.maximum(qcell, self.dims - 1 - qcell).max(axis=1)
        active = np.arange(m)
        for radius in range(MAX_GRID_RINGS + 1):
            if len(active) == 0:
                break
            offsets = _RING_CACHE[radius]
            step = max(1, 2_000_000 // len(offsets))
            for start in range(0, len(active), step):
                self._scan_ring(source, qcell, active[start : start + step], offsets, best_idx, best_d2)
            # unvisited cells are at least `radius` cells away; strict so equal-distance ties are still visited
            bound = (radius * self.cell_size) ** 2
            done = (best_d2[active] < bound) | (cover[active] <= radius)
            active = active[~done]
        if len(active):
            self._brute_force(source, active, best_idx, best_d2)
        return best_idx

    def _scan_ring(
        self,
        source: np.ndarray,
        qcell: np.ndarray,
        active: np.ndarray,
        offsets: np.ndarray,
        best_idx: np.ndarray,
        best_d2: np.ndarray,
    ) -> None:
        cells = qcell[active][:, None, :] + offsets[None, :, :]
        inside = np.all((cells >= 0) & (cells < self.dims), axis=-1)
        qi, oi = np.nonzero(inside)
        if len(qi) == 0:
            return
        keys = self._keys(cells[qi, oi])
        counts = self.cell_count[keys]
        nonempty = counts > 0
        qi, keys, counts = qi[nonempty], keys[nonempty], counts[nonempty]
        if len(qi) == 0:
            return
        total = int(counts.sum())
        rep_q = np.repeat(qi, counts)
        within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        cand = self.order[np.repeat(self.cell_start[keys], counts) + within]
        query_ids = active[rep_q]
        d2 = ((source[query_ids] - self.points[cand]) ** 2).sum(axis=1)
        self._merge(query_ids, cand, d2, best_idx, best_d2)

    def _brute_force(self, source: np.ndarray, active: np.ndarray, best_idx: np.ndarray, best_d2: np.ndarray) -> None:
        chunk = max(1, 4_000_000 // len(self.points))
        for start in range(0, len(active), chunk):
            ids = active[start : start + chunk]
            d2 = ((source[ids, None, :] - self.points[None, :, :]) ** 2).sum(axis=-1)
            # argmin returns the first (lowest) index among equal minima
            cand = d2.argmin(axis=1)
            self._merge(ids, cand, d2[np.arange(len(ids)), cand], best_idx, best_d2)

    @staticmethod
    def _merge(query_ids: np.ndarray, cand: np.ndarray, d2: np.ndarray, best_idx: np.ndarray, best_d2: np.ndarray) -> None:
        order = np.lexsort((cand, d2, query_ids))
        query_ids, cand, d2 = query_ids[order], cand[order], d2[order]
        first = np.r_[True, query_ids[1:] != query_ids[:-1]]
        query_ids, cand, d2 = query_ids[first], cand[first], d2[first]
        current_d2, current_idx = best_d2[query_ids], best_idx[query_ids]
        better = (d2 < current_d2) | ((d2 == current_d2) & ((cand < current_idx) | (current_idx < 0)))
        best_d2[query_ids[better]] = d2[better]
        best_idx[query_ids[better]] = cand[better]


def nearest_neighbors(source: np.ndarray, index: NNIndex) -> np.ndarray:
    return index.query(source)


def mean_edge_length(mesh: TriMesh, positions: Optional[np.ndarray] = None) -> float:
    p = mesh.vertices if positions is None else positions
    if mesh.num_edges == 0:
        return 0.0
    return float(np.linalg.norm(p[mesh.edges[:, 1]] - p[mesh.edges[:, 0]], axis=1).mean())


# ---------------------------------------------------------------------------
# OBJ files
# ---------------------------------------------------------------------------


def read_obj(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read positions and faces from a Wavefront OBJ file.

    Polygons are split into triangle fans; texture coordinates, normals and
    materials are ignored.
    """
    vertices: List[List[float]] = []
    faces: List[Tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(x) for x in parts[1:4]])
                    if len(vertices[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif parts[0] == "f":
                    polygon = [_obj_index(token, len(vertices)) for token in parts[1:]]
                    if len(polygon) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    for k in range(1, len(polygon) - 1):
                        faces.append((polygon[0], polygon[k], polygon[k + 1]))
            except ValueError as e:
                raise MeshError(f"{path}:{line_no}: {e}", details={"line": line_no}) from None
    return np.asarray(vertices, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def _obj_index(token: str, count: int) -> int:
    index = int(token.split("/")[0])
    index = index - 1 if index > 0 else count + index
    if not 0 <= index < count:
        raise ValueError(f"face index {token} out of range")
    return index


def write_obj(path: PathLike, vertices: np.ndarray, faces: np.ndarray, comment: Optional[str] = None) -> Path:
    """Write an OBJ file atomically; coordinates are written with round-trip precision."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    with atomic_write(path, "w") as handle:
        if comment:
            handle.write(f"# {comment}\n")
        np.savetxt(handle, vertices, fmt="v %.17g %.17g %.17g")
        np.savetxt(handle, faces + 1, fmt="f %d %d %d")
    return Path(path)
