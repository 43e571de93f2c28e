"""
Global planning: region decomposition, frontier classification, region
connectivity and the coverage tour over exploring regions
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Collection, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from models.errors import DomainError
from models.schema import PlannerConfig
from services.mapping import MapSnapshot
from services.routing import astar, open_path_tsp, voxel_astar
from utils.io import write_csv

logger = logging.getLogger("reconsim.global_planner")

FACE_OFFSETS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.int64
)
_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)
_NEIGHBOR_STRUCTURE = _FACE_STRUCTURE.copy()
_NEIGHBOR_STRUCTURE[1, 1, 1] = False


class RegionState(str, Enum):
    UNEXPLORED = "unexplored"
    EXPLORING = "exploring"
    EXPLORED = "explored"


# ==================== LATTICE ====================

@dataclass(frozen=True)
class RegionLattice:
    """Uniform partition of the scene bounds into region_size cells (clipped at the top end)"""
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    region_size: float
    counts: Tuple[int, int, int]

    @classmethod
    def from_bounds(cls, bounds_min, bounds_max, region_size: float) -> "RegionLattice":
        bounds_min = np.asarray(bounds_min, dtype=np.float64)
        bounds_max = np.asarray(bounds_max, dtype=np.float64)
        extent = bounds_max - bounds_min
        if np.any(extent <= 0.0):
            raise DomainError(f"empty bounds {bounds_min.tolist()} .. {bounds_max.tolist()}")
        counts = tuple(max(1, int(math.ceil(e / region_size - 1e-9))) for e in extent)
        return cls(bounds_min, bounds_max, float(region_size), counts)

    @property
    def size(self) -> int:
        return self.counts[0] * self.counts[1] * self.counts[2]

    def region_id(self, cell) -> int:
        i, j, k = (int(c) for c in cell)
        return i + self.counts[0] * (j + self.counts[1] * k)

    def cell_of_id(self, region_id: int) -> Tuple[int, int, int]:
        nx, ny, _ = self.counts
        return region_id % nx, (region_id // nx) % ny, region_id // (nx * ny)

    def extent(self, region_id: int) -> Tuple[np.ndarray, np.ndarray]:
        cell = np.asarray(self.cell_of_id(region_id), dtype=np.float64)
        lo = self.bounds_min + cell * self.region_size
        hi = np.minimum(lo + self.region_size, self.bounds_max)
        return lo, hi

    def center(self, region_id: int) -> np.ndarray:
        lo, hi = self.extent(region_id)
        return 0.5 * (lo + hi)

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Region id per point, -1 outside the bounds."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside = np.all((points >= self.bounds_min) & (points <= self.bounds_max), axis=1)
        cells = np.floor((points - self.bounds_min) / self.region_size).astype(np.int64)
        cells = np.clip(cells, 0, np.asarray(self.counts) - 1)
        ids = cells[:, 0] + self.counts[0] * (cells[:, 1] + self.counts[1] * cells[:, 2])
        return np.where(inside, ids, -1)

    def face_neighbors(self, region_id: int) -> List[int]:
        cell = np.asarray(self.cell_of_id(region_id))
        result = []
        for offset in FACE_OFFSETS:
            other = cell + offset
            if np.all(other >= 0) and np.all(other < np.asarray(self.counts)):
                result.append(self.region_id(other))
        return sorted(result)

    def voxel_regions(self, snapshot: MapSnapshot) -> np.ndarray:
        """Region id of every voxel center (in-bounds voxels only, else -1)."""
        ids = self.locate(snapshot.grid.centers())
        return np.where(snapshot.in_bounds, ids, -1)


# ==================== REGIONS ====================

@dataclass
class Region:
    id: int
    cell: Tuple[int, int, int]
    rp: np.ndarray
    state: RegionState = RegionState.UNEXPLORED
    frontier_count: int = 0
    unknown_count: int = 0
    had_frontier: bool = False
    frontier_voxels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def decompose_regions(
    bounds_min, bounds_max, cfg: PlannerConfig, snapshot: MapSnapshot
) -> Tuple[RegionLattice, List[Region]]:
    """
    Partition the bounds and place each region's representative point.

    The representative point is the centroid of the region's in-bounds voxels
    that are fused free (TSDF > 0) or still highly uncertain; regions with no
    such voxel are dropped.
    """
    lattice = RegionLattice.from_bounds(bounds_min, bounds_max, cfg.region_size)
    voxel_region = lattice.voxel_regions(snapshot)
    open_mask = snapshot.in_bounds & ((snapshot.tsdf > 0.0) | snapshot.high_u)
    ids = voxel_region[open_mask]
    centers = snapshot.grid.voxel_center(np.flatnonzero(open_mask))
    counts = np.bincount(ids, minlength=lattice.size)
    sums = np.stack([np.bincount(ids, weights=centers[:, a], minlength=lattice.size) for a in range(3)], axis=1)

    regions = []
    for region_id in np.flatnonzero(counts):
        rid = int(region_id)
        regions.append(Region(id=rid, cell=lattice.cell_of_id(rid), rp=sums[rid] / counts[rid]))
    logger.debug(f"Decomposed bounds into {lattice.size} cells, {len(regions)} with free space")
    return lattice, regions


def open_component(snapshot: MapSnapshot, agent_position: Optional[np.ndarray]) -> np.ndarray:
    """Non-occupied voxels 6-connected to the agent (all of them when no agent is given)."""
    free = ~snapshot.occupied
    if agent_position is None:
        return free
    dims = snapshot.grid.dims
    labels, _ = ndimage.label(free.reshape(dims, order="F"), structure=_FACE_STRUCTURE)
    labels = labels.ravel(order="F")
    agent = snapshot.voxel_of(agent_position)
    label = labels[agent]
    if label == 0:
        # agent voxel reads occupied; borrow the nearest free voxel's component
        _, nearest = ndimage.distance_transform_edt(
            snapshot.occupied.reshape(dims, order="F"), return_indices=True
        )
        ijk = np.array([nearest[a].ravel(order="F")[agent] for a in range(3)])
        label = labels[snapshot.grid.linear_index(ijk)]
    return labels == label


def frontier_mask(snapshot: MapSnapshot, cfg: PlannerConfig, relevant_unknown: np.ndarray) -> np.ndarray:
    """Observed free voxels with enough evidence and a 6-neighbor in relevant unknown space."""
    dims = snapshot.grid.dims
    touches = ndimage.binary_dilation(
        relevant_unknown.reshape(dims, order="F"), structure=_NEIGHBOR_STRUCTURE
    ).ravel(order="F")
    return (
        snapshot.in_bounds
        & snapshot.observed
        & (snapshot.tsdf > 0.0)
        & (snapshot.evidence >= cfg.n_obs_floor)
        & touches
    )


def classify_regions(
    regions: Sequence[Region],
    snapshot: MapSnapshot,
    lattice: RegionLattice,
    cfg: PlannerConfig,
    agent_position: Optional[np.ndarray] = None,
    previous: Optional[Dict[int, Region]] = None,
) -> List[Region]:
    """
    Assign unexplored / exploring / explored and attach frontier voxels.

    High-uncertainty voxels sealed off from the agent's free space are ignored.
    A region stays explored while its relevant unknown count does not grow.
    """
    previous = previous or {}
    relevant = snapshot.high_u & snapshot.in_bounds & open_component(snapshot, agent_position)
    frontier = frontier_mask(snapshot, cfg, relevant)
    voxel_region = lattice.voxel_regions(snapshot)

    size = lattice.size
    unknown_counts = np.bincount(voxel_region[relevant & (voxel_region >= 0)], minlength=size)
    frontier_ids = np.flatnonzero(frontier & (voxel_region >= 0))
    frontier_regions = voxel_region[frontier_ids]

    for region in regions:
        prior = previous.get(region.id)
        region.unknown_count = int(unknown_counts[region.id])
        region.frontier_voxels = frontier_ids[frontier_regions == region.id]
        region.frontier_count = int(region.frontier_voxels.size)
        region.had_frontier = region.frontier_count > 0 or (prior is not None and prior.had_frontier)

        if (
            prior is not None
            and prior.state == RegionState.EXPLORED
            and region.unknown_count <= prior.unknown_count
        ):
            region.state = RegionState.EXPLORED
        elif region.frontier_count > 0:
            region.state = RegionState.EXPLORING
        elif region.unknown_count >= max(cfg.unknown_voxel_floor, 1) and not region.had_frontier:
            region.state = RegionState.UNEXPLORED
        else:
            region.state = RegionState.EXPLORED

        if region.state == RegionState.EXPLORED:
            region.frontier_count = 0
            region.frontier_voxels = np.zeros(0, dtype=np.int64)

    tally = {state: sum(r.state == state for r in regions) for state in RegionState}
    logger.debug(
        f"Regions: {tally[RegionState.EXPLORING]} exploring, "
        f"{tally[RegionState.UNEXPLORED]} unexplored, {tally[RegionState.EXPLORED]} explored"
    )
    return list(regions)


# ==================== CONNECTIVITY ====================

@dataclass
class RegionGraph:
    lattice: RegionLattice
    regions: Dict[int, Region]
    anchors: Dict[int, np.ndarray]
    edges: Dict[Tuple[int, int], float] = field(default_factory=dict)

    def add_edge(self, a: int, b: int, length: float) -> None:
        self.edges[(min(a, b), max(a, b))] = float(length)

    def edge_length(self, a: int, b: int) -> Optional[float]:
        return self.edges.get((min(a, b), max(a, b)))

    def neighbors(self, region_id: int) -> List[Tuple[int, float]]:
        result = []
        for (a, b), length in self.edges.items():
            if a == region_id:
                result.append((b, length))
            elif b == region_id:
                result.append((a, length))
        return sorted(result)

    def by_state(self, state: RegionState) -> List[int]:
        return sorted(rid for rid, region in self.regions.items() if region.state == state)

    def locate(self, position: np.ndarray) -> Optional[int]:
        """Region holding position, else the anchored region with the nearest anchor."""
        rid = int(self.lattice.locate(position)[0])
        if rid in self.anchors:
            return rid
        if not self.anchors:
            return None
        ids = sorted(self.anchors)
        dist = [np.linalg.norm(self.anchors[i] - position) for i in ids]
        return ids[int(np.argmin(dist))]

    def distance_matrix(self, nodes: Sequence[int]) -> np.ndarray:
        """Multi-hop shortest-path lengths between the given regions (inf if disconnected)."""
        ids = sorted(self.regions)
        index = {rid: i for i, rid in enumerate(ids)}
        pairs = sorted(self.edges.items())
        rows = np.array([index[a] for (a, _), _ in pairs], dtype=np.int64)
        cols = np.array([index[b] for (_, b), _ in pairs], dtype=np.int64)
        # zero-length edges would vanish from a sparse matrix
        vals = np.maximum(np.array([length for _, length in pairs], dtype=np.float64), 1e-9)
        adjacency = csr_matrix((vals, (rows, cols)), shape=(len(ids), len(ids)))
        sources = [index[n] for n in nodes]
        dist = shortest_path(adjacency, method="D", directed=False, indices=sources)
        return dist[:, sources]

    def region_path(self, start: int, goal: int) -> Optional[Tuple[List[int], float]]:
        """A* over the region graph with straight-line anchor distance as heuristic."""
        if start not in self.anchors or goal not in self.anchors:
            return None
        target = self.anchors[goal]
        return astar(
            start, goal, self.neighbors, lambda rid: float(np.linalg.norm(self.anchors[rid] - target))
        )

    def write_csv(self, directory: Union[str, Path]) -> Tuple[Path, Path]:
        directory = Path(directory)
        region_rows = [
            (r.id, r.state.value, *r.rp, r.frontier_count, r.unknown_count)
            for r in sorted(self.regions.values(), key=lambda r: r.id)
        ]
        regions_path = write_csv(
            directory / "regions.csv",
            ["region_id", "state", "rp_x", "rp_y", "rp_z", "frontier_count", "unknown_count"],
            region_rows,
        )
        edge_rows = [(a, b, length) for (a, b), length in sorted(self.edges.items())]
        edges_path = write_csv(directory / "edges.csv", ["region_a", "region_b", "length"], edge_rows)
        return regions_path, edges_path


def _anchor(snapshot: MapSnapshot, region: Region, region_voxels: np.ndarray) -> Optional[np.ndarray]:
    """Traversable voxel center of the region closest to its representative point."""
    candidates = region_voxels[snapshot.traversable[region_voxels]]
    if candidates.size == 0:
        return None
    centers = snapshot.grid.voxel_center(candidates)
    return centers[int(np.argmin(np.linalg.norm(centers - region.rp, axis=1)))]


def build_connectivity(
    regions: Sequence[Region], snapshot: MapSnapshot, lattice: RegionLattice, cfg: PlannerConfig
) -> RegionGraph:
    """
    Link face-adjacent regions whose anchors are joined by a collision-free path.

    A straight traversable leg is accepted directly; otherwise a voxel A*
    confined to the two regions must succeed, and its length is the edge length.
    """
    voxel_region = lattice.voxel_regions(snapshot)
    traversable = snapshot.traversable
    order = np.argsort(voxel_region, kind="stable")
    boundaries = np.searchsorted(voxel_region[order], np.arange(lattice.size + 1))
    members = {r.id: order[boundaries[r.id]:boundaries[r.id + 1]] for r in regions}

    by_id = {r.id: r for r in regions}
    anchors = {}
    for region in regions:
        anchor = _anchor(snapshot, region, members[region.id])
        if anchor is not None:
            anchors[region.id] = anchor
    graph = RegionGraph(lattice=lattice, regions=by_id, anchors=anchors)

    for a in sorted(anchors):
        for b in lattice.face_neighbors(a):
            if b <= a or b not in anchors:
                continue
            pa, pb = anchors[a], anchors[b]
            if snapshot.segment_clear(pa, pb):
                graph.add_edge(a, b, float(np.linalg.norm(pa - pb)))
                continue
            passable = np.zeros_like(traversable)
            pair = np.concatenate([members[a], members[b]])
            passable[pair] = traversable[pair]
            result = voxel_astar(snapshot.grid, passable, snapshot.voxel_of(pa), snapshot.voxel_of(pb))
            if result is not None:
                graph.add_edge(a, b, result[1])
    logger.debug(f"Connectivity: {len(anchors)} anchored regions, {len(graph.edges)} edges")
    return graph


# ==================== COVERAGE TOUR ====================

@dataclass
class GlobalTour:
    regions: List[int]
    unreachable: List[int] = field(default_factory=list)

    @property
    def next_goal(self) -> Optional[int]:
        return self.regions[0] if self.regions else None


def tour_cost_matrix(graph: RegionGraph, nodes: Sequence[int], k: float) -> np.ndarray:
    """c_ij = l_ij - k (f_i + f_j) with l the multi-hop region-graph distance."""
    lengths = graph.distance_matrix(nodes)
    frontiers = np.array([graph.regions[n].frontier_count for n in nodes], dtype=np.float64)
    cost = lengths - k * (frontiers[:, None] + frontiers[None, :])
    np.fill_diagonal(cost, 0.0)
    return cost


def plan_global_tour(
    graph: RegionGraph, current: int, cfg: PlannerConfig, exclude: Collection[int] = ()
) -> GlobalTour:
    """
    Order the exploring regions reachable from current by an open-path TSP.

    The current region leads the tour only when it is exploring itself and not
    excluded.
    """
    exploring = [rid for rid in graph.by_state(RegionState.EXPLORING) if rid not in exclude]
    if not exploring:
        return GlobalTour(regions=[])
    if current not in graph.regions:
        raise DomainError(f"current region {current} is not in the graph")

    others = [rid for rid in exploring if rid != current]
    nodes = [current] + others
    reach = graph.distance_matrix(nodes)[0]
    unreachable = [rid for rid, d in zip(nodes[1:], reach[1:]) if not np.isfinite(d)]
    if unreachable:
        logger.info(f"⚠️ Exploring regions unreachable from {current}: {unreachable}")
    nodes = [current] + [rid for rid in others if rid not in unreachable]

    order = open_path_tsp(tour_cost_matrix(graph, nodes, cfg.k), 0)
    visit = [nodes[i] for i in order]
    if graph.regions[current].state != RegionState.EXPLORING or current in exclude:
        visit = visit[1:]
    return GlobalTour(regions=visit, unreachable=unreachable)
