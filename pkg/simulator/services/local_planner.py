"""
Local planning: informative viewpoint extraction, viewpoint tour and trajectory
generation, plus the escape fallback when the local domain runs dry
"""
import heapq
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path
from scipy.spatial.transform import Slerp

from models.errors import DomainError, NoGoalError, UnreachableGoalError
from models.schema import CameraConfig, LocalPlanConfig
from services.global_planner import RegionGraph, RegionLattice
from services.mapping import MapSnapshot
from services.routing import dummy_node_path, held_karp_path, voxel_astar
from services.world import Pose, look_rotation, mean_fov_half_angle, quat_to_rotation, rotation_to_quat
from utils.io import write_csv

logger = logging.getLogger("reconsim.local_planner")

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
EXACT_TOUR_LIMIT = 10
TIME_EPS = 1e-9
TRAJECTORY_HEADER = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz"]


# ==================== ORIENTATIONS ====================

def fibonacci_directions(n: int) -> np.ndarray:
    """
    Golden-spiral lattice on the unit sphere, running from +z to -z.

    Returns:
        (n, 3) unit vectors
    """
    if n < 1:
        raise DomainError("fibonacci_directions needs n >= 1")
    if n == 1:
        return np.array([[1.0, 0.0, 0.0]])
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * i / (n - 1)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
    theta = GOLDEN_ANGLE * i
    dirs = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def quaternion_angle(q0: np.ndarray, q1: np.ndarray) -> float:
    dot = abs(float(np.dot(q0, q1)))
    return 2.0 * math.acos(min(1.0, dot))


def traversal_time(a: Pose, b: Pose, cfg: LocalPlanConfig, length: Optional[float] = None) -> float:
    """Simultaneous translate and rotate: the slower of the two sets the time."""
    if length is None:
        length = float(np.linalg.norm(b.position - a.position))
    return max(length / cfg.v_max, quaternion_angle(a.quaternion, b.quaternion) / cfg.omega_max)


# ==================== VIEWPOINTS ====================

@dataclass
class Viewpoint:
    position: np.ndarray
    quaternion: np.ndarray
    score: float = 0.0
    covered: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    id: int = -1
    region: int = -1

    @property
    def pose(self) -> Pose:
        return Pose(np.asarray(self.position, dtype=np.float64), np.asarray(self.quaternion, dtype=np.float64))


@dataclass
class UncertaintyPool:
    """Target voxels sorted by value (descending), with a mask of those still uncovered"""
    ids: np.ndarray
    values: np.ndarray
    points: np.ndarray
    active: np.ndarray

    @classmethod
    def build(
        cls,
        snapshot: MapSnapshot,
        mask: np.ndarray,
        values: Optional[np.ndarray] = None,
        limit: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> "UncertaintyPool":
        """
        Collect the masked voxels, highest value first, keeping at most limit.

        Equal values keep voxel order unless rng is given; then they are
        shuffled, so truncation thins a tie uniformly over space.
        """
        ids = np.flatnonzero(mask)
        vals = (snapshot.epistemic if values is None else np.asarray(values, dtype=np.float64))[ids]
        if rng is None:
            order = np.argsort(-vals, kind="stable")
        else:
            order = np.lexsort((rng.random(ids.size), -vals))
        if limit is not None:
            order = order[:limit]
        ids, vals = ids[order], vals[order]
        return cls(ids=ids, values=vals, points=snapshot.grid.voxel_center(ids).reshape(-1, 3),
                   active=np.ones(len(ids), dtype=bool))

    def __len__(self) -> int:
        return int(self.active.sum())

    def cover(self, indices: np.ndarray) -> None:
        self.active[indices] = False


def reachable_targets(snapshot: MapSnapshot, free_component: np.ndarray) -> np.ndarray:
    """High-uncertainty in-bounds voxels in, or touching, the agent's free space."""
    dims = snapshot.grid.dims
    near = ndimage.binary_dilation(
        free_component.reshape(dims, order="F"), structure=ndimage.generate_binary_structure(3, 1)
    ).ravel(order="F")
    return snapshot.high_u & snapshot.in_bounds & near


def within_reach(snapshot: MapSnapshot, lattice: RegionLattice, domain: Sequence[int], cfg: LocalPlanConfig) -> np.ndarray:
    """Voxels no farther than d_max from the bounding box of the domain regions."""
    extents = [lattice.extent(rid) for rid in domain]
    lo = np.min([e[0] for e in extents], axis=0) - cfg.d_max
    hi = np.max([e[1] for e in extents], axis=0) + cfg.d_max
    centers = snapshot.grid.centers()
    return np.all((centers >= lo) & (centers <= hi), axis=1)


def line_of_sight(snapshot: MapSnapshot, origin: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """
    Sphere-march from origin toward every target over the clearance field.

    Occupied voxels block; unknown space is transparent. Marching stops one
    voxel short of the target so the target's own occupancy never counts.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    origin = np.asarray(origin, dtype=np.float64)
    res = snapshot.grid.resolution
    offsets = targets - origin
    dist = np.linalg.norm(offsets, axis=1)
    unit = offsets / np.where(dist > 0.0, dist, 1.0)[:, None]
    stop = dist - res
    t = np.zeros(len(targets))
    visible = np.zeros(len(targets), dtype=bool)
    alive = np.ones(len(targets), dtype=bool)
    min_step = 0.5 * res
    while alive.any():
        idx = np.flatnonzero(alive)
        done = t[idx] >= stop[idx]
        visible[idx[done]] = True
        alive[idx[done]] = False
        idx = idx[~done]
        if idx.size == 0:
            break
        points = origin + t[idx, None] * unit[idx]
        vox = snapshot.grid.nearest_index(points)
        blocked = snapshot.occupied[vox]
        alive[idx[blocked]] = False
        idx, vox = idx[~blocked], vox[~blocked]
        t[idx] += np.maximum(snapshot.clearance[vox] - 0.5 * res, min_step)
    return visible


class _PositionView:
    """Per-position cache of target distances and lazily computed visibility"""

    def __init__(self, snapshot: MapSnapshot, position: np.ndarray, pool: UncertaintyPool, cfg: LocalPlanConfig):
        self.snapshot = snapshot
        self.position = np.asarray(position, dtype=np.float64)
        offsets = pool.points - self.position
        dist = np.linalg.norm(offsets, axis=1)
        self.in_range = (dist >= cfg.d_min) & (dist <= cfg.d_max)
        self.unit = offsets / np.where(dist > 0.0, dist, 1.0)[:, None]
        self.visibility = np.zeros(len(pool.ids), dtype=np.int8)

    def evaluate(
        self, forward: np.ndarray, pool: UncertaintyPool, cos_half: float, top_k: int
    ) -> Tuple[float, np.ndarray]:
        eligible = np.flatnonzero(pool.active & self.in_range & (self.unit @ forward >= cos_half))
        accepted: List[np.ndarray] = []
        n_accepted = 0
        cursor = 0
        while n_accepted < top_k and cursor < eligible.size:
            chunk = eligible[cursor:cursor + 2 * top_k]
            cursor += chunk.size
            unseen = chunk[self.visibility[chunk] == 0]
            if unseen.size:
                clear = line_of_sight(self.snapshot, self.position, pool.points[unseen])
                self.visibility[unseen] = np.where(clear, 1, -1)
            visible = chunk[self.visibility[chunk] == 1][: top_k - n_accepted]
            accepted.append(visible)
            n_accepted += visible.size
        picked = np.concatenate(accepted) if accepted else np.zeros(0, dtype=np.int64)
        return float(pool.values[picked].sum()), picked


def cone_half_angle(cfg: LocalPlanConfig, camera: CameraConfig) -> float:
    return cfg.cone_half_angle if cfg.cone_half_angle is not None else mean_fov_half_angle(camera)


def accumulate_view_uncertainty(
    snapshot: MapSnapshot, pose: Pose, pool: UncertaintyPool, cfg: LocalPlanConfig, camera: CameraConfig
) -> Tuple[float, np.ndarray]:
    """
    Score a single pose against the pool.

    Returns:
        (sum of accepted target values, accepted voxel ids)
    """
    view = _PositionView(snapshot, pose.position, pool, cfg)
    score, picked = view.evaluate(pose.forward(), pool, math.cos(cone_half_angle(cfg, camera)), cfg.top_k)
    return score, pool.ids[picked]


# ==================== GREEDY SELECTION ====================

def lazy_greedy(
    n_candidates: int,
    evaluate: Callable[[int], Tuple[float, object]],
    commit: Callable[[int, object], None],
    eta: float,
    budget: int,
    siblings: Optional[Callable[[int], Iterable[int]]] = None,
) -> List[Tuple[int, float, object]]:
    """
    Greedy maximization with stale upper bounds in a max-heap.

    evaluate(c) must score c against the current pool and never increase as
    commits shrink the pool. After each acceptance, siblings(c) are re-examined
    and taken when they also clear eta.
    """
    heap = [(-evaluate(c)[0], c) for c in range(n_candidates)]
    heapq.heapify(heap)
    taken = set()
    selected: List[Tuple[int, float, object]] = []

    def accept(c: int, score: float, payload: object) -> None:
        taken.add(c)
        commit(c, payload)
        selected.append((c, score, payload))

    while heap and len(selected) < budget:
        _, c = heapq.heappop(heap)
        if c in taken:
            continue
        score, payload = evaluate(c)
        if heap and score < -heap[0][0] - 1e-12:
            heapq.heappush(heap, (-score, c))
            continue
        if score <= eta:
            break
        accept(c, score, payload)
        for s in (siblings(c) if siblings else ()):
            if len(selected) >= budget:
                break
            if s in taken:
                continue
            s_score, s_payload = evaluate(s)
            if s_score > eta:
                accept(s, s_score, s_payload)
    return selected


def local_domain(lattice: RegionLattice, current: int) -> List[int]:
    """Current region and its face neighbours."""
    return [current] + lattice.face_neighbors(current)


def candidate_positions(lattice: RegionLattice, domain: Sequence[int], cfg: LocalPlanConfig) -> np.ndarray:
    """Per-region lattice: steps of pos_step_xy in x-y and pos_step_z in z, cell-centred."""
    steps = (cfg.pos_step_xy, cfg.pos_step_xy, cfg.pos_step_z)
    blocks = []
    for rid in domain:
        lo, hi = lattice.extent(rid)
        axes = []
        for a in range(3):
            extent = hi[a] - lo[a]
            n = max(1, int(round(extent / steps[a])))
            axes.append(lo[a] + (np.arange(n) + 0.5) * extent / n)
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        blocks.append(grid)
    return np.concatenate(blocks) if blocks else np.zeros((0, 3))


def select_target_viewpoints(
    snapshot: MapSnapshot,
    lattice: RegionLattice,
    domain: Sequence[int],
    pool: UncertaintyPool,
    cfg: LocalPlanConfig,
    camera: CameraConfig,
) -> List[Viewpoint]:
    """
    Greedy informative viewpoints over safe candidate poses in the domain.

    Accepted viewpoints cover disjoint target voxels; the pool is consumed as
    viewpoints are accepted.
    """
    if len(pool) == 0:
        return []
    positions = candidate_positions(lattice, domain, cfg)
    positions = positions[snapshot.is_traversable(positions, optimistic=False)] if len(positions) else positions
    if len(positions) == 0:
        logger.debug("No safe candidate position in the local domain")
        return []

    # drop targets that no candidate can reach
    lo = positions.min(axis=0) - cfg.d_max
    hi = positions.max(axis=0) + cfg.d_max
    pool.active &= np.all((pool.points >= lo) & (pool.points <= hi), axis=1)

    directions = fibonacci_directions(cfg.orientations_per_pos)
    quaternions = np.array([look_rotation(d) for d in directions])
    n_dir = len(directions)
    cos_half = math.cos(cone_half_angle(cfg, camera))
    views: Dict[int, _PositionView] = {}

    def view_of(p: int) -> _PositionView:
        if p not in views:
            views[p] = _PositionView(snapshot, positions[p], pool, cfg)
        return views[p]

    def evaluate(c: int):
        p, d = divmod(c, n_dir)
        return view_of(p).evaluate(directions[d], pool, cos_half, cfg.top_k)

    def commit(c: int, picked) -> None:
        pool.cover(picked)

    def siblings(c: int):
        p, d = divmod(c, n_dir)
        return [p * n_dir + other for other in range(n_dir) if other != d]

    chosen = lazy_greedy(len(positions) * n_dir, evaluate, commit, cfg.eta, cfg.max_viewpoints, siblings)
    viewpoints = []
    for vid, (c, score, picked) in enumerate(chosen):
        p, d = divmod(c, n_dir)
        viewpoints.append(Viewpoint(
            position=positions[p].copy(),
            quaternion=quaternions[d].copy(),
            score=score,
            covered=pool.ids[picked],
            id=vid,
            region=int(lattice.locate(positions[p])[0]),
        ))
    logger.debug(f"Selected {len(viewpoints)} viewpoints from {len(positions)} positions x {n_dir} orientations")
    return viewpoints


def write_viewpoints_csv(path: Union[str, Path], viewpoints: Sequence[Viewpoint]) -> Path:
    rows = [
        (vp.id, vp.region, *vp.position, *vp.quaternion, vp.score, len(vp.covered))
        for vp in viewpoints
    ]
    header = ["id", "region", "px", "py", "pz", "qw", "qx", "qy", "qz", "score", "n_covered"]
    return write_csv(path, header, rows)


# ==================== LOCAL GOAL ====================

def select_local_goal(
    global_goal: Optional[int],
    graph: RegionGraph,
    domain: Sequence[int],
    viewpoints: Sequence[Viewpoint],
    agent: Pose,
) -> Viewpoint:
    """
    Use the global goal directly when it lies in the domain; otherwise the best
    viewpoint of the domain region closest to the goal.

    Without a global goal the highest-scoring viewpoint is the local goal.
    """
    if global_goal is not None and global_goal in domain and global_goal in graph.anchors:
        target = graph.anchors[global_goal]
        facing = graph.regions[global_goal].rp - agent.position
        quaternion = look_rotation(facing) if np.linalg.norm(facing) > 1e-9 else agent.quaternion
        return Viewpoint(position=target.copy(), quaternion=quaternion, region=global_goal)
    if not viewpoints:
        raise NoGoalError(f"no viewpoint in the local domain and global goal {global_goal} is outside it")
    if global_goal is None:
        return min(viewpoints, key=lambda vp: (-vp.score, vp.id))
    goal_center = graph.lattice.center(global_goal)

    def key(vp: Viewpoint):
        d = float(np.linalg.norm(graph.lattice.center(vp.region) - goal_center))
        return round(d, 9), -vp.score, vp.id

    return min(viewpoints, key=key)


# ==================== VIEWPOINT TOUR ====================

@dataclass
class ViewpointGraph:
    """Start pose, intermediate viewpoints and the local goal (last); costs are traversal times"""
    poses: List[Pose]
    cost: np.ndarray
    predecessors: np.ndarray
    legs: Dict[Tuple[int, int], np.ndarray]
    dropped: List[int] = field(default_factory=list)

    def hop_sequence(self, a: int, b: int) -> List[int]:
        """Nodes passed when travelling a -> b along the cheapest chain of direct legs."""
        chain = [b]
        while chain[-1] != a:
            chain.append(int(self.predecessors[a, chain[-1]]))
        return chain[::-1]


def simplify_path(snapshot: MapSnapshot, points: np.ndarray, optimistic: bool = True) -> np.ndarray:
    """Drop intermediate waypoints whenever a straight leg remains traversable."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) <= 2:
        return points
    kept = [0]
    i = 0
    last = len(points) - 1
    while i < last:
        j = last
        while j > i + 1 and not snapshot.segment_clear(points[i], points[j], optimistic):
            j -= 1
        kept.append(j)
        i = j
    return points[kept]


def route_leg(snapshot: MapSnapshot, a: np.ndarray, b: np.ndarray, optimistic: bool) -> Optional[np.ndarray]:
    """Waypoints a -> b: the straight leg if clear, else a simplified voxel A* path."""
    if snapshot.segment_clear(a, b, optimistic):
        return np.stack([a, b])
    passable = snapshot.traversable if optimistic else snapshot.safe
    result = voxel_astar(snapshot.grid, passable, snapshot.voxel_of(a), snapshot.voxel_of(b))
    if result is None:
        return None
    centers = snapshot.grid.voxel_center(np.asarray(result[0]))
    points = np.vstack([a, centers[1:-1], b]) if len(centers) > 2 else np.stack([a, b])
    return simplify_path(snapshot, points, optimistic)


def build_viewpoint_graph(
    start: Pose, viewpoints: Sequence[Viewpoint], goal: Viewpoint, snapshot: MapSnapshot, cfg: LocalPlanConfig
) -> ViewpointGraph:
    """
    Direct legs between every pair; a blocked straight leg is replaced by a
    voxel A* route (known-free first, then optimistic). Viewpoints that cannot
    be reached from the start are dropped.
    """
    middle = [vp for vp in viewpoints if not (vp.id >= 0 and vp.id == goal.id)]
    poses = [start] + [vp.pose for vp in middle] + [goal.pose]
    n = len(poses)
    direct = np.full((n, n), np.inf)
    np.fill_diagonal(direct, 0.0)
    legs: Dict[Tuple[int, int], np.ndarray] = {}
    for i in range(n):
        for j in range(i + 1, n):
            a, b = poses[i].position, poses[j].position
            route = route_leg(snapshot, a, b, optimistic=False)
            if route is None:
                route = route_leg(snapshot, a, b, optimistic=True)
            if route is None:
                continue
            length = float(np.sum(np.linalg.norm(np.diff(route, axis=0), axis=1)))
            direct[i, j] = direct[j, i] = traversal_time(poses[i], poses[j], cfg, length)
            if len(route) > 2:
                legs[(i, j)] = route[1:-1]

    finite = np.where(np.isfinite(direct), np.maximum(direct, 1e-12), 0.0)
    np.fill_diagonal(finite, 0.0)
    closure, predecessors = shortest_path(csr_matrix(finite), method="D", directed=False, return_predecessors=True)
    if not np.isfinite(closure[0, n - 1]):
        raise UnreachableGoalError("local goal unreachable from the current pose", goal.region)

    keep = [i for i in range(n) if np.isfinite(closure[0, i])]
    dropped = [middle[i - 1].id for i in range(1, n - 1) if i not in keep]
    if dropped:
        logger.warning(f"⚠️ Dropping unreachable viewpoints {dropped}")
    if len(keep) < n:
        pruned = build_viewpoint_graph(start, [middle[i - 1] for i in keep[1:-1]], goal, snapshot, cfg)
        pruned.dropped = dropped + pruned.dropped
        return pruned
    return ViewpointGraph(poses=poses, cost=closure, predecessors=predecessors, legs=legs)


def plan_viewpoint_tour(graph: ViewpointGraph) -> List[int]:
    """
    Node order start -> ... -> goal minimising total traversal time.

    Small instances are solved exactly; larger ones through the dummy-node cycle.
    """
    n = len(graph.poses)
    if n <= 2:
        return list(range(n))
    if n <= EXACT_TOUR_LIMIT:
        return held_karp_path(graph.cost, 0, end=n - 1)[1]
    return dummy_node_path(graph.cost, 0, n - 1)


def tour_poses(graph: ViewpointGraph, order: Sequence[int]) -> List[Pose]:
    """Expand a node order into poses, inserting routed waypoints on detoured legs."""
    poses = [graph.poses[order[0]]]
    for a, b in zip(order[:-1], order[1:]):
        hops = graph.hop_sequence(a, b)
        for u, v in zip(hops[:-1], hops[1:]):
            key = (min(u, v), max(u, v))
            waypoints = graph.legs.get(key)
            if waypoints is not None:
                ordered = waypoints if u < v else waypoints[::-1]
                poses.extend(Pose(p.copy(), graph.poses[v].quaternion) for p in ordered)
            poses.append(graph.poses[v])
    return poses


# ==================== TRAJECTORIES ====================

@dataclass
class Trajectory:
    times: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __len__(self) -> int:
        return len(self.times)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self.times) else 0.0

    def pose(self, i: int) -> Pose:
        return Pose(self.positions[i].copy(), self.quaternions[i].copy())

    def pose_at(self, t: float) -> Pose:
        """Interpolated pose at time t (clamped to the trajectory span)."""
        if len(self.times) == 1:
            return self.pose(0)
        t = float(np.clip(t, self.times[0], self.times[-1]))
        i = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        t0, t1 = self.times[i], self.times[i + 1]
        w = (t - t0) / (t1 - t0)
        position = (1.0 - w) * self.positions[i] + w * self.positions[i + 1]
        slerp = Slerp([t0, t1], quat_to_rotation(self.quaternions[i:i + 2]))
        return Pose(position, rotation_to_quat(slerp([t]))[0])

    def write_csv(self, path: Union[str, Path]) -> Path:
        rows = [(t, *p, *q) for t, p, q in zip(self.times, self.positions, self.quaternions)]
        return write_csv(path, TRAJECTORY_HEADER, rows)


def interpolate_trajectory(poses: Sequence[Pose], cfg: LocalPlanConfig) -> Trajectory:
    """
    Sample every traj_dt along each leg: linear in position, slerp in orientation.

    Leg durations are traversal times. Each leg ends on its exact input pose;
    coincident consecutive poses are skipped.
    """
    if len(poses) < 2:
        raise DomainError("a trajectory needs at least two poses")
    times = [0.0]
    positions = [np.asarray(poses[0].position, dtype=np.float64)]
    quaternions = [np.asarray(poses[0].quaternion, dtype=np.float64)]
    clock = 0.0
    current = poses[0]
    for target in poses[1:]:
        duration = traversal_time(current, target, cfg)
        if duration < TIME_EPS:
            continue
        slerp = Slerp([0.0, duration], quat_to_rotation(np.stack([current.quaternion, target.quaternion])))
        steps = np.arange(1, int(math.floor(duration / cfg.traj_dt)) + 1) * cfg.traj_dt
        steps = steps[steps < duration - TIME_EPS]
        if steps.size:
            w = steps / duration
            interp = (1.0 - w)[:, None] * current.position + w[:, None] * target.position
            rotations = rotation_to_quat(slerp(steps))
            times.extend(clock + steps)
            positions.extend(interp)
            quaternions.extend(rotations)
        clock += duration
        times.append(clock)
        positions.append(np.asarray(target.position, dtype=np.float64))
        quaternions.append(np.asarray(target.quaternion, dtype=np.float64))
        current = target
    return Trajectory(np.asarray(times), np.asarray(positions), np.asarray(quaternions))


def plan_local_trajectory(
    start: Pose, viewpoints: Sequence[Viewpoint], goal: Viewpoint, snapshot: MapSnapshot, cfg: LocalPlanConfig
) -> Tuple[Trajectory, List[int]]:
    """Viewpoint graph, tour and interpolation in one call; also returns the tour's node order."""
    graph = build_viewpoint_graph(start, viewpoints, goal, snapshot, cfg)
    order = plan_viewpoint_tour(graph)
    return interpolate_trajectory(tour_poses(graph, order), cfg), order


# ==================== ESCAPE ====================

def _facing_poses(start: Pose, points: Sequence[np.ndarray]) -> List[Pose]:
    poses = [start]
    previous = start.position
    for p in points:
        step = p - previous
        if np.linalg.norm(step) < 1e-9:
            continue
        poses.append(Pose.looking(p, step))
        previous = p
    return poses


def escape_plan(
    snapshot: MapSnapshot, graph: RegionGraph, start: Pose, goal_region: int, cfg: LocalPlanConfig
) -> Trajectory:
    """
    Leave an exhausted domain along the region graph toward goal_region.

    Poses sit at region anchors facing the travel direction; a leg that is no
    longer clear is replaced by a voxel A* detour.
    """
    current = graph.locate(start.position)
    if current is None:
        raise UnreachableGoalError("agent is not inside any anchored region", goal_region)
    found = graph.region_path(current, goal_region)
    if found is None:
        raise UnreachableGoalError(f"region {goal_region} unreachable from region {current}", goal_region)
    region_path, _ = found

    anchors = [graph.anchors[rid] for rid in region_path[1:]] or [graph.anchors[current]]
    points = [start.position]
    for target in anchors:
        route = route_leg(snapshot, points[-1], target, optimistic=True)
        if route is None:
            raise UnreachableGoalError(f"no voxel path toward region {goal_region}", goal_region)
        if len(route) > 2:
            logger.info(f"🚧 Leg to {np.round(target, 2).tolist()} blocked, using a {len(route) - 1}-leg detour")
        points.extend(route[1:])

    poses = _facing_poses(start, points[1:])
    if len(poses) < 2:
        poses.append(Pose.looking(start.position, start.forward() * -1.0))
    return interpolate_trajectory(poses, cfg)
