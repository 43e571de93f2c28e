"""
Shared search primitives: A* (generic and voxel), open-path TSP heuristic, exact DP oracle
"""
import heapq
import itertools
import math
from typing import Callable, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from models.errors import DomainError
from services.grid import VoxelGrid

IMPROVEMENT_EPS = 1e-12
DUMMY_BLOCK = 1e9
OR_OPT_SEGMENTS = (1, 2, 3)


# ==================== A* ====================

def astar(
    start: Hashable,
    goal: Hashable,
    neighbors: Callable[[Hashable], Iterable[Tuple[Hashable, float]]],
    heuristic: Callable[[Hashable], float],
) -> Optional[Tuple[List[Hashable], float]]:
    """
    A* with a closed set; optimal when the heuristic is consistent.

    Returns:
        (node path from start to goal, total cost) or None when unreachable
    """
    tie = itertools.count()
    frontier = [(heuristic(start), next(tie), start)]
    cost_so_far = {start: 0.0}
    parent = {start: None}
    closed = set()
    while frontier:
        _, _, node = heapq.heappop(frontier)
        if node in closed:
            continue
        if node == goal:
            path = [node]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1], cost_so_far[node]
        closed.add(node)
        for nbr, step in neighbors(node):
            if nbr in closed:
                continue
            candidate = cost_so_far[node] + step
            if candidate < cost_so_far.get(nbr, math.inf) - IMPROVEMENT_EPS:
                cost_so_far[nbr] = candidate
                parent[nbr] = node
                heapq.heappush(frontier, (candidate + heuristic(nbr), next(tie), nbr))
    return None


def voxel_astar(
    grid: VoxelGrid, passable: np.ndarray, start: int, goal: int
) -> Optional[Tuple[List[int], float]]:
    """6-connected A* over linear voxel ids; the start voxel is exempt from passability."""
    start, goal = int(start), int(goal)
    if not passable[goal]:
        return None
    nx, ny, nz = grid.dims
    plane = nx * ny
    res = grid.resolution
    gi, gj, gk = goal % nx, (goal // nx) % ny, goal // plane

    def neighbors(lin: int):
        i, j, k = lin % nx, (lin // nx) % ny, lin // plane
        if i > 0 and passable[lin - 1]:
            yield lin - 1, res
        if i < nx - 1 and passable[lin + 1]:
            yield lin + 1, res
        if j > 0 and passable[lin - nx]:
            yield lin - nx, res
        if j < ny - 1 and passable[lin + nx]:
            yield lin + nx, res
        if k > 0 and passable[lin - plane]:
            yield lin - plane, res
        if k < nz - 1 and passable[lin + plane]:
            yield lin + plane, res

    def heuristic(lin: int) -> float:
        i, j, k = lin % nx, (lin // nx) % ny, lin // plane
        return res * math.sqrt((i - gi) ** 2 + (j - gj) ** 2 + (k - gk) ** 2)

    return astar(start, goal, neighbors, heuristic)


def polyline_length(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))


# ==================== TSP HEURISTIC ====================

def tour_cost(cost: np.ndarray, order: Sequence[int]) -> float:
    order = np.asarray(order, dtype=np.int64)
    if len(order) < 2:
        return 0.0
    return float(np.sum(cost[order[:-1], order[1:]]))


def nearest_neighbor_order(cost: np.ndarray, start: int, nodes: Sequence[int]) -> List[int]:
    """Greedy construction from start over the given nodes (lowest index wins ties)."""
    remaining = sorted(set(nodes) - {start})
    order = [start]
    while remaining:
        row = cost[order[-1], remaining]
        order.append(remaining.pop(int(np.argmin(row))))
    return order


def _two_opt_pass(cost: np.ndarray, order: List[int], symmetric: bool = True) -> bool:
    """Apply the first improving segment reversal; endpoints stay fixed."""
    n = len(order)
    arr = np.asarray(order)
    for i in range(1, n - 2):
        a, b = arr[i - 1], arr[i]
        js = np.arange(i + 1, n - 1)
        c, d = arr[js], arr[js + 1]
        delta = cost[a, c] + cost[b, d] - cost[a, b] - cost[c, d]
        # reversal flips internal edges too when costs are asymmetric
        if not symmetric:
            delta = delta + np.array([_reversal_internal_delta(cost, arr, i, j) for j in js])
        best = int(np.argmin(delta))
        if delta[best] < -IMPROVEMENT_EPS:
            j = int(js[best])
            order[i:j + 1] = order[i:j + 1][::-1]
            return True
    return False


def _reversal_internal_delta(cost: np.ndarray, arr: np.ndarray, i: int, j: int) -> float:
    segment = arr[i:j + 1]
    forward = np.sum(cost[segment[:-1], segment[1:]])
    backward = np.sum(cost[segment[1:], segment[:-1]])
    return float(backward - forward)


def _or_opt_pass(cost: np.ndarray, order: List[int]) -> bool:
    """Move a segment of 1-3 inner nodes elsewhere, optionally reversed."""
    n = len(order)
    for length in OR_OPT_SEGMENTS:
        for i in range(1, n - length):
            seg = order[i:i + length]
            prev_node, next_node = order[i - 1], order[i + length]
            internal = tour_cost(cost, seg)
            removal_gain = cost[prev_node, seg[0]] + cost[seg[-1], next_node] - cost[prev_node, next_node]
            rest = order[:i] + order[i + length:]
            xs = np.asarray(rest[:-1])
            ys = np.asarray(rest[1:])
            base = cost[xs, ys]
            insert_fwd = cost[xs, seg[0]] + cost[seg[-1], ys] - base
            reversed_internal = tour_cost(cost, seg[::-1]) - internal
            insert_rev = cost[xs, seg[-1]] + cost[seg[0], ys] - base + reversed_internal
            # inserting back into the original gap is not a move
            original_gap = i - 1
            insert_fwd[original_gap] = math.inf
            insert_rev[original_gap] = math.inf
            best_fwd = int(np.argmin(insert_fwd))
            best_rev = int(np.argmin(insert_rev))
            if insert_fwd[best_fwd] <= insert_rev[best_rev]:
                gap, added, new_seg = best_fwd, insert_fwd[best_fwd], seg
            else:
                gap, added, new_seg = best_rev, insert_rev[best_rev], seg[::-1]
            if added - removal_gain < -IMPROVEMENT_EPS:
                order[:] = rest[:gap + 1] + list(new_seg) + rest[gap + 1:]
                return True
    return False


def solve_fixed_path(cost: np.ndarray, order: List[int], max_rounds: int = 10000) -> List[int]:
    """Improve a path with fixed first and last nodes by 2-opt and Or-opt to local optimality."""
    order = list(order)
    if len(order) <= 3:
        return order
    symmetric = bool(np.allclose(cost, cost.T))
    for _ in range(max_rounds):
        if _two_opt_pass(cost, order, symmetric):
            continue
        if _or_opt_pass(cost, order):
            continue
        break
    return order


def open_path_tsp(cost: np.ndarray, start: int) -> List[int]:
    """
    Hamiltonian path from start over all nodes, free end.

    A zero-cost virtual terminal closes the path so the last real node can move.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if n == 0:
        raise DomainError("open_path_tsp needs at least one node")
    if not 0 <= start < n:
        raise DomainError(f"start {start} outside 0..{n - 1}")
    if n == 1:
        return [start]
    augmented = np.zeros((n + 1, n + 1))
    augmented[:n, :n] = cost
    terminal = n
    order = nearest_neighbor_order(cost, start, range(n)) + [terminal]
    order = solve_fixed_path(augmented, order)
    return order[:-1]


def dummy_node_path(cost: np.ndarray, start: int, goal: int) -> List[int]:
    """
    Path start -> ... -> goal over all nodes, as a cycle through a dummy node.

    The dummy joins start and goal at zero cost and is blocked from all other
    nodes, so any good cycle opens into the required path.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if start == goal:
        raise DomainError("start and goal must differ")
    dummy, dummy_copy = n, n + 1
    augmented = np.full((n + 2, n + 2), DUMMY_BLOCK)
    augmented[:n, :n] = cost
    for d in (dummy, dummy_copy):
        augmented[d, start] = augmented[start, d] = 0.0
        augmented[d, goal] = augmented[goal, d] = 0.0
    np.fill_diagonal(augmented, 0.0)
    middle = nearest_neighbor_order(cost, start, [i for i in range(n) if i != goal])
    cycle = [dummy] + middle + [goal, dummy_copy]
    cycle = solve_fixed_path(augmented, cycle)
    path = cycle[1:-1]
    if path[0] != start:
        path = path[::-1]
    return path


# ==================== EXACT ORACLE ====================

def held_karp_path(cost: np.ndarray, start: int, end: Optional[int] = None) -> Tuple[float, List[int]]:
    """
    Exact minimum-cost Hamiltonian path by dynamic programming over subsets.

    Args:
        cost: (N, N) matrix, N small (2^N * N states)
        start: fixed first node
        end: fixed last node, or None for a free end
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if n == 0:
        raise DomainError("held_karp_path needs at least one node")
    if n == 1:
        return 0.0, [start]
    full = (1 << n) - 1
    dp = np.full((1 << n, n), np.inf)
    parent = np.full((1 << n, n), -1, dtype=np.int64)
    dp[1 << start, start] = 0.0
    bits = 1 << np.arange(n)
    for mask in range(1 << n):
        if not mask & (1 << start):
            continue
        row = dp[mask]
        if not np.isfinite(row).any():
            continue
        candidates = row[:, None] + cost
        best_prev = np.argmin(candidates, axis=0)
        best = candidates[best_prev, np.arange(n)]
        for k in np.flatnonzero((mask & bits) == 0):
            if end is not None and k == end and (mask | bits[k]) != full:
                continue
            new_mask = mask | int(bits[k])
            if best[k] < dp[new_mask, k]:
                dp[new_mask, k] = best[k]
                parent[new_mask, k] = best_prev[k]
    last = end if end is not None else int(np.argmin(dp[full]))
    total = float(dp[full, last])
    order = [last]
    mask = full
    while order[-1] != start or mask != (1 << start):
        prev = int(parent[mask, order[-1]])
        mask ^= 1 << order[-1]
        order.append(prev)
    return total, order[::-1]
