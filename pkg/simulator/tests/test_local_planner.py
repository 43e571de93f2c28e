"""
Unit tests for viewpoint extraction, viewpoint tours, trajectories and escape
"""
import itertools
import math

import numpy as np
import pytest

from models.errors import DomainError, NoGoalError, UnreachableGoalError
from models.schema import CameraConfig, LocalPlanConfig, MappingConfig, PlannerConfig
from services.global_planner import Region, RegionGraph, RegionLattice, build_connectivity, decompose_regions
from services.local_planner import (
    UncertaintyPool,
    Viewpoint,
    accumulate_view_uncertainty,
    build_viewpoint_graph,
    escape_plan,
    fibonacci_directions,
    interpolate_trajectory,
    lazy_greedy,
    local_domain,
    plan_viewpoint_tour,
    select_local_goal,
    select_target_viewpoints,
    tour_poses,
    within_reach,
)
from services.mapping import MapSnapshot, MapState, default_u_threshold, fuse_depth
from services.routing import held_karp_path, tour_cost
from services.world import Pose, gt_sdf, load_scene, render_depth
from tests.conftest import SCENES_DIR

R_ROBOT = PlannerConfig().r_robot


def open_state(hi) -> MapState:
    """Box of fully observed free space."""
    state = MapState.create(np.zeros(3), np.asarray(hi, dtype=np.float64), MappingConfig())
    observe(state, state.in_bounds_mask(), 0.1)
    return state


def within(state: MapState, lo, hi) -> np.ndarray:
    centers = state.tsdf.centers()
    return np.all((centers >= np.asarray(lo)) & (centers <= np.asarray(hi)), axis=1)


def observe(state: MapState, mask: np.ndarray, tsdf: float) -> None:
    state.tsdf.data[mask] = tsdf
    state.weight.data[mask] = 1.0
    state.v_rho.data[mask] = 0.0


def forget(state: MapState, mask: np.ndarray) -> None:
    cfg = state.cfg
    state.tsdf.data[mask] = cfg.tr
    state.weight.data[mask] = 0.0
    state.v_rho.data[mask] = cfg.rho_init


def capture(state: MapState) -> MapSnapshot:
    return MapSnapshot.capture(state, default_u_threshold(state.cfg), R_ROBOT)


def region_graph(state: MapState) -> RegionGraph:
    snapshot = capture(state)
    lattice, regions = decompose_regions(state.bounds_min, state.bounds_max, PlannerConfig(), snapshot)
    return build_connectivity(regions, snapshot, lattice, PlannerConfig())


def single_target_scene():
    """Observed free box with one unobserved voxel at (3.05, 2.05, 1.55)."""
    state = open_state([6.0, 4.0, 3.0])
    target = within(state, [3.0, 2.0, 1.5], [3.1, 2.1, 1.6])
    forget(state, target)
    return state, int(np.flatnonzero(target)[0])


def line_graph(n: int) -> RegionGraph:
    lattice = RegionLattice.from_bounds(np.zeros(3), np.array([float(n), 1.0, 1.0]), 1.0)
    regions = {i: Region(id=i, cell=(i, 0, 0), rp=np.array([i + 0.5, 0.5, 0.5])) for i in range(n)}
    anchors = {i: regions[i].rp.copy() for i in range(n)}
    return RegionGraph(lattice=lattice, regions=regions, anchors=anchors)


class TestFibonacciDirections:
    """Golden-spiral orientation samples"""

    def test_unit_norm(self):
        dirs = fibonacci_directions(30)
        assert dirs.shape == (30, 3)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)

    def test_two_points_are_poles(self):
        np.testing.assert_allclose(fibonacci_directions(2), [[0, 0, 1.0], [0, 0, -1.0]], atol=1e-12)

    def test_spread(self):
        """No two of 30 directions closer than 0.30 rad"""
        dirs = fibonacci_directions(30)
        cosines = np.clip(dirs @ dirs.T, -1.0, 1.0)
        np.fill_diagonal(cosines, -1.0)
        assert np.arccos(cosines.max()) >= 0.30

    def test_zero_rejected(self):
        with pytest.raises(DomainError):
            fibonacci_directions(0)


class TestViewScoring:
    """Distance, cone and line-of-sight filtering"""

    def test_target_dead_ahead(self):
        """Unknown voxel 2 m ahead in open space is covered"""
        state, target = single_target_scene()
        snapshot = capture(state)
        pool = UncertaintyPool.build(snapshot, snapshot.high_u & snapshot.in_bounds)
        assert pool.ids.tolist() == [target]
        pose = Pose.looking([1.05, 2.05, 1.55], [1.0, 0.0, 0.0])
        score, covered = accumulate_view_uncertainty(snapshot, pose, pool, LocalPlanConfig(), CameraConfig())
        assert covered.tolist() == [target]
        assert score == pytest.approx(snapshot.epistemic[target])

    def test_outside_cone(self):
        state, _ = single_target_scene()
        snapshot = capture(state)
        pool = UncertaintyPool.build(snapshot, snapshot.high_u & snapshot.in_bounds)
        pose = Pose.looking([1.05, 2.05, 1.55], [-1.0, 0.0, 0.0])
        score, covered = accumulate_view_uncertainty(snapshot, pose, pool, LocalPlanConfig(), CameraConfig())
        assert score == 0.0 and covered.size == 0

    def test_occluded_by_wall(self):
        """A fused surface between camera and target hides it"""
        state, _ = single_target_scene()
        observe(state, within(state, [2.0, 1.8, 1.3], [2.1, 2.3, 1.8]), -0.05)
        snapshot = capture(state)
        pool = UncertaintyPool.build(snapshot, snapshot.high_u & snapshot.in_bounds)
        pose = Pose.looking([1.05, 2.05, 1.55], [1.0, 0.0, 0.0])
        score, covered = accumulate_view_uncertainty(snapshot, pose, pool, LocalPlanConfig(), CameraConfig())
        assert score == 0.0 and covered.size == 0

    def test_too_close(self):
        state, _ = single_target_scene()
        snapshot = capture(state)
        pool = UncertaintyPool.build(snapshot, snapshot.high_u & snapshot.in_bounds)
        pose = Pose.looking([2.75, 2.05, 1.55], [1.0, 0.0, 0.0])
        score, _ = accumulate_view_uncertainty(snapshot, pose, pool, LocalPlanConfig(), CameraConfig())
        assert score == 0.0


class TestUncertaintyPool:
    """Target ordering and truncation"""

    @pytest.fixture
    def fresh_snapshot(self):
        state = MapState.create(np.zeros(3), np.array([4.0, 2.0, 1.0]), MappingConfig())
        return capture(state)

    def test_ties_keep_voxel_order(self, fresh_snapshot):
        """Without a generator a tie is cut in flat order, i.e. the bottom layer"""
        pool = UncertaintyPool.build(fresh_snapshot, fresh_snapshot.in_bounds, limit=200)
        assert len(pool) == 200
        np.testing.assert_allclose(pool.points[:, 2], 0.05, atol=1e-9)

    def test_ties_thinned_across_space(self, fresh_snapshot):
        pool = UncertaintyPool.build(
            fresh_snapshot, fresh_snapshot.in_bounds, limit=200, rng=np.random.default_rng(0)
        )
        assert len(pool) == 200
        assert len(np.unique(pool.ids)) == 200
        assert np.ptp(pool.points[:, 2]) >= 0.5

    def test_higher_values_first(self, fresh_snapshot):
        values = np.ones(fresh_snapshot.grid.size)
        hot = np.flatnonzero(fresh_snapshot.in_bounds)[-5:]
        values[hot] = 2.0
        pool = UncertaintyPool.build(
            fresh_snapshot, fresh_snapshot.in_bounds, values=values, limit=20, rng=np.random.default_rng(1)
        )
        assert sorted(pool.ids[:5].tolist()) == sorted(hot.tolist())
        assert np.all(np.diff(pool.values) <= 0.0)

    def test_within_reach(self, fresh_snapshot):
        lattice = RegionLattice.from_bounds(np.zeros(3), np.array([4.0, 2.0, 1.0]), 1.0)
        reach = within_reach(fresh_snapshot, lattice, [0], LocalPlanConfig(d_min=0.2, d_max=1.0))
        centers = fresh_snapshot.grid.centers()
        assert reach[fresh_snapshot.grid.nearest_index(np.array([1.95, 0.5, 0.5]))]
        assert not reach[fresh_snapshot.grid.nearest_index(np.array([2.15, 0.5, 0.5]))]
        assert np.all(centers[reach, 0] <= 2.0)


def coverage_oracle(sets, weights):
    removed = set()

    def evaluate(c):
        fresh = sets[c] - removed
        return float(sum(weights[i] for i in fresh)), fresh

    def commit(c, payload):
        removed.update(payload)

    return evaluate, commit


class TestLazyGreedy:
    """Greedy coverage with stale bounds"""

    def test_larger_union_wins(self):
        """{a:5, b:6} vs {b:6, c:7} with budget 1"""
        weights = {"a": 5.0, "b": 6.0, "c": 7.0}
        evaluate, commit = coverage_oracle([{"a", "b"}, {"b", "c"}], weights)
        chosen = lazy_greedy(2, evaluate, commit, eta=0.0, budget=1)
        assert [c for c, _, _ in chosen] == [1]
        assert chosen[0][1] == pytest.approx(13.0)

    def test_approximation_bound(self):
        """Greedy reaches (1 - 1/e) of the enumerated optimum"""
        rng = np.random.default_rng(42)
        for _ in range(200):
            n_items = int(rng.integers(4, 16))
            weights = {i: float(w) for i, w in enumerate(rng.random(n_items) * 10)}
            n_cand = int(rng.integers(1, 13))
            budget = int(rng.integers(1, 5))
            sets = [set(rng.choice(n_items, size=int(rng.integers(1, n_items + 1)), replace=False).tolist())
                    for _ in range(n_cand)]
            evaluate, commit = coverage_oracle(sets, weights)
            chosen = lazy_greedy(n_cand, evaluate, commit, eta=0.0, budget=budget)
            greedy_value = sum(score for _, score, _ in chosen)
            best = 0.0
            for size in range(1, min(budget, n_cand) + 1):
                for combo in itertools.combinations(range(n_cand), size):
                    union = set().union(*(sets[c] for c in combo))
                    best = max(best, sum(weights[i] for i in union))
            assert greedy_value >= (1.0 - 1.0 / math.e) * best - 1e-9

    def test_scores_non_increasing(self):
        rng = np.random.default_rng(3)
        weights = {i: float(w) for i, w in enumerate(rng.random(30))}
        sets = [set(rng.choice(30, size=8, replace=False).tolist()) for _ in range(12)]
        evaluate, commit = coverage_oracle(sets, weights)
        scores = [s for _, s, _ in lazy_greedy(12, evaluate, commit, eta=0.0, budget=6)]
        assert all(a >= b - 1e-12 for a, b in zip(scores, scores[1:]))

    def test_threshold_stops(self):
        weights = {0: 20.0, 1: 3.0}
        evaluate, commit = coverage_oracle([{0}, {1}], weights)
        chosen = lazy_greedy(2, evaluate, commit, eta=10.0, budget=5)
        assert [c for c, _, _ in chosen] == [0]

    def test_siblings_reexamined(self):
        """A sibling above eta is taken right after its partner"""
        weights = {0: 30.0, 1: 12.0, 2: 25.0}
        evaluate, commit = coverage_oracle([{0}, {1}, {2}], weights)
        chosen = lazy_greedy(3, evaluate, commit, eta=10.0, budget=3, siblings=lambda c: [1] if c == 0 else [])
        assert [c for c, _, _ in chosen] == [0, 1, 2]


class TestTargetViewpoints:
    """Greedy viewpoint extraction on a half-scanned slab"""

    @pytest.fixture
    def half_scanned(self):
        state = MapState.create(np.zeros(3), np.array([4.0, 2.0, 1.0]), MappingConfig())
        observe(state, within(state, [0, 0, 0], [2, 2, 1]), 0.1)
        snapshot = capture(state)
        lattice = RegionLattice.from_bounds(state.bounds_min, state.bounds_max, 1.0)
        return snapshot, lattice

    def test_empty_pool(self, half_scanned):
        snapshot, lattice = half_scanned
        pool = UncertaintyPool.build(snapshot, np.zeros(snapshot.grid.size, dtype=bool))
        assert select_target_viewpoints(snapshot, lattice, [1], pool, LocalPlanConfig(), CameraConfig()) == []

    def test_viewpoints_face_the_unknown(self, half_scanned):
        snapshot, lattice = half_scanned
        cfg = LocalPlanConfig(orientations_per_pos=8, top_k=40, max_viewpoints=4)
        pool = UncertaintyPool.build(snapshot, snapshot.high_u & snapshot.in_bounds)
        viewpoints = select_target_viewpoints(snapshot, lattice, local_domain(lattice, 1), pool, cfg, CameraConfig())
        assert 1 <= len(viewpoints) <= 4
        covered = [set(vp.covered.tolist()) for vp in viewpoints]
        for a, b in itertools.combinations(covered, 2):
            assert not a & b
        for vp in viewpoints:
            assert vp.score > cfg.eta
            assert snapshot.is_traversable(vp.position[None, :], optimistic=False)[0]
            assert np.linalg.norm(vp.quaternion) == pytest.approx(1.0, abs=1e-9)
            assert vp.region in local_domain(lattice, 1)
            assert np.all(snapshot.high_u[vp.covered])
        assert [vp.id for vp in viewpoints] == list(range(len(viewpoints)))


class TestLocalGoal:
    """Goal selection rule"""

    def test_goal_inside_domain(self):
        graph = line_graph(5)
        agent = Pose.looking([1.5, 0.5, 0.5], [1.0, 0.0, 0.0])
        goal = select_local_goal(2, graph, [1, 0, 2], [], agent)
        np.testing.assert_allclose(goal.position, graph.anchors[2])
        np.testing.assert_allclose(goal.pose.forward(), [1.0, 0.0, 0.0], atol=1e-9)

    def test_nearest_region_then_score(self):
        """Regions 3 m and 5 m from the goal: best viewpoint of the nearer one"""
        graph = line_graph(8)
        vps = [
            Viewpoint(np.array([2.5, 0.5, 0.5]), np.array([1.0, 0, 0, 0]), score=100.0, id=0, region=2),
            Viewpoint(np.array([4.5, 0.5, 0.5]), np.array([1.0, 0, 0, 0]), score=5.0, id=1, region=4),
            Viewpoint(np.array([4.4, 0.5, 0.5]), np.array([1.0, 0, 0, 0]), score=7.0, id=2, region=4),
        ]
        agent = Pose.looking([3.5, 0.5, 0.5], [1.0, 0.0, 0.0])
        assert select_local_goal(7, graph, [3, 2, 4], vps, agent).id == 2

    def test_equal_scores_lower_id(self):
        graph = line_graph(8)
        vps = [
            Viewpoint(np.array([4.5, 0.5, 0.5]), np.array([1.0, 0, 0, 0]), score=7.0, id=3, region=4),
            Viewpoint(np.array([4.4, 0.5, 0.5]), np.array([1.0, 0, 0, 0]), score=7.0, id=1, region=4),
        ]
        agent = Pose.looking([3.5, 0.5, 0.5], [1.0, 0.0, 0.0])
        assert select_local_goal(7, graph, [3, 2, 4], vps, agent).id == 1

    def test_no_goal(self):
        graph = line_graph(8)
        agent = Pose.looking([3.5, 0.5, 0.5], [1.0, 0.0, 0.0])
        with pytest.raises(NoGoalError):
            select_local_goal(7, graph, [3, 2, 4], [], agent)


class TestViewpointTour:
    """Start-to-goal tours over viewpoints"""

    @pytest.fixture
    def open_snapshot(self):
        return capture(open_state([6.0, 4.0, 3.0]))

    def random_viewpoints(self, rng, n):
        vps = []
        for i in range(n):
            pose = Pose.looking(rng.uniform([1, 1, 1], [5, 3, 2]), rng.normal(size=3))
            vps.append(Viewpoint(pose.position, pose.quaternion, score=1.0, id=i))
        return vps

    def test_no_intermediate(self, open_snapshot):
        start = Pose.looking([1.0, 2.0, 1.5], [1, 0, 0])
        goal = Viewpoint(np.array([4.0, 2.0, 1.5]), start.quaternion)
        graph = build_viewpoint_graph(start, [], goal, open_snapshot, LocalPlanConfig())
        assert plan_viewpoint_tour(graph) == [0, 1]

    def test_collinear_single_viewpoint(self, open_snapshot):
        start = Pose.looking([1.0, 2.0, 1.5], [1, 0, 0])
        vp = Viewpoint(np.array([2.5, 2.0, 1.5]), start.quaternion, score=20.0, id=0)
        goal = Viewpoint(np.array([4.0, 2.0, 1.5]), start.quaternion)
        graph = build_viewpoint_graph(start, [vp], goal, open_snapshot, LocalPlanConfig())
        order = plan_viewpoint_tour(graph)
        assert order == [0, 1, 2]
        poses = tour_poses(graph, order)
        np.testing.assert_allclose([p.position[0] for p in poses], [1.0, 2.5, 4.0])

    def test_matches_exact_optimum(self, open_snapshot):
        """Four viewpoints between fixed ends"""
        rng = np.random.default_rng(8)
        for _ in range(5):
            vps = self.random_viewpoints(rng, 5)
            start = Pose.looking([1.0, 2.0, 1.5], [1, 0, 0])
            graph = build_viewpoint_graph(start, vps[:4], vps[4], open_snapshot, LocalPlanConfig())
            order = plan_viewpoint_tour(graph)
            assert order[0] == 0 and order[-1] == 5
            exact, _ = held_karp_path(graph.cost, 0, end=5)
            assert tour_cost(graph.cost, order) == pytest.approx(exact)

    def test_large_tour_keeps_ends(self, open_snapshot):
        """Beyond the exact limit the dummy-node cycle still pins both ends"""
        rng = np.random.default_rng(9)
        vps = self.random_viewpoints(rng, 12)
        start = Pose.looking([1.0, 2.0, 1.5], [1, 0, 0])
        graph = build_viewpoint_graph(start, vps[:11], vps[11], open_snapshot, LocalPlanConfig())
        order = plan_viewpoint_tour(graph)
        assert order[0] == 0 and order[-1] == 12
        assert sorted(order) == list(range(13))


class TestTrajectory:
    """Time-parameterized pose interpolation"""

    def test_straight_leg(self):
        """1 m at 1 m/s sampled every 0.1 s"""
        a = Pose.looking([0.0, 0.0, 1.0], [1, 0, 0])
        b = Pose.looking([1.0, 0.0, 1.0], [1, 0, 0])
        traj = interpolate_trajectory([a, b], LocalPlanConfig())
        assert len(traj) == 11
        np.testing.assert_allclose(traj.times, np.arange(11) * 0.1, atol=1e-12)
        assert np.array_equal(traj.positions[0], a.position)
        assert np.array_equal(traj.positions[-1], b.position)
        assert np.array_equal(traj.quaternions[-1], b.quaternion)

    def test_yaw_in_place(self):
        """90 degrees at 1.57 rad/s, 45 degrees at the midpoint"""
        a = Pose.looking([1.0, 1.0, 1.0], [1, 0, 0])
        b = Pose.looking([1.0, 1.0, 1.0], [0, 1, 0])
        traj = interpolate_trajectory([a, b], LocalPlanConfig())
        assert traj.duration == pytest.approx(1.0, abs=1e-3)
        mid = traj.pose_at(traj.duration / 2)
        np.testing.assert_allclose(mid.forward(), [math.sqrt(0.5), math.sqrt(0.5), 0.0], atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(traj.quaternions, axis=1), 1.0, atol=1e-9)
        assert np.all(np.diff(traj.times) > 0.0)

    def test_coincident_poses_skipped(self):
        a = Pose.looking([0.0, 0.0, 1.0], [1, 0, 0])
        b = Pose.looking([0.5, 0.0, 1.0], [1, 0, 0])
        once = interpolate_trajectory([a, b], LocalPlanConfig())
        twice = interpolate_trajectory([a, a, b], LocalPlanConfig())
        assert np.array_equal(once.times, twice.times)

    def test_needs_two_poses(self):
        with pytest.raises(DomainError):
            interpolate_trajectory([Pose.looking([0, 0, 1.0], [1, 0, 0])], LocalPlanConfig())

    def test_csv_export(self, tmp_path):
        a = Pose.looking([0.0, 0.0, 1.0], [1, 0, 0])
        b = Pose.looking([0.3, 0.0, 1.0], [1, 0, 0])
        path = interpolate_trajectory([a, b], LocalPlanConfig()).write_csv(tmp_path / "trajectory.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "t,px,py,pz,qw,qx,qy,qz"
        assert len(lines) == 1 + 4


@pytest.fixture(scope="module")
def scanned_two_rooms():
    """Two-room scene fused (no training) from 360-degree sweeps in both rooms and the doorway."""
    scene = load_scene(SCENES_DIR / "two_rooms.json")
    cfg = MappingConfig()
    state = MapState.create(scene.bounds_min, scene.bounds_max, cfg)
    for center in ([2.0, 2.0, 1.2], [6.0, 2.0, 1.2], [3.2, 2.0, 1.2], [4.8, 2.0, 1.2], [4.0, 2.0, 1.2]):
        for yaw in np.arange(8) * np.pi / 4:
            pose = Pose.looking(center, [np.cos(yaw), np.sin(yaw), 0.0])
            fuse_depth(state, render_depth(scene, pose, CameraConfig()))
    return scene, state


class TestEscape:
    """Region-graph fallback with voxel detours"""

    def test_straight_corridor(self):
        """Passes each region anchor in order"""
        state = open_state([4.0, 1.0, 1.0])
        graph = region_graph(state)
        start = Pose.looking([0.5, 0.5, 0.5], [1, 0, 0])
        traj = escape_plan(capture(state), graph, start, 3, LocalPlanConfig())
        assert np.all(np.diff(traj.positions[:, 0]) >= -1e-9)
        np.testing.assert_allclose(traj.positions[-1], graph.anchors[3])

    def test_sealed_goal(self):
        state = open_state([4.0, 2.0, 1.0])
        observe(state, within(state, [1.9, 0, 0], [2.1, 2, 1]), -0.05)
        graph = region_graph(state)
        start = Pose.looking([0.5, 0.5, 0.5], [1, 0, 0])
        with pytest.raises(UnreachableGoalError) as info:
            escape_plan(capture(state), graph, start, 3, LocalPlanConfig())
        assert info.value.goal_region == 3

    def test_doorway_detour(self, scanned_two_rooms):
        """Reaches the next room through the door without touching a wall"""
        scene, state = scanned_two_rooms
        snapshot = capture(state)
        graph = region_graph(state)
        start = Pose.looking([3.0, 2.0, 1.2], [1, 0, 0])
        goal = int(graph.lattice.locate(np.array([5.5, 2.0, 1.2]))[0])
        traj = escape_plan(snapshot, graph, start, goal, LocalPlanConfig())
        assert int(graph.lattice.locate(traj.positions[-1])[0]) == goal
        assert np.min(gt_sdf(scene, traj.positions)) >= R_ROBOT
        assert np.all(np.diff(traj.times) > 0.0)
