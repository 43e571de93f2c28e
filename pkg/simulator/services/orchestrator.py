"""
Episode orchestration: the sense / map / plan loop, baseline modes and run artifacts

Each step executes one trajectory sample: render a depth frame at the pose,
fuse it, and train the evidence grids. Planning happens between steps and
costs no simulated time.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt
from tqdm import tqdm

from models.errors import DomainError, EmptySampleError, NoGoalError, UnreachableGoalError
from models.schema import EpisodeReport, EvalReport, PlannerMode, RunConfig
from services.global_planner import (
    Region,
    RegionGraph,
    RegionLattice,
    RegionState,
    build_connectivity,
    classify_regions,
    decompose_regions,
    frontier_mask,
    open_component,
    plan_global_tour,
)
from services.local_planner import (
    TRAJECTORY_HEADER,
    Trajectory,
    UncertaintyPool,
    Viewpoint,
    cone_half_angle,
    escape_plan,
    interpolate_trajectory,
    local_domain,
    plan_local_trajectory,
    reachable_targets,
    select_local_goal,
    select_target_viewpoints,
    within_reach,
    write_viewpoints_csv,
)
from services.mapping import (
    MapSnapshot,
    MapState,
    fuse_depth,
    resolve_u_threshold,
    sample_training_points,
    uncertainty_step,
)
from services.metrics import (
    Evaluation,
    evaluate_map,
    export_point_clouds,
    SURFACE_SUBDIVISIONS,
    extract_surface_points,
    write_metrics_csv,
    write_sparsification_csv,
)
from services.world import Pose, Scene, gt_sdf, gt_surface_samples, load_scene, look_rotation, render_depth
from utils.io import atomic_write_text, write_csv
from utils.logger import add_file_handler

logger = logging.getLogger("reconsim.orchestrator")

RANDOM_GOAL_TRIES = 64
LOSS_HEADER = ["step", "loss", "mean_evidence"]
SNAPSHOT_DIR = "snapshots"


@dataclass
class EpisodeState:
    """Mutable state of one episode; the cursor indexes the next trajectory sample"""
    map: MapState
    pose: Pose
    graph: Optional[RegionGraph] = None
    regions: Dict[int, Region] = field(default_factory=dict)
    tour: List[int] = field(default_factory=list)
    global_goal: Optional[int] = None
    trajectory: Optional[Trajectory] = None
    cursor: int = 0
    step: int = 0
    viewpoints: List[Viewpoint] = field(default_factory=list)
    dropped: Set[int] = field(default_factory=set)
    blocked: int = 0
    pending_turn: Optional[np.ndarray] = None
    events: List[Tuple[int, str, str]] = field(default_factory=list)

    @property
    def trajectory_done(self) -> bool:
        return self.trajectory is None or self.cursor >= len(self.trajectory)


class EpisodeRunner:
    """Runs one exploration episode and writes its artifacts to cfg.output_dir"""

    def __init__(self, cfg: RunConfig, scene: Optional[Scene] = None):
        self.cfg = cfg
        r_robot = cfg.planner.r_robot
        self.scene = load_scene(cfg.scene, r_robot) if scene is None else scene.validate(r_robot)
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.u_threshold = resolve_u_threshold(cfg.planner, cfg.mapping)
        self.gt_points = gt_surface_samples(self.scene, cfg.gt_spacing)
        spawn = self.scene.spawn
        if spawn is None:
            spawn = Pose.looking(0.5 * (self.scene.bounds_min + self.scene.bounds_max), [1.0, 0.0, 0.0])
        state = MapState.create(self.scene.bounds_min, self.scene.bounds_max, cfg.mapping)
        self.state = EpisodeState(map=state, pose=spawn)
        self.output_dir = Path(cfg.output_dir)
        self.reports: List[EvalReport] = []
        self.evaluations: List[Evaluation] = []
        self.loss_rows: List[tuple] = []
        self.pose_rows: List[tuple] = []

    # ==================== EPISODE ====================

    def run(self) -> EpisodeReport:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        root = logging.getLogger("reconsim")
        handler = add_file_handler(root, self.output_dir / "events.log")
        try:
            atomic_write_text(self.output_dir / "config.json", self.cfg.model_dump_json(indent=2))
            logger.info(
                f"🚀 Episode on '{self.scene.name}': mode={self.cfg.mode.value}, "
                f"budget={self.cfg.budget}, seed={self.cfg.rng_seed}"
            )
            status = self._loop()
            final = self.evaluate()
            report = EpisodeReport(
                status=status,
                steps=self.state.step,
                final=final,
                dropped_regions=sorted(self.state.dropped),
                blocked_events=self.state.blocked,
            )
            self._write_artifacts(report)
            logger.info(
                f"✅ Episode {status} after {report.steps} steps: "
                f"completion ratio {final.completion_ratio_pct:.2f}%, AUSE {final.ause:.4f}"
            )
            return report
        finally:
            root.removeHandler(handler)
            handler.close()

    def _loop(self) -> str:
        progress = tqdm(
            total=self.cfg.budget, desc=f"{self.scene.name}/{self.cfg.mode.value}", disable=not self.cfg.progress
        )
        try:
            self._observe(self.state.pose)
            progress.update(1)
            while self.state.step < self.cfg.budget:
                if self.state.trajectory_done:
                    try:
                        trajectory = self.replan()
                    except UnreachableGoalError as exc:
                        self._event("failed", f"replanning gave up: {exc}")
                        return "failed"
                    if trajectory is None:
                        return "complete"
                    self.state.trajectory = trajectory
                    self.state.cursor = 1
                self.advance()
                progress.update(1)
            return "budget"
        finally:
            progress.close()

    def _event(self, kind: str, message: str) -> None:
        self.state.events.append((self.state.step, kind, message))
        level = logging.WARNING if kind in ("blocked", "dropped", "failed") else logging.INFO
        logger.log(level, f"[step {self.state.step}] {kind}: {message}")

    # ==================== MOTION AND SENSING ====================

    def admissible(self, pose: Pose) -> bool:
        return float(gt_sdf(self.scene, pose.position)) >= self.cfg.planner.r_robot

    def advance(self) -> Pose:
        """
        Move to the next trajectory sample and observe from there.

        A sample closer than r_robot to the true geometry is refused: the agent
        stays put and the trajectory is abandoned. When the blocked motion lies
        outside the view cone the next plan starts with a turn toward it.
        """
        s = self.state
        if s.trajectory is not None and s.cursor < len(s.trajectory):
            target = s.trajectory.pose(s.cursor)
            s.cursor += 1
        else:
            target = s.pose
        if not self.admissible(target):
            s.blocked += 1
            motion = target.position - s.pose.position
            direction = motion if np.linalg.norm(motion) > 1e-9 else target.forward()
            if not self._in_view(direction):
                s.pending_turn = direction
            s.trajectory = None
            self._event("blocked", f"refused pose {np.round(target.position, 3).tolist()}")
            target = s.pose
        s.pose = target
        self._observe(target)
        return target

    def _in_view(self, direction: np.ndarray) -> bool:
        unit = direction / np.linalg.norm(direction)
        angle = math.acos(float(np.clip(unit @ self.state.pose.forward(), -1.0, 1.0)))
        return angle <= cone_half_angle(self.cfg.local, self.cfg.camera)

    def _observe(self, pose: Pose) -> None:
        s = self.state
        frame = render_depth(self.scene, pose, self.cfg.camera)
        fuse_depth(s.map, frame)
        losses, evidences = [], []
        for _ in range(self.cfg.mapping.grad_steps_per_frame):
            try:
                samples = sample_training_points(frame, self.cfg.mapping, self.rng)
            except EmptySampleError:
                logger.debug(f"Frame at step {s.step} has no valid depth")
                break
            loss, evidence = uncertainty_step(s.map, samples, self.cfg.loss)
            losses.append(loss)
            evidences.append(evidence)
        s.step += 1
        finite = [e for e in evidences if np.isfinite(e)]
        self.loss_rows.append((
            s.step,
            float(np.mean(losses)) if losses else float("nan"),
            float(np.mean(finite)) if finite else float("nan"),
        ))
        self.pose_rows.append(((s.step - 1) * self.cfg.local.traj_dt, *pose.position, *pose.quaternion))
        if s.step % self.cfg.eval_cadence == 0:
            self.evaluate()

    # ==================== PLANNING ====================

    def replan(self) -> Optional[Trajectory]:
        """
        Plan the next trajectory, dropping unreachable goals between attempts.

        Returns None when the episode is complete. Raises UnreachableGoalError
        once max_replan_attempts consecutive attempts have failed.
        """
        retrying = Retrying(
            retry=retry_if_exception_type(UnreachableGoalError),
            stop=stop_after_attempt(self.cfg.max_replan_attempts),
            reraise=True,
        )
        for attempt in retrying:
            with attempt:
                try:
                    return self._plan_once()
                except UnreachableGoalError as exc:
                    self._drop_goal(exc)
                    raise
        return None

    def _drop_goal(self, exc: UnreachableGoalError) -> None:
        s = self.state
        rid = exc.goal_region
        if rid is not None and rid not in s.dropped:
            s.dropped.add(rid)
            self._event("dropped", f"region {rid}: {exc}")
        s.global_goal = None
        s.graph = None

    def _plan_once(self) -> Optional[Trajectory]:
        s = self.state
        planner = self.cfg.planner
        position = s.pose.position
        snapshot = MapSnapshot.capture(s.map, self.u_threshold, planner.r_robot)
        lattice, regions = decompose_regions(self.scene.bounds_min, self.scene.bounds_max, planner, snapshot)
        regions = classify_regions(regions, snapshot, lattice, planner, position, s.regions)
        s.regions = {r.id: r for r in regions}
        open_ids = [r.id for r in regions if r.state != RegionState.EXPLORED and r.id not in s.dropped]
        if not open_ids:
            self._event("complete", "no exploring or unexplored region left")
            return None

        if s.pending_turn is not None:
            return self._turn_toward(s.pending_turn)
        if self.cfg.mode == PlannerMode.RANDOM_WALK:
            return self._random_walk(snapshot)

        if self._needs_global_plan():
            self._plan_global(regions, snapshot, lattice)
        graph = s.graph
        current = graph.locate(position)
        if current is None:
            raise UnreachableGoalError("no anchored region to plan from")

        domain = local_domain(lattice, current)
        pool = self._target_pool(snapshot, position, lattice, domain)
        viewpoints = select_target_viewpoints(snapshot, lattice, domain, pool, self.cfg.local, self.cfg.camera)
        s.viewpoints = viewpoints
        try:
            trajectory, goal, order = self._plan_local(snapshot, graph, domain, viewpoints)
        except NoGoalError as exc:
            return self._escape(snapshot, graph, current, open_ids, str(exc))
        self._event(
            "local",
            f"{len(order) - 2} viewpoints in regions {sorted(set(domain))}, "
            f"goal {np.round(goal.position, 2).tolist()}, {trajectory.duration:.1f} s",
        )
        return trajectory

    def _plan_local(
        self, snapshot: MapSnapshot, graph: RegionGraph, domain: Sequence[int], viewpoints: Sequence[Viewpoint]
    ) -> Tuple[Trajectory, Viewpoint, List[int]]:
        """
        Viewpoint tour toward the local goal.

        A viewpoint goal that cannot be reached is discarded and the next best
        one tried; an unreachable global goal propagates so its region is dropped.
        """
        s = self.state
        remaining = list(viewpoints)
        while True:
            goal = select_local_goal(s.global_goal, graph, domain, remaining, s.pose)
            try:
                trajectory, order = plan_local_trajectory(s.pose, remaining, goal, snapshot, self.cfg.local)
            except UnreachableGoalError:
                if goal.id < 0:
                    raise
                logger.debug(f"Viewpoint {goal.id} cannot be reached, trying the next local goal")
                remaining = [vp for vp in remaining if vp.id != goal.id]
                continue
            if len(trajectory) < 2:
                raise NoGoalError("local goal coincides with the current pose")
            return trajectory, goal, order

    def _escape(
        self, snapshot: MapSnapshot, graph: RegionGraph, current: int, open_ids: Sequence[int], reason: str
    ) -> Optional[Trajectory]:
        """
        Leave a domain without informative viewpoints.

        The current region, if still open, is exhausted and dropped. The agent
        heads for the global goal when one remains, else the nearest open region.
        """
        s = self.state
        if current in open_ids and current not in s.dropped:
            s.dropped.add(current)
            self._event("dropped", f"region {current}: no informative viewpoint left")
            if s.global_goal == current:
                s.global_goal = None
        target = s.global_goal
        if target is None:
            target = self._nearest_open_region(graph, current, [rid for rid in open_ids if rid not in s.dropped])
        if target is None:
            self._event("complete", f"open regions {open_ids} are out of reach")
            return None
        self._event("escape", f"{reason}; heading from region {current} to region {target}")
        return escape_plan(snapshot, graph, s.pose, target, self.cfg.local)

    def _needs_global_plan(self) -> bool:
        """A global goal counts as reached once its region stops being exploring."""
        s = self.state
        if s.graph is None or s.global_goal is None or s.global_goal in s.dropped:
            return True
        region = s.regions.get(s.global_goal)
        return region is None or region.state != RegionState.EXPLORING

    def _plan_global(self, regions: Sequence[Region], snapshot: MapSnapshot, lattice: RegionLattice) -> None:
        s = self.state
        planner = self.cfg.planner
        s.graph = build_connectivity(regions, snapshot, lattice, planner)
        current = s.graph.locate(s.pose.position)
        if current is None:
            raise UnreachableGoalError("agent is outside every anchored region")
        tour = plan_global_tour(s.graph, current, planner, exclude=s.dropped)
        s.tour = tour.regions
        s.global_goal = tour.next_goal
        self._event(
            "global",
            f"{len(s.graph.anchors)} regions, {len(s.graph.edges)} edges, tour {tour.regions}, goal {s.global_goal}",
        )

    def _target_pool(
        self, snapshot: MapSnapshot, position: np.ndarray, lattice: RegionLattice, domain: Sequence[int]
    ) -> UncertaintyPool:
        """Targets near the agent's free space and within sensing range of the domain, ties shuffled."""
        free = open_component(snapshot, position)
        reach = within_reach(snapshot, lattice, domain, self.cfg.local)
        limit = self.cfg.local.pool_limit
        if self.cfg.mode == PlannerMode.FRONTIER_ONLY:
            relevant = snapshot.high_u & snapshot.in_bounds & free
            frontier = frontier_mask(snapshot, self.cfg.planner, relevant) & reach
            return UncertaintyPool.build(
                snapshot, frontier, values=np.ones(snapshot.grid.size), limit=limit, rng=self.rng
            )
        return UncertaintyPool.build(snapshot, reachable_targets(snapshot, free) & reach, limit=limit, rng=self.rng)

    def _nearest_open_region(self, graph: RegionGraph, current: int, open_ids: Sequence[int]) -> Optional[int]:
        candidates = [rid for rid in open_ids if rid in graph.anchors]
        if not candidates:
            return None
        dist = graph.distance_matrix([current] + candidates)[0, 1:]
        reachable = [(d, rid) for d, rid in zip(dist, candidates) if np.isfinite(d)]
        return min(reachable)[1] if reachable else None

    def _turn_toward(self, direction: np.ndarray) -> Trajectory:
        s = self.state
        s.pending_turn = None
        turned = Pose(s.pose.position.copy(), look_rotation(direction))
        self._event("turn", f"facing {np.round(direction / np.linalg.norm(direction), 2).tolist()}")
        return interpolate_trajectory([s.pose, turned], self.cfg.local)

    def _random_walk(self, snapshot: MapSnapshot) -> Trajectory:
        """Uniformly random traversable goal reachable by a straight leg."""
        s = self.state
        candidates = np.flatnonzero(snapshot.traversable)
        for _ in range(RANDOM_GOAL_TRIES if candidates.size else 0):
            target = snapshot.grid.voxel_center(int(candidates[self.rng.integers(candidates.size)]))
            if np.linalg.norm(target - s.pose.position) < snapshot.grid.resolution:
                continue
            if snapshot.segment_clear(s.pose.position, target):
                yaw = self.rng.uniform(0.0, 2.0 * math.pi)
                goal = Pose.looking(target, [math.cos(yaw), math.sin(yaw), 0.0])
                return interpolate_trajectory([s.pose, goal], self.cfg.local)
        yaw = self.rng.uniform(0.0, 2.0 * math.pi)
        return self._turn_toward(np.array([math.cos(yaw), math.sin(yaw), 0.0]))

    # ==================== EVALUATION AND ARTIFACTS ====================

    def evaluate(self) -> EvalReport:
        """Evaluate the map at the current step (once per step) and snapshot it."""
        s = self.state
        if self.reports and self.reports[-1].step == s.step:
            return self.reports[-1]
        evaluation = evaluate_map(
            self.scene, s.map, s.step, self.cfg.gt_spacing, self.cfg.completion_threshold, self.gt_points
        )
        self.evaluations.append(evaluation)
        self.reports.append(evaluation.report)
        if self.cfg.save_snapshots:
            s.map.save(self.output_dir / SNAPSHOT_DIR, snapshot_name(s.step))
        return evaluation.report

    def _write_artifacts(self, report: EpisodeReport) -> None:
        out = self.output_dir
        write_metrics_csv(out / "metrics.csv", self.reports)
        write_sparsification_csv(out / "sparsification.csv", self.evaluations)
        write_csv(out / "loss.csv", LOSS_HEADER, self.loss_rows)
        write_csv(out / "trajectory.csv", TRAJECTORY_HEADER, self.pose_rows)
        write_viewpoints_csv(out / "viewpoints.csv", self.state.viewpoints)
        if self.state.graph is not None:
            self.state.graph.write_csv(out)
        if self.evaluations:
            last = self.evaluations[-1]
            export_point_clouds(out, last.recon, last.gt)
        atomic_write_text(out / "report.json", report.model_dump_json(indent=2))


def snapshot_name(step: int) -> str:
    return f"step_{step:06d}"


def run_episode(cfg: RunConfig, scene: Optional[Scene] = None) -> EpisodeReport:
    return EpisodeRunner(cfg, scene).run()


# ==================== RUN DIRECTORIES ====================

def load_run_config(run_dir: Union[str, Path]) -> RunConfig:
    path = Path(run_dir) / "config.json"
    if not path.exists():
        raise DomainError(f"{run_dir} has no config.json")
    return RunConfig.model_validate_json(path.read_text(encoding="utf-8"))


def list_snapshots(run_dir: Union[str, Path]) -> List[str]:
    directory = Path(run_dir) / SNAPSHOT_DIR
    names = sorted({p.name[: -len("_tsdf.grid")] for p in directory.glob("*_tsdf.grid")})
    if not names:
        raise DomainError(f"no map snapshots under {directory}")
    return names


def _load_snapshot(run_dir: Path, cfg: RunConfig, scene: Scene, name: str) -> MapState:
    return MapState.load(run_dir / SNAPSHOT_DIR, name, cfg.mapping, scene.bounds_min, scene.bounds_max)


def reevaluate_run(run_dir: Union[str, Path]) -> List[EvalReport]:
    """Recompute metrics for every saved snapshot and write eval_metrics.csv."""
    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    scene = load_scene(cfg.scene, cfg.planner.r_robot)
    gt = gt_surface_samples(scene, cfg.gt_spacing)
    reports = []
    for name in list_snapshots(run_dir):
        step = int(name.rsplit("_", 1)[-1])
        state = _load_snapshot(run_dir, cfg, scene, name)
        reports.append(evaluate_map(scene, state, step, cfg.gt_spacing, cfg.completion_threshold, gt).report)
    write_metrics_csv(run_dir / "eval_metrics.csv", reports)
    return reports


def export_run_pointcloud(run_dir: Union[str, Path]) -> Dict[str, Path]:
    """ASCII PLY of the last snapshot's surface points and of the ground-truth samples."""
    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    scene = load_scene(cfg.scene, cfg.planner.r_robot)
    state = _load_snapshot(run_dir, cfg, scene, list_snapshots(run_dir)[-1])
    recon = extract_surface_points(state.tsdf, state.weight, SURFACE_SUBDIVISIONS)
    return export_point_clouds(run_dir, recon, gt_surface_samples(scene, cfg.gt_spacing))
