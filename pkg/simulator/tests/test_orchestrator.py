"""
Integration tests for the episode loop, baselines, replanning and run directories
"""
import csv

import numpy as np
import pytest

from models.errors import DomainError, UnreachableGoalError
from models.schema import CameraConfig, LocalPlanConfig, MappingConfig, PlannerMode, RunConfig
from services import orchestrator
from services.local_planner import interpolate_trajectory, local_domain
from services.orchestrator import EpisodeRunner, export_run_pointcloud, list_snapshots, reevaluate_run, run_episode
from services.world import Pose, Scene, gt_sdf, load_scene
from tests.conftest import SCENES_DIR
from utils.io import read_ply


def fast_config(tmp_path, name: str = "run", **overrides) -> RunConfig:
    """Small camera and light training so an episode takes seconds."""
    base = dict(
        scene=str(SCENES_DIR / "single_room.json"),
        budget=25,
        eval_cadence=10,
        output_dir=str(tmp_path / name),
        progress=False,
        gt_spacing=0.2,
        camera=CameraConfig(width=48, height=36, focal=24.0),
        mapping=MappingConfig(rays_per_step=128, samples_per_ray=8, grad_steps_per_frame=2, optimizer="adam"),
        local=LocalPlanConfig(orientations_per_pos=8, top_k=40, max_viewpoints=4),
    )
    base.update(overrides)
    return RunConfig(**base)


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


class TestEpisode:
    """Full-mode episodes on the single room"""

    def test_artifacts_written(self, tmp_path):
        cfg = fast_config(tmp_path)
        report = run_episode(cfg)
        out = tmp_path / "run"
        assert report.status in ("complete", "budget")
        assert 1 <= report.steps <= cfg.budget
        for name in ("config.json", "metrics.csv", "loss.csv", "trajectory.csv", "events.log",
                     "sparsification.csv", "viewpoints.csv", "report.json", "recon.ply", "gt.ply"):
            assert (out / name).exists(), name
        assert (out / "snapshots" / "step_000010_tsdf.grid").exists()

        metrics = read_rows(out / "metrics.csv")
        assert int(metrics[-1]["step"]) == report.steps
        assert [int(row["step"]) for row in metrics[:2]] == [10, 20]
        assert len(read_rows(out / "trajectory.csv")) == report.steps
        assert len(read_rows(out / "loss.csv")) == report.steps
        assert RunConfig.model_validate_json((out / "config.json").read_text()) == cfg

    def test_agent_stays_clear(self, tmp_path):
        """Every executed pose keeps r_robot from the true geometry"""
        cfg = fast_config(tmp_path)
        run_episode(cfg)
        scene = load_scene(cfg.scene)
        rows = read_rows(tmp_path / "run" / "trajectory.csv")
        positions = np.array([[float(r["px"]), float(r["py"]), float(r["pz"])] for r in rows])
        assert np.min(gt_sdf(scene, positions)) >= cfg.planner.r_robot

    def test_map_improves(self, tmp_path):
        cfg = fast_config(tmp_path)
        run_episode(cfg)
        metrics = read_rows(tmp_path / "run" / "metrics.csv")
        assert float(metrics[-1]["completion_ratio_pct"]) > 0.0

    def test_deterministic(self, tmp_path):
        """Same config and seed give byte-identical metrics and trajectories"""
        run_episode(fast_config(tmp_path, "a", budget=15))
        run_episode(fast_config(tmp_path, "b", budget=15))
        for name in ("metrics.csv", "trajectory.csv", "loss.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.parametrize("mode", [PlannerMode.FRONTIER_ONLY, PlannerMode.RANDOM_WALK])
    def test_baseline_modes(self, tmp_path, mode):
        cfg = fast_config(tmp_path, mode=mode, budget=15)
        report = run_episode(cfg)
        assert report.status in ("complete", "budget")
        assert report.steps <= 15
        rows = read_rows(tmp_path / "run" / "trajectory.csv")
        positions = np.array([[float(r["px"]), float(r["py"]), float(r["pz"])] for r in rows])
        assert np.min(gt_sdf(load_scene(cfg.scene), positions)) >= cfg.planner.r_robot


class TestReplanning:
    """Retries, dropped goals and failure status"""

    def test_gives_up_after_max_attempts(self, tmp_path):
        runner = EpisodeRunner(fast_config(tmp_path))
        calls = []

        def always_unreachable():
            calls.append(1)
            raise UnreachableGoalError("sealed", 7)

        runner._plan_once = always_unreachable
        report = runner.run()
        assert report.status == "failed"
        assert len(calls) == runner.cfg.max_replan_attempts
        assert report.dropped_regions == [7]
        assert report.steps == 1

    def test_recovers_after_one_drop(self, tmp_path):
        runner = EpisodeRunner(fast_config(tmp_path, budget=8))
        original = runner._plan_once
        calls = []

        def flaky():
            calls.append(1)
            if len(calls) == 1:
                raise UnreachableGoalError("blocked doorway", 5)
            return original()

        runner._plan_once = flaky
        report = runner.run()
        assert report.status != "failed"
        assert 5 in report.dropped_regions
        assert any(kind == "dropped" for _, kind, _ in runner.state.events)


class TestPlanningFallbacks:
    """Local planning degrades to other goals instead of dropping regions"""

    @pytest.fixture
    def started(self, tmp_path):
        runner = EpisodeRunner(fast_config(tmp_path))
        runner._observe(runner.state.pose)
        return runner

    @staticmethod
    def kinds(runner):
        return [kind for _, kind, _ in runner.state.events]

    def test_first_plan_keeps_spawn_region(self, started):
        """Fused free space after one frame already yields a plan"""
        trajectory = started.replan()
        assert trajectory is not None and len(trajectory) >= 2
        assert not started.state.dropped
        assert "dropped" not in self.kinds(started)

    def test_unreachable_viewpoint_goal_tries_next(self, started, monkeypatch):
        original = orchestrator.plan_local_trajectory
        refused = []

        def refuse_first_viewpoint(start, viewpoints, goal, snapshot, cfg):
            if goal.id >= 0 and not refused:
                refused.append(goal.id)
                raise UnreachableGoalError("viewpoint boxed in", goal.region)
            assert goal.id not in refused
            assert all(vp.id not in refused for vp in viewpoints)
            return original(start, viewpoints, goal, snapshot, cfg)

        plan_global = started._plan_global

        def without_global_goal(*args):
            plan_global(*args)
            started.state.global_goal = None

        monkeypatch.setattr(orchestrator, "plan_local_trajectory", refuse_first_viewpoint)
        monkeypatch.setattr(started, "_plan_global", without_global_goal)
        trajectory = started.replan()
        assert refused
        assert trajectory is not None
        assert not started.state.dropped

    def test_no_viewpoint_escapes_toward_global_goal(self, started, monkeypatch):
        started.replan()
        graph = started.state.graph
        current = graph.locate(started.state.pose.position)
        goal = max(rid for rid in graph.anchors if rid not in local_domain(graph.lattice, current))
        started.state.global_goal = goal
        monkeypatch.setattr(orchestrator, "select_target_viewpoints", lambda *args: [])
        monkeypatch.setattr(started, "_needs_global_plan", lambda: False)
        trajectory = started.replan()
        assert trajectory is not None
        _, kind, message = started.state.events[-1]
        assert kind == "escape" and message.endswith(f"to region {goal}")
        assert started.state.global_goal == goal
        assert goal not in started.state.dropped

    def test_exhausted_goal_region_is_left(self, started, monkeypatch):
        """A global goal holding the agent but offering no viewpoint is dropped, then left"""
        started.replan()
        graph = started.state.graph
        current = graph.locate(started.state.pose.position)
        started.state.global_goal = current
        monkeypatch.setattr(orchestrator, "select_target_viewpoints", lambda *args: [])
        monkeypatch.setattr(started, "_needs_global_plan", lambda: False)
        trajectory = started.replan()
        assert trajectory is not None
        assert started.state.dropped == {current}
        assert started.state.global_goal is None
        assert self.kinds(started)[-2:] == ["dropped", "escape"]


class TestPhysicalGuard:
    """Motions into true geometry are refused"""

    @pytest.fixture
    def pillar_runner(self, tmp_path):
        scene = Scene(
            bounds_min=[0.0, 0.0, 0.0],
            bounds_max=[4.0, 4.0, 2.5],
            boxes=[[[2.5, 1.5, 0.0], [3.0, 2.5, 2.5]]],
            spawn=Pose.looking([1.0, 2.0, 1.2], [1.0, 0.0, 0.0]),
            name="pillar",
        )
        return EpisodeRunner(fast_config(tmp_path), scene)

    def test_blocked_motion(self, pillar_runner):
        runner = pillar_runner
        start = runner.state.pose
        runner.state.trajectory = interpolate_trajectory(
            [start, Pose.looking([3.5, 2.0, 1.2], [1.0, 0.0, 0.0])], runner.cfg.local
        )
        runner.state.cursor = 1
        while runner.state.trajectory is not None:
            runner.advance()
        assert runner.state.blocked == 1
        assert runner.state.pose.position[0] <= 2.3 + 1e-9
        assert runner.admissible(runner.state.pose)
        # the pillar is already in view, so no turn is spent on it
        assert runner.state.pending_turn is None
        assert runner.state.events[-1][1] == "blocked"

    def test_blocked_sideways_motion_turns(self, pillar_runner):
        runner = pillar_runner
        sideways = Pose.looking([2.2, 2.0, 1.2], [0.0, 1.0, 0.0])
        runner.state.pose = sideways
        runner.state.trajectory = interpolate_trajectory(
            [sideways, Pose.looking([3.5, 2.0, 1.2], [0.0, 1.0, 0.0])], runner.cfg.local
        )
        runner.state.cursor = 1
        while runner.state.trajectory is not None:
            runner.advance()
        assert runner.state.blocked == 1
        np.testing.assert_allclose(
            runner.state.pending_turn / np.linalg.norm(runner.state.pending_turn), [1.0, 0.0, 0.0], atol=1e-9
        )

    def test_next_plan_turns(self, pillar_runner):
        runner = pillar_runner
        runner.state.pending_turn = np.array([0.0, 1.0, 0.0])
        trajectory = runner.replan()
        assert runner.state.pending_turn is None
        np.testing.assert_allclose(trajectory.positions, np.broadcast_to(runner.state.pose.position, (len(trajectory), 3)))
        np.testing.assert_allclose(trajectory.pose(len(trajectory) - 1).forward(), [0.0, 1.0, 0.0], atol=1e-9)


class TestRunDirectory:
    """Re-evaluation and export from saved snapshots"""

    def test_reevaluate_matches_run(self, tmp_path):
        cfg = fast_config(tmp_path, budget=20)
        run_episode(cfg)
        run_dir = tmp_path / "run"
        original = read_rows(run_dir / "metrics.csv")
        reports = reevaluate_run(run_dir)
        assert [r.step for r in reports] == [int(row["step"]) for row in original]
        for report, row in zip(reports, original):
            assert report.completion_ratio_pct == pytest.approx(float(row["completion_ratio_pct"]))
        assert (run_dir / "eval_metrics.csv").exists()

    def test_export_pointcloud(self, tmp_path):
        run_episode(fast_config(tmp_path, budget=10))
        paths = export_run_pointcloud(tmp_path / "run")
        assert len(read_ply(paths["recon"])) > 0
        assert len(read_ply(paths["gt"])) > 0

    def test_missing_snapshots(self, tmp_path):
        (tmp_path / "snapshots").mkdir()
        with pytest.raises(DomainError):
            list_snapshots(tmp_path)
