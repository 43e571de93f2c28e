"""
Unit tests for surface extraction, completion and AUSE
"""
import itertools

import numpy as np
import pytest

from models.errors import DomainError
from models.schema import CameraConfig, MappingConfig
from services.grid import VoxelGrid
from services.mapping import MapState, fuse_depth
from services.metrics import (
    ause,
    completion_metrics,
    evaluate_map,
    export_point_clouds,
    extract_surface_points,
    sparsification_curves,
    write_metrics_csv,
)
from services.world import Pose, render_depth
from utils.io import read_ply


def plane_grids(z_plane: float = 1.55):
    """Voxel centers on a 0.1 m lattice starting at 0, TSDF of a horizontal plane."""
    tsdf = VoxelGrid(np.full(3, -0.05), 0.1, (5, 5, 30))
    z = tsdf.centers()[:, 2]
    tsdf.data[:] = np.clip(z_plane - z, -0.1, 0.1)
    return tsdf, tsdf.like(1.0)


class TestSurfaceExtraction:
    """Zero crossings on observed grid edges"""

    def test_plane_crossings(self):
        """Plane at z=1.55 between centers 1.5 and 1.6 gives one crossing per column"""
        tsdf, weight = plane_grids()
        points = extract_surface_points(tsdf, weight)
        assert points.shape == (25, 3)
        np.testing.assert_allclose(points[:, 2], 1.55, atol=1e-9)
        np.testing.assert_allclose(np.abs(tsdf.sample(points)), 0.0, atol=1e-6)

    def test_all_positive(self):
        tsdf, weight = plane_grids()
        tsdf.data[:] = 0.1
        assert extract_surface_points(tsdf, weight).shape == (0, 3)

    def test_unobserved_endpoint_culled(self):
        tsdf, weight = plane_grids()
        layer = np.isclose(tsdf.centers()[:, 2], 1.6)
        weight.data[layer] = 0.0
        assert len(extract_surface_points(tsdf, weight)) == 0

    def test_subdivided_lattice(self):
        """Halving the lattice gives crossings every 5 cm across the plane"""
        tsdf, weight = plane_grids(z_plane=1.53)
        points = extract_surface_points(tsdf, weight, subdivisions=2)
        assert points.shape == (81, 3)
        np.testing.assert_allclose(points[:, 2], 1.53, atol=1e-9)
        np.testing.assert_allclose(np.unique(np.round(points[:, 0], 9)), np.arange(9) * 0.05, atol=1e-9)

    def test_subdivided_needs_observed_neighbours(self):
        tsdf, weight = plane_grids(z_plane=1.53)
        weight.data[np.isclose(tsdf.centers()[:, 2], 1.6)] = 0.0
        assert len(extract_surface_points(tsdf, weight, subdivisions=2)) == 0
        with pytest.raises(DomainError):
            extract_surface_points(tsdf, weight, subdivisions=0)

    def test_misaligned_grids(self):
        tsdf, _ = plane_grids()
        with pytest.raises(DomainError):
            extract_surface_points(tsdf, VoxelGrid(np.zeros(3), 0.1, (5, 5, 30)))


class TestCompletion:
    """Nearest-neighbour completion distance and ratio"""

    @staticmethod
    def lattice():
        axis = np.arange(3, dtype=np.float64)
        return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)

    def test_identical(self):
        gt = self.lattice()
        assert completion_metrics(gt, gt) == (0.0, 100.0)

    def test_uniform_offset(self):
        """Every gt point 3 cm from its nearest reconstruction point"""
        gt = self.lattice()
        cm, ratio = completion_metrics(gt, gt + np.array([0.0, 0.0, 0.03]))
        assert cm == pytest.approx(3.0)
        assert ratio == 100.0

    def test_half_near_half_far(self):
        """Half at 2 cm, half at 8 cm"""
        gt = self.lattice()[:26]
        offsets = np.where(np.arange(26)[:, None] < 13, [0.02, 0.0, 0.0], [0.08, 0.0, 0.0])
        cm, ratio = completion_metrics(gt, gt + offsets)
        assert cm == pytest.approx(5.0)
        assert ratio == pytest.approx(50.0)

    def test_empty_reconstruction(self):
        cm, ratio = completion_metrics(self.lattice(), np.zeros((0, 3)))
        assert np.isinf(cm) and ratio == 0.0

    def test_empty_ground_truth(self):
        with pytest.raises(DomainError):
            completion_metrics(np.zeros((0, 3)), self.lattice())

    def test_more_points_never_hurt(self):
        rng = np.random.default_rng(5)
        gt = rng.random((200, 3))
        recon = rng.random((10, 3))
        previous = completion_metrics(gt, recon)[0]
        for _ in range(10):
            recon = np.vstack([recon, rng.random((10, 3))])
            current = completion_metrics(gt, recon)[0]
            assert current <= previous + 1e-12
            previous = current


class TestAuse:
    """Sparsification curves and their area"""

    def test_perfect_ranking(self):
        errors = np.array([0.3, 0.1, 0.7, 0.2, 0.5])
        assert ause(errors, errors) == pytest.approx(0.0, abs=1e-12)

    def test_worst_ranking_is_maximal(self):
        """Reversed ranking gives the largest area over all permutations"""
        errors = np.array([0.05, 0.4, 0.1, 0.9, 0.3, 0.6])
        worst = ause(errors, -errors)
        best_seen = max(ause(errors, np.array(p, dtype=float)) for p in itertools.permutations(range(6)))
        assert worst == pytest.approx(best_seen)
        assert worst > 0.0

    def test_never_negative(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(2, 40))
            assert ause(rng.random(n), rng.random(n)) >= 0.0

    def test_constant_uncertainty(self):
        """Stable tie-break removes points in input order"""
        assert ause([1.0, 2.0, 3.0, 4.0], [0.5] * 4) > 0.0
        assert ause([2.0] * 4, [0.5] * 4) == pytest.approx(0.0, abs=1e-12)

    def test_all_zero_errors(self):
        assert ause([0.0, 0.0, 0.0], [3.0, 1.0, 2.0]) == 0.0

    def test_curve_shape(self):
        fractions, by_u, oracle = sparsification_curves([0.1, 0.4, 0.2, 0.8], [1.0, 2.0, 3.0, 4.0])
        assert fractions.size == by_u.size == oracle.size == 100
        assert fractions[0] == 0.0 and fractions[-1] == pytest.approx(0.99)
        assert by_u[0] == pytest.approx(1.0) and oracle[0] == pytest.approx(1.0)
        assert np.all(oracle <= by_u + 1e-12)

    def test_bad_inputs(self):
        with pytest.raises(DomainError):
            ause([0.1], [0.2])
        with pytest.raises(DomainError):
            ause([0.1, 0.2], [0.2])
        with pytest.raises(DomainError):
            ause([0.1, -0.2], [0.2, 0.1])


class TestEvaluateMap:
    """End-to-end evaluation of a fused map"""

    def test_fresh_map(self, single_room):
        state = MapState.create(single_room.bounds_min, single_room.bounds_max, MappingConfig())
        evaluation = evaluate_map(single_room, state, step=0, gt_spacing=0.2)
        report = evaluation.report
        assert report.n_recon_points == 0
        assert np.isinf(report.completion_cm) and report.completion_ratio_pct == 0.0
        assert report.n_gt_points == len(evaluation.gt) > 0
        assert report.ause >= 0.0

    def test_scanned_room(self, single_room, tmp_path):
        """A 360-degree sweep recovers a large share of the room surfaces"""
        state = MapState.create(single_room.bounds_min, single_room.bounds_max, MappingConfig())
        for yaw in np.arange(8) * np.pi / 4:
            pose = Pose.looking([2.0, 2.0, 1.25], [np.cos(yaw), np.sin(yaw), 0.0])
            fuse_depth(state, render_depth(single_room, pose, CameraConfig()))
        evaluation = evaluate_map(single_room, state, step=8, gt_spacing=0.1)
        report = evaluation.report
        assert report.n_recon_points > 0
        assert np.isfinite(report.completion_cm)
        assert report.completion_ratio_pct > 25.0

        paths = export_point_clouds(tmp_path, evaluation.recon, evaluation.gt)
        assert read_ply(paths["recon"]).shape == evaluation.recon.shape
        csv_path = write_metrics_csv(tmp_path / "metrics.csv", [report])
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("step,completion_cm,completion_ratio_pct,ause")
        assert lines[1].startswith("8,")
