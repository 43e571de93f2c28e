"""
Evaluation against ground truth: surface extraction from the fused TSDF,
completion metrics and sparsification-based uncertainty quality (AUSE)
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.integrate import trapezoid
from scipy.spatial import cKDTree

from models.errors import DomainError
from models.schema import EvalReport
from services.grid import VoxelGrid
from services.mapping import MapState, query_epistemic, query_epistemic_variance
from services.world import Scene, gt_surface_samples
from utils.io import write_csv, write_ply

logger = logging.getLogger("reconsim.metrics")

SPARSIFICATION_STEPS = 100
COMPLETION_THRESHOLD = 0.05
SURFACE_SUBDIVISIONS = 2
SPARSIFICATION_HEADER = ["step", "fraction", "by_uncertainty", "oracle"]


# ==================== SURFACE EXTRACTION ====================

def extract_surface_points(tsdf: VoxelGrid, weight: VoxelGrid, subdivisions: int = 1) -> np.ndarray:
    """
    Linear zero crossings on every grid edge whose two endpoints are observed.

    With subdivisions > 1 the TSDF is first resampled trilinearly onto a lattice
    that many times finer (through the voxel centers), keeping only samples whose
    every coarse neighbour is observed. Edges are visited axis by axis (x, y, z),
    each in lattice order.

    Returns:
        (M, 3) crossing points
    """
    if not tsdf.same_geometry(weight):
        raise DomainError("tsdf and weight grids are not aligned")
    if subdivisions < 1:
        raise DomainError(f"subdivisions must be >= 1, got {subdivisions}")
    values = tsdf.data.reshape(tsdf.dims, order="F")
    observed = weight.data.reshape(weight.dims, order="F") > 0.0
    if subdivisions > 1:
        dims = np.asarray(tsdf.dims)
        zoom = ((dims - 1) * subdivisions + 1) / dims
        values = ndimage.zoom(values, zoom, order=1)
        observed = ndimage.zoom(observed.astype(np.float64), zoom, order=1) >= 1.0 - 1e-9
    step = tsdf.resolution / subdivisions
    first = tsdf.origin + 0.5 * tsdf.resolution
    crossings = []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        v0, v1 = values[tuple(lo)], values[tuple(hi)]
        edge = observed[tuple(lo)] & observed[tuple(hi)] & ((v0 > 0.0) != (v1 > 0.0))
        ijk = np.argwhere(edge)
        if ijk.size == 0:
            continue
        # argwhere walks C order; reorder so x varies fastest like the flat layout
        ijk = ijk[np.lexsort((ijk[:, 0], ijk[:, 1], ijk[:, 2]))]
        a = v0[tuple(ijk.T)]
        b = v1[tuple(ijk.T)]
        t = a / (a - b)
        points = first + ijk * step
        points[:, axis] += t * step
        crossings.append(points)
    if not crossings:
        return np.zeros((0, 3))
    return np.concatenate(crossings)


# ==================== COMPLETION ====================

def completion_metrics(
    gt: np.ndarray, recon: np.ndarray, threshold: float = COMPLETION_THRESHOLD
) -> Tuple[float, float]:
    """
    Mean distance from ground-truth points to the reconstruction.

    Returns:
        (completion in cm, percentage of gt points within threshold)
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    recon = np.asarray(recon, dtype=np.float64).reshape(-1, 3)
    if len(gt) == 0:
        raise DomainError("completion needs at least one ground-truth point")
    if len(recon) == 0:
        return float("inf"), 0.0
    distances, _ = cKDTree(recon).query(gt)
    return float(np.mean(distances) * 100.0), float(np.mean(distances <= threshold) * 100.0)


# ==================== SPARSIFICATION ====================

def _removal_curve(errors: np.ndarray, order: np.ndarray, removed: np.ndarray) -> np.ndarray:
    ranked = errors[order]
    suffix = np.cumsum(ranked[::-1])[::-1]
    remaining = len(errors) - removed
    return suffix[removed] / remaining


def sparsification_curves(
    errors: Sequence[float], uncertainties: Sequence[float]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mean remaining error as the highest-ranked fraction is removed, for the
    uncertainty ranking and for the oracle error ranking.

    Ties keep input order. Both curves are normalized by the mean error over
    all points; with all-zero errors both curves are zero.

    Returns:
        (fractions, curve by uncertainty, oracle curve)
    """
    errors = np.asarray(errors, dtype=np.float64).ravel()
    uncertainties = np.asarray(uncertainties, dtype=np.float64).ravel()
    if errors.shape != uncertainties.shape:
        raise DomainError(f"{errors.size} errors but {uncertainties.size} uncertainties")
    if errors.size < 2:
        raise DomainError("sparsification needs at least two points")
    if np.any(errors < 0.0) or not np.all(np.isfinite(errors)):
        raise DomainError("errors must be finite and non-negative")

    n = errors.size
    steps = np.arange(SPARSIFICATION_STEPS)
    fractions = steps / SPARSIFICATION_STEPS
    removed = steps * n // SPARSIFICATION_STEPS
    baseline = float(np.mean(errors))
    if baseline == 0.0:
        zeros = np.zeros(SPARSIFICATION_STEPS)
        return fractions, zeros, zeros.copy()

    by_uncertainty = _removal_curve(errors, np.argsort(-uncertainties, kind="stable"), removed)
    oracle = _removal_curve(errors, np.argsort(-errors, kind="stable"), removed)
    return fractions, by_uncertainty / baseline, oracle / baseline


def ause(errors: Sequence[float], uncertainties: Sequence[float]) -> float:
    """Area between the uncertainty and oracle sparsification curves."""
    fractions, by_uncertainty, oracle = sparsification_curves(errors, uncertainties)
    return max(0.0, float(trapezoid(by_uncertainty - oracle, fractions)))


# ==================== MAP EVALUATION ====================

@dataclass
class Evaluation:
    report: EvalReport
    recon: np.ndarray
    gt: np.ndarray
    fractions: np.ndarray
    by_uncertainty: np.ndarray
    oracle: np.ndarray

    def sparsification_rows(self):
        step = self.report.step
        return [(step, f, u, o) for f, u, o in zip(self.fractions, self.by_uncertainty, self.oracle)]


def evaluate_map(
    scene: Scene,
    state: MapState,
    step: int,
    gt_spacing: float = 0.05,
    threshold: float = COMPLETION_THRESHOLD,
    gt_points: Optional[np.ndarray] = None,
) -> Evaluation:
    """
    Completion of the extracted surface plus AUSE at ground-truth surface points.

    The per-point error is |fused TSDF| at the sample, whose true SDF is zero.
    AUSE is reported both for the rectified entropy and for the NIG epistemic
    variance.
    """
    gt = gt_surface_samples(scene, gt_spacing) if gt_points is None else np.asarray(gt_points, dtype=np.float64)
    recon = extract_surface_points(state.tsdf, state.weight, SURFACE_SUBDIVISIONS)
    completion_cm, ratio = completion_metrics(gt, recon, threshold)

    errors = np.abs(state.tsdf.sample(gt))
    entropy = np.asarray(query_epistemic(state, gt))
    variance = query_epistemic_variance(state, gt)
    fractions, by_uncertainty, oracle = sparsification_curves(errors, entropy)
    area = max(0.0, float(trapezoid(by_uncertainty - oracle, fractions)))

    report = EvalReport(
        step=step,
        completion_cm=completion_cm,
        completion_ratio_pct=ratio,
        ause=area,
        ause_variance=ause(errors, np.where(np.isnan(variance), np.inf, variance)),
        n_gt_points=len(gt),
        n_recon_points=len(recon),
    )
    logger.info(
        f"📏 Step {step}: completion {completion_cm:.2f} cm, ratio {ratio:.2f}%, AUSE {area:.4f} "
        f"({len(recon)} surface points)"
    )
    return Evaluation(report, recon, gt, fractions, by_uncertainty, oracle)


# ==================== EXPORT ====================

METRICS_HEADER = list(EvalReport.model_fields)


def report_row(report: EvalReport) -> list:
    return [getattr(report, name) for name in METRICS_HEADER]


def write_metrics_csv(path: Union[str, Path], reports: Sequence[EvalReport]) -> Path:
    return write_csv(path, METRICS_HEADER, [report_row(r) for r in reports])


def write_sparsification_csv(path: Union[str, Path], evaluations: Sequence[Evaluation]) -> Path:
    rows = [row for evaluation in evaluations for row in evaluation.sparsification_rows()]
    return write_csv(path, SPARSIFICATION_HEADER, rows)


def export_point_clouds(directory: Union[str, Path], recon: np.ndarray, gt: np.ndarray) -> Dict[str, Path]:
    directory = Path(directory)
    return {
        "recon": write_ply(directory / "recon.ply", recon),
        "gt": write_ply(directory / "gt.ply", gt),
    }
