"""
Online map state: TSDF fusion plus training of the evidence grids

The fused TSDF supplies the first statistic s_i; the raw evidence grid v_rho and
raw second-moment grid v_tau are trained under the Bayesian SDF losses with s_i
held fixed.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
from scipy import ndimage

from models.errors import EmptySampleError, NumericError
from models.schema import LossConfig, MappingConfig, PlannerConfig
from services.evidential import (
    UncertaintyHyper,
    epistemic_from_grids,
    epistemic_variance_from_grids,
    loss_and_grad,
)
from services.grid import VoxelGrid, trilinear_adjoint
from services.world import DepthImage, pixel_rays

logger = logging.getLogger("reconsim.mapping")

GRID_NAMES = ("tsdf", "weight", "v_rho", "v_tau")


# ==================== THRESHOLDS ====================

def fresh_epistemic(cfg: MappingConfig) -> float:
    """Rectified entropy of an untouched voxel (prior blended with the initial evidence)."""
    hyper = UncertaintyHyper.from_config(cfg)
    return float(epistemic_from_grids(cfg.tr, cfg.rho_init, cfg.tau_init_raw, hyper))


def default_u_threshold(cfg: MappingConfig) -> float:
    return fresh_epistemic(cfg) - cfg.u_threshold_margin


def resolve_u_threshold(planner: PlannerConfig, mapping: MappingConfig) -> float:
    return planner.u_threshold if planner.u_threshold is not None else default_u_threshold(mapping)


# ==================== RAY SAMPLES ====================

@dataclass
class RaySamples:
    """Per-ray geometry and per-point training targets (points flattened ray-major)"""
    origins: np.ndarray
    dirs: np.ndarray
    depths: np.ndarray
    ray_id: np.ndarray
    t: np.ndarray
    points: np.ndarray
    truncation: np.ndarray
    free: np.ndarray
    s_gt: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def n_rays(self) -> int:
        return len(self.depths)

    def select(self, mask: np.ndarray) -> "RaySamples":
        return RaySamples(
            origins=self.origins, dirs=self.dirs, depths=self.depths,
            ray_id=self.ray_id[mask], t=self.t[mask], points=self.points[mask],
            truncation=self.truncation[mask], free=self.free[mask], s_gt=self.s_gt[mask],
        )


def sample_training_points(frame: DepthImage, cfg: MappingConfig, rng: np.random.Generator) -> RaySamples:
    """
    Draw rays through valid pixels and stratified depths along each.

    Depths are ray lengths; each ray's range [min_range, D_r + tr] is split into
    samples_per_ray equal strata with one uniform sample per stratum.
    """
    k = frame.intrinsics
    valid = np.flatnonzero(frame.valid_mask().ravel())
    if valid.size == 0:
        raise EmptySampleError("depth frame has no valid pixel")

    pixels = valid[rng.integers(0, valid.size, size=cfg.rays_per_step)]
    cam = pixel_rays(k).reshape(-1, 3)[pixels]
    norms = np.linalg.norm(cam, axis=1)
    dirs = frame.pose.rotation().apply(cam / norms[:, None])
    depths = frame.depths.ravel()[pixels] * norms
    origins = np.broadcast_to(frame.pose.position, dirs.shape).copy()

    n_strata = cfg.samples_per_ray
    lo = k.min_range
    hi = depths + cfg.tr
    width = (hi - lo) / n_strata
    jitter = rng.random((len(depths), n_strata))
    t = lo + (np.arange(n_strata)[None, :] + jitter) * width[:, None]

    residual = depths[:, None] - t
    truncation = np.abs(residual) <= cfg.tr
    free = t < depths[:, None] - cfg.tr
    s_gt = np.where(truncation, residual, cfg.tr)
    points = origins[:, None, :] + t[..., None] * dirs[:, None, :]

    return RaySamples(
        origins=origins,
        dirs=dirs,
        depths=depths,
        ray_id=np.repeat(np.arange(len(depths)), n_strata),
        t=t.ravel(),
        points=points.reshape(-1, 3),
        truncation=truncation.ravel(),
        free=free.ravel(),
        s_gt=s_gt.ravel(),
    )


# ==================== MAP STATE ====================

@dataclass
class _LazyOptimizer:
    """Per-voxel SGD-momentum or Adam; only voxels with gradient support are touched."""
    cfg: MappingConfig
    size: int
    first: np.ndarray = field(init=False)
    second: np.ndarray = field(init=False)
    steps: np.ndarray = field(init=False)

    def __post_init__(self):
        self.first = np.zeros(self.size)
        self.second = np.zeros(self.size)
        self.steps = np.zeros(self.size, dtype=np.int64)

    def apply(self, params: np.ndarray, grad: np.ndarray, touched: np.ndarray) -> None:
        g = grad[touched]
        if self.cfg.optimizer == "sgd":
            self.first[touched] = self.cfg.sgd_momentum * self.first[touched] + g
            params[touched] -= self.cfg.sgd_lr * self.first[touched]
            return
        beta1, beta2 = self.cfg.adam_beta1, self.cfg.adam_beta2
        self.steps[touched] += 1
        step = self.steps[touched]
        self.first[touched] = beta1 * self.first[touched] + (1.0 - beta1) * g
        self.second[touched] = beta2 * self.second[touched] + (1.0 - beta2) * g * g
        m_hat = self.first[touched] / (1.0 - beta1 ** step)
        v_hat = self.second[touched] / (1.0 - beta2 ** step)
        params[touched] -= self.cfg.adam_lr * m_hat / (np.sqrt(v_hat) + self.cfg.adam_eps)


@dataclass
class MapState:
    tsdf: VoxelGrid
    weight: VoxelGrid
    v_rho: VoxelGrid
    v_tau: VoxelGrid
    cfg: MappingConfig
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    step_count: int = 0
    hyper: UncertaintyHyper = field(init=False)
    _rho_opt: _LazyOptimizer = field(init=False, repr=False)
    _tau_opt: _LazyOptimizer = field(init=False, repr=False)

    def __post_init__(self):
        self.hyper = UncertaintyHyper.from_config(self.cfg)
        self._rho_opt = _LazyOptimizer(self.cfg, self.tsdf.size)
        self._tau_opt = _LazyOptimizer(self.cfg, self.tsdf.size)

    @classmethod
    def create(cls, bounds_min, bounds_max, cfg: MappingConfig) -> "MapState":
        base = VoxelGrid.covering(bounds_min, bounds_max, cfg.voxel_res, padding=cfg.grid_padding)
        return cls(
            tsdf=base.like(cfg.tr),
            weight=base.like(0.0),
            v_rho=base.like(cfg.rho_init),
            v_tau=base.like(cfg.tau_init_raw),
            cfg=cfg,
            bounds_min=np.asarray(bounds_min, dtype=np.float64),
            bounds_max=np.asarray(bounds_max, dtype=np.float64),
        )

    def grids(self) -> Dict[str, VoxelGrid]:
        return {"tsdf": self.tsdf, "weight": self.weight, "v_rho": self.v_rho, "v_tau": self.v_tau}

    def evidence(self) -> np.ndarray:
        return np.asarray(self.hyper.evidence(self.v_rho.data))

    def in_bounds_mask(self) -> np.ndarray:
        centers = self.tsdf.centers()
        return np.all((centers >= self.bounds_min) & (centers <= self.bounds_max), axis=1)

    def epistemic_field(self) -> np.ndarray:
        """Rectified epistemic uncertainty at every voxel center."""
        return np.asarray(epistemic_from_grids(self.tsdf.data, self.v_rho.data, self.v_tau.data, self.hyper))

    # ==================== SNAPSHOTS ====================

    def save(self, directory: Union[str, Path], name: str) -> Dict[str, Path]:
        directory = Path(directory)
        return {key: grid.save(directory / f"{name}_{key}.grid") for key, grid in self.grids().items()}

    @classmethod
    def load(cls, directory: Union[str, Path], name: str, cfg: MappingConfig, bounds_min, bounds_max) -> "MapState":
        directory = Path(directory)
        grids = {key: VoxelGrid.load(directory / f"{name}_{key}.grid") for key in GRID_NAMES}
        return cls(cfg=cfg, bounds_min=np.asarray(bounds_min), bounds_max=np.asarray(bounds_max), **grids)


# ==================== FUSION ====================

def fuse_depth(state: MapState, frame: DepthImage) -> MapState:
    """
    Weighted-average TSDF fusion of one z-depth frame.

    Voxels behind the observed surface by more than tr are left untouched.
    """
    k = frame.intrinsics
    tr = state.cfg.tr
    centers = state.tsdf.centers()
    cam = frame.pose.rotation().inv().apply(centers - frame.pose.position)
    z = cam[:, 2]
    ahead = z > k.min_range
    safe_z = np.where(ahead, z, 1.0)
    u = np.rint(k.focal * cam[:, 0] / safe_z + 0.5 * (k.width - 1)).astype(np.int64)
    v = np.rint(k.focal * cam[:, 1] / safe_z + 0.5 * (k.height - 1)).astype(np.int64)
    in_image = ahead & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)

    depth = np.zeros_like(z)
    depth[in_image] = frame.depths[v[in_image], u[in_image]]
    update = in_image & (depth > 0.0) & (z <= depth + tr)

    sdf_obs = np.clip(depth[update] - z[update], -tr, tr)
    w = state.weight.data[update]
    state.tsdf.data[update] = (w * state.tsdf.data[update] + sdf_obs) / (w + 1.0)
    state.weight.data[update] = w + 1.0
    logger.debug(f"Fused frame into {int(update.sum())} voxels")
    return state


# ==================== UNCERTAINTY TRAINING ====================

def uncertainty_step(state: MapState, samples: RaySamples, loss_cfg: LossConfig) -> Tuple[float, float]:
    """
    One optimizer step on v_rho and v_tau.

    Each point's loss is weighted by 1/|R_d| and by 1/|S_r^tr| of its ray (at
    least one). Points outside the grid interior are discarded.

    Returns:
        (normalized loss, mean evidence at the sample points)
    """
    if len(samples) == 0:
        raise EmptySampleError("no training samples")

    inside = state.tsdf.in_interior(samples.points)
    kept = samples.select(inside)
    if len(kept) == 0:
        return 0.0, float("nan")

    trunc_count = np.bincount(samples.ray_id[samples.truncation], minlength=samples.n_rays)
    ray_weight = 1.0 / (samples.n_rays * np.maximum(trunc_count, 1))
    point_weight = ray_weight[kept.ray_id]

    s_i = state.tsdf.sample(kept.points)
    rho = state.v_rho.sample(kept.points)
    tau = state.v_tau.sample(kept.points)

    try:
        loss, d_rho, d_tau = loss_and_grad(kept.s_gt, state.hyper.prior, s_i, rho, tau, state.hyper, loss_cfg)
    except NumericError as exc:
        raise NumericError(f"uncertainty step {state.step_count}: {exc}") from exc

    grad_rho = trilinear_adjoint(state.v_rho, kept.points, d_rho * point_weight)
    grad_tau = trilinear_adjoint(state.v_tau, kept.points, d_tau * point_weight)
    touched = trilinear_adjoint(state.v_rho, kept.points, 1.0) > 0.0

    state._rho_opt.apply(state.v_rho.data, grad_rho, touched)
    state._tau_opt.apply(state.v_tau.data, grad_tau, touched)
    state.step_count += 1

    total = float(np.sum(loss * point_weight))
    mean_evidence = float(np.mean(state.hyper.evidence(rho)))
    return total, mean_evidence


# ==================== QUERIES ====================

def _grid_values(state: MapState, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return state.tsdf.sample(points), state.v_rho.sample(points), state.v_tau.sample(points)


def query_epistemic(state: MapState, p: np.ndarray) -> Union[float, np.ndarray]:
    """Rectified epistemic uncertainty at p (3,) or (M, 3), interpolating raw grid values."""
    p = np.asarray(p, dtype=np.float64)
    values = np.asarray(epistemic_from_grids(*_grid_values(state, p.reshape(-1, 3)), state.hyper))
    return float(values[0]) if p.ndim == 1 else values


def query_epistemic_variance(state: MapState, p: np.ndarray) -> np.ndarray:
    points = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    return np.asarray(epistemic_variance_from_grids(*_grid_values(state, points), state.hyper))


def high_uncertainty_voxels(state: MapState, threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """Voxel ids with rectified uncertainty above threshold and their values, sorted descending."""
    values = state.epistemic_field()
    ids = np.flatnonzero(values > threshold)
    order = np.argsort(-values[ids], kind="stable")
    return ids[order], values[ids][order]


# ==================== PLANNING SNAPSHOT ====================

@dataclass(frozen=True)
class MapSnapshot:
    """Read-only per-voxel fields derived once per planning phase"""
    grid: VoxelGrid
    tsdf: np.ndarray
    epistemic: np.ndarray
    evidence: np.ndarray
    observed: np.ndarray
    in_bounds: np.ndarray
    high_u: np.ndarray
    occupied: np.ndarray
    known_free: np.ndarray
    unknown: np.ndarray
    clearance: np.ndarray
    u_threshold: float
    r_robot: float

    @classmethod
    def capture(cls, state: MapState, u_threshold: float, r_robot: float) -> "MapSnapshot":
        grid = state.tsdf
        tsdf = state.tsdf.data.copy()
        epistemic = state.epistemic_field()
        observed = state.weight.data > 0.0
        in_bounds = state.in_bounds_mask()
        high_u = epistemic > u_threshold
        occupied = (observed & (tsdf <= 0.0)) | ~in_bounds
        known_free = in_bounds & observed & (tsdf > 0.0)
        unknown = in_bounds & ~occupied & ~known_free
        distance = ndimage.distance_transform_edt(~occupied.reshape(grid.dims, order="F"))
        clearance = distance.ravel(order="F") * grid.resolution - 0.5 * grid.resolution
        return cls(
            grid=grid.like(0.0),
            tsdf=tsdf,
            epistemic=epistemic,
            evidence=state.evidence(),
            observed=observed,
            in_bounds=in_bounds,
            high_u=high_u,
            occupied=occupied,
            known_free=known_free,
            unknown=unknown,
            clearance=clearance,
            u_threshold=u_threshold,
            r_robot=r_robot,
        )

    @property
    def required_clearance(self) -> float:
        # one voxel of inflation: surfaces sit up to a voxel ahead of occupied centers
        return self.r_robot + self.grid.resolution

    @property
    def traversable(self) -> np.ndarray:
        """Optimistic: enough clearance and either fused free or never observed."""
        return (self.clearance >= self.required_clearance) & (self.known_free | self.unknown)

    @property
    def safe(self) -> np.ndarray:
        """Enough clearance inside fused free space, whatever its trained evidence."""
        return (self.clearance >= self.required_clearance) & self.known_free

    def is_traversable(self, points: np.ndarray, optimistic: bool = True) -> np.ndarray:
        points = np.atleast_2d(points)
        ijk = self.grid.world_to_index(points)
        inside = self.grid.contains_index(ijk)
        mask = self.traversable if optimistic else self.safe
        result = np.zeros(len(points), dtype=bool)
        result[inside] = mask[self.grid.linear_index(ijk[inside])]
        return result

    def segment_clear(self, a: np.ndarray, b: np.ndarray, optimistic: bool = True) -> bool:
        """Every half-voxel sample of the straight leg a -> b is traversable."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        n = max(2, int(np.ceil(np.linalg.norm(b - a) / (0.5 * self.grid.resolution))) + 1)
        samples = a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)
        return bool(np.all(self.is_traversable(samples, optimistic=optimistic)))

    def voxel_of(self, p: np.ndarray) -> int:
        return int(self.grid.nearest_index(np.asarray(p, dtype=np.float64)))

