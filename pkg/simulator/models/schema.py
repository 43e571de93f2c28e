"""Pydantic schemas for run configuration, scene files and reports"""
import math
from enum import Enum
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

Vec3 = Tuple[float, float, float]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --------------------------------------------------
# Evidential loss and mapping
# --------------------------------------------------
class LossConfig(StrictModel):
    gamma: float = Field(default=1e-4, ge=0.0)
    tr: float = Field(default=0.10, gt=0.0)


class MappingConfig(StrictModel):
    tr: float = Field(default=0.10, gt=0.0)
    voxel_res: float = Field(default=0.10, gt=0.0)
    evidence_scale: float = Field(default=math.exp(15.0), gt=0.0)
    rho_init: float = -15.0
    tau_init_raw: float = 2.9489
    tau_eps: float = Field(default=1e-6, gt=0.0)
    n_pri: float = Field(default=1.0, gt=0.0)
    chi_pri: Tuple[float, float] = (0.0, 3.0)
    rays_per_step: int = Field(default=1024, gt=0)
    samples_per_ray: int = Field(default=32, gt=0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    sgd_lr: float = Field(default=0.05, gt=0.0)
    sgd_momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_lr: float = Field(default=0.1, gt=0.0)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, gt=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    grad_steps_per_frame: int = Field(default=10, ge=0)
    grid_padding: float = Field(default=0.2, ge=0.0)
    u_threshold_margin: float = Field(default=1.0, gt=0.0)

    @model_validator(mode="after")
    def _check_consistency(self) -> "MappingConfig":
        initial_evidence = self.evidence_scale * float(expit(self.rho_init))
        if abs(initial_evidence - 1.0) > 0.01:
            raise ValueError(
                f"rho_init={self.rho_init} gives initial evidence {initial_evidence:.4f}; "
                "it must be ≈1 (use -log(evidence_scale))"
            )
        if self.chi_pri[1] - self.chi_pri[0] ** 2 <= 0.0:
            raise ValueError("chi_pri must have a positive implied variance")
        return self


# --------------------------------------------------
# Sensor and planners
# --------------------------------------------------
class CameraConfig(StrictModel):
    width: int = Field(default=160, gt=0)
    height: int = Field(default=120, gt=0)
    focal: float = Field(default=80.0, gt=0.0)
    min_range: float = Field(default=0.05, gt=0.0)
    max_range: float = Field(default=8.0, gt=0.0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "CameraConfig":
        if self.min_range >= self.max_range:
            raise ValueError("min_range must be smaller than max_range")
        return self


class PlannerConfig(StrictModel):
    region_size: float = Field(default=1.0, gt=0.0)
    k: float = Field(default=0.1, ge=0.0)
    r_robot: float = Field(default=0.2, gt=0.0)
    u_threshold: Optional[float] = None
    n_obs_floor: float = Field(default=20.0, gt=0.0)
    unknown_voxel_floor: int = Field(default=3, ge=0)


class LocalPlanConfig(StrictModel):
    pos_step_xy: float = Field(default=0.2, gt=0.0)
    pos_step_z: float = Field(default=1.0, gt=0.0)
    orientations_per_pos: int = Field(default=30, gt=0)
    top_k: int = Field(default=100, gt=0)
    eta: float = Field(default=10.0, ge=0.0)
    max_viewpoints: int = Field(default=8, gt=0)
    d_min: float = Field(default=0.5, gt=0.0)
    d_max: float = Field(default=5.0, gt=0.0)
    cone_half_angle: Optional[float] = Field(default=None, gt=0.0, lt=math.pi)
    v_max: float = Field(default=1.0, gt=0.0)
    omega_max: float = Field(default=1.57, gt=0.0)
    traj_dt: float = Field(default=0.1, gt=0.0)
    pool_limit: int = Field(default=20000, gt=0)

    @model_validator(mode="after")
    def _check_distances(self) -> "LocalPlanConfig":
        if self.d_min >= self.d_max:
            raise ValueError("d_min must be smaller than d_max")
        return self


# --------------------------------------------------
# Run configuration
# --------------------------------------------------
class PlannerMode(str, Enum):
    FULL = "full"
    FRONTIER_ONLY = "frontier_only"
    RANDOM_WALK = "random_walk"

    @classmethod
    def from_cli(cls, value: str) -> "PlannerMode":
        aliases = {"frontier": cls.FRONTIER_ONLY, "random": cls.RANDOM_WALK}
        return aliases.get(value) or cls(value)


class RunConfig(StrictModel):
    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "scene": "data/scenes/single_room.json",
                "budget": 300,
                "mode": "full",
                "rng_seed": 0,
                "output_dir": "runs/single_room",
            }
        },
    )

    scene: str
    budget: int = Field(default=300, ge=1)
    eval_cadence: int = Field(default=500, ge=1)
    mode: PlannerMode = PlannerMode.FULL
    rng_seed: int = 0
    output_dir: str = "runs/default"
    progress: bool = True
    max_replan_attempts: int = Field(default=3, ge=1)
    gt_spacing: float = Field(default=0.05, gt=0.0)
    completion_threshold: float = Field(default=0.05, gt=0.0)
    save_snapshots: bool = True
    camera: CameraConfig = Field(default_factory=CameraConfig)
    mapping: MappingConfig = Field(default_factory=MappingConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    planner: PlannerConfig = Field(default_factory=PlannerConfig)
    local: LocalPlanConfig = Field(default_factory=LocalPlanConfig)

    @model_validator(mode="after")
    def _check_shared_constants(self) -> "RunConfig":
        if not math.isclose(self.mapping.tr, self.loss.tr):
            raise ValueError("mapping.tr and loss.tr must agree")
        cells = self.planner.region_size / self.mapping.voxel_res
        if abs(cells - round(cells)) > 1e-6:
            raise ValueError("planner.region_size must be a multiple of mapping.voxel_res")
        return self


# --------------------------------------------------
# Scene files
# --------------------------------------------------
class BoxSpec(StrictModel):
    min: Vec3
    max: Vec3


class PoseSpec(StrictModel):
    position: Vec3
    quaternion: Tuple[float, float, float, float] = Field(
        ..., description="unit quaternion (w, x, y, z), camera frame +z forward"
    )


class SceneFile(StrictModel):
    name: str = ""
    bounds: BoxSpec
    boxes: List[BoxSpec] = Field(default=[])
    spawn: PoseSpec


# --------------------------------------------------
# Reports
# --------------------------------------------------
class EvalReport(BaseModel):
    step: int
    completion_cm: float = Field(..., ge=0.0)
    completion_ratio_pct: float = Field(..., ge=0.0, le=100.0)
    ause: float = Field(..., ge=0.0)
    ause_variance: float = Field(default=0.0, ge=0.0)
    n_gt_points: int
    n_recon_points: int = 0


class EpisodeReport(BaseModel):
    status: Literal["complete", "budget", "failed"]
    steps: int
    final: EvalReport
    dropped_regions: List[int] = Field(default=[])
    blocked_events: int = 0
