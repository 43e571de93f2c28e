"""
Ground-truth box worlds: scene loading, ray casting, depth rendering and SDF oracles

Camera frame convention: +z forward, +x right, +y down. Quaternions are stored
(w, x, y, z).
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from scipy.spatial.transform import Rotation

from models.errors import DomainError
from models.schema import CameraConfig, SceneFile

logger = logging.getLogger("reconsim.world")

WORLD_UP = np.array([0.0, 0.0, 1.0])
SURFACE_NUDGE = 1e-6


# ==================== POSES ====================

def quat_to_rotation(q_wxyz: np.ndarray) -> Rotation:
    q = np.asarray(q_wxyz, dtype=np.float64)
    return Rotation.from_quat(np.concatenate([q[..., 1:], q[..., :1]], axis=-1))


def rotation_to_quat(rotation: Rotation) -> np.ndarray:
    xyzw = rotation.as_quat()
    wxyz = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    # canonical hemisphere keeps exported quaternions stable
    sign = np.where(wxyz[..., :1] < 0.0, -1.0, 1.0)
    return wxyz * sign


def look_rotation(forward: np.ndarray, up: np.ndarray = WORLD_UP) -> np.ndarray:
    """Quaternion (w, x, y, z) whose camera +z axis points along forward with zero roll."""
    f = np.asarray(forward, dtype=np.float64)
    norm = np.linalg.norm(f)
    if norm < 1e-12:
        raise DomainError("look direction must be non-zero")
    f = f / norm
    right = np.cross(f, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(f, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    matrix = np.column_stack([right, down, f])
    return rotation_to_quat(Rotation.from_matrix(matrix))


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    quaternion: np.ndarray

    @classmethod
    def create(cls, position, quaternion) -> "Pose":
        q = np.asarray(quaternion, dtype=np.float64)
        return cls(np.asarray(position, dtype=np.float64), q / np.linalg.norm(q))

    @classmethod
    def looking(cls, position, forward) -> "Pose":
        return cls.create(position, look_rotation(forward))

    def rotation(self) -> Rotation:
        return quat_to_rotation(self.quaternion)

    def forward(self) -> np.ndarray:
        return self.rotation().apply([0.0, 0.0, 1.0])


# ==================== CAMERA ====================

def field_of_view(k: CameraConfig) -> tuple[float, float]:
    """(horizontal, vertical) field of view in radians."""
    return 2.0 * np.arctan(k.width / (2.0 * k.focal)), 2.0 * np.arctan(k.height / (2.0 * k.focal))


def mean_fov_half_angle(k: CameraConfig) -> float:
    hfov, vfov = field_of_view(k)
    return float(0.25 * (hfov + vfov))


def pixel_rays(k: CameraConfig) -> np.ndarray:
    """(H, W, 3) camera-frame directions with unit z component."""
    cx = 0.5 * (k.width - 1)
    cy = 0.5 * (k.height - 1)
    u, v = np.meshgrid(np.arange(k.width, dtype=np.float64), np.arange(k.height, dtype=np.float64))
    return np.stack([(u - cx) / k.focal, (v - cy) / k.focal, np.ones_like(u)], axis=-1)


@dataclass
class DepthImage:
    intrinsics: CameraConfig
    pose: Pose
    depths: np.ndarray

    def valid_mask(self) -> np.ndarray:
        return self.depths > 0.0

    def unproject(self) -> np.ndarray:
        """World points of valid pixels, (M, 3)."""
        mask = self.valid_mask()
        cam = pixel_rays(self.intrinsics)[mask] * self.depths[mask][:, None]
        return self.pose.rotation().apply(cam) + self.pose.position


# ==================== SCENE ====================

@dataclass
class Scene:
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 3)))
    spawn: Optional[Pose] = None
    name: str = ""

    def __post_init__(self):
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 2, 3)

    @property
    def max_span(self) -> float:
        return float(np.linalg.norm(self.bounds_max - self.bounds_min))

    def validate(self, r_robot: float = 0.0) -> "Scene":
        if np.any(self.bounds_max <= self.bounds_min):
            raise DomainError(f"scene bounds are empty: {self.bounds_min} .. {self.bounds_max}")
        for lo, hi in self.boxes:
            if np.any(hi <= lo):
                raise DomainError(f"box {lo.tolist()}..{hi.tolist()} has non-positive extent")
            if np.any(lo < self.bounds_min) or np.any(hi > self.bounds_max):
                raise DomainError(f"box {lo.tolist()}..{hi.tolist()} leaves the scene bounds")
        if self.spawn is not None:
            clearance = float(gt_sdf(self, self.spawn.position))
            if clearance < r_robot:
                raise DomainError(f"spawn clearance {clearance:.3f} m is below r_robot={r_robot}")
        return self

    def inside_any_box(self, points: np.ndarray) -> np.ndarray:
        return box_union_sdf(self.boxes, points) < 0.0


def load_scene(path: Union[str, Path], r_robot: float = 0.0) -> Scene:
    scene_file = SceneFile.model_validate_json(Path(path).read_text(encoding="utf-8"))
    scene = Scene(
        bounds_min=np.array(scene_file.bounds.min),
        bounds_max=np.array(scene_file.bounds.max),
        boxes=np.array([[b.min, b.max] for b in scene_file.boxes]).reshape(-1, 2, 3),
        spawn=Pose.create(scene_file.spawn.position, scene_file.spawn.quaternion),
        name=scene_file.name or Path(path).stem,
    )
    logger.info(f"🏠 Loaded scene '{scene.name}' with {len(scene.boxes)} boxes")
    return scene.validate(r_robot)


# ==================== RAY CASTING ====================

def _slab_entry(lo: np.ndarray, hi: np.ndarray, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Entry distance into box [lo, hi] per ray, inf when missed."""
    parallel = np.abs(dirs) < 1e-12
    safe = np.where(parallel, 1.0, dirs)
    t1 = (lo - origins) / safe
    t2 = (hi - origins) / safe
    t_min = np.where(parallel, -np.inf, np.minimum(t1, t2))
    t_max = np.where(parallel, np.inf, np.maximum(t1, t2))
    within = ~parallel | ((origins > lo) & (origins < hi))
    t_near = np.max(t_min, axis=-1)
    t_far = np.min(t_max, axis=-1)
    hit = np.all(within, axis=-1) & (t_near <= t_far) & (t_near > 0.0)
    return np.where(hit, t_near, np.inf)


def _shell_exit(lo: np.ndarray, hi: np.ndarray, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = np.where(dirs > 1e-12, (hi - origins) / dirs, np.inf)
        t_lo = np.where(dirs < -1e-12, (lo - origins) / dirs, np.inf)
    t = np.min(np.minimum(t_hi, t_lo), axis=-1)
    return np.where(t > 0.0, t, np.inf)


def cast_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Hit distance per ray along unit dirs; inf where nothing is hit within the scene span."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    origins, dirs = np.broadcast_arrays(origins, dirs)
    t = _shell_exit(scene.bounds_min, scene.bounds_max, origins, dirs)
    for lo, hi in scene.boxes:
        t = np.minimum(t, _slab_entry(lo, hi, origins, dirs))
    return np.where(t <= scene.max_span + 1e-9, t, np.inf)


def ray_intersect(scene: Scene, origin: np.ndarray, direction: np.ndarray) -> Optional[float]:
    origin = np.asarray(origin, dtype=np.float64)
    if scene.inside_any_box(origin[None, :])[0]:
        raise DomainError(f"ray origin {origin.tolist()} lies inside a box")
    t = float(cast_rays(scene, origin, direction)[0])
    return t if np.isfinite(t) else None


def render_depth(scene: Scene, pose: Pose, k: CameraConfig) -> DepthImage:
    """z-depth image; 0.0 marks pixels with no hit inside [min_range, max_range]."""
    cam = pixel_rays(k)
    norms = np.linalg.norm(cam, axis=-1)
    dirs_world = pose.rotation().apply((cam / norms[..., None]).reshape(-1, 3))
    t = cast_rays(scene, pose.position, dirs_world).reshape(k.height, k.width)
    z = t / norms
    valid = np.isfinite(z) & (z >= k.min_range) & (z <= k.max_range)
    return DepthImage(intrinsics=k, pose=pose, depths=np.where(valid, z, 0.0))


# ==================== SDF ORACLES ====================

def box_union_sdf(boxes: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(boxes) == 0:
        return np.full(len(points), np.inf)
    centers = 0.5 * (boxes[:, 0] + boxes[:, 1])
    half = 0.5 * (boxes[:, 1] - boxes[:, 0])
    q = np.abs(points[:, None, :] - centers[None, :, :]) - half[None, :, :]
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return np.min(outside + inside, axis=1)


def shell_distance(scene: Scene, points: np.ndarray) -> np.ndarray:
    """Distance to the bounds walls, positive inside the bounds."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.min(np.minimum(points - scene.bounds_min, scene.bounds_max - points), axis=-1)


def gt_sdf(scene: Scene, p: np.ndarray) -> Union[float, np.ndarray]:
    """Signed distance to the boxes and the bounds shell, negative inside solids."""
    p = np.asarray(p, dtype=np.float64)
    points = p.reshape(-1, 3)
    sdf = np.minimum(box_union_sdf(scene.boxes, points), shell_distance(scene, points))
    return float(sdf[0]) if p.ndim == 1 else sdf


def _face_lattice(lo: np.ndarray, hi: np.ndarray, axis: int, level: float, spacing: float) -> np.ndarray:
    others = [a for a in range(3) if a != axis]
    ticks = [np.linspace(lo[a], hi[a], int(round((hi[a] - lo[a]) / spacing)) + 1) for a in others]
    grid_a, grid_b = np.meshgrid(ticks[0], ticks[1], indexing="ij")
    points = np.empty((grid_a.size, 3))
    points[:, axis] = level
    points[:, others[0]] = grid_a.ravel()
    points[:, others[1]] = grid_b.ravel()
    return points


def gt_surface_samples(scene: Scene, spacing: float, include_bounds: bool = True) -> np.ndarray:
    """
    Regular samples on every visible box face and on the inner faces of the bounds.

    A sample is kept when a point nudged off the surface along its outward
    normal is inside the bounds and not strictly inside any box. Duplicates on
    shared edges are merged.
    """
    if spacing <= 0:
        raise DomainError("spacing must be positive")
    faces: List[np.ndarray] = []
    normals: List[np.ndarray] = []
    surfaces = [(lo, hi, 1.0) for lo, hi in scene.boxes]
    if include_bounds:
        surfaces.append((scene.bounds_min, scene.bounds_max, -1.0))
    for lo, hi, outward in surfaces:
        for axis in range(3):
            for level, sign in ((lo[axis], -1.0), (hi[axis], 1.0)):
                pts = _face_lattice(lo, hi, axis, level, spacing)
                normal = np.zeros(3)
                normal[axis] = sign * outward
                faces.append(pts)
                normals.append(np.broadcast_to(normal, pts.shape))
    if not faces:
        return np.zeros((0, 3))
    points = np.concatenate(faces)
    nudged = points + SURFACE_NUDGE * np.concatenate(normals)
    keep = (box_union_sdf(scene.boxes, nudged) >= 0.0) & (shell_distance(scene, nudged) > 0.0)
    kept = points[keep]
    _, unique_rows = np.unique(np.round(kept, 9), axis=0, return_index=True)
    return kept[np.sort(unique_rows)]
