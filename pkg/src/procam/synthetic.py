"""Ground-truth scene generation and noise injection for benchmarking.

A scene is exact by construction: pattern nodes are back-projected from
the projector onto sampled board planes, so every stored pixel
observation regenerates bit-for-bit from the stored geometry.  Noise is
then injected in two places mirroring real capture defects: board-space
perturbations (an imperfectly planar board, in mm) and image-space
perturbations (detection error, in px).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    Distortion,
    Intrinsics,
    Plane3,
    Pose,
    matrix_to_rotation_vector,
    normalized_from_pixel,
    project,
    rotation_vector_to_matrix,
    transform_points,
    undistort,
)
from .pattern import build_pattern_graph
from .pipeline import BoardSpec, PoseCapture


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class DeviceSpec:
    """One pinhole device: ground-truth model plus image size."""

    intrinsics: Intrinsics
    distortion: Distortion
    resolution: tuple

    def contains(self, px: np.ndarray) -> np.ndarray:
        w, h = self.resolution
        return (
            (px[..., 0] >= 0.0) & (px[..., 0] <= w - 1.0)
            & (px[..., 1] >= 0.0) & (px[..., 1] <= h - 1.0)
        )


DEFAULT_CAMERA = DeviceSpec(
    Intrinsics(600.0, 600.0, 320.0, 240.0), Distortion(k1=-0.1), (640, 480)
)
DEFAULT_PROJECTOR = DeviceSpec(
    Intrinsics(1100.0, 1100.0, 400.0, 550.0), Distortion(k1=-0.08), (800, 600)
)


@dataclass(frozen=True)
class SceneConfig:
    camera: DeviceSpec = DEFAULT_CAMERA
    projector: DeviceSpec = DEFAULT_PROJECTOR
    baseline_mm: float = 400.0
    aim_point_mm: tuple = (0.0, 0.0, 565.0)
    n_poses: int = 10
    depth_range_mm: tuple = (430.0, 700.0)
    tilt_range_deg: tuple = (5.0, 30.0)
    lateral_jitter_mm: float = 40.0
    board: BoardSpec = BoardSpec(9, 7, 30.0)
    pattern_k: int = 4
    pattern_n: int = 3
    stripe_spacing_px: int = 12
    # nodes are sampled from a central pattern window roughly matching the
    # board's angular size; stripes outside it rarely hit the board at all
    node_margin: int = 16
    node_stride: int = 3
    min_visible_fraction: float = 0.9
    max_attempts: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_poses < 3:
            raise SceneError("need at least 3 poses")
        if not (0 < self.depth_range_mm[0] <= self.depth_range_mm[1]):
            raise SceneError("depth range must be positive and ordered")
        if self.node_stride < 1 or self.node_margin < 0:
            raise SceneError("node window must be nonempty")


@dataclass(frozen=True)
class PoseTruth:
    """Exact geometry and observations of one board pose."""

    pose: Pose
    plane: Plane3
    node_ids: np.ndarray     # (K, 2) grid row/col
    node_model: np.ndarray   # (K, 3) board frame, z = 0
    node_cam: np.ndarray     # (K, 2) camera px
    node_prj: np.ndarray     # (K, 2) projector px
    corner_cam: np.ndarray   # (M, 2) camera px


@dataclass(frozen=True)
class GroundTruthScene:
    config: SceneConfig
    stereo: Pose             # camera frame -> projector frame
    corner_model: np.ndarray  # (M, 3) board frame, z = 0, shared by poses
    poses: tuple


@dataclass(frozen=True)
class NoisyCaptureSet:
    """Captures plus the perturbed geometry that now counts as truth."""

    captures: tuple
    node_model: tuple        # per pose (K, 3) perturbed board-frame nodes
    node_camera_frame: tuple  # per pose (K, 3) the same nodes in the camera frame
    corner_model: tuple      # per pose (M, 3) perturbed corners
    sigma_px: float
    sigma_mm: float


def _orthonormal_from(primary: np.ndarray) -> np.ndarray:
    """Right-handed basis whose first column is the given unit vector."""
    helper = np.array([1.0, 0.0, 0.0])
    if abs(primary @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    u2 = helper - (helper @ primary) * primary
    u2 /= np.linalg.norm(u2)
    u3 = np.cross(primary, u2)
    return np.stack([primary, u2, u3], axis=1)


def aim_projector(projector: DeviceSpec, center_cam, target_cam,
                  pattern_center_px) -> Pose:
    """Stereo pose placing the projector at `center_cam` so that the ray
    through the pattern-center pixel passes through `target_cam`."""
    center_cam = np.asarray(center_cam, dtype=float)
    target_cam = np.asarray(target_cam, dtype=float)
    xn = undistort(
        normalized_from_pixel(np.asarray(pattern_center_px, dtype=float),
                              projector.intrinsics),
        projector.distortion,
    )
    d_prj = np.append(xn, 1.0)
    d_prj /= np.linalg.norm(d_prj)
    w = target_cam - center_cam
    norm = np.linalg.norm(w)
    if norm < 1e-9:
        raise SceneError("aim target coincides with the projector center")
    w /= norm
    R_pc = _orthonormal_from(w) @ _orthonormal_from(d_prj).T
    R_cp = R_pc.T
    return Pose(matrix_to_rotation_vector(R_cp), -R_cp @ center_cam)


def _rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# physical board border past the outer corners, in squares; stripes
# projected beyond the board edge hit whatever is behind it, so those
# nodes never exist as detections
BOARD_BORDER_SQUARES = 2.0

# a pose whose stripe footprint barely clips the board is degenerate no
# matter how well the camera frames it
MIN_BOARD_NODES = 20


def board_observations(pose: Pose, plane: Plane3, node_px: np.ndarray,
                       config: SceneConfig, stereo: Pose):
    """Back-project pattern pixels onto a board plane and image the result.

    Returns (visible mask over the given nodes, node_model, node_cam,
    node_prj, n_on_board) where the arrays cover only the visible subset
    and n_on_board counts the nodes that physically land on the board.
    """
    prj = config.projector
    R_cp = stereo.rotation
    origin = -R_cp.T @ stereo.t
    xn = undistort(normalized_from_pixel(node_px, prj.intrinsics), prj.distortion)
    dirs_prj = np.concatenate([xn, np.ones(xn.shape[:-1] + (1,))], axis=-1)
    dirs_cam = dirs_prj @ R_cp  # R_cp.T applied to each row
    denom = dirs_cam @ plane.n
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (plane.d - plane.n @ origin) / denom
    valid = (np.abs(denom) > 1e-9) & (s > 0)
    X_cam = origin + np.where(valid, s, 1.0)[:, None] * dirs_cam
    R_mc = pose.rotation
    X_model = (X_cam - pose.t) @ R_mc
    X_model[:, 2] = 0.0
    border = BOARD_BORDER_SQUARES * config.board.square_mm
    hi_x = (config.board.corner_cols - 1) * config.board.square_mm + border
    hi_y = (config.board.corner_rows - 1) * config.board.square_mm + border
    valid &= (
        (X_model[:, 0] >= -border) & (X_model[:, 0] <= hi_x)
        & (X_model[:, 1] >= -border) & (X_model[:, 1] <= hi_y)
    )
    n_on_board = int(np.count_nonzero(valid))
    # depth guards in both device frames, then the image bounds
    z_cam = transform_points(pose, X_model)[:, 2]
    z_prj = transform_points(stereo, transform_points(pose, X_model))[:, 2]
    valid &= (z_cam > 1.0) & (z_prj > 1.0)
    if not np.any(valid):
        return valid, None, None, None, n_on_board
    node_model = X_model[valid]
    node_cam = project(node_model, pose, config.camera.intrinsics,
                       config.camera.distortion)
    inside = config.camera.contains(node_cam)
    keep = valid.copy()
    keep[np.flatnonzero(valid)[~inside]] = False
    if not np.any(keep):
        return keep, None, None, None, n_on_board
    node_model = X_model[keep]
    node_cam = project(node_model, pose, config.camera.intrinsics,
                       config.camera.distortion)
    node_prj = project(node_model, pose, prj.intrinsics, prj.distortion,
                       device_pose=stereo)
    return keep, node_model, node_cam, node_prj, n_on_board


def generate_scene(config: SceneConfig) -> GroundTruthScene:
    """Sample boards and produce exact observations for every pose."""
    rng = np.random.default_rng(config.seed)
    graph = build_pattern_graph(
        config.pattern_k, config.pattern_n,
        stripe_spacing_px=config.stripe_spacing_px,
        projector_resolution=config.projector.resolution,
    )
    idx = np.arange(config.node_margin, graph.m - config.node_margin,
                    config.node_stride)
    if idx.size < 2:
        raise SceneError("node window must contain at least 2 stripes per axis")
    grid_r, grid_c = np.meshgrid(idx, idx, indexing="ij")
    node_ids = np.stack([grid_r.ravel(), grid_c.ravel()], axis=1)
    node_px = graph.node_pixels[node_ids[:, 0], node_ids[:, 1]]
    pattern_center = graph.node_pixels.reshape(-1, 2).mean(axis=0)

    stereo = aim_projector(
        config.projector,
        np.array([config.baseline_mm, 0.0, 0.0]),
        config.aim_point_mm,
        pattern_center,
    )

    board_pts = config.board.corner_points()
    corners3 = np.concatenate([board_pts, np.zeros((board_pts.shape[0], 1))], axis=1)
    board_center = corners3.mean(axis=0)

    poses = []
    for j in range(config.n_poses):
        for attempt in range(config.max_attempts):
            depth = rng.uniform(*config.depth_range_mm)
            tilt = np.radians(rng.uniform(*config.tilt_range_deg))
            phi = rng.uniform(0.0, 2.0 * np.pi)
            spin = rng.uniform(-np.pi, np.pi)
            jit = config.lateral_jitter_mm
            jitter = rng.uniform(-jit, jit, 2)

            axis = np.array([np.cos(phi), np.sin(phi), 0.0])
            R_mc = rotation_vector_to_matrix(tilt * axis) @ _rot_z(spin)
            center = np.array([jitter[0], jitter[1], depth])
            t_mc = center - R_mc @ board_center
            pose = Pose(matrix_to_rotation_vector(R_mc), t_mc)
            n = R_mc[:, 2]
            plane = Plane3(n, float(n @ t_mc))

            corner_cam3 = transform_points(pose, corners3)
            if np.any(corner_cam3[:, 2] <= 1.0):
                continue
            corner_cam = project(corners3, pose, config.camera.intrinsics,
                                 config.camera.distortion)
            if not np.all(config.camera.contains(corner_cam)):
                continue

            keep, node_model, node_cam, node_prj, n_on_board = board_observations(
                pose, plane, node_px, config, stereo
            )
            if node_model is None or n_on_board < MIN_BOARD_NODES:
                continue
            # visibility is judged against the nodes that exist on this
            # board, not the whole pattern window
            if np.count_nonzero(keep) < config.min_visible_fraction * n_on_board:
                continue
            poses.append(PoseTruth(
                pose=pose,
                plane=plane,
                node_ids=node_ids[keep],
                node_model=node_model,
                node_cam=node_cam,
                node_prj=node_prj,
                corner_cam=corner_cam,
            ))
            break
        else:
            raise SceneError("unsatisfiable config")
    return GroundTruthScene(
        config=config,
        stereo=stereo,
        corner_model=corners3,
        poses=tuple(poses),
    )


def captures_from_scene(scene: GroundTruthScene):
    """Noiseless PoseCapture list straight from the stored observations."""
    return [
        PoseCapture(j, pt.corner_cam, pt.node_ids, pt.node_cam, pt.node_prj)
        for j, pt in enumerate(scene.poses)
    ]


def add_noise(scene: GroundTruthScene, sigma: float, rng, *,
              sigma_px: float | None = None, sigma_mm: float | None = None,
              out_of_plane_only: bool = False) -> NoisyCaptureSet:
    """Perturb board geometry (mm) and image observations (px).

    One shared `sigma` drives both unless overridden per channel.  Board
    perturbation comes first and the images are regenerated from the
    perturbed geometry, so the perturbed points are the actual truth the
    pixel observations encode; pixel noise is then added on top.
    """
    s_px = float(sigma if sigma_px is None else sigma_px)
    s_mm = float(sigma if sigma_mm is None else sigma_mm)
    if s_px < 0 or s_mm < 0:
        raise SceneError("noise levels must be nonnegative")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    cfg = scene.config
    cam, prj = cfg.camera, cfg.projector

    captures = []
    node_models = []
    node_cam_frames = []
    corner_models = []
    for j, pt in enumerate(scene.poses):
        corner_pert = scene.corner_model.copy()
        node_pert = pt.node_model.copy()
        if out_of_plane_only:
            corner_pert[:, 2] += rng.normal(0.0, s_mm, corner_pert.shape[0])
            node_pert[:, 2] += rng.normal(0.0, s_mm, node_pert.shape[0])
        else:
            corner_pert += rng.normal(0.0, s_mm, corner_pert.shape)
            node_pert += rng.normal(0.0, s_mm, node_pert.shape)

        corner_px = project(corner_pert, pt.pose, cam.intrinsics, cam.distortion)
        node_cam = project(node_pert, pt.pose, cam.intrinsics, cam.distortion)
        node_prj = project(node_pert, pt.pose, prj.intrinsics, prj.distortion,
                           device_pose=scene.stereo)
        corner_px = corner_px + rng.normal(0.0, s_px, corner_px.shape)
        node_cam = node_cam + rng.normal(0.0, s_px, node_cam.shape)
        node_prj = node_prj + rng.normal(0.0, s_px, node_prj.shape)

        captures.append(PoseCapture(j, corner_px, pt.node_ids, node_cam, node_prj))
        node_models.append(node_pert)
        node_cam_frames.append(transform_points(pt.pose, node_pert))
        corner_models.append(corner_pert)
    return NoisyCaptureSet(
        captures=tuple(captures),
        node_model=tuple(node_models),
        node_camera_frame=tuple(node_cam_frames),
        corner_model=tuple(corner_models),
        sigma_px=s_px,
        sigma_mm=s_mm,
    )
