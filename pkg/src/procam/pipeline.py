"""Three-stage calibration of a camera-projector rig from one capture per
board pose.

Stage 1 calibrates the camera from checkerboard corners.  Stage 2 turns
the camera into a measuring device: observed structured-light nodes are
undistorted and warped through each pose's board homography onto the
board plane, giving board-space/projector-pixel pairs that calibrate the
projector the same planar way, plus a median-aggregated stereo transform.
Stage 3 hands everything to bundle adjustment, which also lifts the
warped node positions off the plane where the images support it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from jsonschema import Draft202012Validator

from . import ba
from .geometry import (
    Distortion,
    Intrinsics,
    Pose,
    homography_from_pose,
    matrix_to_rotation_vector,
    rotation_vector_to_matrix,
    undistort_pixels,
    warp_to_board,
    median_pose,
)
from .zhang import CalibrationError, DeviceCalibration, PlanarObservation, calibrate_device

log = logging.getLogger(__name__)

MIN_NODES_PER_POSE = 4


class CaptureFormatError(ValueError):
    """Capture file rejected; `pointer` locates the first offending field."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"


@dataclass(frozen=True)
class BoardSpec:
    """Checkerboard geometry: inner-corner grid and square size."""

    corner_cols: int
    corner_rows: int
    square_mm: float

    def __post_init__(self):
        if self.corner_cols < 2 or self.corner_rows < 2:
            raise CalibrationError("board needs at least a 2x2 corner grid")
        if not self.square_mm > 0:
            raise CalibrationError("square size must be positive")

    def corner_points(self) -> np.ndarray:
        """Inner corners in board millimeters, row-major from the origin."""
        cols = np.arange(self.corner_cols) * self.square_mm
        rows = np.arange(self.corner_rows) * self.square_mm
        g = np.stack(np.meshgrid(cols, rows), axis=-1)
        return g.reshape(-1, 2)


@dataclass(frozen=True)
class PoseCapture:
    """Extracted point sets for one board pose.

    `corners` follows BoardSpec.corner_points order.  Node arrays are
    aligned: row i of node_ids, node_cam, node_prj describe one node.
    """

    pose_id: int
    corners: np.ndarray
    node_ids: np.ndarray
    node_cam: np.ndarray
    node_prj: np.ndarray

    def __post_init__(self):
        corners = np.asarray(self.corners, dtype=float)
        ids = np.asarray(self.node_ids, dtype=int).reshape(-1, 2)
        cam = np.asarray(self.node_cam, dtype=float).reshape(-1, 2)
        prj = np.asarray(self.node_prj, dtype=float).reshape(-1, 2)
        if corners.ndim != 2 or corners.shape[1] != 2 or corners.shape[0] < 4:
            raise CalibrationError("capture needs at least 4 checkerboard corners")
        if not (ids.shape[0] == cam.shape[0] == prj.shape[0]):
            raise CalibrationError("node arrays must have matching lengths")
        if ids.size and np.any(ids < 0):
            raise CalibrationError("node grid ids must be nonnegative")
        object.__setattr__(self, "corners", corners)
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "node_cam", cam)
        object.__setattr__(self, "node_prj", prj)

    @property
    def node_count(self) -> int:
        return self.node_cam.shape[0]


@dataclass
class SystemCalibration:
    """Full rig model plus the refined node positions and fit quality."""

    cam_intr: Intrinsics
    cam_dist: Distortion
    poses: list
    pose_ids: list
    prj_intr: Intrinsics
    prj_dist: Distortion
    stereo: Pose
    node_points: list
    rms_camera: float
    rms_projector: float
    rms_stereo: float
    converged: bool
    report: ba.ConvergenceReport | None = None


def stage1_camera(captures, board: BoardSpec):
    """Camera calibration from corners plus the per-pose board homographies."""
    if len(captures) == 0:
        raise CalibrationError("insufficient poses")
    expected = board.corner_cols * board.corner_rows
    board_pts = board.corner_points()
    observations = []
    for cap in captures:
        if cap.corners.shape[0] != expected:
            raise CalibrationError(
                f"pose {cap.pose_id}: expected {expected} corners, "
                f"got {cap.corners.shape[0]}"
            )
        observations.append(PlanarObservation(cap.pose_id, board_pts, cap.corners))
    calib = calibrate_device(observations)
    homographies = [homography_from_pose(calib.intrinsics, pose) for pose in calib.poses]
    return calib, homographies


def stage2_projector(captures, camera_calib: DeviceCalibration, homographies):
    """Projector calibration from warped nodes plus the stereo initializer.

    Returns (projector DeviceCalibration, stereo Pose, per-pose warped
    node points with z=0, kept capture indices).
    """
    kept = []
    observations = []
    x_m_init = []
    for j, cap in enumerate(captures):
        if cap.node_count < MIN_NODES_PER_POSE:
            log.warning("pose %d dropped: only %d nodes", cap.pose_id, cap.node_count)
            continue
        und = undistort_pixels(cap.node_cam, camera_calib.intrinsics,
                               camera_calib.distortion)
        x_m = warp_to_board(und, homographies[j])
        observations.append(PlanarObservation(cap.pose_id, x_m[:, :2], cap.node_prj))
        x_m_init.append(x_m)
        kept.append(j)
    if len(kept) < 3:
        raise CalibrationError("insufficient poses")
    prj_calib = calibrate_device(observations)
    rotations = []
    translations = []
    for local, j in enumerate(kept):
        cam_pose = camera_calib.poses[j]
        prj_pose = prj_calib.poses[local]
        R_cp = prj_pose.rotation @ cam_pose.rotation.T
        t_cp = prj_pose.t - R_cp @ cam_pose.t
        rotations.append(R_cp)
        translations.append(t_cp)
    stereo = median_pose(rotations, translations)
    return prj_calib, stereo, x_m_init, kept


def evaluate_rms(cam_intr, cam_dist, prj_intr, prj_dist, stereo, poses,
                 node_points, observations: ba.BundleObservations):
    """Node-based (camera, projector, stereo-pooled) RMS in pixels."""
    params = ba.pack(cam_intr, cam_dist, prj_intr, prj_dist, stereo,
                     poses, node_points)
    problem = ba.BundleProblem(observations, node_points)
    res = problem.residuals(params, np.ones(problem.layout.n_points)).reshape(-1, 7)
    n_p = res.shape[0]
    cam_sq = float(np.sum(res[:, 0:2] ** 2))
    prj_sq = float(np.sum(res[:, 2:4] ** 2))
    return (
        float(np.sqrt(cam_sq / n_p)),
        float(np.sqrt(prj_sq / n_p)),
        float(np.sqrt((cam_sq + prj_sq) / (2 * n_p))),
    )


def _canonical(pose: Pose) -> Pose:
    return Pose(matrix_to_rotation_vector(rotation_vector_to_matrix(pose.r)), pose.t)


def calibrate_full(captures, board: BoardSpec, *, skip_ba: bool = False,
                   lambda_mode: str = "irls", max_outer: int = 5) -> SystemCalibration:
    """Run all three stages and assemble the final system model.

    With skip_ba the joint refinement only re-fits the board poses to the
    node observations; intrinsics, distortion, the stereo transform, and
    the node points stay at their stage-2 values.
    """
    camera_calib, homographies = stage1_camera(captures, board)
    prj_calib, stereo0, x_m_init, kept = stage2_projector(
        captures, camera_calib, homographies
    )
    observations = ba.BundleObservations(
        tuple(captures[j].node_cam for j in kept),
        tuple(captures[j].node_prj for j in kept),
    )
    layout = ba.ParameterLayout(observations.counts)
    params0 = ba.pack(
        camera_calib.intrinsics, camera_calib.distortion,
        prj_calib.intrinsics, prj_calib.distortion,
        stereo0, [camera_calib.poses[j] for j in kept], x_m_init,
    )
    free_mask = None
    mode = lambda_mode
    if skip_ba:
        free_mask = np.zeros(layout.n_params, dtype=bool)
        for j in range(layout.n_poses):
            free_mask[layout.pose_slice(j)] = True
        mode = "frozen"
    params, report = ba.solve(params0, observations, x_m_init,
                              lambda_mode=mode, max_outer=max_outer,
                              free_mask=free_mask)
    sp = ba.unpack(params, layout)
    poses = [_canonical(p) for p in sp.poses]
    rms_c, rms_p, rms_s = evaluate_rms(
        sp.cam_intr, sp.cam_dist, sp.prj_intr, sp.prj_dist,
        _canonical(sp.stereo), poses, list(sp.points), observations,
    )
    return SystemCalibration(
        cam_intr=sp.cam_intr,
        cam_dist=sp.cam_dist,
        poses=poses,
        pose_ids=[captures[j].pose_id for j in kept],
        prj_intr=sp.prj_intr,
        prj_dist=sp.prj_dist,
        stereo=_canonical(sp.stereo),
        node_points=list(sp.points),
        rms_camera=rms_c,
        rms_projector=rms_p,
        rms_stereo=rms_s,
        converged=report.converged,
        report=report,
    )


# -- capture and result files -----------------------------------------------

_POINT = {
    "type": "array",
    "items": {"type": "number"},
    "minItems": 2,
    "maxItems": 2,
}

CAPTURE_SCHEMA = {
    "type": "object",
    "required": ["schema", "board", "poses"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": 1},
        "board": {
            "type": "object",
            "required": ["corner_cols", "corner_rows", "square_mm"],
            "additionalProperties": False,
            "properties": {
                "corner_cols": {"type": "integer", "minimum": 2},
                "corner_rows": {"type": "integer", "minimum": 2},
                "square_mm": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "poses": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["pose_id", "corners", "nodes"],
                "additionalProperties": False,
                "properties": {
                    "pose_id": {"type": "integer", "minimum": 0},
                    "corners": {"type": "array", "minItems": 4, "items": _POINT},
                    "nodes": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["grid", "x_c", "x_p"],
                            "additionalProperties": False,
                            "properties": {
                                "grid": {
                                    "type": "array",
                                    "items": {"type": "integer", "minimum": 0},
                                    "minItems": 2,
                                    "maxItems": 2,
                                },
                                "x_c": _POINT,
                                "x_p": _POINT,
                            },
                        },
                    },
                },
            },
        },
    },
}

_VALIDATOR = Draft202012Validator(CAPTURE_SCHEMA)


def _pointer(error) -> str:
    return "/" + "/".join(str(p) for p in error.absolute_path)


def captures_to_dict(board: BoardSpec, captures) -> dict:
    poses = []
    for cap in captures:
        poses.append({
            "pose_id": int(cap.pose_id),
            "corners": cap.corners.tolist(),
            "nodes": [
                {
                    "grid": [int(r), int(c)],
                    "x_c": [float(u), float(v)],
                    "x_p": [float(s), float(t)],
                }
                for (r, c), (u, v), (s, t) in zip(
                    cap.node_ids, cap.node_cam, cap.node_prj
                )
            ],
        })
    return {
        "schema": 1,
        "board": {
            "corner_cols": board.corner_cols,
            "corner_rows": board.corner_rows,
            "square_mm": board.square_mm,
        },
        "poses": poses,
    }


def save_captures(path, board: BoardSpec, captures) -> None:
    with open(path, "w") as fh:
        json.dump(captures_to_dict(board, captures), fh, indent=1)
        fh.write("\n")


def captures_from_dict(data: dict):
    errors = sorted(_VALIDATOR.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        raise CaptureFormatError(_pointer(errors[0]), errors[0].message)
    b = data["board"]
    board = BoardSpec(b["corner_cols"], b["corner_rows"], b["square_mm"])
    expected = board.corner_cols * board.corner_rows
    captures = []
    for j, entry in enumerate(data["poses"]):
        if len(entry["corners"]) != expected:
            raise CaptureFormatError(
                f"/poses/{j}/corners",
                f"expected {expected} corners for the declared board, "
                f"got {len(entry['corners'])}",
            )
        nodes = entry["nodes"]
        ids = np.array([n["grid"] for n in nodes], dtype=int).reshape(-1, 2)
        cam = np.array([n["x_c"] for n in nodes], dtype=float).reshape(-1, 2)
        prj = np.array([n["x_p"] for n in nodes], dtype=float).reshape(-1, 2)
        captures.append(PoseCapture(entry["pose_id"], np.array(entry["corners"]),
                                    ids, cam, prj))
    return board, captures


def load_captures(path):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CaptureFormatError("", f"not valid JSON: {exc}") from exc
    return captures_from_dict(data)


def result_to_dict(calib: SystemCalibration) -> dict:
    return {
        "schema": 1,
        "camera": {
            "intrinsics": {
                "fx": calib.cam_intr.fx, "fy": calib.cam_intr.fy,
                "cx": calib.cam_intr.cx, "cy": calib.cam_intr.cy,
            },
            "distortion": {
                "k1": calib.cam_dist.k1, "k2": calib.cam_dist.k2,
                "p1": calib.cam_dist.p1, "p2": calib.cam_dist.p2,
            },
            "poses": [
                {"pose_id": pid, "r": pose.r.tolist(), "t": pose.t.tolist()}
                for pid, pose in zip(calib.pose_ids, calib.poses)
            ],
        },
        "projector": {
            "intrinsics": {
                "fx": calib.prj_intr.fx, "fy": calib.prj_intr.fy,
                "cx": calib.prj_intr.cx, "cy": calib.prj_intr.cy,
            },
            "distortion": {
                "k1": calib.prj_dist.k1, "k2": calib.prj_dist.k2,
                "p1": calib.prj_dist.p1, "p2": calib.prj_dist.p2,
            },
            "stereo": {"r": calib.stereo.r.tolist(), "t": calib.stereo.t.tolist()},
        },
        "node_points": [
            {"pose_id": pid, "points": pts.tolist()}
            for pid, pts in zip(calib.pose_ids, calib.node_points)
        ],
        "rms": {
            "camera": calib.rms_camera,
            "projector": calib.rms_projector,
            "stereo": calib.rms_stereo,
        },
        "converged": calib.converged,
    }


def save_result(path, calib: SystemCalibration) -> None:
    with open(path, "w") as fh:
        json.dump(result_to_dict(calib), fh, indent=1)
        fh.write("\n")
