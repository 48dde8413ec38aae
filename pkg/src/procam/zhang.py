"""Planar-target calibration: DLT homographies, closed-form intrinsics,
extrinsics extraction, and joint nonlinear refinement per device.

Works identically for the camera (checkerboard corners) and the projector
(structured-light nodes warped to board coordinates paired with projector
pixels); both are pinhole devices with Brown-Conrady distortion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import (
    Distortion,
    Intrinsics,
    Pose,
    matrix_to_rotation_vector,
    rotation_vector_to_matrix,
)

log = logging.getLogger(__name__)

# Wild refinement steps can push a board behind the device; the residual
# becomes this finite sentinel so the step is rejected instead of crashing.
BEHIND_DEVICE_SENTINEL = 1.0e6


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class PlanarObservation:
    """Board-to-image correspondences for one pose of one device."""

    pose_id: int
    board: np.ndarray  # (M, 2) mm on the z=0 board plane
    image: np.ndarray  # (M, 2) px

    def __post_init__(self):
        board = np.asarray(self.board, dtype=float).reshape(-1, 2)
        image = np.asarray(self.image, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "board", board)
        object.__setattr__(self, "image", image)
        if board.shape[0] != image.shape[0] or board.shape[0] < 4:
            raise CalibrationError("each pose needs at least 4 point pairs")


@dataclass
class DeviceCalibration:
    intrinsics: Intrinsics
    distortion: Distortion
    poses: list
    rms: float
    init_rms: float
    converged: bool
    iterations: int


def _normalization_transform(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    mean_dist = np.linalg.norm(pts - centroid, axis=1).mean()
    if mean_dist < 1e-12:
        raise CalibrationError("degenerate configuration")
    s = np.sqrt(2.0) / mean_dist
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def estimate_homography_dlt(board_pts, image_pts) -> np.ndarray:
    """Hartley-normalized DLT from board-plane points to image points."""
    X = np.asarray(board_pts, dtype=float).reshape(-1, 2)
    U = np.asarray(image_pts, dtype=float).reshape(-1, 2)
    if X.shape[0] < 4 or X.shape[0] != U.shape[0]:
        raise CalibrationError("need at least 4 point pairs")
    Tb = _normalization_transform(X)
    Ti = _normalization_transform(U)
    Xn = X @ Tb[:2, :2].T + Tb[:2, 2]
    Un = U @ Ti[:2, :2].T + Ti[:2, 2]

    n = X.shape[0]
    A = np.zeros((2 * n, 9))
    A[0::2, 0] = -Xn[:, 0]
    A[0::2, 1] = -Xn[:, 1]
    A[0::2, 2] = -1.0
    A[0::2, 6] = Un[:, 0] * Xn[:, 0]
    A[0::2, 7] = Un[:, 0] * Xn[:, 1]
    A[0::2, 8] = Un[:, 0]
    A[1::2, 3] = -Xn[:, 0]
    A[1::2, 4] = -Xn[:, 1]
    A[1::2, 5] = -1.0
    A[1::2, 6] = Un[:, 1] * Xn[:, 0]
    A[1::2, 7] = Un[:, 1] * Xn[:, 1]
    A[1::2, 8] = Un[:, 1]

    _, s, Vt = np.linalg.svd(A)
    if s[7] < 1e-9 * s[0]:
        raise CalibrationError("degenerate configuration")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Ti) @ Hn @ Tb
    if abs(np.linalg.det(H)) < 1e-12 * np.linalg.norm(H) ** 3:
        raise CalibrationError("degenerate configuration")
    if H[2, 2] != 0:
        H = H / H[2, 2]
    return H


def _conic_row(H: np.ndarray, i: int, j: int) -> np.ndarray:
    # v_ij with the zero-skew parameterization b = [B11, B22, B13, B23, B33]
    hi, hj = H[:, i], H[:, j]
    return np.array(
        [
            hi[0] * hj[0],
            hi[1] * hj[1],
            hi[2] * hj[0] + hi[0] * hj[2],
            hi[2] * hj[1] + hi[1] * hj[2],
            hi[2] * hj[2],
        ]
    )


def intrinsics_from_homographies(hs) -> Intrinsics:
    """Closed-form zero-skew intrinsics from the image of the absolute conic."""
    if len(hs) < 3:
        raise CalibrationError("insufficient poses")
    rows = []
    for H in hs:
        H = np.asarray(H, dtype=float)
        H = H / np.linalg.norm(H)
        rows.append(_conic_row(H, 0, 1))
        rows.append(_conic_row(H, 0, 0) - _conic_row(H, 1, 1))
    V = np.array(rows)
    _, s, Vt = np.linalg.svd(V)
    if s[-2] < 1e-8 * s[0]:
        raise CalibrationError("degenerate pose set")
    b = Vt[-1]
    if b[0] < 0:
        b = -b
    B11, B22, B13, B23, B33 = b
    if B11 <= 0 or B22 <= 0:
        raise CalibrationError("degenerate pose set")
    v0 = -B23 / B22
    lam = B33 - B13 * B13 / B11 + v0 * B23
    if lam <= 0 or lam / B11 <= 0 or lam / B22 <= 0:
        raise CalibrationError("degenerate pose set")
    fx = float(np.sqrt(lam / B11))
    fy = float(np.sqrt(lam / B22))
    u0 = float(-B13 * fx * fx / lam)
    return Intrinsics(fx, fy, u0, float(v0))


def extrinsics_from_homography(intr: Intrinsics, H) -> Pose:
    """Recover the board pose from its homography, enforcing positive depth."""
    H = np.asarray(H, dtype=float)
    Kinv = np.linalg.inv(intr.matrix)
    lam = 1.0 / np.linalg.norm(Kinv @ H[:, 0])
    for sign in (1.0, -1.0):
        r1 = sign * lam * (Kinv @ H[:, 0])
        r2 = sign * lam * (Kinv @ H[:, 1])
        t = sign * lam * (Kinv @ H[:, 2])
        if t[2] > 0:
            break
    else:
        raise CalibrationError("board behind camera")
    r3 = np.cross(r1, r2)
    U, _, Vt = np.linalg.svd(np.column_stack([r1, r2, r3]))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return Pose(matrix_to_rotation_vector(R), t)


class _DeviceProblem:
    """Flattened observation arrays plus the residual/Jacobian machinery."""

    def __init__(self, observations, fix_distortion=False):
        self.fix_distortion = fix_distortion
        self.n_poses = len(observations)
        boards, images, index = [], [], []
        self.row_slices = []
        start = 0
        for j, obs in enumerate(observations):
            m = obs.board.shape[0]
            boards.append(np.concatenate([obs.board, np.zeros((m, 1))], axis=1))
            images.append(obs.image)
            index.append(np.full(m, j))
            self.row_slices.append(slice(2 * start, 2 * (start + m)))
            start += m
        self.board3 = np.concatenate(boards)
        self.image = np.concatenate(images)
        self.pose_index = np.concatenate(index)
        self.n_points = start

    def residuals(self, params: np.ndarray) -> np.ndarray:
        fx, fy, cx, cy, k1, k2, p1, p2 = params[:8]
        if fx <= 0 or fy <= 0:
            return np.full(2 * self.n_points, BEHIND_DEVICE_SENTINEL)
        pose_block = params[8:].reshape(self.n_poses, 6)
        R = np.stack([rotation_vector_to_matrix(pb[:3]) for pb in pose_block])
        t = pose_block[:, 3:]
        X = np.einsum("pij,pj->pi", R[self.pose_index], self.board3) + t[self.pose_index]
        z = X[:, 2]
        res = np.full((self.n_points, 2), BEHIND_DEVICE_SENTINEL)
        ok = z > 0
        if np.any(ok):
            x = X[ok, 0] / z[ok]
            y = X[ok, 1] / z[ok]
            r2 = x * x + y * y
            radial = 1.0 + k1 * r2 + k2 * r2 * r2
            xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
            yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
            res[ok, 0] = fx * xd + cx - self.image[ok, 0]
            res[ok, 1] = fy * yd + cy - self.image[ok, 1]
        return res.ravel()

    def jacobian(self, params: np.ndarray, r0: np.ndarray) -> np.ndarray:
        """Forward differences with pose columns grouped.

        Rows of pose j depend only on the shared device parameters and on
        pose j itself, so one evaluation can carry the same slot of every
        pose at once; the off-block entries are exactly zero.
        """
        J = np.zeros((r0.size, params.size))
        for i in range(8):
            if self.fix_distortion and 4 <= i < 8:
                # zero column keeps the damped step for this coordinate
                # exactly zero, freezing the parameter at its start value
                continue
            h = 1e-7 * max(1.0, abs(params[i]))
            pp = params.copy()
            pp[i] += h
            J[:, i] = (self.residuals(pp) - r0) / h
        for slot in range(6):
            pp = params.copy()
            steps = np.empty(self.n_poses)
            for j in range(self.n_poses):
                i = 8 + 6 * j + slot
                steps[j] = 1e-7 * max(1.0, abs(params[i]))
                pp[i] += steps[j]
            diff = self.residuals(pp) - r0
            for j in range(self.n_poses):
                rows = self.row_slices[j]
                J[rows, 8 + 6 * j + slot] = diff[rows] / steps[j]
        return J


def _fd_jacobian(fun, p: np.ndarray, r0: np.ndarray) -> np.ndarray:
    J = np.empty((r0.size, p.size))
    for i in range(p.size):
        h = 1e-7 * max(1.0, abs(p[i]))
        pp = p.copy()
        pp[i] += h
        J[:, i] = (fun(pp) - r0) / h
    return J


def levenberg_marquardt(fun, p0: np.ndarray, max_iter: int = 200,
                        cost_tol: float = 1e-12, grad_tol: float = 1e-10,
                        jacobian=None):
    """Dense LM with multiplicative damping.

    mu starts at 1e-3 times the largest Gauss-Newton diagonal, grows by 10
    on a rejected step and shrinks by 10 on an accepted one.  Returns the
    best iterate along with convergence bookkeeping.  `jacobian(p, r)` may
    be supplied to exploit problem structure; the default is plain forward
    differences.
    """
    if jacobian is None:
        jacobian = lambda p, r: _fd_jacobian(fun, p, r)
    p = np.asarray(p0, dtype=float).copy()
    r = fun(p)
    cost = float(r @ r)
    J = jacobian(p, r)
    JtJ = J.T @ J
    g = J.T @ r
    mu = 1e-3 * float(np.max(np.diag(JtJ)))
    converged = False
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        # below this cost the residual is float noise; relative-drop and
        # gradient tests are meaningless there and mu just inflates
        if cost < 1e-18:
            converged = True
            break
        if np.linalg.norm(g, ord=np.inf) < grad_tol:
            converged = True
            break
        try:
            dp = np.linalg.solve(JtJ + mu * np.eye(p.size), -g)
        except np.linalg.LinAlgError:
            mu *= 10.0
            continue
        r_new = fun(p + dp)
        cost_new = float(r_new @ r_new)
        if cost_new < cost:
            rel_drop = (cost - cost_new) / max(cost, 1e-300)
            p = p + dp
            r = r_new
            cost = cost_new
            mu = max(mu / 10.0, 1e-300)
            if rel_drop < cost_tol:
                converged = True
                break
            J = jacobian(p, r)
            JtJ = J.T @ J
            g = J.T @ r
        else:
            mu *= 10.0
            if mu > 1e16:
                # damping exhausted: no step in the whole Gauss-Newton/
                # gradient-descent family descends, so the iterate is a
                # minimum to double precision
                converged = True
                break
    return p, cost, converged, iterations


def calibrate_device(observations: list,
                     fix_distortion: bool = False) -> DeviceCalibration:
    """Full Zhang calibration of one device from planar observations.

    With `fix_distortion` the distortion coefficients stay pinned at zero
    and only intrinsics and poses are refined (pure pinhole model).
    """
    if len(observations) < 3:
        raise CalibrationError("insufficient poses")
    hs = [estimate_homography_dlt(o.board, o.image) for o in observations]
    intr0 = intrinsics_from_homographies(hs)
    poses0 = [extrinsics_from_homography(intr0, H) for H in hs]

    problem = _DeviceProblem(observations, fix_distortion=fix_distortion)
    p0 = np.concatenate(
        [intr0.as_array(), np.zeros(4)]
        + [np.concatenate([pose.r, pose.t]) for pose in poses0]
    )
    r0 = problem.residuals(p0)
    init_cost = float(r0 @ r0)
    p, cost, converged, iterations = levenberg_marquardt(
        problem.residuals, p0, jacobian=problem.jacobian
    )
    if not converged:
        log.warning("device refinement hit the iteration cap (%d)", iterations)

    poses = []
    for idx in range(len(observations)):
        r = p[8 + 6 * idx : 11 + 6 * idx]
        t = p[11 + 6 * idx : 14 + 6 * idx]
        r = matrix_to_rotation_vector(rotation_vector_to_matrix(r))
        poses.append(Pose(r, t))
    return DeviceCalibration(
        intrinsics=Intrinsics(*p[:4]),
        distortion=Distortion(*p[4:8]),
        poses=poses,
        rms=float(np.sqrt(cost / problem.n_points)),
        init_rms=float(np.sqrt(init_cost / problem.n_points)),
        converged=converged,
        iterations=iterations,
    )
