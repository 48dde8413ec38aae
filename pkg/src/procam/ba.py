"""Joint refinement of the whole rig: both device models, all board poses,
the stereo transform, and one 3D point per observed pattern node.

The cost couples three residual families per node: camera reprojection,
projector reprojection (board -> camera -> projector), and a scale tether
pulling each refined point toward its initially warped board-plane
position.  The tether weight is exp(-d) where d is the squared tether
length in mm^2, recomputed between inner solves (IRLS), so points with
strong image evidence are free to leave the plane while unsupported ones
stay put.

Parameter vector layout (length 22 + 6N + 3*n_p):
  [0:4]    camera fx, fy, cx, cy
  [4:8]    camera k1, k2, p1, p2
  [8:12]   projector fx, fy, cx, cy
  [12:16]  projector k1, k2, p1, p2
  [16:22]  stereo r_cp, t_cp (camera frame -> projector frame)
  [22+6j : 28+6j]  board pose j (r_mc, t_mc)
  tail     node points, 3 per node, pose-major then node order

Residual vector layout (length 7 * n_p), node-major:
  [cam_du, cam_dv, prj_du, prj_dv, sqrt(w)*tx, sqrt(w)*ty, sqrt(w)*tz]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import csr_matrix

from .geometry import Distortion, Intrinsics, Pose, rotation_vector_to_matrix
from .zhang import BEHIND_DEVICE_SENTINEL

log = logging.getLogger(__name__)

CAM_INTR = slice(0, 4)
CAM_DIST = slice(4, 8)
PRJ_INTR = slice(8, 12)
PRJ_DIST = slice(12, 16)
STEREO = slice(16, 22)
POSE_BASE = 22


class BundleError(RuntimeError):
    pass


@dataclass(frozen=True)
class BundleObservations:
    """Per-pose camera and projector pixel arrays for the same node lists."""

    cam: tuple
    prj: tuple

    def __post_init__(self):
        cam = tuple(np.asarray(a, dtype=float) for a in self.cam)
        prj = tuple(np.asarray(a, dtype=float) for a in self.prj)
        if len(cam) == 0 or len(cam) != len(prj):
            raise BundleError("camera and projector observation lists must match")
        for c, p in zip(cam, prj):
            if c.ndim != 2 or c.shape[1] != 2 or c.shape != p.shape or c.shape[0] < 1:
                raise BundleError("each pose needs matching (M, 2) pixel arrays")
        object.__setattr__(self, "cam", cam)
        object.__setattr__(self, "prj", prj)

    @property
    def counts(self) -> tuple:
        return tuple(a.shape[0] for a in self.cam)


@dataclass(frozen=True)
class ParameterLayout:
    """Index bookkeeping for the packed parameter vector."""

    counts: tuple

    @property
    def n_poses(self) -> int:
        return len(self.counts)

    @property
    def n_points(self) -> int:
        return int(sum(self.counts))

    @property
    def n_params(self) -> int:
        return POSE_BASE + 6 * self.n_poses + 3 * self.n_points

    @property
    def n_residuals(self) -> int:
        return 7 * self.n_points

    @property
    def points_base(self) -> int:
        return POSE_BASE + 6 * self.n_poses

    def pose_slice(self, j: int) -> slice:
        return slice(POSE_BASE + 6 * j, POSE_BASE + 6 * j + 6)

    def node_offset(self, j: int) -> int:
        return int(sum(self.counts[:j]))

    def points_slice(self, j: int) -> slice:
        off = self.node_offset(j)
        return slice(self.points_base + 3 * off,
                     self.points_base + 3 * (off + self.counts[j]))


@dataclass(frozen=True)
class SystemParameters:
    """Unpacked view of a parameter vector."""

    cam_intr: Intrinsics
    cam_dist: Distortion
    prj_intr: Intrinsics
    prj_dist: Distortion
    stereo: Pose
    poses: tuple
    points: tuple  # per pose (M_j, 3) board-frame node positions


def pack(cam_intr, cam_dist, prj_intr, prj_dist, stereo, poses, points) -> np.ndarray:
    blocks = [cam_intr.as_array(), cam_dist.as_array(),
              prj_intr.as_array(), prj_dist.as_array(),
              stereo.r, stereo.t]
    for pose in poses:
        blocks.append(pose.r)
        blocks.append(pose.t)
    for pts in points:
        blocks.append(np.asarray(pts, dtype=float).reshape(-1))
    return np.concatenate(blocks)


def unpack(params: np.ndarray, layout: ParameterLayout) -> SystemParameters:
    params = np.asarray(params, dtype=float)
    if params.shape != (layout.n_params,):
        raise BundleError("parameter vector length mismatch")
    poses = []
    for j in range(layout.n_poses):
        block = params[layout.pose_slice(j)]
        poses.append(Pose(block[:3], block[3:]))
    points = []
    for j in range(layout.n_poses):
        points.append(params[layout.points_slice(j)].reshape(-1, 3).copy())
    return SystemParameters(
        cam_intr=Intrinsics.from_array(params[CAM_INTR]),
        cam_dist=Distortion.from_array(params[CAM_DIST]),
        prj_intr=Intrinsics.from_array(params[PRJ_INTR]),
        prj_dist=Distortion.from_array(params[PRJ_DIST]),
        stereo=Pose(params[16:19], params[19:22]),
        poses=tuple(poses),
        points=tuple(points),
    )


def lambda_weights(delta_m) -> np.ndarray:
    """Tether weights exp(-d) for per-node squared tether lengths d (mm^2)."""
    delta_m = np.asarray(delta_m, dtype=float)
    if np.any(delta_m < 0):
        raise BundleError("delta_m must be nonnegative")
    return np.exp(-delta_m)


def _pattern_arrays(counts):
    """Row/column index arrays of the Jacobian incidence pattern.

    Order is fixed: 8 camera columns, then 14 projector+stereo columns,
    then the 6 pose slots pose by pose, then the 3 point coordinates node
    by node.  The data vector of an actual Jacobian is laid out in the
    same order, so both share this construction.
    """
    counts = tuple(int(m) for m in counts)
    n_poses = len(counts)
    n_points = sum(counts)
    points_base = POSE_BASE + 6 * n_poses
    base = 7 * np.arange(n_points)
    cam_rows = (base[:, None] + np.array([0, 1])).ravel()
    prj_rows = (base[:, None] + np.array([2, 3])).ravel()
    both_rows = (base[:, None] + np.arange(4)).ravel()
    node_rows = (base[:, None] + np.arange(7)).ravel()

    rows, cols = [], []
    for col in range(8):
        rows.append(cam_rows)
        cols.append(np.full(cam_rows.size, col))
    for col in range(8, 22):
        rows.append(prj_rows)
        cols.append(np.full(prj_rows.size, col))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    for slot in range(6):
        for j in range(n_poses):
            r = both_rows[4 * offsets[j] : 4 * offsets[j + 1]]
            rows.append(r)
            cols.append(np.full(r.size, POSE_BASE + 6 * j + slot))
    for coord in range(3):
        rows.append(node_rows)
        cols.append(np.repeat(points_base + 3 * np.arange(n_points) + coord, 7))
    return np.concatenate(rows), np.concatenate(cols)


def build_sparsity(n_poses: int, node_counts) -> csr_matrix:
    """Boolean residual-by-parameter incidence structure."""
    counts = tuple(int(m) for m in node_counts)
    if n_poses < 1 or len(counts) != n_poses or any(m < 1 for m in counts):
        raise BundleError("need at least one pose and one node per pose")
    layout = ParameterLayout(counts)
    rows, cols = _pattern_arrays(counts)
    data = np.ones(rows.size, dtype=bool)
    return csr_matrix((data, (rows, cols)),
                      shape=(layout.n_residuals, layout.n_params))


class BundleProblem:
    """Precomputed flat observation arrays plus residual/Jacobian evaluation."""

    def __init__(self, observations: BundleObservations, x_m_init):
        self.obs = observations
        self.layout = ParameterLayout(observations.counts)
        init = [np.asarray(p, dtype=float) for p in x_m_init]
        if len(init) != self.layout.n_poses or any(
            p.shape != (m, 3) for p, m in zip(init, self.layout.counts)
        ):
            raise BundleError("x_m_init must hold one (M_j, 3) array per pose")
        self.x_init = np.concatenate([p.reshape(-1, 3) for p in init])
        self.cam_px = np.concatenate(observations.cam)
        self.prj_px = np.concatenate(observations.prj)
        counts = self.layout.counts
        self._offsets = np.concatenate([[0], np.cumsum(counts)])
        n_p = self.layout.n_points
        self._pose_index = np.repeat(np.arange(self.layout.n_poses), counts)
        base = 7 * np.arange(n_p)
        self._cam_rows = (base[:, None] + np.array([0, 1])).ravel()
        self._prj_rows = (base[:, None] + np.array([2, 3])).ravel()
        self._both_rows = (base[:, None] + np.arange(4)).ravel()
        self._node_rows = (base[:, None] + np.arange(7)).ravel()
        self._jac_rows, self._jac_cols = _pattern_arrays(counts)

    # -- residuals ---------------------------------------------------------

    def points(self, params: np.ndarray) -> np.ndarray:
        return params[self.layout.points_base :].reshape(-1, 3)

    def delta_m(self, params: np.ndarray) -> np.ndarray:
        d = self.points(params) - self.x_init
        return np.einsum("ij,ij->i", d, d)

    @staticmethod
    def _pose_rotations(rvecs: np.ndarray) -> np.ndarray:
        """Rodrigues map for a stack of rotation vectors.

        Written to be bit-identical to rotation_vector_to_matrix per row
        (theta^2 via the same scalar dot, matching branch expressions), so
        residuals at stored scene parameters cancel exactly.
        """
        n = rvecs.shape[0]
        theta2 = np.array([float(r @ r) for r in rvecs])
        K = np.zeros((n, 3, 3))
        K[:, 0, 1] = -rvecs[:, 2]
        K[:, 0, 2] = rvecs[:, 1]
        K[:, 1, 0] = rvecs[:, 2]
        K[:, 1, 2] = -rvecs[:, 0]
        K[:, 2, 0] = -rvecs[:, 1]
        K[:, 2, 1] = rvecs[:, 0]
        small = theta2 < 1e-16
        theta = np.sqrt(np.where(small, 1.0, theta2))
        a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / theta)
        b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / theta2)
        return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)

    @staticmethod
    def _pixel_residual(X, obs, intr, dist, out):
        """Reprojection residual for camera-frame points of one device.

        `out` is the (n, 2) destination, prefilled with the sentinel;
        points with z <= 0 keep it.
        """
        fx, fy, cx, cy = intr
        k1, k2, p1, p2 = dist
        z = X[:, 2]
        ok = z > 0
        if np.any(ok):
            xn = X[ok, :2] / z[ok, None]
            x, y = xn[:, 0], xn[:, 1]
            r2 = x * x + y * y
            radial = 1.0 + k1 * r2 + k2 * r2 * r2
            xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
            yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
            o = obs[ok]
            out[ok, 0] = o[:, 0] - (fx * xd + cx)
            out[ok, 1] = o[:, 1] - (fy * yd + cy)

    def residuals(self, params: np.ndarray, weights: np.ndarray) -> np.ndarray:
        lay = self.layout
        weights = np.broadcast_to(np.asarray(weights, dtype=float), (lay.n_points,))
        res = np.empty((lay.n_points, 7))
        res[:, 0:4] = BEHIND_DEVICE_SENTINEL
        R_cp = rotation_vector_to_matrix(params[16:19])
        t_cp = params[19:22]
        pts = self.points(params)
        pose_block = params[POSE_BASE : lay.points_base].reshape(lay.n_poses, 6)
        R = self._pose_rotations(pose_block[:, :3])
        X = np.empty((lay.n_points, 3))
        for j in range(lay.n_poses):
            lo, hi = self._offsets[j], self._offsets[j + 1]
            X[lo:hi] = pts[lo:hi] @ R[j].T
        X += pose_block[self._pose_index, 3:]
        if params[0] > 0 and params[1] > 0:
            self._pixel_residual(X, self.cam_px, params[CAM_INTR],
                                 params[CAM_DIST], res[:, 0:2])
        if params[8] > 0 and params[9] > 0:
            Xp = X @ R_cp.T + t_cp
            self._pixel_residual(Xp, self.prj_px, params[PRJ_INTR],
                                 params[PRJ_DIST], res[:, 2:4])
        res[:, 4:7] = np.sqrt(weights)[:, None] * (pts - self.x_init)
        flat = res.ravel()
        if np.any(np.isnan(flat)):
            g = int(np.argmax(np.isnan(flat))) // 7
            j = int(np.searchsorted(self._offsets, g, side="right")) - 1
            raise BundleError(
                f"numerical failure at pose {j} node {g - self._offsets[j]}"
            )
        np.clip(flat, -BEHIND_DEVICE_SENTINEL, BEHIND_DEVICE_SENTINEL, out=flat)
        return flat

    def cost(self, params: np.ndarray) -> float:
        """Self-weighted total cost with w = exp(-delta_m) at these params."""
        r = self.residuals(params, lambda_weights(self.delta_m(params)))
        return float(r @ r)

    # -- Jacobian ----------------------------------------------------------

    def jacobian(self, params: np.ndarray, weights: np.ndarray,
                 active=None) -> csr_matrix:
        """Forward-difference Jacobian on the incidence pattern.

        Columns are evaluated in groups whose row patterns are disjoint:
        camera parameter i shares an evaluation with projector parameter
        8+i (camera rows never depend on projector parameters and vice
        versa), the 6 stereo columns go one at a time, then each pose slot
        across all poses at once, then each point coordinate across all
        nodes at once (23 residual evaluations total).  `active` is an
        optional boolean column mask; groups with no active column are
        skipped and left zero.
        """
        lay = self.layout
        r0 = self.residuals(params, weights)
        if active is None:
            active = np.ones(lay.n_params, dtype=bool)
        cam_chunks = [None] * 8
        prj_chunks = [None] * 8
        for i in range(8):
            cam_on = bool(active[i])
            prj_on = bool(active[8 + i])
            if not (cam_on or prj_on):
                cam_chunks[i] = np.zeros(self._cam_rows.size)
                prj_chunks[i] = np.zeros(self._prj_rows.size)
                continue
            pp = params.copy()
            h_cam = 1e-7 * max(1.0, abs(params[i]))
            h_prj = 1e-7 * max(1.0, abs(params[8 + i]))
            if cam_on:
                pp[i] += h_cam
            if prj_on:
                pp[8 + i] += h_prj
            diff = self.residuals(pp, weights) - r0
            cam_chunks[i] = (diff[self._cam_rows] / h_cam if cam_on
                             else np.zeros(self._cam_rows.size))
            prj_chunks[i] = (diff[self._prj_rows] / h_prj if prj_on
                             else np.zeros(self._prj_rows.size))
        data = list(cam_chunks) + list(prj_chunks)
        for col in range(16, 22):
            data.append(self._fd_column(params, weights, r0, col,
                                         self._prj_rows, active[col]))
        pose_cols = POSE_BASE + 6 * np.arange(lay.n_poses)
        for slot in range(6):
            idx = pose_cols + slot
            if not np.any(active[idx]):
                data.append(np.zeros(self._both_rows.size))
                continue
            steps = 1e-7 * np.maximum(1.0, np.abs(params[idx]))
            pp = params.copy()
            pp[idx] += steps
            diff = self.residuals(pp, weights) - r0
            chunk = diff[self._both_rows].reshape(-1, 4)
            chunk /= np.repeat(steps, lay.counts)[:, None]
            data.append(chunk.ravel())
        pt_cols = lay.points_base + 3 * np.arange(lay.n_points)
        for coord in range(3):
            idx = pt_cols + coord
            if not np.any(active[idx]):
                data.append(np.zeros(self._node_rows.size))
                continue
            steps = 1e-7 * np.maximum(1.0, np.abs(params[idx]))
            pp = params.copy()
            pp[idx] += steps
            diff = self.residuals(pp, weights) - r0
            chunk = diff[self._node_rows].reshape(-1, 7)
            chunk /= steps[:, None]
            data.append(chunk.ravel())
        return csr_matrix((np.concatenate(data), (self._jac_rows, self._jac_cols)),
                          shape=(lay.n_residuals, lay.n_params))

    def _fd_column(self, params, weights, r0, col, rows, is_active):
        if not is_active:
            return np.zeros(rows.size)
        h = 1e-7 * max(1.0, abs(params[col]))
        pp = params.copy()
        pp[col] += h
        return (self.residuals(pp, weights)[rows] - r0[rows]) / h

    def gradient_inf_norm(self, params: np.ndarray, weights: np.ndarray) -> float:
        J = self.jacobian(params, weights)
        r = self.residuals(params, weights)
        return float(np.max(np.abs(J.T @ r))) if r.size else 0.0


def compute_residuals(params, observations: BundleObservations,
                      x_m_init, weights) -> np.ndarray:
    """One-shot residual evaluation (see BundleProblem for the fast path)."""
    problem = BundleProblem(observations, x_m_init)
    return problem.residuals(np.asarray(params, dtype=float),
                             np.asarray(weights, dtype=float))


@dataclass(frozen=True)
class ConvergenceReport:
    iterations: int
    initial_cost: float
    final_cost: float
    gradient_norm: float
    termination: str
    converged: bool
    rounds: int

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "gradient_norm": self.gradient_norm,
            "termination": self.termination,
            "converged": self.converged,
            "rounds": self.rounds,
        }


_STATUS_TEXT = {
    0: "inner iteration cap",
    1: "gradient tolerance",
    2: "cost tolerance",
    3: "step tolerance",
    4: "cost and step tolerance",
}


def solve(params0, observations: BundleObservations, x_m_init, *,
          lambda_mode: str = "irls", max_outer: int = 5, max_inner: int = 100,
          cost_tol: float = 1e-10, free_mask=None):
    """Refine a packed parameter vector against node observations.

    Runs up to `max_outer` trust-region solves, recomputing the tether
    weights between them when `lambda_mode` is "irls" ("frozen" keeps the
    initial weights and runs a single solve).  `free_mask` restricts the
    optimization to a parameter subset; everything else stays at its
    input value.  Returns the iterate with the lowest self-weighted cost
    seen, which therefore never exceeds the cost of `params0`.
    """
    if lambda_mode not in ("irls", "frozen"):
        raise BundleError(f"unknown lambda_mode: {lambda_mode!r}")
    problem = BundleProblem(observations, x_m_init)
    lay = problem.layout
    params = np.asarray(params0, dtype=float).copy()
    if params.shape != (lay.n_params,):
        raise BundleError("parameter vector length mismatch")
    if free_mask is None:
        free_idx = np.arange(lay.n_params)
        active = np.ones(lay.n_params, dtype=bool)
    else:
        active = np.asarray(free_mask, dtype=bool)
        if active.shape != (lay.n_params,):
            raise BundleError("free_mask length mismatch")
        if not np.any(active):
            raise BundleError("free_mask freezes every parameter")
        free_idx = np.flatnonzero(active)

    weights = lambda_weights(problem.delta_m(params))
    initial_cost = problem.cost(params)
    best_cost = initial_cost
    best_params = params.copy()
    best_grad = None
    prev_cost = initial_cost
    total_iters = 0
    rounds = 0
    termination = "outer round limit"
    inner_status = None

    n_rounds = 1 if lambda_mode == "frozen" else max_outer
    for _ in range(n_rounds):
        rounds += 1
        frozen = weights

        def fun(x):
            p = params.copy()
            p[free_idx] = x
            return problem.residuals(p, frozen)

        def jac(x):
            p = params.copy()
            p[free_idx] = x
            return problem.jacobian(p, frozen, active)[:, free_idx]

        result = least_squares(
            fun, params[free_idx], jac=jac, method="trf",
            ftol=cost_tol, xtol=1e-14, gtol=1e-12, max_nfev=max_inner,
            x_scale="jac",
        )
        params = params.copy()
        params[free_idx] = result.x
        total_iters += result.njev if result.njev is not None else result.nfev
        inner_status = result.status
        cost_now = problem.cost(params)
        if cost_now < best_cost:
            best_cost = cost_now
            best_params = params.copy()
            best_grad = float(np.max(np.abs(result.grad))) if result.grad.size else 0.0
        if cost_now < 1e-18:
            termination = "cost below absolute floor"
            break
        if lambda_mode == "frozen":
            termination = _STATUS_TEXT.get(inner_status, f"status {inner_status}")
            break
        rel = abs(prev_cost - cost_now) / max(prev_cost, 1e-300)
        if rel < cost_tol:
            termination = "outer cost change below tolerance"
            break
        prev_cost = cost_now
        weights = lambda_weights(problem.delta_m(params))
    else:
        termination = "outer round limit"

    if best_grad is None:
        best_grad = problem.gradient_inf_norm(
            best_params, lambda_weights(problem.delta_m(best_params))
        )
    converged = inner_status != 0
    if not converged:
        log.warning("bundle adjustment hit the inner iteration cap")
    report = ConvergenceReport(
        iterations=int(total_iters),
        initial_cost=initial_cost,
        final_cost=best_cost,
        gradient_norm=best_grad,
        termination=termination,
        converged=converged,
        rounds=rounds,
    )
    return best_params, report
