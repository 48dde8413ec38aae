"""Projective geometry primitives shared by the calibration stack.

Conventions used throughout:
  * right-handed frames, metric units are millimetres, angles in radians
  * a Pose maps source-frame points into a target frame, X' = R @ X + t
  * rotations travel as Rodrigues vectors (unit axis scaled by angle)
  * pixels are (u, v) with u along image columns; intrinsics have zero skew
  * normalized image coordinates are (x/z, y/z) before distortion
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Raised when a geometric operation is degenerate or out of domain."""


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    return v


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels, zero skew."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (np.isfinite(self.fx) and self.fx > 0 and np.isfinite(self.fy) and self.fy > 0):
            raise GeometryError("focal lengths must be positive and finite")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise GeometryError("principal point must be finite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    @staticmethod
    def from_array(a) -> "Intrinsics":
        fx, fy, cx, cy = np.asarray(a, dtype=float).reshape(4)
        return Intrinsics(fx, fy, cx, cy)


@dataclass(frozen=True)
class Distortion:
    """Brown-Conrady coefficients: two radial, two tangential."""

    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.k1, self.k2, self.p1, self.p2)):
            raise GeometryError("distortion coefficients must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.p1, self.p2])

    @staticmethod
    def from_array(a) -> "Distortion":
        k1, k2, p1, p2 = np.asarray(a, dtype=float).reshape(4)
        return Distortion(k1, k2, p1, p2)


@dataclass(frozen=True)
class Pose:
    """Rigid transform as rotation vector r (radians) plus translation t (mm)."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", _as_vec3(self.r))
        object.__setattr__(self, "t", _as_vec3(self.t))
        if not (np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.t))):
            raise GeometryError("pose components must be finite")
        if np.linalg.norm(self.r) >= np.pi + 1e-12:
            raise GeometryError("rotation vector outside canonical range")

    @property
    def rotation(self) -> np.ndarray:
        return rotation_vector_to_matrix(self.r)

    def inverse(self) -> "Pose":
        R = self.rotation
        return Pose(-self.r, -R.T @ self.t)

    def compose(self, inner: "Pose") -> "Pose":
        """Pose mapping X through `inner` first, then through self."""
        R_outer = self.rotation
        R = R_outer @ inner.rotation
        t = R_outer @ inner.t + self.t
        return Pose(matrix_to_rotation_vector(R), t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class Plane3:
    """Plane {x : n.x = d} with unit normal n and offset d in mm."""

    n: np.ndarray
    d: float

    def __post_init__(self):
        object.__setattr__(self, "n", _as_vec3(self.n))
        if abs(np.linalg.norm(self.n) - 1.0) > 1e-12:
            raise GeometryError("plane normal must be unit length")


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def rotation_vector_to_matrix(r) -> np.ndarray:
    """Rodrigues exponential map, exact for any finite rotation vector.

    Small angles switch to the series expansion of sin(t)/t and
    (1-cos(t))/t^2 so the map stays smooth through zero.
    """
    r = _as_vec3(r)
    if not np.all(np.isfinite(r)):
        raise GeometryError("rotation vector must be finite")
    theta2 = float(r @ r)
    K = _skew(r)
    if theta2 < 1e-16:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_rotation_vector(R) -> np.ndarray:
    """Inverse Rodrigues map with angle canonicalized to [0, pi].

    At exactly pi the axis sign is fixed by making the first nonzero
    component positive.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise GeometryError("not a rotation")
    if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-6 or np.linalg.det(R) <= 0:
        raise GeometryError("not a rotation")
    skew_vec = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_theta = 0.5 * np.linalg.norm(skew_vec)
    cos_theta = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(sin_theta, cos_theta))
    if theta < 1e-12:
        return 0.5 * skew_vec
    if theta < np.pi - 1e-4:
        if sin_theta < 1e-8:
            # tiny angle: theta/sin(theta) ~ 1 + theta^2/6
            factor = 0.5 * (1.0 + theta * theta / 6.0)
        else:
            factor = 0.5 * theta / sin_theta
        return factor * skew_vec
    # Near pi the skew part loses the axis; recover it from the symmetric part,
    # where R + I ~ 2 a a^T.
    S = 0.5 * (R + R.T) + np.eye(3)
    i = int(np.argmax(np.diag(S)))
    axis = S[:, i] / np.sqrt(2.0 * S[i, i])
    if np.linalg.norm(skew_vec) > 1e-12:
        if axis @ skew_vec < 0:
            axis = -axis
    else:
        for component in axis:
            if abs(component) > 1e-12:
                if component < 0:
                    axis = -axis
                break
    return theta * axis


def distort(pt, d: Distortion) -> np.ndarray:
    """Apply radial plus tangential distortion to normalized points (..., 2)."""
    pt = np.asarray(pt, dtype=float)
    x = pt[..., 0]
    y = pt[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2
    xd = x * radial + 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y
    return np.stack([xd, yd], axis=-1)


def undistort(pt, d: Distortion, max_iter: int = 60, tol: float = 1e-12) -> np.ndarray:
    """Invert `distort` with a damped Newton iteration per point.

    Newton keeps converging where plain fixed-point iteration stops being
    a contraction (large estimated k2 at moderate radii), which matters
    when inverting a fitted model rather than a ground-truth one.
    """
    pt = np.asarray(pt, dtype=float)
    target = pt.reshape(-1, 2)
    cur = target.copy()
    err = distort(cur, d) - target
    err_norm = np.max(np.abs(err), axis=-1)
    for _ in range(max_iter):
        live = err_norm >= tol
        if not np.any(live):
            return cur.reshape(pt.shape)
        x = cur[live, 0]
        y = cur[live, 1]
        r2 = x * x + y * y
        radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2
        dpoly = 2.0 * (d.k1 + 2.0 * d.k2 * r2)
        jxx = radial + x * x * dpoly + 2.0 * d.p1 * y + 6.0 * d.p2 * x
        jyy = radial + y * y * dpoly + 6.0 * d.p1 * y + 2.0 * d.p2 * x
        jxy = x * y * dpoly + 2.0 * d.p1 * x + 2.0 * d.p2 * y
        det = jxx * jyy - jxy * jxy
        if np.any(np.abs(det) < 1e-14):
            raise GeometryError("undistort diverged")
        e = err[live]
        step = np.stack(
            [(jyy * e[:, 0] - jxy * e[:, 1]) / det,
             (jxx * e[:, 1] - jxy * e[:, 0]) / det],
            axis=-1,
        )
        base = cur[live]
        scale = np.ones(step.shape[0])
        done = np.zeros(step.shape[0], dtype=bool)
        trial = base.copy()
        err_trial = e.copy()
        for _ in range(25):
            cand = base - scale[:, None] * step
            err_c = distort(cand, d) - target[live]
            better = (np.max(np.abs(err_c), axis=-1) < np.max(np.abs(err_trial), axis=-1)) & ~done
            trial[better] = cand[better]
            err_trial[better] = err_c[better]
            done |= better
            if np.all(done):
                break
            scale[~done] *= 0.5
        if not np.any(done):
            raise GeometryError("undistort diverged")
        cur[live] = trial
        err[live] = err_trial
        err_norm[live] = np.max(np.abs(err_trial), axis=-1)
    if np.all(err_norm < tol):
        return cur.reshape(pt.shape)
    raise GeometryError("undistort diverged")


def transform_points(pose: Pose, pts) -> np.ndarray:
    """Map (..., 3) points through a rigid pose."""
    pts = np.asarray(pts, dtype=float)
    return pts @ pose.rotation.T + pose.t


def pixel_from_normalized(pt, intr: Intrinsics) -> np.ndarray:
    pt = np.asarray(pt, dtype=float)
    u = intr.fx * pt[..., 0] + intr.cx
    v = intr.fy * pt[..., 1] + intr.cy
    return np.stack([u, v], axis=-1)


def normalized_from_pixel(px, intr: Intrinsics) -> np.ndarray:
    px = np.asarray(px, dtype=float)
    x = (px[..., 0] - intr.cx) / intr.fx
    y = (px[..., 1] - intr.cy) / intr.fy
    return np.stack([x, y], axis=-1)


def undistort_pixels(px, intr: Intrinsics, d: Distortion) -> np.ndarray:
    """Pixel-space undistortion: normalize, invert the lens, reapply K."""
    return pixel_from_normalized(undistort(normalized_from_pixel(px, intr), d), intr)


def project(x_m, board_pose: Pose, intr: Intrinsics, dist: Distortion,
            device_pose: Pose | None = None) -> np.ndarray:
    """Project board-space points (..., 3) to device pixels.

    `board_pose` carries the points into the camera frame; `device_pose`
    is the extra camera-to-device transform used when the device is the
    projector, identity otherwise.
    """
    X = transform_points(board_pose, x_m)
    if device_pose is not None:
        X = transform_points(device_pose, X)
    z = X[..., 2]
    if np.any(z <= 0):
        raise GeometryError("behind device")
    xn = X[..., :2] / z[..., None]
    return pixel_from_normalized(distort(xn, dist), intr)


def homography_from_pose(intr: Intrinsics, pose: Pose) -> np.ndarray:
    """Plane-to-image homography K [r1 r2 t] for the z=0 board plane."""
    R = pose.rotation
    H = intr.matrix @ np.column_stack([R[:, 0], R[:, 1], pose.t])
    scale = np.linalg.norm(H) / np.sqrt(3.0)
    if scale == 0 or abs(np.linalg.det(H)) < 1e-10 * scale**3:
        raise GeometryError("degenerate pose")
    if H[2, 2] != 0:
        H = H / H[2, 2]
    return H


def apply_homography(H, pts) -> np.ndarray:
    """Apply a 3x3 homography to (..., 2) points with perspective division."""
    pts = np.asarray(pts, dtype=float)
    ones = np.ones(pts.shape[:-1] + (1,))
    ph = np.concatenate([pts, ones], axis=-1) @ np.asarray(H, dtype=float).T
    return ph[..., :2] / ph[..., 2:3]


def warp_to_board(pt, H) -> np.ndarray:
    """Pull an undistorted camera pixel back to the z=0 board plane."""
    H = np.asarray(H, dtype=float)
    pt = np.asarray(pt, dtype=float)
    Hinv = np.linalg.inv(H)
    ones = np.ones(pt.shape[:-1] + (1,))
    ph = np.concatenate([pt, ones], axis=-1) @ Hinv.T
    w = ph[..., 2]
    if np.any(np.abs(w) < 1e-12 * np.maximum(1.0, np.max(np.abs(ph), axis=-1))):
        raise GeometryError("warp singular")
    out = np.zeros(pt.shape[:-1] + (3,))
    out[..., 0] = ph[..., 0] / w
    out[..., 1] = ph[..., 1] / w
    return out


def intersect_ray_plane(origin, direction, plane: Plane3) -> np.ndarray:
    """Intersect origin + s*direction with a plane, s must be positive."""
    o = _as_vec3(origin)
    v = _as_vec3(direction)
    denom = float(plane.n @ v)
    if abs(denom) <= 1e-9:
        raise GeometryError("no intersection")
    s = (plane.d - float(plane.n @ o)) / denom
    if s <= 0:
        raise GeometryError("intersection behind origin")
    return o + s * v


def triangulate(x_c, x_p, cam_intr: Intrinsics, cam_dist: Distortion,
                prj_intr: Intrinsics, prj_dist: Distortion, stereo: Pose) -> np.ndarray:
    """Triangulate one camera/projector pixel pair into the camera frame.

    Both pixels are undistorted internally; the result is the midpoint of
    the common perpendicular of the two back-projected rays.  `stereo`
    maps camera-frame points into the projector frame.
    """
    xn_c = undistort(normalized_from_pixel(np.asarray(x_c, dtype=float), cam_intr), cam_dist)
    xn_p = undistort(normalized_from_pixel(np.asarray(x_p, dtype=float), prj_intr), prj_dist)
    R_cp = stereo.rotation
    o1 = np.zeros(3)
    d1 = np.append(xn_c, 1.0)
    d1 = d1 / np.linalg.norm(d1)
    o2 = -R_cp.T @ stereo.t
    d2 = R_cp.T @ np.append(xn_p, 1.0)
    d2 = d2 / np.linalg.norm(d2)
    cross = np.cross(d1, d2)
    if np.linalg.norm(cross) < 1e-9:
        raise GeometryError("triangulation degenerate")
    w0 = o1 - o2
    b = float(d1 @ d2)
    dd = float(d1 @ w0)
    e = float(d2 @ w0)
    denom = 1.0 - b * b
    s = (b * e - dd) / denom
    t = (e - b * dd) / denom
    p1 = o1 + s * d1
    p2 = o2 + t * d2
    return 0.5 * (p1 + p2)


def median_pose(rel_rotations, rel_translations) -> Pose:
    """Component-wise median of relative poses.

    Rotations are aggregated as rotation vectors, which is exact when the
    inputs cluster (the stereo-initialization case) but is not meaningful
    for inputs straddling the pi boundary.
    """
    if len(rel_rotations) == 0 or len(rel_rotations) != len(rel_translations):
        raise GeometryError("median_pose needs matching nonempty lists")
    rvecs = np.array([matrix_to_rotation_vector(R) for R in rel_rotations])
    tvecs = np.array([_as_vec3(t) for t in rel_translations])
    return Pose(np.median(rvecs, axis=0), np.median(tvecs, axis=0))
