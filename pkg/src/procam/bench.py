"""Synthetic evaluation harness.

Runs the proposed calibration, its no-refinement variant, and a global
homography baseline over a grid of noise levels, many randomized trials
per level, and reports per-metric medians with quartiles.  Failed trials
are excluded from statistics but counted.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .ba import BundleError, BundleObservations
from .geometry import (
    Distortion,
    GeometryError,
    homography_from_pose,
    apply_homography,
    median_pose,
    triangulate,
    undistort_pixels,
    warp_to_board,
)
from .pipeline import (
    MIN_NODES_PER_POSE,
    BoardSpec,
    SystemCalibration,
    calibrate_full,
    evaluate_rms,
    stage1_camera,
)
from .synthetic import (
    NoisyCaptureSet,
    SceneConfig,
    SceneError,
    add_noise,
    generate_scene,
)
from .zhang import (
    CalibrationError,
    DeviceCalibration,
    estimate_homography_dlt,
    extrinsics_from_homography,
    intrinsics_from_homographies,
)

log = logging.getLogger(__name__)

METHODS = ("proposed", "proposed_wo_ba", "global_homography")
DEFAULT_SIGMA_GRID = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)

INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2")
METRIC_KEYS = (
    ("reproj_px", "align_mm", "rot_deg", "trans_mm")
    + tuple(f"cam_{k}" for k in INTRINSIC_KEYS)
    + tuple(f"prj_{k}" for k in INTRINSIC_KEYS)
)


class BenchmarkError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrialResult:
    method: str
    sigma: float
    trial: int
    reproj_px: float
    align_mm: float
    rot_deg: float
    trans_mm: float
    cam_errors: dict
    prj_errors: dict

    def metric(self, key: str) -> float:
        if key.startswith("cam_"):
            return self.cam_errors[key[4:]]
        if key.startswith("prj_"):
            return self.prj_errors[key[4:]]
        return getattr(self, key)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "sigma": self.sigma,
            "trial": self.trial,
            "reproj_px": self.reproj_px,
            "align_mm": self.align_mm,
            "rot_deg": self.rot_deg,
            "trans_mm": self.trans_mm,
            "cam_errors": dict(self.cam_errors),
            "prj_errors": dict(self.prj_errors),
        }


@dataclass
class BenchmarkReport:
    config: SceneConfig
    sigma_grid: tuple
    trials_per_sigma: int
    methods: tuple
    master_seed: int
    results: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    warning: bool = False

    def cell(self, sigma: float, method: str) -> list:
        return [r for r in self.results
                if r.sigma == sigma and r.method == method]

    def median(self, sigma: float, method: str, key: str) -> float:
        vals = [r.metric(key) for r in self.cell(sigma, method)]
        if not vals:
            return float("nan")
        return float(np.median(vals))

    def summary_rows(self):
        """One row per (sigma, method, metric): median, quartiles, counts."""
        rows = []
        for sigma in self.sigma_grid:
            for method in self.methods:
                cell = self.cell(sigma, method)
                failed = self.failures.get((sigma, method), 0)
                for key in METRIC_KEYS:
                    vals = np.array([r.metric(key) for r in cell])
                    if vals.size:
                        q1, med, q3 = np.percentile(vals, [25.0, 50.0, 75.0])
                    else:
                        q1 = med = q3 = float("nan")
                    rows.append({
                        "sigma": sigma,
                        "method": method,
                        "metric": key,
                        "median": float(med),
                        "q1": float(q1),
                        "q3": float(q3),
                        "trials": int(vals.size),
                        "failures": failed,
                    })
        return rows


def _geodesic_deg(R_a: np.ndarray, R_b: np.ndarray) -> float:
    c = (np.trace(R_a @ R_b.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def _intrinsics_errors(intr, dist, true_intr, true_dist) -> dict:
    return {
        "fx": abs(intr.fx - true_intr.fx),
        "fy": abs(intr.fy - true_intr.fy),
        "cx": abs(intr.cx - true_intr.cx),
        "cy": abs(intr.cy - true_intr.cy),
        "k1": abs(dist.k1 - true_dist.k1),
        "k2": abs(dist.k2 - true_dist.k2),
        "p1": abs(dist.p1 - true_dist.p1),
        "p2": abs(dist.p2 - true_dist.p2),
    }


def alignment_rms(calib: SystemCalibration, noisy: NoisyCaptureSet) -> float:
    """RMS distance of the triangulated node cloud from the true nodes.

    Triangulation runs on the observed (noisy) pixel pairs with the
    estimated calibration; truth is the perturbed board geometry in the
    camera frame.
    """
    sq_sum = 0.0
    count = 0
    for j, cap in enumerate(noisy.captures):
        truth = noisy.node_camera_frame[j]
        for i in range(cap.node_cam.shape[0]):
            X = triangulate(cap.node_cam[i], cap.node_prj[i],
                            calib.cam_intr, calib.cam_dist,
                            calib.prj_intr, calib.prj_dist, calib.stereo)
            d = X - truth[i]
            sq_sum += float(d @ d)
            count += 1
    return float(np.sqrt(sq_sum / count))


def calibrate_global_homography(captures, board: BoardSpec,
                                camera_calib: DeviceCalibration | None = None
                                ) -> SystemCalibration:
    """Global-homography baseline calibration.

    The projector is modeled as a pure pinhole: per pose, one DLT
    homography maps undistorted camera node pixels straight to projector
    pixels, the checkerboard corners are pushed through the board-to-
    camera and camera-to-projector homographies, and the projector is
    calibrated from those corner pairs in closed form with distortion
    pinned at zero.  The camera side reuses the standard first stage.
    """
    if camera_calib is None:
        camera_calib, _ = stage1_camera(captures, board)
    homographies = [homography_from_pose(camera_calib.intrinsics, pose)
                    for pose in camera_calib.poses]
    board_pts = board.corner_points()
    kept = []
    warped_nodes = []
    prj_hs = []
    for j, cap in enumerate(captures):
        if cap.node_count < MIN_NODES_PER_POSE:
            log.warning("pose %d dropped: only %d nodes", cap.pose_id,
                        cap.node_count)
            continue
        und = undistort_pixels(cap.node_cam, camera_calib.intrinsics,
                               camera_calib.distortion)
        H_cp = estimate_homography_dlt(und, cap.node_prj)
        corner_cam = apply_homography(homographies[j], board_pts)
        corner_prj = apply_homography(H_cp, corner_cam)
        prj_hs.append(estimate_homography_dlt(board_pts, corner_prj))
        warped_nodes.append(warp_to_board(und, homographies[j]))
        kept.append(j)
    if len(kept) < 3:
        raise CalibrationError("insufficient poses")
    prj_intr = intrinsics_from_homographies(prj_hs)
    prj_dist = Distortion(0.0, 0.0, 0.0, 0.0)
    rotations = []
    translations = []
    for local, j in enumerate(kept):
        cam_pose = camera_calib.poses[j]
        prj_pose = extrinsics_from_homography(prj_intr, prj_hs[local])
        R_cp = prj_pose.rotation @ cam_pose.rotation.T
        rotations.append(R_cp)
        translations.append(prj_pose.t - R_cp @ cam_pose.t)
    stereo = median_pose(rotations, translations)
    poses = [camera_calib.poses[j] for j in kept]
    observations = BundleObservations(
        tuple(captures[j].node_cam for j in kept),
        tuple(captures[j].node_prj for j in kept),
    )
    rms_c, rms_p, rms_s = evaluate_rms(
        camera_calib.intrinsics, camera_calib.distortion,
        prj_intr, prj_dist, stereo, poses, warped_nodes, observations,
    )
    return SystemCalibration(
        cam_intr=camera_calib.intrinsics,
        cam_dist=camera_calib.distortion,
        poses=poses,
        pose_ids=[captures[j].pose_id for j in kept],
        prj_intr=prj_intr,
        prj_dist=prj_dist,
        stereo=stereo,
        node_points=warped_nodes,
        rms_camera=rms_c,
        rms_projector=rms_p,
        rms_stereo=rms_s,
        converged=True,
        report=None,
    )


def _trial_calibrations(config: SceneConfig, sigma: float, seed: int, methods):
    scene = generate_scene(replace(config, seed=seed))
    noise_rng = np.random.default_rng([seed & 0x7FFFFFFFFFFFFFFF, 1])
    noisy = add_noise(scene, sigma, noise_rng)
    out = {}
    for method in methods:
        try:
            if method == "proposed":
                out[method] = calibrate_full(noisy.captures, config.board)
            elif method == "proposed_wo_ba":
                out[method] = calibrate_full(noisy.captures, config.board,
                                             skip_ba=True)
            elif method == "global_homography":
                out[method] = calibrate_global_homography(noisy.captures,
                                                          config.board)
            else:
                raise BenchmarkError(f"unknown method {method!r}")
        except (CalibrationError, GeometryError, BundleError) as exc:
            out[method] = exc
    return scene, noisy, out


def run_trial(config: SceneConfig, sigma: float, seed: int, trial: int,
              methods=METHODS):
    """All requested methods on one shared noisy capture set.

    Returns (results, failures): TrialResult list for the methods that
    ran, method-name list for those that raised.
    """
    scene, noisy, calibs = _trial_calibrations(config, sigma, seed, methods)
    results = []
    failures = []
    for method in methods:
        calib = calibs[method]
        if isinstance(calib, Exception):
            log.warning("trial %d sigma %.3g method %s failed: %s",
                        trial, sigma, method, calib)
            failures.append(method)
            continue
        results.append(TrialResult(
            method=method,
            sigma=sigma,
            trial=trial,
            reproj_px=calib.rms_stereo,
            align_mm=alignment_rms(calib, noisy),
            rot_deg=_geodesic_deg(calib.stereo.rotation,
                                  scene.stereo.rotation),
            trans_mm=float(np.linalg.norm(calib.stereo.t - scene.stereo.t)),
            cam_errors=_intrinsics_errors(calib.cam_intr, calib.cam_dist,
                                          config.camera.intrinsics,
                                          config.camera.distortion),
            prj_errors=_intrinsics_errors(calib.prj_intr, calib.prj_dist,
                                          config.projector.intrinsics,
                                          config.projector.distortion),
        ))
    return results, failures


def _run_trial_star(args):
    config, sigma, seed, trial, methods = args
    try:
        return run_trial(config, sigma, seed, trial, methods)
    except (SceneError, CalibrationError, GeometryError, BundleError) as exc:
        log.warning("trial %d sigma %.3g failed outright: %s", trial, sigma, exc)
        return [], list(methods)


def run_benchmark(config: SceneConfig = None, sigma_grid=DEFAULT_SIGMA_GRID,
                  trials_per_sigma: int = 20, methods=METHODS,
                  master_seed: int = 0, jobs: int = 1) -> BenchmarkReport:
    """Full noise-sweep evaluation.

    Each trial regenerates its own scene from seed master ^ global trial
    index, so methods inside one trial share captures (paired comparison)
    while trials stay independent.  `jobs` > 1 fans trials out to worker
    processes; assembly order is deterministic either way.
    """
    if config is None:
        config = SceneConfig()
    if trials_per_sigma < 1:
        raise BenchmarkError("need at least one trial per noise level")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise BenchmarkError(f"unknown methods: {sorted(unknown)}")
    sigma_grid = tuple(float(s) for s in sigma_grid)
    tasks = []
    for s_idx, sigma in enumerate(sigma_grid):
        for t_idx in range(trials_per_sigma):
            global_index = s_idx * trials_per_sigma + t_idx
            seed = master_seed ^ global_index
            tasks.append((config, sigma, seed, global_index, tuple(methods)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_trial_star, tasks))
    else:
        outcomes = [_run_trial_star(t) for t in tasks]
    report = BenchmarkReport(
        config=config,
        sigma_grid=sigma_grid,
        trials_per_sigma=trials_per_sigma,
        methods=tuple(methods),
        master_seed=master_seed,
    )
    for (cfg, sigma, seed, trial, ms), (results, failed) in zip(tasks, outcomes):
        report.results.extend(results)
        for method in failed:
            key = (sigma, method)
            report.failures[key] = report.failures.get(key, 0) + 1
    for (sigma, method), count in report.failures.items():
        if count > 0.2 * trials_per_sigma:
            log.warning("over 20%% failures at sigma %.3g for %s "
                        "(%d of %d)", sigma, method, count, trials_per_sigma)
            report.warning = True
    return report
