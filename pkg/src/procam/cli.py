"""Command-line entry points.

Exit codes are a stable scripting contract: 0 success, 2 bad usage or
config or schema, 3 I/O failure, 4 benchmark quality gate tripped,
5 calibration failure.
"""

from __future__ import annotations

import json
import os
import sys

import click
import tomli

from .ba import BundleError
from .geometry import Distortion, GeometryError, Intrinsics
from .pattern import (
    PatternError,
    build_pattern_graph,
    render_pattern_image,
    save_graph_json,
    save_pattern_png,
)
from .pipeline import (
    BoardSpec,
    CaptureFormatError,
    calibrate_full,
    load_captures,
    result_to_dict,
)
from .synthetic import DeviceSpec, SceneConfig, SceneError
from .zhang import CalibrationError

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_QUALITY = 4
EXIT_CALIBRATION = 5

ORDERING_SIGMAS = (0.25, 0.5, 1.0)


@click.group()
def main():
    """Camera-projector calibration toolkit."""


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _parse_resolution(text: str) -> tuple:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise PatternError(f"resolution must look like 800x600, got {text!r}")


# -- pattern ------------------------------------------------------------------


@main.command("pattern")
@click.option("--k", default=4, show_default=True, help="Color alphabet size.")
@click.option("--n", default=3, show_default=True, help="Window length.")
@click.option("--spacing", default=12, show_default=True,
              help="Stripe spacing in projector pixels.")
@click.option("--stripe-width", default=4, show_default=True,
              help="Rendered stripe width in pixels.")
@click.option("--resolution", default="800x600", show_default=True,
              help="Projector resolution WxH.")
@click.option("--out", "out_dir", default="pattern_out", show_default=True,
              type=click.Path(file_okay=False))
def cmd_pattern(k, n, spacing, stripe_width, resolution, out_dir):
    """Export the structured-light pattern image and its node graph."""
    try:
        res = _parse_resolution(resolution)
        graph = build_pattern_graph(k, n, stripe_spacing_px=spacing,
                                    projector_resolution=res)
        img = render_pattern_image(graph, stripe_width_px=stripe_width)
    except PatternError as exc:
        _fail(EXIT_USAGE, str(exc))
    try:
        os.makedirs(out_dir, exist_ok=True)
        save_pattern_png(img, os.path.join(out_dir, "pattern.png"))
        save_graph_json(graph, os.path.join(out_dir, "pattern_graph.json"))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(f"stripes per axis: {graph.m}")
    click.echo(f"node grid: {graph.m}x{graph.m} ({graph.m * graph.m} nodes)")
    click.echo(f"wrote {out_dir}/pattern.png and {out_dir}/pattern_graph.json")


# -- config file handling -----------------------------------------------------

_SCENE_KEYS = {
    "baseline_mm": float,
    "aim_point_mm": tuple,
    "n_poses": int,
    "depth_range_mm": tuple,
    "tilt_range_deg": tuple,
    "lateral_jitter_mm": float,
    "pattern_k": int,
    "pattern_n": int,
    "stripe_spacing_px": int,
    "node_margin": int,
    "node_stride": int,
    "min_visible_fraction": float,
    "max_attempts": int,
    "seed": int,
}
_BOARD_KEYS = {"corner_cols": int, "corner_rows": int, "square_mm": float}
_DEVICE_KEYS = {"fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2", "resolution"}
_BENCH_KEYS = {"sigma_grid", "trials", "master_seed", "jobs", "methods",
               "raw_trials", "out"}


def _reject_unknown(section: str, given: dict, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ValueError(
            f"unknown key {sorted(unknown)[0]!r} in [{section}]"
        )


def _device_from_toml(section: str, given: dict, base: DeviceSpec) -> DeviceSpec:
    _reject_unknown(section, given, _DEVICE_KEYS)
    intr = {f: given.get(f, getattr(base.intrinsics, f))
            for f in ("fx", "fy", "cx", "cy")}
    dist = {f: given.get(f, getattr(base.distortion, f))
            for f in ("k1", "k2", "p1", "p2")}
    res = tuple(given.get("resolution", base.resolution))
    return DeviceSpec(Intrinsics(**intr), Distortion(**dist), res)


def _load_bench_config(config_path):
    """Parse the TOML file into (scene kwargs, bench kwargs)."""
    scene_kwargs = {}
    bench_kwargs = {}
    if config_path is None:
        return scene_kwargs, bench_kwargs
    with open(config_path, "rb") as fh:
        data = tomli.load(fh)
    _reject_unknown("", data, {"scene", "bench"})
    scene = data.get("scene", {})
    _reject_unknown("scene", scene,
                    set(_SCENE_KEYS) | {"board", "camera", "projector"})
    for key, conv in _SCENE_KEYS.items():
        if key in scene:
            value = scene[key]
            scene_kwargs[key] = tuple(value) if conv is tuple else conv(value)
    if "board" in scene:
        _reject_unknown("scene.board", scene["board"], _BOARD_KEYS)
        scene_kwargs["board"] = BoardSpec(**scene["board"])
    defaults = SceneConfig()
    if "camera" in scene:
        scene_kwargs["camera"] = _device_from_toml(
            "scene.camera", scene["camera"], defaults.camera)
    if "projector" in scene:
        scene_kwargs["projector"] = _device_from_toml(
            "scene.projector", scene["projector"], defaults.projector)
    bench = data.get("bench", {})
    _reject_unknown("bench", bench, _BENCH_KEYS)
    bench_kwargs.update(bench)
    return scene_kwargs, bench_kwargs


# -- bench --------------------------------------------------------------------


@main.command("bench")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="TOML file with [scene] and [bench] sections.")
@click.option("--sigma", "sigmas", multiple=True, type=float,
              help="Noise level; repeat for a grid (overrides config).")
@click.option("--trials", default=None, type=int,
              help="Trials per noise level.")
@click.option("--seed", default=None, type=int, help="Master seed.")
@click.option("--jobs", default=None, type=int,
              help="Worker processes (default: logical cores).")
@click.option("--methods", default=None,
              help="Comma-separated method subset.")
@click.option("--n-poses", default=None, type=int)
@click.option("--baseline-mm", default=None, type=float)
@click.option("--depth-range-mm", default=None, nargs=2, type=float)
@click.option("--tilt-range-deg", default=None, nargs=2, type=float)
@click.option("--lateral-jitter-mm", default=None, type=float)
@click.option("--board", "board_text", default=None,
              help="Checkerboard as COLSxROWSxSQUARE_MM, e.g. 9x7x30.")
@click.option("--raw-trials", is_flag=True, default=False,
              help="Also dump every trial to trials.json.")
@click.option("--out", "out_dir", default="bench_out", show_default=True,
              type=click.Path(file_okay=False))
def cmd_bench(config_path, sigmas, trials, seed, jobs, methods, n_poses,
              baseline_mm, depth_range_mm, tilt_range_deg, lateral_jitter_mm,
              board_text, raw_trials, out_dir):
    """Run the synthetic noise-sweep benchmark and write report files."""
    from . import bench as bench_mod
    from . import report as report_mod

    try:
        scene_kwargs, bench_kwargs = _load_bench_config(config_path)
        if n_poses is not None:
            scene_kwargs["n_poses"] = n_poses
        if baseline_mm is not None:
            scene_kwargs["baseline_mm"] = baseline_mm
        if depth_range_mm:
            scene_kwargs["depth_range_mm"] = tuple(depth_range_mm)
        if tilt_range_deg:
            scene_kwargs["tilt_range_deg"] = tuple(tilt_range_deg)
        if lateral_jitter_mm is not None:
            scene_kwargs["lateral_jitter_mm"] = lateral_jitter_mm
        if board_text is not None:
            cols, rows, square = board_text.lower().split("x")
            scene_kwargs["board"] = BoardSpec(int(cols), int(rows),
                                              float(square))
        config = SceneConfig(**scene_kwargs)

        sigma_grid = tuple(sigmas) if sigmas else tuple(
            bench_kwargs.get("sigma_grid", bench_mod.DEFAULT_SIGMA_GRID))
        trials_per = trials if trials is not None else int(
            bench_kwargs.get("trials", 20))
        method_list = (tuple(m.strip() for m in methods.split(","))
                       if methods else tuple(
                           bench_kwargs.get("methods", bench_mod.METHODS)))
        master_seed = _resolve_seed(seed, bench_kwargs.get("master_seed"))
        n_jobs = jobs if jobs is not None else int(
            bench_kwargs.get("jobs", 0)) or os.cpu_count() or 1
    except (ValueError, CalibrationError, SceneError, tomli.TOMLDecodeError) as exc:
        _fail(EXIT_USAGE, str(exc))

    try:
        rep = bench_mod.run_benchmark(
            config, sigma_grid=sigma_grid, trials_per_sigma=trials_per,
            methods=method_list, master_seed=master_seed, jobs=n_jobs)
    except bench_mod.BenchmarkError as exc:
        _fail(EXIT_USAGE, str(exc))

    try:
        report_mod.write_all(rep, out_dir, raw_trials=raw_trials)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))

    _echo_ordering_verdict(rep)
    click.echo(f"wrote report files to {out_dir}/")
    if rep.warning:
        _fail(EXIT_QUALITY, "more than 20% of trials failed at a grid point")


def _resolve_seed(flag_value, config_value) -> int:
    """Flag wins, then PROCAM_SEED, then the config file, then zero."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get("PROCAM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"PROCAM_SEED must be an integer, got {env!r}")
    if config_value is not None:
        return int(config_value)
    return 0


def _echo_ordering_verdict(rep) -> None:
    """Median stereo reprojection should rank proposed <= w/o BA <= GH."""
    checkable = [s for s in ORDERING_SIGMAS if s in rep.sigma_grid]
    ranked = [m for m in ("proposed", "proposed_wo_ba", "global_homography")
              if m in rep.methods]
    if len(checkable) == 0 or len(ranked) < 2:
        click.echo("ordering check: skipped (needs noise levels from "
                   f"{ORDERING_SIGMAS} and at least two ranked methods)")
        return
    all_ok = True
    for sigma in checkable:
        medians = [rep.median(sigma, m, "reproj_px") for m in ranked]
        ok = (not any(m != m for m in medians)
              and all(a <= b for a, b in zip(medians, medians[1:])))
        all_ok &= ok
        chain = " <= ".join(f"{m} {v:.4g}" for m, v in zip(ranked, medians))
        click.echo(f"ordering at sigma {sigma:g}: "
                   f"{'ok' if ok else 'VIOLATED'} ({chain})")
    click.echo(f"ordering verdict: {'PASS' if all_ok else 'FAIL'}")


# -- calibrate ----------------------------------------------------------------


@main.command("calibrate")
@click.argument("captures_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--skip-ba", is_flag=True, default=False,
              help="Refine board poses only; keep stage-2 values otherwise.")
@click.option("--out", "out_path", default="calibration.json",
              show_default=True, type=click.Path(dir_okay=False))
def cmd_calibrate(captures_path, skip_ba, out_path):
    """Calibrate a rig from a capture JSON file."""
    try:
        board, captures = load_captures(captures_path)
    except CaptureFormatError as exc:
        _fail(EXIT_USAGE, f"capture file rejected at {exc.pointer}: {exc}")
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    try:
        calib = calibrate_full(captures, board, skip_ba=skip_ba)
    except (CalibrationError, GeometryError, BundleError, ValueError) as exc:
        _fail(EXIT_CALIBRATION, str(exc))
    data = result_to_dict(calib)
    if calib.report is not None:
        data["refinement"] = calib.report.to_dict()
    try:
        with open(out_path, "w") as fh:
            json.dump(data, fh, indent=1)
            fh.write("\n")
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(
        f"RMS px (camera / projector / stereo): "
        f"{calib.rms_camera:.4f} / {calib.rms_projector:.4f} / "
        f"{calib.rms_stereo:.4f}"
    )
    click.echo(f"wrote {out_path}")


# -- report -------------------------------------------------------------------


@main.command("report")
@click.argument("trials_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default="report_out", show_default=True,
              type=click.Path(file_okay=False))
def cmd_report(trials_path, out_dir):
    """Re-render report files from a raw trial dump (trials.json)."""
    from . import report as report_mod

    try:
        with open(trials_path) as fh:
            data = json.load(fh)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    except json.JSONDecodeError as exc:
        _fail(EXIT_USAGE, f"not valid JSON: {exc}")
    try:
        rep = report_mod.report_from_trials_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        _fail(EXIT_USAGE, f"trial dump missing required data: {exc}")
    try:
        report_mod.write_all(rep, out_dir)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    _echo_ordering_verdict(rep)
    click.echo(f"wrote report files to {out_dir}/")


if __name__ == "__main__":
    main()
