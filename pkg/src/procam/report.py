"""Benchmark report writers.

Everything here is deterministic: fixed float formatting, no timestamps,
stable row ordering, so rerunning the same benchmark produces
byte-identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .bench import INTRINSIC_KEYS, METRIC_KEYS, BenchmarkReport, TrialResult
from .geometry import Distortion, Intrinsics
from .pipeline import BoardSpec
from .synthetic import DeviceSpec, SceneConfig

GENERAL_PANELS = ("reproj_px", "align_mm", "rot_deg", "trans_mm")

PANEL_LABELS = {
    "reproj_px": "reprojection RMS (px)",
    "align_mm": "3D alignment RMS (mm)",
    "rot_deg": "stereo rotation error (deg)",
    "trans_mm": "stereo translation error (mm)",
}
for _key in INTRINSIC_KEYS:
    PANEL_LABELS[f"cam_{_key}"] = f"camera {_key} abs error"
    PANEL_LABELS[f"prj_{_key}"] = f"projector {_key} abs error"

METHOD_LABELS = {
    "proposed": "proposed",
    "proposed_wo_ba": "proposed w/o refinement",
    "global_homography": "global homography",
}
METHOD_STYLES = {
    "proposed": {"color": "#1f6fb2", "marker": "o"},
    "proposed_wo_ba": {"color": "#2e9950", "marker": "s"},
    "global_homography": {"color": "#c2452d", "marker": "^"},
}


def _fmt(value: float) -> str:
    if value != value:
        return "nan"
    return format(value, ".12g")


def write_report_csv(report: BenchmarkReport, path) -> None:
    rows = report.summary_rows()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma", "method", "metric", "median", "q1", "q3",
                         "trials", "failures"])
        for row in rows:
            writer.writerow([
                _fmt(row["sigma"]), row["method"], row["metric"],
                _fmt(row["median"]), _fmt(row["q1"]), _fmt(row["q3"]),
                row["trials"], row["failures"],
            ])


def report_to_dict(report: BenchmarkReport) -> dict:
    return {
        "schema": 1,
        "master_seed": report.master_seed,
        "sigma_grid": list(report.sigma_grid),
        "trials_per_sigma": report.trials_per_sigma,
        "methods": list(report.methods),
        "warning": report.warning,
        "config": asdict(report.config),
        "rows": report.summary_rows(),
        "failures": [
            {"sigma": sigma, "method": method, "count": count}
            for (sigma, method), count in sorted(report.failures.items())
        ],
    }


def write_report_json(report: BenchmarkReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(report), fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_trials_json(report: BenchmarkReport, path) -> None:
    """Raw per-trial dump, with enough context to re-render every report."""
    data = {
        "schema": 1,
        "master_seed": report.master_seed,
        "sigma_grid": list(report.sigma_grid),
        "trials_per_sigma": report.trials_per_sigma,
        "methods": list(report.methods),
        "warning": report.warning,
        "config": asdict(report.config),
        "failures": [
            {"sigma": sigma, "method": method, "count": count}
            for (sigma, method), count in sorted(report.failures.items())
        ],
        "trials": [r.to_dict() for r in report.results],
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _config_from_dict(data: dict) -> SceneConfig:
    camera = data["camera"]
    projector = data["projector"]
    board = data["board"]

    def device(d):
        return DeviceSpec(
            Intrinsics(**d["intrinsics"]),
            Distortion(**d["distortion"]),
            tuple(d["resolution"]),
        )

    return SceneConfig(
        camera=device(camera),
        projector=device(projector),
        baseline_mm=data["baseline_mm"],
        aim_point_mm=tuple(data["aim_point_mm"]),
        n_poses=data["n_poses"],
        depth_range_mm=tuple(data["depth_range_mm"]),
        tilt_range_deg=tuple(data["tilt_range_deg"]),
        lateral_jitter_mm=data["lateral_jitter_mm"],
        board=BoardSpec(**board),
        pattern_k=data["pattern_k"],
        pattern_n=data["pattern_n"],
        stripe_spacing_px=data["stripe_spacing_px"],
        node_margin=data["node_margin"],
        node_stride=data["node_stride"],
        min_visible_fraction=data["min_visible_fraction"],
        max_attempts=data["max_attempts"],
        seed=data["seed"],
    )


def report_from_trials_dict(data: dict) -> BenchmarkReport:
    """Rebuild a BenchmarkReport from a raw trial dump."""
    report = BenchmarkReport(
        config=_config_from_dict(data["config"]),
        sigma_grid=tuple(data["sigma_grid"]),
        trials_per_sigma=data["trials_per_sigma"],
        methods=tuple(data["methods"]),
        master_seed=data["master_seed"],
        warning=data["warning"],
    )
    for entry in data["trials"]:
        report.results.append(TrialResult(
            method=entry["method"],
            sigma=entry["sigma"],
            trial=entry["trial"],
            reproj_px=entry["reproj_px"],
            align_mm=entry["align_mm"],
            rot_deg=entry["rot_deg"],
            trans_mm=entry["trans_mm"],
            cam_errors=dict(entry["cam_errors"]),
            prj_errors=dict(entry["prj_errors"]),
        ))
    for entry in data["failures"]:
        report.failures[(entry["sigma"], entry["method"])] = entry["count"]
    return report


def write_panel_csvs(report: BenchmarkReport, directory) -> list:
    """One CSV per plot panel: sigma rows, per-method median and quartiles."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    rows = report.summary_rows()
    for key in METRIC_KEYS:
        path = directory / f"panel_{key}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["sigma"]
            for method in report.methods:
                header += [method, f"{method}_q1", f"{method}_q3"]
            writer.writerow(header)
            for sigma in report.sigma_grid:
                line = [_fmt(sigma)]
                for method in report.methods:
                    row = next(r for r in rows
                               if r["sigma"] == sigma and r["method"] == method
                               and r["metric"] == key)
                    line += [_fmt(row["median"]), _fmt(row["q1"]),
                             _fmt(row["q3"])]
                writer.writerow(line)
        paths.append(path)
    return paths


def _render_grid(report: BenchmarkReport, keys, n_rows, n_cols, path) -> None:
    fig, axes = plt.subplots(n_rows, n_cols,
                             figsize=(4.2 * n_cols, 3.2 * n_rows),
                             squeeze=False)
    sigmas = list(report.sigma_grid)
    for ax, key in zip(axes.ravel(), keys):
        for method in report.methods:
            medians = [report.median(s, method, key) for s in sigmas]
            style = METHOD_STYLES.get(method, {})
            ax.plot(sigmas, medians, label=METHOD_LABELS.get(method, method),
                    markersize=4, linewidth=1.2, **style)
        ax.set_xlabel("noise level")
        ax.set_ylabel(PANEL_LABELS[key])
        ax.grid(True, alpha=0.3)
    for ax in axes.ravel()[len(keys):]:
        ax.axis("off")
    handles, labels = axes.ravel()[0].get_legend_handles_labels()
    fig.legend(handles, labels, loc="upper center", ncol=len(labels),
               frameon=False)
    fig.tight_layout(rect=(0.0, 0.0, 1.0, 0.94))
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_figures(report: BenchmarkReport, directory) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    jobs = [
        ("summary_errors.png", GENERAL_PANELS, 2, 2),
        ("camera_intrinsics_errors.png",
         tuple(f"cam_{k}" for k in INTRINSIC_KEYS), 2, 4),
        ("projector_intrinsics_errors.png",
         tuple(f"prj_{k}" for k in INTRINSIC_KEYS), 2, 4),
    ]
    paths = []
    for name, keys, n_rows, n_cols in jobs:
        path = directory / name
        _render_grid(report, keys, n_rows, n_cols, path)
        paths.append(path)
    return paths


def write_all(report: BenchmarkReport, directory, raw_trials: bool = False) -> dict:
    """Write every report artifact into `directory`, returning the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {
        "report_csv": directory / "report.csv",
        "report_json": directory / "report.json",
    }
    write_report_csv(report, out["report_csv"])
    write_report_json(report, out["report_json"])
    out["panels"] = write_panel_csvs(report, directory)
    out["figures"] = render_figures(report, directory)
    if raw_trials:
        out["trials_json"] = directory / "trials.json"
        write_trials_json(report, out["trials_json"])
    return out
