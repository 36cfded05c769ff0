"""Plain-file reporting for a finished run: CSV tables plus PNG figures.

Everything is derived from the artifact tree a pipeline run leaves behind;
nothing here recomputes transforms. The CSV output is the machine-readable
record, the figures are for eyeballing a subject quickly.
"""

from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .errors import ValidationFailure, ZeroDenominator
from .manifest import Manifest
from .stats import aspc
from .trajectory import TrajectoryModel, jacobian_map
from .volume_io import read_field, read_volume

PNG_METADATA = {"Software": "longreg"}


def _voxel_ml(grid) -> float:
    return abs(float(np.linalg.det(grid.affine[:3, :3]))) / 1000.0


def label_volume_rows(man: Manifest, out_dir: str) -> list[dict]:
    """One row per (timepoint, label) from the fused segmentations."""
    rows = []
    for t in man.timepoints:
        path = Path(out_dir) / "segment" / f"{t.id}_seg.nii.gz"
        if not path.exists():
            continue
        seg = read_volume(str(path), kind="labels")
        per_ml = _voxel_ml(seg.grid)
        for lab in seg.ids():
            voxels = int((seg.data == lab).sum())
            rows.append(
                {
                    "timepoint": t.id,
                    "time_years": t.time_years,
                    "label_id": lab,
                    "label_name": seg.table[lab],
                    "voxels": voxels,
                    "volume_ml": voxels * per_ml,
                }
            )
    if not rows:
        raise ValidationFailure(
            f"no fused segmentations under {Path(out_dir) / 'segment'}; run the segment stage first"
        )
    return rows


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _aspc_rows(volume_rows: list[dict]) -> list[dict]:
    """Consecutive-timepoint ASPC per label, skipping empty-empty pairs."""
    by_tp: dict[str, dict[int, dict]] = {}
    order: list[str] = []
    for row in volume_rows:
        if row["timepoint"] not in by_tp:
            order.append(row["timepoint"])
        by_tp.setdefault(row["timepoint"], {})[row["label_id"]] = row
    rows = []
    for ref, target in zip(order, order[1:]):
        labels = sorted(set(by_tp[ref]) | set(by_tp[target]))
        for lab in labels:
            a = by_tp[ref].get(lab)
            b = by_tp[target].get(lab)
            v1 = a["volume_ml"] if a else 0.0
            v2 = b["volume_ml"] if b else 0.0
            name = (a or b)["label_name"]
            try:
                value = aspc(v1, v2)
            except ZeroDenominator:
                warnings.warn(
                    f"label {lab} has zero volume at both {ref} and {target}, no ASPC",
                    stacklevel=2,
                )
                continue
            rows.append(
                {
                    "label_id": lab,
                    "label_name": name,
                    "ref": ref,
                    "target": target,
                    "aspc_percent": value,
                }
            )
    return rows


def _solver_rows(out_dir: str) -> list[dict]:
    rows = []
    for stage in ("rigid-solve", "svf-solve"):
        report_path = Path(out_dir) / stage / "solve_report.json"
        if not report_path.exists():
            continue
        with open(report_path) as f:
            report = json.load(f)
        timings_path = Path(out_dir) / stage / "timings.json"
        timing = {}
        if timings_path.exists():
            with open(timings_path) as f:
                timing = json.load(f)
        rows.append(
            {
                "stage": stage,
                "n_solves": report.get("n_solves"),
                "objective_total": report.get("objective_total"),
                "iterations_mean": report.get("iterations_mean"),
                "iterations_max": report.get("iterations_max"),
                "wall_seconds": timing.get("wall_seconds"),
                "per_solve_mean_seconds": timing.get("per_solve_mean_seconds"),
            }
        )
    return rows


def _mid_slices(data: np.ndarray) -> list[np.ndarray]:
    x, y, z = (n // 2 for n in data.shape)
    return [data[x, :, :], data[:, y, :], data[:, :, z]]


def _save_template_figure(out_dir: str, path: Path) -> bool:
    tpl_path = Path(out_dir) / "template" / "template_intensity.nii.gz"
    if not tpl_path.exists():
        return False
    vol = read_volume(str(tpl_path))
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, plane, name in zip(axes, _mid_slices(vol.data), ("sagittal", "coronal", "axial")):
        ax.imshow(plane.T, cmap="gray", origin="lower")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.suptitle("subject template, mid-slices", fontsize=11)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)
    return True


def _save_volumes_figure(volume_rows: list[dict], path: Path) -> None:
    series: dict[int, tuple[str, list, list]] = {}
    for row in volume_rows:
        if row["label_id"] == 0:
            continue
        name, times, vols = series.setdefault(row["label_id"], (row["label_name"], [], []))
        times.append(row["time_years"])
        vols.append(row["volume_ml"])
    fig, ax = plt.subplots(figsize=(6, 4))
    for lab in sorted(series):
        name, times, vols = series[lab]
        order = np.argsort(times)
        ax.plot(
            np.asarray(times)[order],
            np.asarray(vols)[order],
            marker="o",
            label=f"{lab}: {name}",
        )
    ax.set_xlabel("time from baseline (years)")
    ax.set_ylabel("volume (ml)")
    ax.set_title("label volumes over time")
    if series:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)


def _save_jacobian_figure(man: Manifest, out_dir: str, path: Path) -> bool:
    traj_dir = Path(out_dir) / "trajectory"
    needed = ["intercept.svf.nii.gz", "slope.svf.nii.gz", "residual.nii.gz"]
    if not all((traj_dir / n).exists() for n in needed):
        return False
    model = TrajectoryModel(
        intercept=read_field(str(traj_dir / "intercept.svf.nii.gz")),
        slope=read_field(str(traj_dir / "slope.svf.nii.gz")),
        residual=read_volume(str(traj_dir / "residual.nii.gz")),
    )
    t_last = max(t.time_years for t in man.timepoints)
    jac = jacobian_map(model, t_last)
    mid = jac.data[:, :, jac.data.shape[2] // 2]
    spread = max(abs(float(mid.min() - 1.0)), abs(float(mid.max() - 1.0)), 1e-3)
    fig, ax = plt.subplots(figsize=(4.6, 4))
    im = ax.imshow(mid.T, cmap="coolwarm", origin="lower", vmin=1.0 - spread, vmax=1.0 + spread)
    ax.set_title(f"trajectory jacobian at t={t_last:g}y (mid-axial)", fontsize=10)
    ax.axis("off")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)
    return True


def write_report(man: Manifest, out_dir: str, report_dir: str | None = None) -> list[str]:
    """Write volumes.csv, aspc.csv, solver.csv and the PNG figures.

    Returns the names of the files written, relative to the report
    directory (out/report by default). The segment stage must have run;
    template and trajectory figures appear when their stages did.
    """
    dest = Path(report_dir) if report_dir else Path(out_dir) / "report"
    dest.mkdir(parents=True, exist_ok=True)
    written = []

    volume_rows = label_volume_rows(man, out_dir)
    _write_csv(
        dest / "volumes.csv",
        ["timepoint", "time_years", "label_id", "label_name", "voxels", "volume_ml"],
        volume_rows,
    )
    written.append("volumes.csv")

    _write_csv(
        dest / "aspc.csv",
        ["label_id", "label_name", "ref", "target", "aspc_percent"],
        _aspc_rows(volume_rows),
    )
    written.append("aspc.csv")

    solver_rows = _solver_rows(out_dir)
    if solver_rows:
        _write_csv(
            dest / "solver.csv",
            [
                "stage",
                "n_solves",
                "objective_total",
                "iterations_mean",
                "iterations_max",
                "wall_seconds",
                "per_solve_mean_seconds",
            ],
            solver_rows,
        )
        written.append("solver.csv")

    _save_volumes_figure(volume_rows, dest / "volumes.png")
    written.append("volumes.png")
    if _save_template_figure(out_dir, dest / "template.png"):
        written.append("template.png")
    if _save_jacobian_figure(man, out_dir, dest / "jacobian.png"):
        written.append("jacobian.png")
    return written
