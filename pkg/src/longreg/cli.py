"""Command line interface.

One subcommand per pipeline stage plus the utilities around them. Every
command exits 0 on success, 2 when inputs fail validation and 3 when the
solver itself gives up; diagnostics go to stderr with the error class named
so scripts can branch on them.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import (
    Infeasible,
    LongregError,
    NumericalFailure,
    SingularCovariance,
    Unbounded,
    ValidationFailure,
)
from .geometry import DisplacementField, Svf, svf_exp
from .longseg import FusionConfig
from .manifest import absolutized, load_manifest, save_manifest, validate_manifest
from .phantom import PhantomSpec, generate_phantom, load_phantom_spec, write_phantom
from .pipeline import (
    STAGES,
    ingest_external_registrations,
    run_pipeline,
    segment_reference,
)
from .report import write_report
from .stats import (
    StudyDesign,
    aspc,
    fdr_bh,
    hotelling_t2,
    sample_size,
    sample_size_reduction,
    voxelwise_ttest,
)
from .trajectory import (
    TrajectoryModel,
    evaluate_trajectory,
    jacobian_map,
    predict_image,
    transport_svf,
)
from .volume_io import (
    MaskVolume,
    Volume,
    read_field,
    read_grid,
    read_volume,
    write_field,
    write_volume,
)

SOLVER_ERRORS = (Unbounded, Infeasible, NumericalFailure, SingularCovariance)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SOLVER_ERRORS as exc:
            click.echo(f"solver failure [{type(exc).__name__}]: {exc}", err=True)
            sys.exit(3)
        except LongregError as exc:
            click.echo(f"validation failure [{type(exc).__name__}]: {exc}", err=True)
            sys.exit(2)

    return wrapper


def manifest_option(fn):
    return click.option(
        "--manifest", "-m", "manifest_path", required=True, help="Subject manifest JSON."
    )(fn)


def out_option(fn):
    return click.option(
        "--out", "-o", "out_dir", required=True, help="Pipeline output directory."
    )(fn)


def force_option(fn):
    return click.option(
        "--force", is_flag=True, help="Recompute even when provenance says up to date."
    )(fn)


def workers_option(fn):
    return click.option(
        "--workers",
        type=int,
        default=None,
        help="Worker count; overrides LONGREG_WORKERS and manifest settings.",
    )(fn)


def _echo_results(results) -> None:
    for r in results:
        state = "up to date" if r.skipped else f"ran in {r.wall_seconds:.2f}s"
        click.echo(f"{r.stage}: {state} ({len(r.outputs)} outputs)")


def _run_stages(manifest_path, out_dir, stages, force, workers, settings=None):
    _, results = run_pipeline(
        manifest_path,
        out_dir,
        stages=stages,
        force=force,
        workers=workers,
        settings_override=settings,
    )
    _echo_results(results)


@click.group()
@click.version_option(__version__, prog_name="longreg")
def main():
    """Unbiased latent transforms, templates and morphometry for one subject."""


@main.command("run")
@manifest_option
@out_option
@force_option
@workers_option
@click.option(
    "--stages",
    default=None,
    help=f"Comma-separated subset of: {', '.join(STAGES)}. Default: all.",
)
@handle_errors
def run_cmd(manifest_path, out_dir, force, workers, stages):
    """Run the pipeline stages in order."""
    stage_list = [s.strip() for s in stages.split(",") if s.strip()] if stages else None
    _run_stages(manifest_path, out_dir, stage_list, force, workers)


@main.command("rigid-register")
@manifest_option
@out_option
@force_option
@workers_option
@handle_errors
def rigid_register_cmd(manifest_path, out_dir, force, workers):
    """Procrustes-align label centroids for every uncovered timepoint pair."""
    _run_stages(manifest_path, out_dir, ["rigid-register"], force, workers)


@main.command("nonlinear-register")
@manifest_option
@out_option
@force_option
@workers_option
@click.option(
    "--no-symmetrize",
    is_flag=True,
    help="Keep the forward field instead of averaging with the reversed backward one.",
)
@handle_errors
def nonlinear_register_cmd(manifest_path, out_dir, force, workers, no_symmetrize):
    """Estimate pairwise stationary velocity fields on the subject grid."""
    settings = {"symmetrize": False} if no_symmetrize else None
    _run_stages(manifest_path, out_dir, ["nonlinear-register"], force, workers, settings)


@main.command("solve")
@manifest_option
@out_option
@force_option
@workers_option
@click.option("--mode", type=click.Choice(["rigid", "svf"]), required=True)
@click.option("--ratio", type=float, default=None, help="Prior-to-data deviation ratio.")
@handle_errors
def solve_cmd(manifest_path, out_dir, force, workers, mode, ratio):
    """Infer latent transforms from the observation graph."""
    settings = {"ratio": ratio} if ratio is not None else None
    _run_stages(manifest_path, out_dir, [f"{mode}-solve"], force, workers, settings)


@main.command("grid")
@manifest_option
@out_option
@force_option
@handle_errors
def grid_cmd(manifest_path, out_dir, force):
    """Fix the subject grid that later stages sample on."""
    _run_stages(manifest_path, out_dir, ["grid"], force, None)


@main.command("template")
@manifest_option
@out_option
@force_option
@workers_option
@handle_errors
def template_cmd(manifest_path, out_dir, force, workers):
    """Fuse all aligned timepoints into the subject template."""
    _run_stages(manifest_path, out_dir, ["template"], force, workers)


@main.command("segment")
@manifest_option
@out_option
@force_option
@workers_option
@click.option("--reference", "references", multiple=True, help="Reference timepoint id.")
@click.option("--all", "segment_all", is_flag=True, help="Segment every eligible timepoint.")
@click.option("--soft", is_flag=True, help="Also write per-label soft-score volumes.")
@handle_errors
def segment_cmd(manifest_path, out_dir, force, workers, references, segment_all, soft):
    """Fuse longitudinal label votes around each reference timepoint."""
    if bool(references) == segment_all:
        raise ValidationFailure("pass either --reference (repeatable) or --all")
    if segment_all and not soft:
        _run_stages(manifest_path, out_dir, ["segment"], force, workers)
        return
    man = load_manifest(manifest_path)
    validate_manifest(man, check_files=True)
    out = Path(out_dir)
    if segment_all:
        references = tuple(
            t.id for t in man.timepoints if t.image is not None and t.labels is not None
        )
    dest = out / "segment"
    dest.mkdir(parents=True, exist_ok=True)
    for rid in references:
        result = segment_reference(man, out, rid, return_scores=soft)
        if soft:
            fused, ids, scores = result
        else:
            fused = result
        write_volume(str(dest / f"{rid}_seg.nii.gz"), fused)
        click.echo(f"segment: wrote {rid}_seg.nii.gz")
        if soft:
            for j, lab in enumerate(ids):
                name = f"{rid}_score_{lab}.nii.gz"
                write_volume(str(dest / name), Volume(fused.grid, scores[..., j]))
                click.echo(f"segment: wrote {name}")


@main.command("phantom")
@click.option("--spec", "spec_path", default=None, help="Phantom spec JSON; defaults built in.")
@out_option
@click.option("--seed", type=int, default=None, help="Override the spec seed.")
@click.option(
    "--no-observations",
    is_flag=True,
    help="Write only images and truth, leaving registrations to the pipeline.",
)
@handle_errors
def phantom_cmd(spec_path, out_dir, seed, no_observations):
    """Generate a synthetic longitudinal subject with known truth."""
    spec = load_phantom_spec(spec_path) if spec_path else PhantomSpec()
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    phantom = generate_phantom(spec)
    manifest_path = write_phantom(phantom, out_dir, include_observations=not no_observations)
    click.echo(f"phantom: wrote {manifest_path}")


@main.command("ingest")
@manifest_option
@click.option("--dir", "directory", required=True, help="Directory of registration files.")
@click.option("--kind", type=click.Choice(["rigid", "svf"]), default=None)
@click.option(
    "--save",
    "save_path",
    default=None,
    help="Where to write the updated manifest; defaults to the input path.",
)
@handle_errors
def ingest_cmd(manifest_path, directory, kind, save_path):
    """Append externally computed registrations to the manifest."""
    man = load_manifest(manifest_path)
    validate_manifest(man, check_files=True)
    before = len(man.registrations)
    man = ingest_external_registrations(directory, man, kind=kind)
    dest = save_path or manifest_path
    save_manifest(dest, absolutized(man))
    click.echo(f"ingest: added {len(man.registrations) - before} edges, wrote {dest}")


@main.command("report")
@out_option
@click.option(
    "--manifest",
    "-m",
    "manifest_path",
    default=None,
    help="Manifest JSON; defaults to <out>/manifest.json.",
)
@handle_errors
def report_cmd(out_dir, manifest_path):
    """Write CSV tables and PNG figures summarizing a finished run."""
    path = manifest_path or str(Path(out_dir) / "manifest.json")
    man = load_manifest(path)
    written = write_report(man, out_dir)
    for name in written:
        click.echo(f"report: wrote {name}")


# ---------------------------------------------------------------------------
# trajectory


def _load_model(out_dir: str) -> TrajectoryModel:
    traj = Path(out_dir) / "trajectory"
    needed = ("intercept.svf.nii.gz", "slope.svf.nii.gz", "residual.nii.gz")
    missing = [n for n in needed if not (traj / n).exists()]
    if missing:
        raise ValidationFailure(
            f"trajectory model incomplete under {traj} (missing {missing}); "
            "run the trajectory stage first"
        )
    return TrajectoryModel(
        intercept=read_field(str(traj / "intercept.svf.nii.gz")),
        slope=read_field(str(traj / "slope.svf.nii.gz")),
        residual=read_volume(str(traj / "residual.nii.gz")),
    )


@main.group()
def trajectory():
    """Linear time model over the latent velocity fields."""


@trajectory.command("fit")
@manifest_option
@out_option
@force_option
@workers_option
@click.option("--method", type=click.Choice(["ols", "lad"]), default=None)
@handle_errors
def trajectory_fit_cmd(manifest_path, out_dir, force, workers, method):
    """Fit intercept and slope fields over the latent velocity fields."""
    settings = {"trajectory_method": method} if method else None
    _run_stages(manifest_path, out_dir, ["trajectory"], force, workers, settings)


@trajectory.command("evaluate")
@out_option
@click.option("--time", "t", type=float, required=True, help="Years from baseline.")
@click.option("--direction", type=click.Choice(["1", "-1"]), default="1")
@click.option("--jacobian", is_flag=True, help="Write the Jacobian determinant map instead.")
@click.option("--dest", default=None, help="Output path; defaults into <out>/trajectory/.")
@handle_errors
def trajectory_evaluate_cmd(out_dir, t, direction, jacobian, dest):
    """Integrate the fitted trajectory to a displacement (or Jacobian) at a time."""
    model = _load_model(out_dir)
    traj = Path(out_dir) / "trajectory"
    if jacobian:
        result = jacobian_map(model, t)
        path = dest or str(traj / f"jacobian_t{t:g}.nii.gz")
        write_volume(path, result)
    else:
        result = evaluate_trajectory(model, t, direction=int(direction))
        path = dest or str(traj / f"displacement_t{t:g}.nii.gz")
        write_field(path, result)
    click.echo(f"trajectory: wrote {path}")


@trajectory.command("predict")
@out_option
@click.option("--time", "t", type=float, required=True, help="Years from baseline.")
@click.option("--dest", default=None, help="Output path; defaults into <out>/trajectory/.")
@handle_errors
def trajectory_predict_cmd(out_dir, t, dest):
    """Carry the template intensity along the trajectory to a time."""
    tpl_path = Path(out_dir) / "template" / "template_intensity.nii.gz"
    if not tpl_path.exists():
        raise ValidationFailure(f"no template at {tpl_path}; run the template stage first")
    model = _load_model(out_dir)
    template = read_volume(str(tpl_path))
    predicted = predict_image(template, model, t)
    path = dest or str(Path(out_dir) / "trajectory" / f"predicted_t{t:g}.nii.gz")
    write_volume(path, predicted)
    click.echo(f"trajectory: wrote {path}")


@trajectory.command("transport")
@click.option("--field", "field_path", required=True, help="Velocity or displacement field.")
@click.option(
    "--warp",
    "warp_path",
    required=True,
    help="Subject-to-population map in the log domain, on the population grid.",
)
@click.option("--grid", "grid_path", default=None, help="Population grid JSON (optional check).")
@click.option("--dest", required=True, help="Output field path.")
@click.option(
    "--integrate",
    is_flag=True,
    help="Also integrate after transport, writing a displacement beside the field.",
)
@handle_errors
def trajectory_transport_cmd(field_path, warp_path, grid_path, dest, integrate):
    """Push a subject-space field into population space.

    A velocity field input transports in the log domain (integrate
    afterwards for a deformation); a displacement input is transported
    directly, covering the integrate-before-transport order.
    """
    field = read_field(field_path)
    warp = read_field(warp_path)
    if not isinstance(warp, Svf):
        raise ValidationFailure("the transport warp must be a stationary velocity field")
    grid = read_grid(grid_path) if grid_path else None
    if isinstance(field, Svf):
        moved = transport_svf(field, warp, grid)
    else:
        moved_svf = transport_svf(Svf(field.grid, field.values), warp, grid)
        moved = DisplacementField(moved_svf.grid, moved_svf.values)
    write_field(dest, moved)
    click.echo(f"trajectory: wrote {dest}")
    if integrate:
        if not isinstance(moved, Svf):
            raise ValidationFailure("--integrate only applies to velocity-field input")
        disp_path = dest.replace(".svf.nii.gz", "") if dest.endswith(".svf.nii.gz") else dest
        disp_path = f"{disp_path}.disp.nii.gz"
        write_field(disp_path, svf_exp(moved, direction=1))
        click.echo(f"trajectory: wrote {disp_path}")


# ---------------------------------------------------------------------------
# stats


def _load_group_paths(path: str) -> list[str]:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, ValueError) as exc:
        raise ValidationFailure(f"cannot read group file {path}: {exc}") from exc
    if isinstance(doc, dict):
        doc = doc.get("volumes") or doc.get("fields") or doc.get("paths")
    if not isinstance(doc, list) or not doc:
        raise ValidationFailure(
            f"{path} must hold a JSON list of paths (or a 'volumes'/'fields' key)"
        )
    base = Path(path).parent
    out = []
    for item in doc:
        p = Path(str(item))
        out.append(str(p if p.is_absolute() else base / p))
    return out


def _write_summary(path: str, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    click.echo(f"stats: wrote {path}")


@main.group()
def stats():
    """Voxelwise group tests and scalar study-design numbers."""


@stats.command("ttest")
@click.option("--group-a", required=True, help="JSON list of volume paths.")
@click.option("--group-b", required=True, help="JSON list of volume paths.")
@click.option("--out-prefix", required=True)
@click.option("--mask", "mask_path", default=None)
@click.option("--log", "log_values", is_flag=True, help="Test log-transformed values.")
@handle_errors
def stats_ttest_cmd(group_a, group_b, out_prefix, mask_path, log_values):
    """Welch two-sample t-test per voxel."""

    def load(paths):
        vols = [read_volume(p) for p in paths]
        if log_values:
            logged = []
            for v in vols:
                if np.any(v.data <= 0):
                    raise ValidationFailure("--log needs strictly positive intensities")
                logged.append(Volume(v.grid, np.log(v.data)))
            vols = logged
        return vols

    a = load(_load_group_paths(group_a))
    b = load(_load_group_paths(group_b))
    mask = read_volume(mask_path, kind="mask") if mask_path else None
    result = voxelwise_ttest(a, b, mask=mask)
    write_volume(f"{out_prefix}_t.nii.gz", result.t)
    write_volume(f"{out_prefix}_p.nii.gz", result.p)
    _write_summary(
        f"{out_prefix}_summary.json",
        {
            "test": "welch-t",
            "n_a": len(a),
            "n_b": len(b),
            "log": log_values,
            "min_p": float(result.p.data.min()),
        },
    )


@stats.command("hotelling")
@click.option("--group-a", required=True, help="JSON list of vector-field paths.")
@click.option("--group-b", required=True, help="JSON list of vector-field paths.")
@click.option("--out-prefix", required=True)
@click.option("--mask", "mask_path", default=None)
@handle_errors
def stats_hotelling_cmd(group_a, group_b, out_prefix, mask_path):
    """Hotelling T² on vector fields per voxel."""
    a = [read_field(p) for p in _load_group_paths(group_a)]
    b = [read_field(p) for p in _load_group_paths(group_b)]
    mask = read_volume(mask_path, kind="mask") if mask_path else None
    result = hotelling_t2(a, b, mask=mask)
    write_volume(f"{out_prefix}_t2.nii.gz", result.t2)
    write_volume(f"{out_prefix}_p.nii.gz", result.p)
    write_volume(f"{out_prefix}_singular.nii.gz", result.singular)
    _write_summary(
        f"{out_prefix}_summary.json",
        {
            "test": "hotelling-t2",
            "n_a": len(a),
            "n_b": len(b),
            "n_singular": int(result.singular.data.sum()),
            "min_p": float(result.p.data.min()),
        },
    )


@stats.command("fdr")
@click.option("--pvalues", "pvalues_path", required=True, help="Volume of p-values.")
@click.option("--rate", type=float, default=0.05, show_default=True)
@click.option("--mask", "mask_path", default=None)
@click.option("--out-prefix", required=True)
@handle_errors
def stats_fdr_cmd(pvalues_path, rate, mask_path, out_prefix):
    """Benjamini-Hochberg step-up over a p-value volume."""
    pvol = read_volume(pvalues_path)
    if mask_path:
        mask = read_volume(mask_path, kind="mask").data >= 0.5
        result = fdr_bh(pvol.data[mask], rate)
        full = np.zeros(pvol.grid.shape, dtype=bool)
        full[mask] = result.mask
    else:
        result = fdr_bh(pvol.data, rate)
        full = result.mask
    write_volume(f"{out_prefix}_mask.nii.gz", MaskVolume(pvol.grid, full.astype(np.float64)))
    _write_summary(
        f"{out_prefix}_summary.json",
        {
            "test": "fdr-bh",
            "rate": rate,
            "threshold": result.threshold,
            "n_significant": result.n_significant,
        },
    )


@stats.command("aspc")
@click.option("--v1", type=float, required=True)
@click.option("--v2", type=float, required=True)
@handle_errors
def stats_aspc_cmd(v1, v2):
    """Absolute symmetrized percent change between two volumes."""
    click.echo(json.dumps({"aspc_percent": aspc(v1, v2)}))


@stats.command("samplesize")
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--power", type=float, default=0.8, show_default=True)
@click.option("--effect-size", type=float, required=True, help="Annual change to detect.")
@click.option("--n-timepoints", type=int, required=True)
@click.option("--time-variance", type=float, required=True, help="Variance of visit times.")
@click.option("--sigma", type=float, required=True, help="Measurement standard deviation.")
@click.option("--rho", type=float, required=True, help="Within-subject correlation.")
@click.option("--sigma-b", type=float, default=None, help="Alternative method sigma.")
@click.option("--rho-b", type=float, default=None, help="Alternative method correlation.")
@handle_errors
def stats_samplesize_cmd(
    alpha, power, effect_size, n_timepoints, time_variance, sigma, rho, sigma_b, rho_b
):
    """Subjects per arm to detect an effect, optionally versus a second method."""
    design = StudyDesign(
        alpha=alpha,
        power=power,
        effect_size=effect_size,
        n_timepoints=n_timepoints,
        time_variance=time_variance,
    )
    size = sample_size(design, sigma, rho)
    payload = {"raw": size.raw, "subjects": size.subjects}
    if (sigma_b is None) != (rho_b is None):
        raise ValidationFailure("--sigma-b and --rho-b come together")
    if sigma_b is not None:
        other = sample_size(design, sigma_b, rho_b)
        payload["subjects_b"] = other.subjects
        payload["reduction_percent"] = sample_size_reduction(sigma, rho, sigma_b, rho_b)
    click.echo(json.dumps(payload, sort_keys=True))


if __name__ == "__main__":
    main()
