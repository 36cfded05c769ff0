"""Stage orchestration: subject manifest in, per-stage artifact tree out.

Each stage writes its products under out/<stage>/ together with two JSON
records: provenance.json (input hashes, settings, package versions, output
names; fully deterministic) and timings.json (wall clock and worker count,
the only files that differ between otherwise identical runs). A stage whose
provenance digest matches the current inputs is skipped unless forced.

Stage order and products:

  rigid-register      {ref}_{target}.rigid.txt for pairs without an edge
  rigid-solve         {id}.rigid.txt latent rigids, solve_report.json
  grid                subject_grid.json
  nonlinear-register  aligned_{id}.nii.gz, {ref}_{target}.svf.nii.gz
  svf-solve           {id}.svf.nii.gz latent fields, solve_mask, report
  template            template_intensity/mask/seg.nii.gz
  trajectory          intercept.svf.nii.gz, slope.svf.nii.gz, residual.nii.gz
  segment             {id}_seg.nii.gz per reference timepoint
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from . import __version__
from .errors import (
    DuplicateEdge,
    GridMismatch,
    MissingLabels,
    MissingLatentTransform,
    NamingConvention,
    UnknownNode,
    ValidationFailure,
)
from .geometry import Grid, Svf, grids_close, se3_exp, se3_log, svf_exp, trilinear_sample
from .graph import ObservationEdge, build_incidence
from .inference import solve_rigid_graph, solve_svf_graph
from .longseg import FusionConfig, SegContribution, longitudinal_segment
from .manifest import (
    Manifest,
    RegistrationEntry,
    absolutized,
    load_manifest,
    save_manifest,
    validate_manifest,
)
from .registration import (
    RegParams,
    centroids,
    procrustes_rigid,
    register_nonlinear_ssd,
    symmetrize_svf,
)
from .template import build_template, define_subject_grid
from .trajectory import fit_trajectory
from .volume_io import (
    MaskVolume,
    Volume,
    chain_points,
    read_field,
    read_grid,
    read_rigid,
    read_volume,
    resample,
    write_field,
    write_grid,
    write_rigid,
    write_volume,
)

STAGES = (
    "rigid-register",
    "rigid-solve",
    "grid",
    "nonlinear-register",
    "svf-solve",
    "template",
    "trajectory",
    "segment",
)

RIGID_SUFFIX = ".rigid.txt"
SVF_SUFFIX = ".svf.nii.gz"
WORKER_ENV = "LONGREG_WORKERS"


@dataclass(frozen=True)
class StageResult:
    stage: str
    skipped: bool
    wall_seconds: float
    outputs: tuple[str, ...]


def resolve_workers(explicit: int | None, man: Manifest) -> int:
    """Worker count: explicit argument, then environment, then settings."""
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get(WORKER_ENV)
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationFailure(f"{WORKER_ENV}={env!r} is not an integer") from None
    return max(1, int(man.setting("workers")))


def _hash_file(path: str) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                digest.update(block)
    except OSError as exc:
        raise ValidationFailure(f"cannot hash input {path}: {exc}") from exc
    return digest.hexdigest()


def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _fresh_outputs(stage_dir: Path, digest: str) -> list[str] | None:
    """Outputs from a previous run with the same digest, if all still exist."""
    prov_path = stage_dir / "provenance.json"
    if not prov_path.exists():
        return None
    try:
        with open(prov_path) as f:
            prov = json.load(f)
    except (OSError, ValueError):
        return None
    if prov.get("digest") != digest:
        return None
    outputs = prov.get("outputs", [])
    if all((stage_dir / name).exists() for name in outputs):
        return list(outputs)
    return None


def _finish_stage(
    out: Path,
    stage: str,
    payload: dict,
    outputs: list[str],
    wall: float,
    workers: int,
    extra_timings: dict | None = None,
) -> StageResult:
    stage_dir = out / stage
    prov = {
        "schema": 1,
        "stage": stage,
        "package": {"name": "longreg", "version": __version__, "numpy": np.__version__},
        "digest": _digest(payload),
        "inputs": payload["inputs"],
        "settings": payload["settings"],
        "outputs": sorted(outputs),
    }
    _write_json(stage_dir / "provenance.json", prov)
    timings = {"stage": stage, "wall_seconds": round(wall, 6), "workers": workers}
    if extra_timings:
        timings.update(extra_timings)
    _write_json(stage_dir / "timings.json", timings)
    return StageResult(stage, False, wall, tuple(sorted(outputs)))


def _skipped(stage: str, outputs: list[str]) -> StageResult:
    return StageResult(stage, True, 0.0, tuple(sorted(outputs)))


def _node_order(man: Manifest) -> dict[str, int]:
    return {t.id: i for i, t in enumerate(man.timepoints)}


def _pair_list(man: Manifest) -> list[tuple[str, str]]:
    policy = man.setting("edges")
    ids = [t.id for t in man.timepoints]
    n = len(ids)
    if isinstance(policy, str):
        if policy == "all":
            return [(ids[i], ids[j]) for i in range(n) for j in range(i + 1, n)]
        if policy == "tree":
            return [(ids[i], ids[i + 1]) for i in range(n - 1)]
        if policy == "ring":
            pairs = [(ids[i], ids[i + 1]) for i in range(n - 1)]
            if n > 2:
                pairs.append((ids[0], ids[n - 1]))
            return pairs
        raise ValidationFailure(f"edge policy {policy!r} not one of all, tree, ring")
    pairs = []
    for item in policy:
        a, b = str(item[0]), str(item[1])
        pairs.append((a, b))
    return pairs


def _covered_pairs(man: Manifest, kind: str) -> set[frozenset]:
    return {frozenset((r.ref, r.target)) for r in man.registrations if r.kind == kind}


def _merged_edges(man: Manifest, stage_dir: Path, kind: str, suffix: str) -> list[ObservationEdge]:
    """Manifest edges of one kind plus stage-dir pair files, canonically ordered.

    Manifest entries win over files for the same directed pair. File names
    must look like {ref}_{target}{suffix} with both ids in the manifest;
    anything else in the directory is ignored.
    """
    paths: dict[tuple[str, str], str] = {}
    for e in man.edges(kind):
        paths[(e.ref, e.target)] = e.payload
    if stage_dir.is_dir():
        ids = {t.id for t in man.timepoints}
        for name in sorted(os.listdir(stage_dir)):
            if not name.endswith(suffix):
                continue
            parts = name[: -len(suffix)].split("_")
            if len(parts) != 2:
                continue
            a, b = parts
            if a in ids and b in ids and (a, b) not in paths:
                paths[(a, b)] = str(stage_dir / name)
    order = _node_order(man)
    pairs = sorted(paths, key=lambda p: (order[p[0]], order[p[1]]))
    return [ObservationEdge(a, b, kind, paths[(a, b)]) for a, b in pairs]


def _latent_rigid(out: Path, tp_id: str):
    path = out / "rigid-solve" / f"{tp_id}{RIGID_SUFFIX}"
    if not path.exists():
        raise MissingLatentTransform(
            f"no latent rigid for timepoint {tp_id!r} at {path}; run the rigid-solve stage first"
        )
    return read_rigid(str(path))


def _latent_svfs(out: Path, man: Manifest, required: bool) -> dict[str, Svf] | None:
    """Latent velocity fields from the svf-solve stage, or None when absent.

    Either every timepoint has one or none does; a partial set means a
    stale or failed solve and is reported rather than papered over.
    """
    stage_dir = out / "svf-solve"
    found = {}
    missing = []
    for t in man.timepoints:
        path = stage_dir / f"{t.id}{SVF_SUFFIX}"
        if path.exists():
            field = read_field(str(path))
            if not isinstance(field, Svf):
                raise ValidationFailure(f"{path} does not hold a stationary velocity field")
            found[t.id] = field
        else:
            missing.append(t.id)
    if not found:
        if required:
            raise MissingLatentTransform(
                "no latent velocity fields under "
                f"{stage_dir}; run the svf-solve stage first"
            )
        return None
    if missing:
        raise MissingLatentTransform(
            f"latent velocity fields missing for timepoints {missing}; rerun svf-solve"
        )
    return found


def _subject_grid(out: Path) -> Grid:
    path = out / "grid" / "subject_grid.json"
    if not path.exists():
        raise ValidationFailure(f"no subject grid at {path}; run the grid stage first")
    return read_grid(str(path))


# ---------------------------------------------------------------------------
# stages


def _stage_rigid_register(man: Manifest, out: Path, force: bool) -> tuple[Manifest, StageResult]:
    stage = "rigid-register"
    stage_dir = out / stage
    covered = _covered_pairs(man, "rigid")
    needed = [p for p in _pair_list(man) if frozenset(p) not in covered]
    workers = resolve_workers(None, man)

    inputs = {}
    for t in man.timepoints:
        if t.labels is None:
            raise MissingLabels(
                f"timepoint {t.id!r} has no label map; rigid registration aligns label centroids"
            )
        inputs[f"labels/{t.id}"] = _hash_file(man.resolved(t.labels))
    payload = {
        "stage": stage,
        "version": __version__,
        "inputs": inputs,
        "settings": {"pairs": [list(p) for p in needed]},
    }
    digest = _digest(payload)

    previous = None if force else _fresh_outputs(stage_dir, digest)
    if previous is not None:
        outputs = previous
        result = _skipped(stage, outputs)
    else:
        start = time.perf_counter()
        cents = {
            t.id: centroids(read_volume(man.resolved(t.labels), kind="labels"))
            for t in man.timepoints
        }
        stage_dir.mkdir(parents=True, exist_ok=True)

        def job(pair):
            a, b = pair
            transform, _ = procrustes_rigid(cents[a], cents[b])
            name = f"{a}_{b}{RIGID_SUFFIX}"
            write_rigid(str(stage_dir / name), transform)
            return name

        if needed:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outputs = list(pool.map(job, needed))
        else:
            outputs = []
        wall = time.perf_counter() - start
        result = _finish_stage(out, stage, payload, outputs, wall, workers)

    new_entries = [
        RegistrationEntry(*name[: -len(RIGID_SUFFIX)].split("_"), "rigid", str(stage_dir / name))
        for name in sorted(outputs)
    ]
    man = man.with_registrations(list(man.registrations) + new_entries)
    return man, result


def _stage_rigid_solve(man: Manifest, out: Path, force: bool) -> tuple[Manifest, StageResult]:
    stage = "rigid-solve"
    edges = _merged_edges(man, out / "rigid-register", "rigid", RIGID_SUFFIX)
    if not edges:
        raise ValidationFailure(
            "rigid-solve found no rigid observations in the manifest or "
            f"{out / 'rigid-register'}; run rigid-register or ingest registrations first"
        )
    ratio = float(man.setting("ratio"))
    workers = resolve_workers(None, man)
    inputs = {f"edge/{e.ref}_{e.target}": _hash_file(e.payload) for e in edges}
    payload = {
        "stage": stage,
        "version": __version__,
        "inputs": inputs,
        "settings": {"ratio": ratio, "edges": [[e.ref, e.target] for e in edges]},
    }
    previous = None if force else _fresh_outputs(out / stage, _digest(payload))
    if previous is not None:
        return man, _skipped(stage, previous)

    start = time.perf_counter()
    incidence = build_incidence(man.nodes(), edges)
    logs = np.stack([se3_log(read_rigid(e.payload)).as_vector() for e in edges])
    latents, report = solve_rigid_graph(incidence, logs, ratio=ratio)
    stage_dir = out / stage
    stage_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for t, latent in zip(man.timepoints, latents):
        name = f"{t.id}{RIGID_SUFFIX}"
        write_rigid(str(stage_dir / name), se3_exp(latent))
        outputs.append(name)
    _write_json(stage_dir / "solve_report.json", report.as_dict())
    outputs.append("solve_report.json")
    wall = time.perf_counter() - start
    return man, _finish_stage(out, stage, payload, outputs, wall, workers, report.timing_dict())


def _stage_grid(man: Manifest, out: Path, force: bool) -> tuple[Manifest, StageResult]:
    """Fix the subject grid every later stage samples on.

    When stationary observation fields already exist (phantom truth runs,
    ingested registrations) their shared grid is adopted so the whole
    pipeline stays on the lattice those fields were measured on. Otherwise
    the grid is the padded bounding cuboid of all rigidly aligned fields
    of view.
    """
    stage = "grid"
    pad = float(man.setting("grid_pad_mm"))
    spacing = float(man.setting("grid_spacing_mm"))
    svf_edges = man.edges("svf")

    inputs = {}
    settings: dict = {"pad_mm": pad, "spacing_mm": spacing}
    if svf_edges:
        settings["source"] = "svf-observations"
        inputs[f"field/{svf_edges[0].ref}_{svf_edges[0].target}"] = _hash_file(
            svf_edges[0].payload
        )
    else:
        settings["source"] = "aligned-bounding-box"
        for t in man.timepoints:
            if t.image is None:
                raise ValidationFailure(f"timepoint {t.id!r} has no image to bound the grid with")
            inputs[f"image/{t.id}"] = _hash_file(man.resolved(t.image))
            inputs[f"latent/{t.id}"] = _hash_file(
                str(out / "rigid-solve" / f"{t.id}{RIGID_SUFFIX}")
            )
    payload = {"stage": stage, "version": __version__, "inputs": inputs, "settings": settings}
    previous = None if force else _fresh_outputs(out / stage, _digest(payload))
    if previous is not None:
        return man, _skipped(stage, previous)

    start = time.perf_counter()
    if svf_edges:
        grid = read_field(svf_edges[0].payload).grid
        for e in svf_edges[1:]:
            other = read_field(e.payload).grid
            if not grids_close(other, grid):
                raise GridMismatch(
                    f"observation fields disagree on the grid: {e.ref}_{e.target} "
                    f"has shape {other.shape}, {svf_edges[0].ref}_{svf_edges[0].target} "
                    f"has shape {grid.shape}"
                )
    else:
        grids = []
        rigids = []
        for t in man.timepoints:
            grids.append(read_volume(man.resolved(t.image)).grid)
            rigids.append(_latent_rigid(out, t.id))
        grid = define_subject_grid(grids, rigids, pad_mm=pad, spacing_mm=spacing)
    stage_dir = out / stage
    stage_dir.mkdir(parents=True, exist_ok=True)
    write_grid(str(stage_dir / "subject_grid.json"), grid)
    wall = time.perf_counter() - start
    return man, _finish_stage(
        out, stage, payload, ["subject_grid.json"], wall, resolve_workers(None, man)
    )


def _reg_params(man: Manifest) -> RegParams:
    return RegParams(
        levels=int(man.setting("reg_levels")),
        iterations=int(man.setting("reg_iterations")),
        update_sigma=float(man.setting("reg_update_sigma")),
        field_sigma=float(man.setting("reg_field_sigma")),
        step=float(man.setting("reg_step")),
    )


def _stage_nonlinear_register(
    man: Manifest, out: Path, force: bool
) -> tuple[Manifest, StageResult]:
    stage = "nonlinear-register"
    stage_dir = out / stage
    covered = _covered_pairs(man, "svf")
    needed = [p for p in _pair_list(man) if frozenset(p) not in covered]
    workers = resolve_workers(None, man)
    symmetrize = bool(man.setting("symmetrize"))
    params = _reg_params(man)

    inputs = {}
    if needed:
        for t in man.timepoints:
            if t.image is None:
                raise ValidationFailure(
                    f"timepoint {t.id!r} has no image; nonlinear registration needs one"
                )
            inputs[f"image/{t.id}"] = _hash_file(man.resolved(t.image))
            inputs[f"latent/{t.id}"] = _hash_file(
                str(out / "rigid-solve" / f"{t.id}{RIGID_SUFFIX}")
            )
        inputs["grid"] = _hash_file(str(out / "grid" / "subject_grid.json"))
    payload = {
        "stage": stage,
        "version": __version__,
        "inputs": inputs,
        "settings": {
            "pairs": [list(p) for p in needed],
            "symmetrize": symmetrize,
            "levels": params.levels,
            "iterations": params.iterations,
            "update_sigma": params.update_sigma,
            "field_sigma": params.field_sigma,
            "step": params.step,
        },
    }
    digest = _digest(payload)
    previous = None if force else _fresh_outputs(stage_dir, digest)
    if previous is not None:
        outputs = previous
        result = _skipped(stage, outputs)
    else:
        start = time.perf_counter()
        outputs = []
        if needed:
            grid = _subject_grid(out)
            aligned = {}
            for t in man.timepoints:
                rigid = _latent_rigid(out, t.id)
                vol = resample(read_volume(man.resolved(t.image)), grid, [rigid])
                aligned[t.id] = vol
                name = f"aligned_{t.id}.nii.gz"
                stage_dir.mkdir(parents=True, exist_ok=True)
                write_volume(str(stage_dir / name), vol)
                outputs.append(name)

            def job(pair):
                a, b = pair
                forward = register_nonlinear_ssd(aligned[a], aligned[b], params)
                if symmetrize:
                    backward = register_nonlinear_ssd(aligned[b], aligned[a], params)
                    field = symmetrize_svf(forward, backward)
                else:
                    field = forward
                name = f"{a}_{b}{SVF_SUFFIX}"
                write_field(str(stage_dir / name), field)
                return name

            with ThreadPoolExecutor(max_workers=workers) as pool:
                outputs.extend(pool.map(job, needed))
        wall = time.perf_counter() - start
        result = _finish_stage(out, stage, payload, outputs, wall, workers)

    new_entries = [
        RegistrationEntry(*name[: -len(SVF_SUFFIX)].split("_"), "svf", str(stage_dir / name))
        for name in sorted(outputs)
        if name.endswith(SVF_SUFFIX)
    ]
    man = man.with_registrations(list(man.registrations) + new_entries)
    return man, result


def _union_mask(man: Manifest, out: Path, grid: Grid) -> np.ndarray | None:
    """Dilated union of the timepoint brain masks, aligned to the grid."""
    dilation = int(man.setting("mask_dilation_voxels"))
    union = None
    for t in man.timepoints:
        if t.mask is None:
            continue
        mask = read_volume(man.resolved(t.mask), kind="mask")
        rigid = _latent_rigid(out, t.id)
        aligned = resample(mask, grid, [rigid])
        binary = aligned.data >= 0.5
        union = binary if union is None else (union | binary)
    if union is None:
        return None
    if dilation > 0:
        union = binary_dilation(union, iterations=dilation)
    return union


def _stage_svf_solve(man: Manifest, out: Path, force: bool) -> tuple[Manifest, StageResult]:
    stage = "svf-solve"
    edges = _merged_edges(man, out / "nonlinear-register", "svf", SVF_SUFFIX)
    if not edges:
        raise ValidationFailure(
            "svf-solve found no stationary field observations in the manifest or "
            f"{out / 'nonlinear-register'}; run nonlinear-register or ingest registrations first"
        )
    ratio = float(man.setting("ratio"))
    dilation = int(man.setting("mask_dilation_voxels"))
    workers = resolve_workers(None, man)
    inputs = {f"edge/{e.ref}_{e.target}": _hash_file(e.payload) for e in edges}
    for t in man.timepoints:
        if t.mask is not None:
            inputs[f"mask/{t.id}"] = _hash_file(man.resolved(t.mask))
            inputs[f"latent/{t.id}"] = _hash_file(
                str(out / "rigid-solve" / f"{t.id}{RIGID_SUFFIX}")
            )
    payload = {
        "stage": stage,
        "version": __version__,
        "inputs": inputs,
        "settings": {
            "ratio": ratio,
            "mask_dilation_voxels": dilation,
            "edges": [[e.ref, e.target] for e in edges],
        },
    }
    previous = None if force else _fresh_outputs(out / stage, _digest(payload))
    if previous is not None:
        return man, _skipped(stage, previous)

    start = time.perf_counter()
    incidence = build_incidence(man.nodes(), edges)
    fields = []
    for e in edges:
        field = read_field(e.payload)
        if not isinstance(field, Svf):
            raise ValidationFailure(
                f"observation {e.ref}_{e.target} is not a stationary velocity field"
            )
        fields.append(field)
    mask = _union_mask(man, out, fields[0].grid)
    latents, report = solve_svf_graph(incidence, fields, ratio=ratio, mask=mask, workers=workers)
    stage_dir = out / stage
    stage_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for t, latent in zip(man.timepoints, latents):
        name = f"{t.id}{SVF_SUFFIX}"
        write_field(str(stage_dir / name), latent)
        outputs.append(name)
    if mask is not None:
        write_volume(
            str(stage_dir / "solve_mask.nii.gz"),
            MaskVolume(fields[0].grid, mask.astype(np.float64)),
        )
        outputs.append("solve_mask.nii.gz")
    _write_json(stage_dir / "solve_report.json", report.as_dict())
    outputs.append("solve_report.json")
    wall = time.perf_counter() - start
    return man, _finish_stage(out, stage, payload, outputs, wall, workers, report.timing_dict())


def _stage_template(man: Manifest, out: Path, force: bool) -> tuple[Manifest, StageResult]:
    stage = "template"
    workers = resolve_workers(None, man)
    inputs = {}
    for t in man.timepoints:
        if t.image is None:
            raise ValidationFailure(f"timepoint {t.id!r} has no image; the template fuses images")
        inputs[f"image/{t.id}"] = _hash_file(man.resolved(t.image))
        inputs[f"latent/{t.id}"] = _hash_file(str(out / "rigid-solve" / f"{t.id}{RIGID_SUFFIX}"))
        if t.mask is not None:
            inputs[f"mask/{t.id}"] = _hash_file(man.resolved(t.mask))
        if t.labels is not None:
            inputs[f"labels/{t.id}"] = _hash_file(man.resolved(t.labels))
        svf_path = out / "svf-solve" / f"{t.id}{SVF_SUFFIX}"
        if svf_path.exists():
            inputs[f"latent-svf/{t.id}"] = _hash_file(str(svf_path))
    inputs["grid"] = _hash_file(str(out / "grid" / "subject_grid.json"))
    payload = {"stage": stage, "version": __version__, "inputs": inputs, "settings": {}}
    previous = None if force else _fresh_outputs(out / stage, _digest(payload))
    if previous is not None:
        return man, _skipped(stage, previous)

    start = time.perf_counter()
    grid = _subject_grid(out)
    rigids = [_latent_rigid(out, t.id) for t in man.timepoints]
    svf_map = _latent_svfs(out, man, required=False)
    svfs = [svf_map[t.id] for t in man.timepoints] if svf_map else None
    images = [read_volume(man.resolved(t.image)) for t in man.timepoints]
    masks = [
        read_volume(man.resolved(t.mask), kind="mask") if t.mask else None
        for t in man.timepoints
    ]
    labels = [
        read_volume(man.resolved(t.labels), kind="labels") if t.labels else None
        for t in man.timepoints
    ]
    if all(m is None for m in masks):
        masks = None
    if all(lab is None for lab in labels):
        labels = None
    tpl = build_template(grid, images, rigids, latent_svfs=svfs, masks=masks, labels=labels)
    stage_dir = out / stage
    stage_dir.mkdir(parents=True, exist_ok=True)
    outputs = ["template_intensity.nii.gz"]
    write_volume(str(stage_dir / "template_intensity.nii.gz"), tpl.intensity)
    if tpl.mask is not None:
        write_volume(str(stage_dir / "template_mask.nii.gz"), tpl.mask)
        outputs.append("template_mask.nii.gz")
    if tpl.labels is not None:
        write_volume(str(stage_dir / "template_seg.nii.gz"), tpl.labels)
        outputs.append("template_seg.nii.gz")
    wall = time.perf_counter() - start
    return man, _finish_stage(out, stage, payload, outputs, wall, workers)


def _stage_trajectory(man: Manifest, out: Path, force: bool) -> tuple[Manifest, StageResult]:
    stage = "trajectory"
    method = str(man.setting("trajectory_method"))
    svf_map = _latent_svfs(out, man, required=True)
    inputs = {
        f"latent-svf/{t.id}": _hash_file(str(out / "svf-solve" / f"{t.id}{SVF_SUFFIX}"))
        for t in man.timepoints
    }
    payload = {
        "stage": stage,
        "version": __version__,
        "inputs": inputs,
        "settings": {
            "method": method,
            "times": [t.time_years for t in man.timepoints],
        },
    }
    previous = None if force else _fresh_outputs(out / stage, _digest(payload))
    if previous is not None:
        return man, _skipped(stage, previous)

    start = time.perf_counter()
    fields = [svf_map[t.id] for t in man.timepoints]
    times = [t.time_years for t in man.timepoints]
    model = fit_trajectory(fields, times, method=method)
    stage_dir = out / stage
    stage_dir.mkdir(parents=True, exist_ok=True)
    write_field(str(stage_dir / "intercept.svf.nii.gz"), model.intercept)
    write_field(str(stage_dir / "slope.svf.nii.gz"), model.slope)
    write_volume(str(stage_dir / "residual.nii.gz"), model.residual)
    outputs = ["intercept.svf.nii.gz", "slope.svf.nii.gz", "residual.nii.gz"]
    wall = time.perf_counter() - start
    return man, _finish_stage(out, stage, payload, outputs, wall, resolve_workers(None, man))


def _warped_contribution(
    grid: Grid, image: Volume, labels, chain: list
) -> SegContribution:
    """Deform one timepoint's intensities and one-hot labels into grid space."""
    points = chain_points(grid, chain)
    image_vox = image.grid.world_to_voxel(points)
    intensities = trilinear_sample(image.data, image_vox, mode="fill", fill=0.0)
    ids = labels.ids()
    channels = np.stack([(labels.data == lab) for lab in ids], axis=-1).astype(np.float64)
    label_vox = labels.grid.world_to_voxel(points)
    warped = trilinear_sample(channels, label_vox, mode="fill", fill=0.0)
    return SegContribution(Volume(grid, intensities), warped, tuple(ids), dict(labels.table))


def segment_reference(
    man: Manifest,
    out: Path,
    reference_id: str,
    config: FusionConfig | None = None,
    return_scores: bool = False,
):
    """Fused segmentation for one reference timepoint, in subject space.

    Every timepoint with both an image and labels contributes; the
    reference is aligned rigidly only, contributors additionally flow along
    the difference of the latent velocity fields so that each vote lands
    at the anatomy the reference shows. Timepoints missing an image or
    labels are skipped with a warning.
    """
    if config is None:
        config = FusionConfig(
            sigma=float(man.setting("fusion_sigma")),
            include_self=bool(man.setting("include_self")),
        )
    grid = _subject_grid(out)
    ref_tp = man.timepoint(reference_id)
    if ref_tp.image is None:
        raise ValidationFailure(f"reference timepoint {reference_id!r} has no image")
    svf_map = _latent_svfs(out, man, required=False)
    ref_rigid = _latent_rigid(out, reference_id)
    reference = resample(read_volume(man.resolved(ref_tp.image)), grid, [ref_rigid])

    contributions = []
    for t in man.timepoints:
        if t.image is None or t.labels is None:
            warnings.warn(
                f"timepoint {t.id!r} lacks an image or labels, skipping its vote",
                stacklevel=2,
            )
            continue
        if t.id == reference_id and not config.include_self:
            continue
        chain: list = []
        if svf_map is not None:
            diff = Svf(grid, svf_map[t.id].values - svf_map[reference_id].values)
            chain.append(svf_exp(diff, direction=1))
        chain.append(_latent_rigid(out, t.id))
        contributions.append(
            _warped_contribution(
                grid,
                read_volume(man.resolved(t.image)),
                read_volume(man.resolved(t.labels), kind="labels"),
                chain,
            )
        )
    return longitudinal_segment(reference, contributions, config, return_scores=return_scores)


def _stage_segment(man: Manifest, out: Path, force: bool) -> tuple[Manifest, StageResult]:
    stage = "segment"
    references = [t.id for t in man.timepoints if t.image is not None and t.labels is not None]
    if not references:
        raise MissingLabels("no timepoint has both an image and labels to segment")
    sigma = float(man.setting("fusion_sigma"))
    include_self = bool(man.setting("include_self"))
    inputs = {"grid": _hash_file(str(out / "grid" / "subject_grid.json"))}
    for t in man.timepoints:
        inputs[f"latent/{t.id}"] = _hash_file(str(out / "rigid-solve" / f"{t.id}{RIGID_SUFFIX}"))
        svf_path = out / "svf-solve" / f"{t.id}{SVF_SUFFIX}"
        if svf_path.exists():
            inputs[f"latent-svf/{t.id}"] = _hash_file(str(svf_path))
        if t.image is not None:
            inputs[f"image/{t.id}"] = _hash_file(man.resolved(t.image))
        if t.labels is not None:
            inputs[f"labels/{t.id}"] = _hash_file(man.resolved(t.labels))
    payload = {
        "stage": stage,
        "version": __version__,
        "inputs": inputs,
        "settings": {"fusion_sigma": sigma, "include_self": include_self},
    }
    previous = None if force else _fresh_outputs(out / stage, _digest(payload))
    if previous is not None:
        return man, _skipped(stage, previous)

    start = time.perf_counter()
    config = FusionConfig(sigma=sigma, include_self=include_self)
    stage_dir = out / stage
    stage_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for rid in references:
        fused = segment_reference(man, out, rid, config)
        name = f"{rid}_seg.nii.gz"
        write_volume(str(stage_dir / name), fused)
        outputs.append(name)
    wall = time.perf_counter() - start
    return man, _finish_stage(out, stage, payload, outputs, wall, resolve_workers(None, man))


_STAGE_FUNCS = {
    "rigid-register": _stage_rigid_register,
    "rigid-solve": _stage_rigid_solve,
    "grid": _stage_grid,
    "nonlinear-register": _stage_nonlinear_register,
    "svf-solve": _stage_svf_solve,
    "template": _stage_template,
    "trajectory": _stage_trajectory,
    "segment": _stage_segment,
}


def _normalize_stages(stages) -> list[str]:
    if stages is None:
        return list(STAGES)
    requested = list(stages)
    unknown = [s for s in requested if s not in STAGES]
    if unknown:
        raise ValidationFailure(f"unknown stages {unknown}; choose from {list(STAGES)}")
    seen = set()
    ordered = []
    for s in STAGES:
        if s in requested and s not in seen:
            ordered.append(s)
            seen.add(s)
    return ordered


def run_pipeline(
    manifest_path: str,
    out_dir: str,
    stages=None,
    force: bool = False,
    workers: int | None = None,
    settings_override: dict | None = None,
) -> tuple[Manifest, list[StageResult]]:
    """Run the requested stages in canonical order and persist the manifest.

    The manifest written to out/manifest.json carries absolute paths and
    any registration edges the run produced, so later invocations can pick
    up where this one stopped. Settings overrides are persisted there too;
    a worker override is not, since results never depend on it.
    """
    man = load_manifest(str(manifest_path))
    validate_manifest(man, check_files=True)
    stored_settings = dict(man.settings)
    if settings_override:
        stored_settings = {**stored_settings, **settings_override}
        man = replace(man, settings=stored_settings)
    if workers is not None:
        # Transient override: results are worker-independent, so the saved
        # manifest keeps the original settings.
        man = replace(man, settings={**man.settings, "workers": max(1, int(workers))})
    ordered = _normalize_stages(stages)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for name in ordered:
        man, result = _STAGE_FUNCS[name](man, out, force)
        results.append(result)
    save_manifest(
        str(out / "manifest.json"),
        replace(absolutized(man), settings=stored_settings),
    )
    return man, results


def ingest_external_registrations(
    directory: str, man: Manifest, kind: str | None = None
) -> Manifest:
    """Append registrations found in a directory to the manifest.

    File names must be {ref}_{target}.rigid.txt or {ref}_{target}.svf.nii.gz
    with both ids present in the manifest. Rigid payloads are validated on
    read; stationary fields must all share one grid. Other files are
    ignored only if their extension is unrelated; a matching extension with
    a malformed stem is an error.
    """
    if kind is not None and kind not in ("rigid", "svf"):
        raise ValidationFailure(f"ingest kind {kind!r} not one of rigid, svf")
    root = Path(directory)
    if not root.is_dir():
        raise ValidationFailure(f"{directory} is not a directory")
    ids = {t.id for t in man.timepoints}
    existing = {(r.ref, r.target, r.kind) for r in man.registrations}
    new_entries: list[RegistrationEntry] = []
    field_grid = None
    field_grid_owner = None
    for name in sorted(os.listdir(root)):
        if name.endswith(RIGID_SUFFIX):
            file_kind, stem = "rigid", name[: -len(RIGID_SUFFIX)]
        elif name.endswith(SVF_SUFFIX):
            file_kind, stem = "svf", name[: -len(SVF_SUFFIX)]
        else:
            continue
        if kind is not None and file_kind != kind:
            continue
        parts = stem.split("_")
        if len(parts) != 2 or not all(parts):
            raise NamingConvention(
                f"{name} does not follow ref-id_target-id{RIGID_SUFFIX if file_kind == 'rigid' else SVF_SUFFIX}"
            )
        ref, target = parts
        for tp_id in (ref, target):
            if tp_id not in ids:
                raise UnknownNode(f"{name} references unknown timepoint {tp_id!r}")
        key = (ref, target, file_kind)
        if key in existing:
            raise DuplicateEdge(f"{name} duplicates an existing {file_kind} edge {ref}->{target}")
        existing.add(key)
        path = str((root / name).resolve())
        if file_kind == "rigid":
            read_rigid(path)
        else:
            field = read_field(path)
            if not isinstance(field, Svf):
                raise ValidationFailure(f"{name} does not hold a stationary velocity field")
            if field_grid is None:
                field_grid, field_grid_owner = field.grid, name
            elif not grids_close(field.grid, field_grid):
                raise GridMismatch(
                    f"{name} uses a different grid than {field_grid_owner}: "
                    f"{field.grid.shape} vs {field_grid.shape}"
                )
        new_entries.append(RegistrationEntry(ref, target, file_kind, path))
    if not new_entries:
        raise ValidationFailure(f"no registration files found under {directory}")
    merged = man.with_registrations(list(man.registrations) + new_entries)
    validate_manifest(merged, check_files=True)
    return merged
