"""End-to-end pipeline runs, provenance skipping, ingest and the CLI."""

import dataclasses
import json
import subprocess
import sys
from types import SimpleNamespace

import numpy as np
import pytest

from longreg.errors import (
    DuplicateEdge,
    GridMismatch,
    NamingConvention,
    UnknownNode,
    ValidationFailure,
)
from longreg.geometry import DisplacementField, Svf, se3_log
from longreg.manifest import load_manifest
from longreg.phantom import PhantomSpec, generate_phantom, write_phantom
from longreg.pipeline import (
    STAGES,
    ingest_external_registrations,
    run_pipeline,
    segment_reference,
)
from longreg.volume_io import read_field, read_grid, read_rigid, read_volume, write_field
from helpers import centered_grid

SMALL_SPEC = PhantomSpec(shape=(16, 16, 16), svf_sigma=2.0, seed=4)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One full pipeline run on a small phantom, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("pipeline")
    phantom = generate_phantom(SMALL_SPEC)
    manifest_path = write_phantom(phantom, root / "phantom")
    out = root / "run"
    man, results = run_pipeline(str(manifest_path), str(out))
    return SimpleNamespace(
        root=root, phantom=phantom, manifest_path=manifest_path, out=out, results=results
    )


class TestFullRun:
    def test_all_stages_ran(self, workspace):
        assert [r.stage for r in workspace.results] == list(STAGES)
        assert not any(r.skipped for r in workspace.results)

    def test_expected_outputs_exist(self, workspace):
        out = workspace.out
        for i in range(4):
            assert (out / "rigid-solve" / f"tp{i}.rigid.txt").exists()
            assert (out / "svf-solve" / f"tp{i}.svf.nii.gz").exists()
            assert (out / "segment" / f"tp{i}_seg.nii.gz").exists()
        assert (out / "grid" / "subject_grid.json").exists()
        assert (out / "template" / "template_intensity.nii.gz").exists()
        assert (out / "template" / "template_mask.nii.gz").exists()
        assert (out / "template" / "template_seg.nii.gz").exists()
        for name in ("intercept.svf.nii.gz", "slope.svf.nii.gz", "residual.nii.gz"):
            assert (out / "trajectory" / name).exists()

    def test_grid_adopts_the_observation_lattice(self, workspace):
        grid = read_grid(str(workspace.out / "grid" / "subject_grid.json"))
        assert grid.shape == (16, 16, 16)

    def test_rigid_latents_match_truth(self, workspace):
        for i, log in enumerate(workspace.phantom.latent_logs):
            est = read_rigid(str(workspace.out / "rigid-solve" / f"tp{i}.rigid.txt"))
            gap = se3_log(est).as_vector() - log.as_vector()
            assert np.abs(gap).max() < 1e-8

    def test_svf_latents_match_truth_inside_mask(self, workspace):
        mask = read_volume(str(workspace.out / "svf-solve" / "solve_mask.nii.gz"))
        inside = mask.data > 0.5
        assert inside.any() and not inside.all()
        for i, truth in enumerate(workspace.phantom.latent_svfs):
            est = read_field(str(workspace.out / "svf-solve" / f"tp{i}.svf.nii.gz"))
            assert np.abs(est.values - truth.values)[inside].max() < 1e-6
            assert np.all(est.values[~inside] == 0.0)

    def test_template_reconstructs_the_source_anatomy(self, workspace):
        template = read_volume(str(workspace.out / "template" / "template_intensity.nii.gz"))
        truth = workspace.phantom.template
        inside = workspace.phantom.template_mask.data > 0.9
        mae = np.abs(template.data - truth.data)[inside].mean()
        assert mae < 5.0

    def test_provenance_and_timings_written(self, workspace):
        for result in workspace.results:
            stage_dir = workspace.out / result.stage
            prov = json.loads((stage_dir / "provenance.json").read_text())
            assert prov["stage"] == result.stage
            assert len(prov["digest"]) == 64
            assert tuple(prov["outputs"]) == result.outputs
            timings = json.loads((stage_dir / "timings.json").read_text())
            assert timings["wall_seconds"] >= 0.0
            assert timings["workers"] >= 1

    def test_saved_manifest_is_portable(self, workspace):
        man = load_manifest(str(workspace.out / "manifest.json"))
        assert all(t.image.startswith("/") for t in man.timepoints)
        kinds = [r.kind for r in man.registrations]
        assert kinds.count("rigid") == 6 and kinds.count("svf") == 6
        assert man.setting("workers") == 1

    def test_rerun_skips_every_stage(self, workspace):
        _, results = run_pipeline(str(workspace.manifest_path), str(workspace.out))
        assert all(r.skipped for r in results)

    def test_worker_override_is_transient(self, workspace):
        run_pipeline(
            str(workspace.manifest_path), str(workspace.out), stages=["rigid-solve"], workers=3
        )
        man = load_manifest(str(workspace.out / "manifest.json"))
        assert man.setting("workers") == 1

    def test_unknown_stage_rejected(self, workspace):
        with pytest.raises(ValidationFailure, match="unknown stages"):
            run_pipeline(str(workspace.manifest_path), str(workspace.out), stages=["polish"])

    def test_segment_reference_scores(self, workspace):
        man = load_manifest(str(workspace.out / "manifest.json"))
        fused, ids, scores = segment_reference(
            man, workspace.out, "tp0", return_scores=True
        )
        staged = read_volume(str(workspace.out / "segment" / "tp0_seg.nii.gz"), kind="labels")
        np.testing.assert_array_equal(fused.data, staged.data)
        total = scores.sum(axis=-1)
        voted = total > 0
        np.testing.assert_allclose(total[voted], 1.0, atol=1e-12)
        assert set(np.unique(fused.data)) <= set(ids)

    def test_segment_warns_on_timepoints_without_labels(self, workspace):
        man = load_manifest(str(workspace.out / "manifest.json"))
        stripped = dataclasses.replace(
            man,
            timepoints=(man.timepoints[0],)
            + (dataclasses.replace(man.timepoints[1], labels=None),)
            + man.timepoints[2:],
        )
        with pytest.warns(UserWarning, match="lacks an image or labels"):
            segment_reference(stripped, workspace.out, "tp0")


class TestInvalidation:
    def test_force_and_setting_changes_recompute(self, tmp_path):
        manifest_path = write_phantom(generate_phantom(SMALL_SPEC), tmp_path / "ph")
        out = tmp_path / "run"
        run_pipeline(str(manifest_path), str(out), stages=["rigid-solve"])
        _, again = run_pipeline(str(manifest_path), str(out), stages=["rigid-solve"])
        assert again[0].skipped
        _, forced = run_pipeline(
            str(manifest_path), str(out), stages=["rigid-solve"], force=True
        )
        assert not forced[0].skipped
        _, retuned = run_pipeline(
            str(manifest_path),
            str(out),
            stages=["rigid-solve"],
            settings_override={"ratio": 2.0},
        )
        assert not retuned[0].skipped
        man = load_manifest(str(out / "manifest.json"))
        assert man.setting("ratio") == 2.0


class TestDeterminism:
    def test_identical_trees_across_runs_and_workers(self, tmp_path):
        """Bitwise-identical outputs for repeated runs, whatever the worker
        count; wall-clock files are the only intended difference."""
        manifest_path = write_phantom(generate_phantom(SMALL_SPEC), tmp_path / "ph")
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run_pipeline(str(manifest_path), str(out_a), workers=1)
        run_pipeline(str(manifest_path), str(out_b), workers=2)
        files_a = sorted(p.relative_to(out_a) for p in out_a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(out_b) for p in out_b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            if rel.name == "timings.json":
                continue
            assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes(), rel


@pytest.fixture(scope="module")
def bare_phantom(tmp_path_factory):
    """Phantom without observation files, for the ingest tests."""
    root = tmp_path_factory.mktemp("ingest")
    phantom = generate_phantom(
        PhantomSpec(shape=(16, 16, 16), svf_sigma=2.0, n_timepoints=3, seed=9)
    )
    manifest_path = write_phantom(phantom, root / "phantom", include_observations=False)
    return SimpleNamespace(root=root, phantom=phantom, manifest_path=manifest_path)


def write_observation_dir(bare, dest, rigid=True, svf=True):
    from longreg.volume_io import write_rigid

    dest.mkdir(parents=True, exist_ok=True)
    for (a, b), transform in bare.phantom.rigid_observations.items():
        if rigid:
            write_rigid(str(dest / f"{a}_{b}.rigid.txt"), transform)
    for (a, b), field in bare.phantom.svf_observations.items():
        if svf:
            write_field(str(dest / f"{a}_{b}.svf.nii.gz"), field)
    return dest


class TestIngest:
    def test_merges_both_kinds(self, bare_phantom, tmp_path):
        ext = write_observation_dir(bare_phantom, tmp_path / "ext")
        man = load_manifest(str(bare_phantom.manifest_path))
        merged = ingest_external_registrations(str(ext), man)
        kinds = [r.kind for r in merged.registrations]
        assert kinds.count("rigid") == 3 and kinds.count("svf") == 3
        assert all(r.path.startswith("/") for r in merged.registrations)

    def test_kind_filter(self, bare_phantom, tmp_path):
        ext = write_observation_dir(bare_phantom, tmp_path / "ext")
        man = load_manifest(str(bare_phantom.manifest_path))
        merged = ingest_external_registrations(str(ext), man, kind="rigid")
        assert {r.kind for r in merged.registrations} == {"rigid"}

    def test_naming_convention_enforced(self, bare_phantom, tmp_path):
        ext = tmp_path / "ext"
        ext.mkdir()
        from longreg.volume_io import write_rigid

        obs = next(iter(bare_phantom.phantom.rigid_observations.values()))
        write_rigid(str(ext / "tp0-tp1.rigid.txt"), obs)
        man = load_manifest(str(bare_phantom.manifest_path))
        with pytest.raises(NamingConvention):
            ingest_external_registrations(str(ext), man)

    def test_unknown_timepoint(self, bare_phantom, tmp_path):
        ext = tmp_path / "ext"
        ext.mkdir()
        from longreg.volume_io import write_rigid

        obs = next(iter(bare_phantom.phantom.rigid_observations.values()))
        write_rigid(str(ext / "tp0_tp9.rigid.txt"), obs)
        man = load_manifest(str(bare_phantom.manifest_path))
        with pytest.raises(UnknownNode):
            ingest_external_registrations(str(ext), man)

    def test_duplicate_edges_rejected(self, bare_phantom, tmp_path):
        ext = write_observation_dir(bare_phantom, tmp_path / "ext")
        man = load_manifest(str(bare_phantom.manifest_path))
        merged = ingest_external_registrations(str(ext), man)
        with pytest.raises(DuplicateEdge):
            ingest_external_registrations(str(ext), merged)

    def test_field_grids_must_agree(self, bare_phantom, tmp_path):
        ext = write_observation_dir(bare_phantom, tmp_path / "ext", rigid=False, svf=False)
        (a, b), field = next(iter(bare_phantom.phantom.svf_observations.items()))
        write_field(str(ext / f"{a}_{b}.svf.nii.gz"), field)
        other = centered_grid((8, 8, 8))
        write_field(
            str(ext / "tp1_tp2.svf.nii.gz"), Svf(other, np.zeros((8, 8, 8, 3)))
        )
        man = load_manifest(str(bare_phantom.manifest_path))
        with pytest.raises(GridMismatch):
            ingest_external_registrations(str(ext), man)

    def test_displacement_payload_rejected(self, bare_phantom, tmp_path):
        ext = tmp_path / "ext"
        ext.mkdir()
        grid = centered_grid((16, 16, 16))
        write_field(
            str(ext / "tp0_tp1.svf.nii.gz"),
            DisplacementField(grid, np.zeros((16, 16, 16, 3))),
        )
        man = load_manifest(str(bare_phantom.manifest_path))
        with pytest.raises(ValidationFailure, match="stationary velocity"):
            ingest_external_registrations(str(ext), man)

    def test_empty_or_missing_directory(self, bare_phantom, tmp_path):
        man = load_manifest(str(bare_phantom.manifest_path))
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(ValidationFailure, match="no registration files"):
            ingest_external_registrations(str(empty), man)
        with pytest.raises(ValidationFailure, match="not a directory"):
            ingest_external_registrations(str(tmp_path / "nope"), man)


def run_cli(*args, cwd=None):
    return subprocess.run(
        [sys.executable, "-m", "longreg", *args],
        capture_output=True,
        text=True,
        timeout=300,
        cwd=cwd,
    )


class TestCli:
    def test_version(self):
        proc = run_cli("--version")
        assert proc.returncode == 0
        assert "longreg" in proc.stdout

    def test_phantom_then_solve(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"shape": [16, 16, 16], "svf_sigma": 2.0, "seed": 7}))
        proc = run_cli("phantom", "--spec", str(spec_path), "--out", str(tmp_path / "ph"))
        assert proc.returncode == 0, proc.stderr
        manifest = tmp_path / "ph" / "manifest.json"
        assert manifest.exists()
        proc = run_cli(
            "solve",
            "--mode",
            "rigid",
            "-m",
            str(manifest),
            "-o",
            str(tmp_path / "out"),
        )
        assert proc.returncode == 0, proc.stderr
        assert "rigid-solve: ran" in proc.stdout
        assert (tmp_path / "out" / "rigid-solve" / "tp0.rigid.txt").exists()

    def test_validation_failures_exit_2(self, tmp_path):
        proc = run_cli("run", "-m", str(tmp_path / "missing.json"), "-o", str(tmp_path / "o"))
        assert proc.returncode == 2
        assert "validation failure" in proc.stderr

    def test_solver_failures_exit_3(self, tmp_path):
        """A warp whose Jacobian folds space must surface as a solver error.

        The shock below points every voxel at the central plane hard enough
        that the integrated pull-back collapses onto it."""
        grid = centered_grid((8, 8, 8))
        folding = np.zeros((8, 8, 8, 3))
        folding[..., 0] = (16.0 * np.sign(np.arange(8.0) - 3.5))[:, None, None]
        write_field(str(tmp_path / "warp.svf.nii.gz"), Svf(grid, folding))
        write_field(str(tmp_path / "field.svf.nii.gz"), Svf(grid, np.zeros((8, 8, 8, 3))))
        proc = run_cli(
            "trajectory",
            "transport",
            "--field",
            str(tmp_path / "field.svf.nii.gz"),
            "--warp",
            str(tmp_path / "warp.svf.nii.gz"),
            "--dest",
            str(tmp_path / "moved.svf.nii.gz"),
        )
        assert proc.returncode == 3
        assert "solver failure [NumericalFailure]" in proc.stderr

    def test_stats_commands_print_json(self):
        proc = run_cli("stats", "aspc", "--v1", "100", "--v2", "102")
        assert proc.returncode == 0
        assert abs(json.loads(proc.stdout)["aspc_percent"] - 1.9801980198019802) < 1e-12
        proc = run_cli(
            "stats", "samplesize",
            "--effect-size", "0.5",
            "--n-timepoints", "2",
            "--time-variance", "0.25",
            "--sigma", "1.0",
            "--rho", "0.5",
        )
        assert proc.returncode == 0
        payload = json.loads(proc.stdout)
        assert payload["subjects"] == 50
        assert abs(payload["raw"] - 49.46045785615814) < 1e-9

    def test_segment_soft_scores(self, workspace):
        manifest = workspace.out / "manifest.json"
        proc = run_cli(
            "segment",
            "-m", str(manifest),
            "-o", str(workspace.out),
            "--reference", "tp0",
            "--soft",
        )
        assert proc.returncode == 0, proc.stderr
        scores = sorted((workspace.out / "segment").glob("tp0_score_*.nii.gz"))
        assert scores
        stack = np.stack([read_volume(str(p)).data for p in scores])
        total = stack.sum(axis=0)
        voted = total > 0
        np.testing.assert_allclose(total[voted], 1.0, atol=1e-6)

    def test_trajectory_evaluate_from_run_dir(self, workspace):
        proc = run_cli(
            "trajectory", "evaluate",
            "-o", str(workspace.out),
            "--time", "1.0",
            "--jacobian",
        )
        assert proc.returncode == 0, proc.stderr
        jac = read_volume(str(workspace.out / "trajectory" / "jacobian_t1.nii.gz"))
        assert jac.grid.shape == (16, 16, 16)
        assert jac.data.min() > 0.0
