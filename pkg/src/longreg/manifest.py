"""Study manifest: the JSON document driving the pipeline.

Schema version 1. Paths inside the manifest are relative to the manifest
file's directory (absolute paths pass through untouched). The settings
block collects solver and registration knobs; anything omitted takes the
defaults below.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

from .errors import ParseError, ValidationFailure
from .graph import EDGE_KINDS, ObservationEdge, TimepointNode, build_incidence

SCHEMA_VERSION = 1

DEFAULT_SETTINGS: dict = {
    "ratio": 1.0,  # prior-to-data scale b_T / b_Z
    "workers": 1,
    "seed": 0,
    "edges": "all",  # registration pair policy: all | tree | ring
    "mask_dilation_voxels": 3,
    "fusion_sigma": 3.0,  # intensity kernel for the longitudinal segmenter
    "grid_pad_mm": 5.0,
    "grid_spacing_mm": 1.0,
    "reg_levels": 3,
    "reg_iterations": 100,
    "reg_update_sigma": 2.0,
    "reg_field_sigma": 1.0,
    "reg_step": 1.0,
    "symmetrize": True,  # average forward and reversed backward stationary fields
    "trajectory_method": "ols",  # ols | lad
    "include_self": True,  # reference contributes to its own fused segmentation
}


@dataclass(frozen=True)
class TimepointEntry:
    id: str
    time_years: float
    image: str | None = None
    labels: str | None = None
    mask: str | None = None


@dataclass(frozen=True)
class RegistrationEntry:
    ref: str
    target: str
    kind: str
    path: str


@dataclass(frozen=True)
class Manifest:
    subject: str
    timepoints: tuple[TimepointEntry, ...]
    registrations: tuple[RegistrationEntry, ...] = ()
    settings: dict = field(default_factory=dict)
    base_dir: str = "."

    def resolved(self, path: str | None) -> str | None:
        if path is None:
            return None
        if os.path.isabs(path):
            return path
        return os.path.normpath(os.path.join(self.base_dir, path))

    def setting(self, key: str):
        if key in self.settings:
            return self.settings[key]
        return DEFAULT_SETTINGS[key]

    def nodes(self) -> list[TimepointNode]:
        return [TimepointNode(t.id, t.time_years) for t in self.timepoints]

    def edges(self, kind: str) -> list[ObservationEdge]:
        return [
            ObservationEdge(r.ref, r.target, r.kind, self.resolved(r.path))
            for r in self.registrations
            if r.kind == kind
        ]

    def timepoint(self, tp_id: str) -> TimepointEntry:
        for t in self.timepoints:
            if t.id == tp_id:
                return t
        raise ValidationFailure(f"unknown timepoint id {tp_id!r}")

    def with_registrations(self, regs: list[RegistrationEntry]) -> "Manifest":
        return replace(self, registrations=tuple(regs))


def validate_manifest(manifest: Manifest, check_files: bool = True) -> None:
    """Raise a ValidationFailure subclass for anything structurally wrong.

    Checks id uniqueness, finite times with a zero baseline, edge kinds,
    graph connectivity per kind and (optionally) that referenced files
    exist on disk.
    """
    if not manifest.timepoints:
        raise ValidationFailure("manifest has no timepoints")
    ids = [t.id for t in manifest.timepoints]
    if len(set(ids)) != len(ids):
        raise ValidationFailure(f"duplicate timepoint ids: {ids}")
    times = [t.time_years for t in manifest.timepoints]
    for t in manifest.timepoints:
        if not isinstance(t.time_years, (int, float)) or t.time_years != t.time_years:
            raise ValidationFailure(f"timepoint {t.id!r} has invalid time {t.time_years!r}")
        if "_" in t.id:
            raise ValidationFailure(
                f"timepoint id {t.id!r} contains '_', reserved for pair file names"
            )
    if min(times) != 0.0:
        raise ValidationFailure(
            f"times are years from baseline, expected a timepoint at 0.0, got min {min(times)}"
        )
    for r in manifest.registrations:
        if r.kind not in EDGE_KINDS:
            raise ValidationFailure(f"registration kind {r.kind!r} not in {EDGE_KINDS}")
    nodes = manifest.nodes()
    for kind in EDGE_KINDS:
        edges = manifest.edges(kind)
        if edges:
            build_incidence(nodes, edges)
    if check_files:
        for t in manifest.timepoints:
            for path in (t.image, t.labels, t.mask):
                rp = manifest.resolved(path)
                if rp is not None and not os.path.exists(rp):
                    raise ValidationFailure(f"timepoint {t.id!r}: missing file {rp}")
        for r in manifest.registrations:
            rp = manifest.resolved(r.path)
            if not os.path.exists(rp):
                raise ValidationFailure(f"registration {r.ref}->{r.target}: missing file {rp}")


def load_manifest(path: str) -> Manifest:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    except ValueError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("schema") != SCHEMA_VERSION:
        raise ValidationFailure(
            f"{path}: schema {doc.get('schema')!r}, this package reads schema {SCHEMA_VERSION}"
        )
    try:
        tps = tuple(
            TimepointEntry(
                id=str(t["id"]),
                time_years=float(t["time_years"]),
                image=t.get("image"),
                labels=t.get("labels"),
                mask=t.get("mask"),
            )
            for t in doc["timepoints"]
        )
        regs = tuple(
            RegistrationEntry(
                ref=str(r["ref"]),
                target=str(r["target"]),
                kind=str(r["kind"]),
                path=str(r["path"]),
            )
            for r in doc.get("registrations", [])
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationFailure(f"{path}: malformed manifest entry ({exc})") from exc
    return Manifest(
        subject=str(doc.get("subject", "subject")),
        timepoints=tps,
        registrations=regs,
        settings=dict(doc.get("settings", {})),
        base_dir=os.path.dirname(os.path.abspath(path)) or ".",
    )


def absolutized(manifest: Manifest) -> Manifest:
    """The same manifest with every path resolved to an absolute one.

    Needed before saving to a location other than the manifest's own
    base directory, since relative paths resolve against wherever the
    file lives.
    """
    tps = tuple(
        replace(
            t,
            image=manifest.resolved(t.image),
            labels=manifest.resolved(t.labels),
            mask=manifest.resolved(t.mask),
        )
        for t in manifest.timepoints
    )
    regs = tuple(replace(r, path=manifest.resolved(r.path)) for r in manifest.registrations)
    return replace(manifest, timepoints=tps, registrations=regs, base_dir=".")


def save_manifest(path: str, manifest: Manifest) -> None:
    doc = {
        "schema": SCHEMA_VERSION,
        "subject": manifest.subject,
        "timepoints": [
            {
                k: v
                for k, v in {
                    "id": t.id,
                    "time_years": t.time_years,
                    "image": t.image,
                    "labels": t.labels,
                    "mask": t.mask,
                }.items()
                if v is not None
            }
            for t in manifest.timepoints
        ],
        "registrations": [
            {"ref": r.ref, "target": r.target, "kind": r.kind, "path": r.path}
            for r in manifest.registrations
        ],
        "settings": manifest.settings,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
