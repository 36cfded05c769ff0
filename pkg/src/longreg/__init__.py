"""Latent rigid and diffeomorphic transforms for longitudinal MRI series.

The library recovers unbiased, temporally consistent latent transforms
from noisy pairwise registrations, then derives subject templates,
stationary deformation trajectories, Jacobian morphometry, longitudinal
segmentations and group statistics. The command line entry point is
``longreg``; see the README for the pipeline walkthrough.
"""

__version__ = "0.1.0"

from .errors import LongregError
from .geometry import (
    DisplacementField,
    Grid,
    RigidLog,
    RigidTransform,
    Svf,
    compose_displacements,
    jacobian_determinant,
    log_compose,
    se3_exp,
    se3_log,
    svf_exp,
    trilinear_sample,
)
from .graph import IncidenceMatrix, ObservationEdge, TimepointNode, build_incidence
from .inference import (
    LadProblem,
    LadSolution,
    assemble_lp,
    solve_lad,
    solve_rigid_graph,
    solve_svf_graph,
)
from .longseg import FusionConfig, SegContribution, longitudinal_segment
from .manifest import Manifest, RegistrationEntry, TimepointEntry, load_manifest, save_manifest
from .pipeline import STAGES, ingest_external_registrations, run_pipeline, segment_reference
from .registration import (
    RegParams,
    centroids,
    procrustes_rigid,
    register_nonlinear_ssd,
    symmetrize_svf,
)
from .stats import (
    StudyDesign,
    aspc,
    fdr_bh,
    hotelling_t2,
    sample_size,
    sample_size_reduction,
    voxelwise_ttest,
)
from .template import SubjectTemplate, build_template, define_subject_grid
from .trajectory import (
    TrajectoryModel,
    evaluate_trajectory,
    fit_trajectory,
    jacobian_map,
    predict_image,
    transport_svf,
)
from .volume_io import (
    LabelVolume,
    MaskVolume,
    Volume,
    one_hot,
    read_field,
    read_rigid,
    read_volume,
    resample,
    write_field,
    write_rigid,
    write_volume,
)

__all__ = [
    "LongregError",
    "Grid",
    "RigidTransform",
    "RigidLog",
    "Svf",
    "DisplacementField",
    "se3_exp",
    "se3_log",
    "log_compose",
    "svf_exp",
    "compose_displacements",
    "jacobian_determinant",
    "trilinear_sample",
    "TimepointNode",
    "ObservationEdge",
    "IncidenceMatrix",
    "build_incidence",
    "LadProblem",
    "LadSolution",
    "assemble_lp",
    "solve_lad",
    "solve_rigid_graph",
    "solve_svf_graph",
    "Volume",
    "MaskVolume",
    "LabelVolume",
    "one_hot",
    "resample",
    "read_volume",
    "write_volume",
    "read_field",
    "write_field",
    "read_rigid",
    "write_rigid",
    "RegParams",
    "centroids",
    "procrustes_rigid",
    "register_nonlinear_ssd",
    "symmetrize_svf",
    "SubjectTemplate",
    "define_subject_grid",
    "build_template",
    "TrajectoryModel",
    "fit_trajectory",
    "evaluate_trajectory",
    "predict_image",
    "jacobian_map",
    "transport_svf",
    "FusionConfig",
    "SegContribution",
    "longitudinal_segment",
    "StudyDesign",
    "aspc",
    "sample_size",
    "sample_size_reduction",
    "voxelwise_ttest",
    "hotelling_t2",
    "fdr_bh",
    "Manifest",
    "TimepointEntry",
    "RegistrationEntry",
    "load_manifest",
    "save_manifest",
    "STAGES",
    "run_pipeline",
    "segment_reference",
    "ingest_external_registrations",
]
