"""Synthetic longitudinal series with known ground truth.

The anatomy is procedural: an ellipsoidal brain with a cortex shell, white
matter interior, an off-centre ventricle and two asymmetric nuclei, so
label centroids are well spread for rigid fitting. Latent transforms are
drawn as smoothed noise and recentred in antisymmetric pairs, which makes
the per-coordinate sums exactly zero in floating point. Images follow the
forward model: the template resampled through each latent chain plus
Laplace intensity noise. Pairwise observations are built additively in the
log domain, so graph inference has an exact target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ValidationFailure
from .geometry import Grid, RigidLog, RigidTransform, Svf, se3_exp, svf_exp
from .manifest import DEFAULT_SETTINGS, Manifest, RegistrationEntry, TimepointEntry, save_manifest
from .volume_io import (
    LabelVolume,
    MaskVolume,
    Volume,
    resample,
    write_field,
    write_rigid,
    write_volume,
)

LABEL_NAMES = {
    0: "background",
    1: "cortex",
    2: "white-matter",
    3: "ventricle",
    4: "left-nucleus",
    5: "right-nucleus",
}

INTENSITY = {1: 80.0, 2: 110.0, 3: 28.0, 4: 62.0, 5: 62.0}


def _centered_grid(shape: tuple[int, int, int], spacing: float) -> Grid:
    affine = np.eye(4)
    affine[0, 0] = affine[1, 1] = affine[2, 2] = spacing
    affine[:3, 3] = -spacing * (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    return Grid(tuple(shape), affine)


def _ellipsoid(coords: np.ndarray, centre, radii) -> np.ndarray:
    rel = (coords - np.asarray(centre, dtype=np.float64)) / np.asarray(radii, dtype=np.float64)
    return (rel**2).sum(axis=-1) <= 1.0


def generate_anatomy(
    shape: tuple[int, int, int] = (32, 32, 32), spacing: float = 1.0
) -> tuple[Volume, MaskVolume, LabelVolume]:
    """Procedural brain-like template: intensity, mask and label volumes.

    Structure placement uses coordinates normalized to [-1, 1] per axis, so
    any shape from about 16 voxels per side up yields non-empty labels with
    non-coplanar centroids.
    """
    grid = _centered_grid(shape, spacing)
    half = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    idx = np.stack(np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij"), axis=-1)
    norm = (idx - half) / half

    brain = _ellipsoid(norm, (0.0, 0.0, 0.0), (0.80, 0.88, 0.74))
    white = _ellipsoid(norm, (0.0, -0.02, 0.0), (0.58, 0.66, 0.52))
    ventricle = _ellipsoid(norm, (0.0, 0.14, 0.08), (0.17, 0.27, 0.15))
    left = _ellipsoid(norm, (-0.34, 0.04, -0.14), (0.15, 0.17, 0.14))
    right = _ellipsoid(norm, (0.36, -0.04, 0.12), (0.14, 0.16, 0.15))

    labels = np.zeros(shape, dtype=np.int32)
    labels[brain] = 1
    labels[white] = 2
    labels[left] = 4
    labels[right] = 5
    labels[ventricle] = 3

    image = np.zeros(shape)
    for lab, value in INTENSITY.items():
        image[labels == lab] = value
    image = gaussian_filter(image, sigma=0.8, mode="nearest")
    mask = np.clip(gaussian_filter(brain.astype(np.float64), sigma=0.8, mode="nearest"), 0.0, 1.0)

    return (
        Volume(grid, image),
        MaskVolume(grid, mask),
        LabelVolume(grid, labels, dict(LABEL_NAMES)),
    )


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    spacing: float = 1.0
    n_timepoints: int = 4
    times: tuple[float, ...] | None = None
    edges: str | tuple[tuple[int, int], ...] = "all"
    rigid_rot_scale: float = 0.02
    rigid_trans_scale: float = 1.0
    svf_magnitude: float = 1.0
    svf_sigma: float = 4.0
    image_noise: float = 0.0
    registration_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_timepoints < 1:
            raise ValidationFailure("phantom needs at least one timepoint")
        if min(self.rigid_rot_scale, self.rigid_trans_scale, self.svf_magnitude,
               self.svf_sigma, self.image_noise, self.registration_noise) < 0:
            raise ValidationFailure("phantom scales must be nonnegative")
        if self.times is not None:
            if len(self.times) != self.n_timepoints:
                raise ValidationFailure("times length differs from the timepoint count")
            object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def resolved_times(self) -> tuple[float, ...]:
        if self.times is not None:
            return self.times
        return tuple(float(t) for t in range(self.n_timepoints))

    def pair_list(self) -> tuple[tuple[int, int], ...]:
        n = self.n_timepoints
        if isinstance(self.edges, str):
            if self.edges == "all":
                return tuple((i, j) for i in range(n) for j in range(i + 1, n))
            if self.edges == "tree":
                return tuple((i, i + 1) for i in range(n - 1))
            if self.edges == "ring":
                if n < 2:
                    return ()
                return tuple((i, (i + 1) % n) for i in range(n)) if n > 2 else ((0, 1),)
            raise ValidationFailure(f"unknown edge policy {self.edges!r}")
        pairs = tuple((int(a), int(b)) for a, b in self.edges)
        for a, b in pairs:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise ValidationFailure(f"edge ({a}, {b}) is out of range or a self-loop")
        return pairs


@dataclass(frozen=True)
class Phantom:
    spec: PhantomSpec
    template: Volume
    template_mask: MaskVolume
    template_labels: LabelVolume
    ids: tuple[str, ...]
    times: tuple[float, ...]
    latent_logs: tuple[RigidLog, ...]
    latent_rigids: tuple[RigidTransform, ...]
    latent_svfs: tuple[Svf, ...] | None
    images: tuple[Volume, ...]
    masks: tuple[MaskVolume, ...]
    labelmaps: tuple[LabelVolume, ...]
    pairs: tuple[tuple[int, int], ...]
    rigid_observations: dict = field(default_factory=dict)
    svf_observations: dict = field(default_factory=dict)


def _pair_antisymmetric(draws: np.ndarray) -> np.ndarray:
    """Recentre stacked draws so sums vanish exactly: (w, -w) pairs, odd tail zero."""
    out = np.zeros_like(draws)
    n = draws.shape[0]
    for i in range(0, n - 1, 2):
        out[i] = draws[i]
        out[i + 1] = -draws[i]
    return out


def generate_phantom(spec: PhantomSpec) -> Phantom:
    rng = np.random.default_rng(spec.seed)
    template, mask, labels = generate_anatomy(spec.shape, spec.spacing)
    grid = template.grid
    n = spec.n_timepoints
    times = spec.resolved_times()
    ids = tuple(f"tp{i}" for i in range(n))

    draws = rng.normal(size=(n, 6))
    draws[:, :3] *= spec.rigid_rot_scale
    draws[:, 3:] *= spec.rigid_trans_scale
    log_vectors = _pair_antisymmetric(draws)
    latent_logs = tuple(RigidLog.from_vector(v) for v in log_vectors)
    latent_rigids = tuple(se3_exp(log) for log in latent_logs)

    latent_svfs = None
    svf_values = np.zeros((n,) + spec.shape + (3,))
    if spec.svf_magnitude > 0:
        raw = rng.normal(size=(n,) + spec.shape + (3,))
        for i in range(n):
            raw[i] = gaussian_filter(raw[i], sigma=(spec.svf_sigma,) * 3 + (0,), mode="nearest")
        peak = np.linalg.norm(raw, axis=-1).max()
        if peak > 0:
            raw *= spec.svf_magnitude / peak
        svf_values = _pair_antisymmetric(raw)
        latent_svfs = tuple(Svf(grid, svf_values[i]) for i in range(n))

    images, tp_masks, tp_labels = [], [], []
    for i in range(n):
        chain: list = [latent_rigids[i].inverse()]
        if latent_svfs is not None:
            chain.append(svf_exp(latent_svfs[i], direction=-1))
        img = resample(template, grid, chain)
        if spec.image_noise > 0:
            img = Volume(grid, img.data + rng.laplace(0.0, spec.image_noise, size=spec.shape))
        images.append(img)
        tp_masks.append(resample(mask, grid, chain))
        tp_labels.append(resample(labels, grid, chain))

    pairs = spec.pair_list()
    rigid_obs, svf_obs = {}, {}
    for a, b in pairs:
        vec = log_vectors[b] - log_vectors[a]
        if spec.registration_noise > 0:
            vec = vec + rng.laplace(0.0, spec.registration_noise, size=6)
        rigid_obs[(ids[a], ids[b])] = se3_exp(RigidLog.from_vector(vec))
        if latent_svfs is not None:
            vals = svf_values[b] - svf_values[a]
            if spec.registration_noise > 0:
                vals = vals + rng.laplace(0.0, spec.registration_noise, size=vals.shape)
            svf_obs[(ids[a], ids[b])] = Svf(grid, vals)

    return Phantom(
        spec=spec,
        template=template,
        template_mask=mask,
        template_labels=labels,
        ids=ids,
        times=times,
        latent_logs=latent_logs,
        latent_rigids=latent_rigids,
        latent_svfs=latent_svfs,
        images=tuple(images),
        masks=tuple(tp_masks),
        labelmaps=tuple(tp_labels),
        pairs=pairs,
        rigid_observations=rigid_obs,
        svf_observations=svf_obs,
    )


def write_phantom(phantom: Phantom, out_dir: str | Path, include_observations: bool = True) -> Path:
    """Write volumes, transforms, ground truth and a ready-to-run manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = out / "truth"
    truth.mkdir(exist_ok=True)

    write_volume(truth / "template.nii.gz", phantom.template)
    write_volume(truth / "template_mask.nii.gz", phantom.template_mask)
    write_volume(truth / "template_labels.nii.gz", phantom.template_labels)

    timepoints = []
    for i, tid in enumerate(phantom.ids):
        write_volume(out / f"{tid}.nii.gz", phantom.images[i])
        write_volume(out / f"{tid}-mask.nii.gz", phantom.masks[i])
        write_volume(out / f"{tid}-labels.nii.gz", phantom.labelmaps[i])
        write_rigid(truth / f"{tid}.rigid.txt", phantom.latent_rigids[i])
        if phantom.latent_svfs is not None:
            write_field(truth / f"{tid}.svf.nii.gz", phantom.latent_svfs[i])
        timepoints.append(
            TimepointEntry(
                id=tid,
                time_years=phantom.times[i],
                image=f"{tid}.nii.gz",
                labels=f"{tid}-labels.nii.gz",
                mask=f"{tid}-mask.nii.gz",
            )
        )

    registrations = []
    if include_observations:
        obs = out / "observations"
        obs.mkdir(exist_ok=True)
        for (a, b), transform in phantom.rigid_observations.items():
            rel = f"observations/{a}_{b}.rigid.txt"
            write_rigid(out / rel, transform)
            registrations.append(RegistrationEntry(ref=a, target=b, kind="rigid", path=rel))
        for (a, b), fieldobs in phantom.svf_observations.items():
            rel = f"observations/{a}_{b}.svf.nii.gz"
            write_field(out / rel, fieldobs)
            registrations.append(RegistrationEntry(ref=a, target=b, kind="svf", path=rel))

    settings = dict(DEFAULT_SETTINGS)
    settings["seed"] = phantom.spec.seed
    manifest = Manifest(
        subject="phantom",
        timepoints=tuple(timepoints),
        registrations=tuple(registrations),
        settings=settings,
        base_dir=str(out),
    )
    path = out / "manifest.json"
    save_manifest(str(path), manifest)
    spec_dict = {
        "shape": list(phantom.spec.shape),
        "spacing": phantom.spec.spacing,
        "n_timepoints": phantom.spec.n_timepoints,
        "times": list(phantom.times),
        "edges": phantom.spec.edges if isinstance(phantom.spec.edges, str)
        else [list(p) for p in phantom.spec.edges],
        "rigid_rot_scale": phantom.spec.rigid_rot_scale,
        "rigid_trans_scale": phantom.spec.rigid_trans_scale,
        "svf_magnitude": phantom.spec.svf_magnitude,
        "svf_sigma": phantom.spec.svf_sigma,
        "image_noise": phantom.spec.image_noise,
        "registration_noise": phantom.spec.registration_noise,
        "seed": phantom.spec.seed,
    }
    (out / "phantom_spec.json").write_text(json.dumps(spec_dict, indent=2, sort_keys=True) + "\n")
    return path


def load_phantom_spec(path: str | Path) -> PhantomSpec:
    raw = json.loads(Path(path).read_text())
    if "edges" in raw and not isinstance(raw["edges"], str):
        raw["edges"] = tuple(tuple(p) for p in raw["edges"])
    if "shape" in raw:
        raw["shape"] = tuple(raw["shape"])
    if raw.get("times") is not None:
        raw["times"] = tuple(raw["times"])
    known = {f for f in PhantomSpec.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise ValidationFailure(f"unknown phantom spec fields: {sorted(unknown)}")
    return PhantomSpec(**raw)
