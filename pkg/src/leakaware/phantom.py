"""Deterministic synthetic brain phantoms with ground-truth region masks.

A phantom is a brain ellipsoid whose outer shell is cortex (GM), whose interior
is WM, and which contains a central ventricle ellipsoid (CSF). Demented
phantoms get enlarged ventricles and a thinner cortex. Each subject also gets
a smooth multiplicative intensity texture, which is what lets slice-level
splits recognise subjects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core_types import (
    CDR,
    Diagnosis,
    DiagnosisLabel,
    ModalityStack,
    Sex,
    SubjectRecord,
    VolumeGrid,
    map_cdr_to_binary,
)
from .ingest import MASK_NAMES, write_manifest
from .nifti import write_nifti_volume

T1_LEVELS = {"background": 0.0, "CSF": 0.2, "GM": 0.5, "WM": 0.8}
BRAIN_RADII = (0.40, 0.44, 0.38)
VENTRICLE_RADII = (0.09, 0.12, 0.09)
TEXTURE_AMPLITUDE = 0.10
TEXTURE_MODES = 12
TEXTURE_CYCLES = (2.0, 6.0)  # wavenumber band, cycles per field of view
# Wavenumber multiplier along the last (axial) axis. At 0 the texture is the
# same on every axial slice, a per-subject fingerprint slice-level splits can leak.
TEXTURE_Z_SCALE = 0.0
DEMENTED_SEVERITY_WEIGHTS = {CDR.VERY_MILD: 70, CDR.MILD: 28, CDR.MODERATE: 2}


class GeometryError(ValueError):
    pass


def default_cortex_thickness(grid) -> int:
    return max(2, int(round(0.1 * min(grid))))


@dataclass(frozen=True)
class PhantomSpec:
    subject_id: str
    cdr: CDR = CDR.NONE
    grid: tuple[int, int, int] = (32, 32, 32)
    ventricle_scale: float = 1.0
    cortex_thickness: int | None = None
    cortex_thinning: int = 1
    texture_seed: int = 0
    noise_sigma: float = 0.05
    tissue_smoothing: float = 0.0
    anatomy_jitter: float = 0.0
    contrast_jitter: float = 0.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "cdr", CDR.from_value(self.cdr))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.cortex_thickness is None:
            object.__setattr__(self, "cortex_thickness", default_cortex_thickness(self.grid))
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.ventricle_scale < 1:
            raise ValueError("ventricle_scale must be >= 1")
        if not 0 <= self.anatomy_jitter < 0.5:
            raise ValueError("anatomy_jitter must lie in [0, 0.5)")
        if not 0 <= self.contrast_jitter < 0.5:
            raise ValueError("contrast_jitter must lie in [0, 0.5)")
        if min(self.grid) < 4:
            raise GeometryError(f"grid {self.grid} too small")

    @property
    def label(self) -> DiagnosisLabel:
        return map_cdr_to_binary(self.cdr)

    @property
    def effective_thickness(self) -> int:
        if self.label.value == Diagnosis.DEMENTED:
            return self.cortex_thickness - self.cortex_thinning
        return self.cortex_thickness


@dataclass(frozen=True, eq=False)
class GroundTruthMasks:
    brain: np.ndarray
    ventricle: np.ndarray
    cortex: np.ndarray

    def __post_init__(self):
        for name in MASK_NAMES:
            arr = np.asarray(getattr(self, name), dtype=bool).copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in MASK_NAMES}


def _ellipsoid(grid, radii) -> np.ndarray:
    coords = np.meshgrid(*[np.arange(n, dtype=np.float64) - (n - 1) / 2 for n in grid], indexing="ij")
    return sum((c / r) ** 2 for c, r in zip(coords, radii)) <= 1.0


def texture_field(grid, seed: int) -> np.ndarray:
    """Smooth field in [-1, 1]: a sum of cosines with random direction, phase and
    a wavenumber drawn from ``TEXTURE_CYCLES``, scaled along z by ``TEXTURE_Z_SCALE``."""
    rng = np.random.default_rng([seed, 1])
    coords = np.meshgrid(*[np.arange(n, dtype=np.float64) / n for n in grid], indexing="ij")
    out = np.zeros(grid)
    for _ in range(TEXTURE_MODES):
        direction = rng.normal(size=3)
        k = direction / np.linalg.norm(direction) * rng.uniform(*TEXTURE_CYCLES)
        k[2] *= TEXTURE_Z_SCALE
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.5, 1.0)
        out += amp * np.cos(2 * math.pi * sum(ki * c for ki, c in zip(k, coords)) + phase)
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def brain_scaling(spec: PhantomSpec) -> np.ndarray:
    """Per-axis brain radius factors in [1 - jitter, 1 + jitter], seeded per subject."""
    rng = np.random.default_rng([spec.texture_seed, 4])
    return 1.0 + spec.anatomy_jitter * rng.uniform(-1.0, 1.0, size=3)


def tissue_levels(spec: PhantomSpec) -> dict[str, float]:
    """T1 level per tissue, each scaled by a seeded factor in [1 - jitter, 1 + jitter]."""
    rng = np.random.default_rng([spec.texture_seed, 5])
    factors = 1.0 + spec.contrast_jitter * rng.uniform(-1.0, 1.0, size=3)
    return {k: T1_LEVELS[k] * f for k, f in zip(("CSF", "GM", "WM"), factors)}


def _demographics(spec: PhantomSpec):
    rng = np.random.default_rng([spec.texture_seed, 2])
    if spec.label.value == Diagnosis.DEMENTED:
        age = rng.normal(77.0, 7.0)
        mmse = rng.normal({CDR.VERY_MILD: 25.6, CDR.MILD: 21.7, CDR.MODERATE: 15.0}[spec.cdr], 2.5)
    else:
        age = rng.normal(69.0, 8.0)
        mmse = rng.normal(29.1, 0.8)
    sex = Sex.FEMALE if rng.random() < 0.62 else Sex.MALE
    return round(float(np.clip(age, 60, 96)), 1), round(float(np.clip(mmse, 0, 30)), 1), sex


def generate_phantom_subject(spec: PhantomSpec):
    """Build one phantom; returns (record, raw ModalityStack, GroundTruthMasks).

    The T1 channel is raw (not normalised); background voxels are exactly zero.
    """
    grid = spec.grid
    brain_r = [f * n * s for f, n, s in zip(BRAIN_RADII, grid, brain_scaling(spec))]
    thickness = spec.effective_thickness
    inner_r = [r - thickness for r in brain_r]
    vent_r = [f * n * spec.ventricle_scale for f, n in zip(VENTRICLE_RADII, grid)]
    if thickness < 1:
        raise GeometryError(f"cortex thickness {thickness} < 1 voxel")
    if any(v >= i for v, i in zip(vent_r, inner_r)):
        raise GeometryError(
            f"ventricle radii {np.round(vent_r, 2).tolist()} exceed the brain interior "
            f"{np.round(inner_r, 2).tolist()} (ventricle_scale={spec.ventricle_scale})"
        )

    brain = _ellipsoid(grid, brain_r)
    inner = _ellipsoid(grid, inner_r) & brain
    ventricle = _ellipsoid(grid, vent_r) & inner
    cortex = brain & ~inner
    wm = inner & ~ventricle

    tissue = {"GM": cortex.astype(np.float64), "WM": wm.astype(np.float64), "CSF": ventricle.astype(np.float64)}
    if spec.tissue_smoothing > 0:
        tissue = {k: ndimage.gaussian_filter(v, spec.tissue_smoothing) * brain for k, v in tissue.items()}

    levels = tissue_levels(spec)
    t1 = sum(levels[k] * v for k, v in tissue.items())
    t1 = t1 * (1.0 + TEXTURE_AMPLITUDE * texture_field(grid, spec.texture_seed))
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.texture_seed, 3])
        t1 = t1 + rng.normal(0.0, spec.noise_sigma, size=grid)
    t1 = np.where(brain, t1, 0.0)
    # skull-stripped convention: brain voxels must stay nonzero
    t1[brain & (t1 == 0)] = 1e-6

    channels = (VolumeGrid(t1.astype(np.float32), spec.spacing),) + tuple(
        VolumeGrid(tissue[m].astype(np.float32), spec.spacing) for m in ("GM", "WM", "CSF")
    )
    age, mmse, sex = _demographics(spec)
    record = SubjectRecord(spec.subject_id, spec.cdr, age, mmse, sex)
    return record, ModalityStack(channels, spec.subject_id), GroundTruthMasks(brain, ventricle, cortex)


@dataclass
class PhantomCohort:
    records: list[SubjectRecord]
    stacks: list[ModalityStack]
    masks: list[GroundTruthMasks]
    specs: list[PhantomSpec] = field(default_factory=list)

    def __len__(self):
        return len(self.records)


def cohort_specs(n_subjects: int, demented_fraction: float, base_seed: int, grid=(32, 32, 32),
                 ventricle_scale: float = 1.6, cortex_thinning: int = 1,
                 noise_sigma: float = 0.05, anatomy_jitter: float = 0.08, **spec_kwargs) -> list[PhantomSpec]:
    if n_subjects < 2:
        raise ValueError(f"n_subjects must be >= 2, got {n_subjects}")
    if not 0 <= demented_fraction <= 1:
        raise ValueError(f"demented_fraction must lie in [0, 1], got {demented_fraction}")
    rng = np.random.default_rng(base_seed)
    n_dem = int(math.floor(n_subjects * demented_fraction + 0.5))
    demented = set(rng.permutation(n_subjects)[:n_dem].tolist())
    texture_seeds = rng.choice(2**31 - 1, size=n_subjects, replace=False)
    severities = list(DEMENTED_SEVERITY_WEIGHTS)
    probs = np.array(list(DEMENTED_SEVERITY_WEIGHTS.values()), dtype=float)
    severity_draws = rng.choice(len(severities), size=n_subjects, p=probs / probs.sum())
    specs = []
    for i in range(n_subjects):
        is_dem = i in demented
        specs.append(
            PhantomSpec(
                subject_id=f"SUBJ{i:04d}",
                cdr=severities[severity_draws[i]] if is_dem else CDR.NONE,
                grid=tuple(grid),
                ventricle_scale=ventricle_scale if is_dem else 1.0,
                cortex_thinning=cortex_thinning,
                texture_seed=int(texture_seeds[i]),
                noise_sigma=noise_sigma,
                anatomy_jitter=anatomy_jitter,
                **spec_kwargs,
            )
        )
    return specs


def generate_phantom_cohort(n_subjects: int, demented_fraction: float, base_seed: int,
                            **kwargs) -> PhantomCohort:
    """Cohort with exactly round(n * fraction) Demented subjects."""
    specs = cohort_specs(n_subjects, demented_fraction, base_seed, **kwargs)
    cohort = PhantomCohort([], [], [], specs)
    for spec in specs:
        record, stack, masks = generate_phantom_subject(spec)
        cohort.records.append(record)
        cohort.stacks.append(stack)
        cohort.masks.append(masks)
    return cohort


def write_phantom_cohort(cohort: PhantomCohort, out_dir) -> Path:
    """Write NIfTI volumes, masks and ``manifest.csv``; returns the manifest path.

    Layout: ``<out>/<subject_id>/{T1,GM,WM,CSF}.nii.gz`` plus
    ``mask_{brain,ventricle,cortex}.nii.gz``; manifest paths are relative.
    """
    out = Path(out_dir)
    records = []
    for record, stack, masks in zip(cohort.records, cohort.stacks, cohort.masks):
        sub = out / record.subject_id
        paths = {}
        for modality in ("T1", "GM", "WM", "CSF"):
            rel = f"{record.subject_id}/{modality}.nii.gz"
            write_nifti_volume(stack[modality], out / rel)
            paths[modality] = rel
        for name, mask in masks.as_dict().items():
            write_nifti_volume(VolumeGrid(mask.astype(np.uint8), stack.spacing), sub / f"mask_{name}.nii.gz",
                               datatype="uint8")
        records.append(replace(record, modality_paths=paths))
    return write_manifest(records, out / "manifest.csv")
