"""Manifest parsing, fallback tissue segmentation and four-channel stack assembly.

Inputs are assumed to satisfy the preprocessed-inputs contract: bias corrected,
skull stripped (background exactly zero) and aligned to a common grid. Bias
correction, skull stripping and registration are left to external tools.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .core_types import (
    MODALITIES,
    TISSUE_MODALITIES,
    CDR,
    ModalityStack,
    Sex,
    SubjectRecord,
    VolumeGrid,
)
from .nifti import read_nifti_volume

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("subject_id", "cdr", "age", "mmse", "sex", "t1_path", "gm_path", "wm_path", "csf_path")
_PATH_COLUMNS = {"T1": "t1_path", "GM": "gm_path", "WM": "wm_path", "CSF": "csf_path"}
MASK_NAMES = ("brain", "ventricle", "cortex")


class ManifestError(ValueError):
    def __init__(self, row: int | None, message: str):
        where = "header" if row is None else f"row {row}"
        super().__init__(f"manifest {where}: {message}")
        self.row = row


class AlignmentError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class MissingModalityError(ValueError):
    pass


# -- manifest -----------------------------------------------------------------

def read_manifest(path) -> list[SubjectRecord]:
    """Parse a manifest CSV. Row numbers in errors count the header as row 1.

    Duplicate subject ids keep the first row and emit a warning.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(None, "missing header row")
        missing = [c for c in ("subject_id", "cdr", "age") if c not in reader.fieldnames]
        if missing:
            raise ManifestError(None, f"missing required columns {missing}")
        records: list[SubjectRecord] = []
        seen: set[str] = set()
        for rowno, row in enumerate(reader, start=2):
            sid = (row.get("subject_id") or "").strip()
            if not sid:
                raise ManifestError(rowno, "empty subject_id")
            if sid in seen:
                warnings.warn(f"manifest row {rowno}: duplicate subject_id {sid!r} ignored", stacklevel=2)
                continue
            try:
                cdr = CDR.from_value(row["cdr"])
            except ValueError as exc:
                raise ManifestError(rowno, f"cdr: {exc}") from None
            try:
                age = float(row["age"])
            except (TypeError, ValueError):
                raise ManifestError(rowno, f"age: cannot parse {row['age']!r}") from None
            mmse_cell = (row.get("mmse") or "").strip()
            try:
                mmse = float(mmse_cell) if mmse_cell else None
                sex = Sex.parse(row.get("sex"))
            except ValueError as exc:
                raise ManifestError(rowno, str(exc)) from None
            paths = {}
            for modality, col in _PATH_COLUMNS.items():
                cell = (row.get(col) or "").strip()
                if cell:
                    paths[modality] = cell
            try:
                records.append(SubjectRecord(sid, cdr, age, mmse, sex, paths))
            except ValueError as exc:
                raise ManifestError(rowno, str(exc)) from None
            seen.add(sid)
    return records


def write_manifest(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.subject_id,
                    repr(r.cdr.value),
                    repr(float(r.age)),
                    "" if r.mmse is None else repr(float(r.mmse)),
                    r.sex.value,
                    *(r.modality_paths.get(m, "") for m in MODALITIES),
                ]
            )
    return path


def resolve_path(ref: str, root) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else Path(root) / p


# -- fallback tissue segmentation ---------------------------------------------

@dataclass(frozen=True)
class MixtureFit:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    log_likelihood: float
    n_iter: int
    converged: bool


def _log_gauss(x, means, variances):
    return -0.5 * (np.log(2 * np.pi * variances) + (x[:, None] - means) ** 2 / variances)


def _posteriors(x, means, variances, weights):
    logp = _log_gauss(x, means, variances) + np.log(weights)
    top = logp.max(axis=1, keepdims=True)
    norm = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
    return np.exp(logp - norm[:, None]), float(norm.mean())


def fit_intensity_mixture(x: np.ndarray, n_components: int = 3, max_iter: int = 100,
                          tol: float = 1e-6) -> MixtureFit:
    """Univariate Gaussian mixture by expectation-maximization.

    Initialised deterministically: means at the 10th/50th/90th percentiles,
    a pooled within-tercile variance and equal weights. Converges when the mean
    per-sample log-likelihood changes by less than ``tol``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if np.unique(x).size < n_components:
        raise DegenerateInputError(
            f"need at least {n_components} distinct intensities, got {np.unique(x).size}"
        )
    qs = np.linspace(10, 90, n_components)
    means = np.percentile(x, qs)
    edges = np.percentile(x, np.linspace(0, 100, n_components + 1))
    groups = np.clip(np.searchsorted(edges[1:-1], x, side="right"), 0, n_components - 1)
    pooled = sum(((x[groups == k] - x[groups == k].mean()) ** 2).sum() for k in range(n_components)
                 if np.any(groups == k)) / x.size
    floor = max(1e-6 * float(x.var()), 1e-12)
    variances = np.full(n_components, max(pooled, floor))
    weights = np.full(n_components, 1.0 / n_components)

    prev = -np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        resp, ll = _posteriors(x, means, variances, weights)
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / x.size
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, floor)
        if abs(ll - prev) < tol:
            converged = True
            break
        prev = ll
    order = np.argsort(means)
    _, ll = _posteriors(x, means, variances, weights)
    return MixtureFit(means[order], variances[order], weights[order], ll, it, converged)


def fallback_tissue_segmentation(t1: VolumeGrid, brain_mask=None):
    """Three-class intensity segmentation standing in for external FAST maps.

    Components are assigned CSF < GM < WM by ascending mean (T1 contrast).
    Returns (gm, wm, csf) probability grids; voxels outside the mask are zero.
    """
    data = np.asarray(t1.data, dtype=np.float64)
    mask = data != 0 if brain_mask is None else np.asarray(getattr(brain_mask, "data", brain_mask), bool)
    if mask.shape != data.shape:
        raise AlignmentError(f"mask shape {mask.shape} does not match T1 {data.shape}")
    if not mask.any():
        raise DegenerateInputError("brain mask is empty")
    fit = fit_intensity_mixture(data[mask])
    post, _ = _posteriors(data[mask], fit.means, fit.variances, fit.weights)
    maps = []
    for k in (1, 2, 0):  # GM, WM, CSF
        vol = np.zeros(data.shape, dtype=np.float64)
        vol[mask] = post[:, k]
        maps.append(VolumeGrid(vol, t1.spacing))
    return tuple(maps)


# -- stack assembly -----------------------------------------------------------

def zscore_nonzero(data: np.ndarray) -> np.ndarray:
    out = np.asarray(data, dtype=np.float64).copy()
    nz = out != 0
    if nz.sum() < 2:
        raise DegenerateInputError("T1 has fewer than two nonzero voxels")
    vals = out[nz]
    sd = vals.std()
    if sd == 0:
        raise DegenerateInputError("T1 nonzero voxels are constant")
    out[nz] = (vals - vals.mean()) / sd
    return out


def assemble_modality_stack(record: SubjectRecord, volumes: Mapping[str, VolumeGrid],
                            brain_mask=None) -> ModalityStack:
    """Normalise and stack T1 plus tissue maps into a ModalityStack.

    T1 is z-scored over its nonzero voxels. Tissue maps are clipped to [0, 1]
    but never renormalised; a per-voxel sum deviating from 1 by more than 0.05
    inside the brain triggers a warning. Missing tissue maps are synthesised by
    :func:`fallback_tissue_segmentation`.
    """
    if "T1" not in volumes:
        raise MissingModalityError(f"{record.subject_id}: T1 volume is required")
    t1 = volumes["T1"]
    for name, vol in volumes.items():
        if name not in MODALITIES:
            raise ValueError(f"unknown modality {name!r}")
        if not t1.same_grid(vol):
            raise AlignmentError(
                f"{record.subject_id}: {name} grid {vol.dims}/{vol.spacing} "
                f"does not match T1 grid {t1.dims}/{t1.spacing}"
            )
    mask = np.asarray(t1.data) != 0 if brain_mask is None else np.asarray(
        getattr(brain_mask, "data", brain_mask), bool)

    if all(m in volumes for m in TISSUE_MODALITIES):
        tissue = [np.asarray(volumes[m].data, dtype=np.float64) for m in TISSUE_MODALITIES]
    else:
        log.info("%s: synthesising tissue maps with fallback segmentation", record.subject_id)
        tissue = [g.data for g in fallback_tissue_segmentation(t1, mask)]

    total = sum(tissue)
    bad = np.abs(total[mask] - 1.0) > 0.05
    if bad.any():
        warnings.warn(
            f"{record.subject_id}: tissue probabilities deviate from 1 by > 0.05 "
            f"at {int(bad.sum())} of {int(mask.sum())} brain voxels",
            stacklevel=2,
        )
    chans = [VolumeGrid(zscore_nonzero(t1.data).astype(np.float32), t1.spacing)]
    chans += [VolumeGrid(np.clip(t, 0.0, 1.0).astype(np.float32), t1.spacing) for t in tissue]
    return ModalityStack(tuple(chans), record.subject_id)


def load_subject_stack(record: SubjectRecord, root) -> ModalityStack:
    volumes = {m: read_nifti_volume(resolve_path(p, root)) for m, p in record.modality_paths.items()}
    return assemble_modality_stack(record, volumes)


def mask_paths(record: SubjectRecord, root) -> dict[str, Path]:
    """Ground-truth masks stored next to the T1 file as ``mask_<name>.nii.gz``."""
    base = resolve_path(record.modality_paths["T1"], root).parent
    return {name: base / f"mask_{name}.nii.gz" for name in MASK_NAMES}


def load_masks(record: SubjectRecord, root) -> dict[str, np.ndarray] | None:
    paths = mask_paths(record, root)
    if not all(p.exists() for p in paths.values()):
        return None
    return {name: read_nifti_volume(p).data > 0.5 for name, p in paths.items()}
