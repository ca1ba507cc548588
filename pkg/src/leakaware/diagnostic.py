"""Slice-based diagnostic protocols.

Both protocols train the 2D single-modality network on T1 slices and report
four-class slice accuracy. They differ only in how slices are partitioned:
``slice_level`` ignores subject identity (leaky), ``subject_level`` keeps every
subject's slices in one partition.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core_types import SubjectRecord
from .model import ModelConfig, slice_config
from .splits import (
    SliceAssignment,
    SliceKey,
    assign_slices_by_subject,
    audit_leakage,
    slice_level_split,
    subject_level_holdout,
)
from .train_eval import EvaluationReport, LeakageError, TrainingConfig, evaluate_fold, train_fold

MODES = ("slice_level", "subject_level")


def central_slices(n: int, n_slices: int | None) -> range:
    if n_slices is None:
        n_slices = n // 2
    n_slices = min(n_slices, n)
    start = (n - n_slices) // 2
    return range(start, start + n_slices)


def extract_slices(data: Mapping[str, np.ndarray], subject_ids: Sequence[str], axis: int = 2,
                   n_slices: int | None = None, channel: int = 0):
    """Central slices of one channel; returns (keys, images of shape (N, 1, a, b))."""
    keys: list[SliceKey] = []
    images = []
    for sid in sorted(subject_ids):
        vol = np.asarray(data[sid][channel])
        for idx in central_slices(vol.shape[axis], n_slices):
            keys.append((sid, axis, idx))
            images.append(np.take(vol, idx, axis=axis)[None])
    return keys, np.stack(images).astype(np.float32)


@dataclass
class SliceDiagnostic:
    mode: str
    report: EvaluationReport
    assignment: SliceAssignment
    test_keys: list[SliceKey]

    @property
    def accuracy(self) -> float:
        return self.report.folds[0].metrics["accuracy"]

    def slice_predictions_csv(self) -> str:
        fold = self.report.folds[0]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject_id", "axis", "index", "truth", "predicted", "p_true"])
        for (sid, axis, idx), t, p in zip(self.test_keys, fold.truth, fold.probabilities):
            w.writerow([sid, axis, idx, t, int(np.argmax(p)), repr(float(p[t]))])
        return buf.getvalue()


def run_slice_diagnostic(records: Sequence[SubjectRecord], data: Mapping[str, np.ndarray], mode: str,
                         seed: int, training_config: TrainingConfig, model_config: ModelConfig | None = None,
                         fractions=(0.70, 0.15, 0.15), axis: int = 2, n_slices: int | None = None) -> SliceDiagnostic:
    """Train and test the slice model under one partitioning protocol.

    ``fractions`` are (train, val, test). The subject-level protocol aborts
    with :class:`LeakageError` if its audit is dirty; the slice-level protocol
    records the (expected) leakage in the report, which is then not valid.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    model_config = model_config or slice_config()
    labels = {r.subject_id: int(r.label.fine_grained) for r in records}
    if model_config.n_classes == 2:
        labels = {r.subject_id: int(r.label.value) for r in records}

    keys, images = extract_slices(data, list(labels), axis, n_slices)
    if mode == "slice_level":
        assignment = slice_level_split(keys, fractions, seed)
    else:
        stratify = "fine_grained" if model_config.n_classes > 2 else "binary"
        plan = subject_level_holdout(records, fractions, seed, stratify_on=stratify)
        assignment = assign_slices_by_subject(keys, plan)
    audit = audit_leakage(assignment)
    if mode == "subject_level" and not audit.clean:
        raise LeakageError(audit)

    index = {k: i for i, k in enumerate(keys)}
    y = np.array([labels[k[0]] for k in keys])

    def part(name):
        ks = assignment.keys_in(name)
        idx = [index[k] for k in ks]
        return ks, images[idx], y[idx]

    _, tx, ty = part("train")
    _, vx, vy = part("val")
    test_keys, sx, sy = part("test")
    model, curves = train_fold(tx, ty, vx, vy, model_config, training_config)
    fold = evaluate_fold(0, model, curves, [k[0] for k in test_keys], sx, sy, batch_size=64)
    provenance = {
        "mode": mode,
        "seed": seed,
        "fractions": list(fractions),
        "axis": axis,
        "slices_per_subject": len(keys) // len(labels),
        "slice_counts": assignment.counts(),
        "model_config": model_config.to_dict(),
        "training_config": training_config.to_dict(),
    }
    report = EvaluationReport([fold], provenance, audit, expected_folds=1)
    return SliceDiagnostic(mode, report, assignment, list(test_keys))
