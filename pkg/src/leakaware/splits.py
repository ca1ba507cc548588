"""Subject-level fold plans, slice-level splits and the leakage audit."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .core_types import SubjectRecord, check_unique_ids

ROLES = ("train", "val", "test")


class StratificationError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def role(self, name: str) -> tuple[str, ...]:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {r: list(self.role(r)) for r in ROLES}


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    stratify_on: str
    folds: tuple[Fold, ...]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "stratify_on": self.stratify_on,
            "folds": [f.to_dict() for f in self.folds],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        folds = tuple(Fold(*(tuple(f[r]) for r in ROLES)) for f in d["folds"])
        return cls(int(d["k"]), int(d["seed"]), d.get("stratify_on", "binary"), folds)

    def subjects(self) -> set[str]:
        return {s for f in self.folds for r in ROLES for s in f.role(r)}


@dataclass(frozen=True)
class Violation:
    subject_id: str
    fold: int | None
    roles: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"subject_id": self.subject_id, "fold": self.fold, "roles": list(self.roles)}


@dataclass(frozen=True)
class LeakageReport:
    violations: tuple[Violation, ...] = ()

    @property
    def clean(self) -> bool:
        return not self.violations

    @property
    def subjects(self) -> set[str]:
        return {v.subject_id for v in self.violations}

    def to_dict(self) -> dict:
        return {"clean": self.clean, "violations": [v.to_dict() for v in self.violations]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


SliceKey = tuple[str, int, int]  # (subject_id, axis, index)


@dataclass(frozen=True)
class SliceAssignment:
    partitions: dict[SliceKey, str] = field(default_factory=dict)
    mode: str = "slice_level"

    def keys_in(self, partition: str) -> list[SliceKey]:
        return [k for k, p in self.partitions.items() if p == partition]

    def counts(self) -> dict[str, int]:
        return {r: sum(1 for p in self.partitions.values() if p == r) for r in ROLES}


def _label_of(record: SubjectRecord, stratify_on: str) -> int:
    if stratify_on == "binary":
        return int(record.label.value)
    if stratify_on == "fine_grained":
        return int(record.label.fine_grained)
    raise ValueError(f"stratify_on must be 'binary' or 'fine_grained', got {stratify_on!r}")


def _strata(records, stratify_on) -> dict[int, list[str]]:
    out: dict[int, list[str]] = {}
    for r in records:
        out.setdefault(_label_of(r, stratify_on), []).append(r.subject_id)
    return {c: sorted(ids) for c, ids in sorted(out.items())}


def _class_name(label: int, stratify_on: str) -> str:
    from .core_types import Diagnosis, Severity

    return (Diagnosis if stratify_on == "binary" else Severity)(label).name


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer counts summing to n; leftover units go to the largest fractional
    parts, ties to the earlier partition."""
    quotas = [n * f for f in fractions]
    counts = [math.floor(q + 1e-9) for q in quotas]
    rema = [round(q - c, 9) for q, c in zip(quotas, counts)]
    order = sorted(range(len(fractions)), key=lambda i: (-rema[i], i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _check_fractions(fractions):
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise SplitError(f"fractions must be three non-negative values summing to 1, got {tuple(fractions)}")


def stratified_subject_kfold(records: Sequence[SubjectRecord], k: int, seed: int,
                             val_fraction: float = 0.10, stratify_on: str = "binary") -> FoldPlan:
    """K-fold subject assignment with a stratified train/validation split.

    Per class, ids are sorted, shuffled with ``seed`` and dealt round-robin to
    folds, so lower-index folds receive the remainders. For fold i the other
    folds are split per class into validation (``round(n * val_fraction)``, at
    least one) and train, using a generator seeded with ``(seed, i)``.
    """
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    if not 0 < val_fraction < 1:
        raise SplitError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    check_unique_ids(records)
    strata = _strata(records, stratify_on)
    for label, ids in strata.items():
        if len(ids) < k:
            raise StratificationError(
                f"class {_class_name(label, stratify_on)} has {len(ids)} subjects, fewer than k={k}"
            )

    rng = np.random.default_rng(seed)
    fold_members: list[dict[int, list[str]]] = [{c: [] for c in strata} for _ in range(k)]
    for label, ids in strata.items():
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        for j, sid in enumerate(shuffled):
            fold_members[j % k][label].append(sid)

    folds = []
    for i in range(k):
        fold_rng = np.random.default_rng([seed, i])
        train, val = [], []
        for label in strata:
            rest = sorted(s for j in range(k) if j != i for s in fold_members[j][label])
            rest = [rest[t] for t in fold_rng.permutation(len(rest))]
            n_val = max(1, math.floor(len(rest) * val_fraction + 0.5))
            if n_val >= len(rest):
                raise StratificationError(
                    f"class {_class_name(label, stratify_on)} leaves no training subjects in fold {i}"
                )
            val += rest[:n_val]
            train += rest[n_val:]
        test = [s for label in strata for s in fold_members[i][label]]
        folds.append(Fold(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test))))
    return FoldPlan(k, seed, stratify_on, tuple(folds))


def subject_level_holdout(records: Sequence[SubjectRecord], fractions=(0.70, 0.15, 0.15), seed: int = 0,
                          stratify_on: str = "binary") -> FoldPlan:
    """Single train/val/test partition of subjects, stratified per class.

    ``fractions`` are (train, val, test). Counts per class use largest-remainder
    rounding with ties going to the earlier partition.
    """
    _check_fractions(fractions)
    if not records:
        raise SplitError("cannot split an empty cohort")
    check_unique_ids(records)
    rng = np.random.default_rng(seed)
    parts: dict[str, list[str]] = {r: [] for r in ROLES}
    for label, ids in _strata(records, stratify_on).items():
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        counts = largest_remainder(len(ids), fractions)
        if len(ids) >= 3 and 0 in counts:
            warnings.warn(
                f"class {_class_name(label, stratify_on)} ({len(ids)} subjects) has an empty partition: {counts}",
                stacklevel=2,
            )
        start = 0
        for role, c in zip(ROLES, counts):
            parts[role] += shuffled[start : start + c]
            start += c
    fold = Fold(*(tuple(sorted(parts[r])) for r in ROLES))
    return FoldPlan(1, seed, stratify_on, (fold,))


def slice_level_split(slices: Iterable[SliceKey], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SliceAssignment:
    """Partition slices ignoring subject identity (the leakage-prone protocol)."""
    _check_fractions(fractions)
    keys = sorted(set(tuple(s) for s in slices))
    if not keys:
        raise SplitError("no slices to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(keys))
    counts = largest_remainder(len(keys), fractions)
    partitions = {}
    start = 0
    for role, c in zip(ROLES, counts):
        for idx in order[start : start + c]:
            partitions[keys[idx]] = role
        start += c
    return SliceAssignment(dict(sorted(partitions.items())), "slice_level")


def assign_slices_by_subject(slices: Iterable[SliceKey], plan: FoldPlan, fold: int = 0) -> SliceAssignment:
    """Every slice inherits its subject's partition in ``plan.folds[fold]``."""
    where = {s: r for r in ROLES for s in plan.folds[fold].role(r)}
    partitions = {}
    for key in sorted(set(tuple(s) for s in slices)):
        if key[0] not in where:
            raise SplitError(f"subject {key[0]!r} is not in the plan")
        partitions[key] = where[key[0]]
    return SliceAssignment(partitions, "subject_level")


def audit_leakage(plan: FoldPlan | SliceAssignment) -> LeakageReport:
    """Report every subject shared between roles of a fold, or between the
    test sets of different folds. For slice assignments, report every subject
    whose slices land in more than one partition."""
    violations: list[Violation] = []
    if isinstance(plan, SliceAssignment):
        seen: dict[str, set[str]] = {}
        for (sid, *_), part in plan.partitions.items():
            seen.setdefault(sid, set()).add(part)
        for sid in sorted(seen):
            if len(seen[sid]) > 1:
                violations.append(Violation(sid, 0, tuple(r for r in ROLES if r in seen[sid])))
        return LeakageReport(tuple(violations))

    for i, fold in enumerate(plan.folds):
        sets = {r: set(fold.role(r)) for r in ROLES}
        per_subject: dict[str, list[str]] = {}
        for a, b in combinations(ROLES, 2):
            for sid in sets[a] & sets[b]:
                roles = per_subject.setdefault(sid, [])
                roles.extend(r for r in (a, b) if r not in roles)
        for r in ROLES:
            dup = {s for s in fold.role(r) if fold.role(r).count(s) > 1}
            for sid in dup:
                per_subject.setdefault(sid, []).append(r)
        for sid in sorted(per_subject):
            roles = tuple(r for r in ROLES if r in per_subject[sid])
            violations.append(Violation(sid, i, roles))

    tested: dict[str, list[int]] = {}
    for i, fold in enumerate(plan.folds):
        for sid in set(fold.test):
            tested.setdefault(sid, []).append(i)
    for sid in sorted(tested):
        if len(tested[sid]) > 1:
            violations.append(Violation(sid, None, tuple(f"test[{i}]" for i in tested[sid])))
    return LeakageReport(tuple(violations))


def check_test_coverage(plan: FoldPlan, subject_ids: Iterable[str]) -> list[str]:
    """Problems with the K test lists covering the cohort exactly once."""
    expected = set(subject_ids)
    tested = [s for f in plan.folds for s in f.test]
    problems = []
    missing = expected - set(tested)
    extra = set(tested) - expected
    if missing:
        problems.append(f"never tested: {sorted(missing)}")
    if extra:
        problems.append(f"not in cohort: {sorted(extra)}")
    if len(tested) != len(set(tested)):
        problems.append("some subjects are tested more than once")
    return problems
