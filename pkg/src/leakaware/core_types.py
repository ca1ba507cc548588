"""Domain data model shared by every other module.

Axis convention
---------------
Volumes are numpy arrays indexed ``[x, y, z]`` with shape ``(X, Y, Z)``.
Whenever a volume is flattened to a buffer (NIfTI payloads, ``VolumeGrid.voxels``)
the x index varies fastest, i.e. Fortran order. Model inputs follow the same
indexing: ``(batch, channel, X, Y, Z)``.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

MODALITIES: tuple[str, ...] = ("T1", "GM", "WM", "CSF")
TISSUE_MODALITIES: tuple[str, ...] = ("GM", "WM", "CSF")


class InvalidLabelError(ValueError):
    """Raised for a CDR rating outside the four legal values."""


class CDR(enum.Enum):
    NONE = 0.0
    VERY_MILD = 0.5
    MILD = 1.0
    MODERATE = 2.0

    @classmethod
    def from_value(cls, value: float | str | "CDR") -> "CDR":
        if isinstance(value, CDR):
            return value
        try:
            v = float(value)
        except (TypeError, ValueError):
            raise InvalidLabelError(f"CDR rating {value!r} is not a number") from None
        for member in cls:
            if member.value == v:
                return member
        raise InvalidLabelError(f"CDR rating {value!r} is not one of 0, 0.5, 1, 2")


class Diagnosis(enum.IntEnum):
    NON_DEMENTED = 0
    DEMENTED = 1


class Severity(enum.IntEnum):
    NON_DEMENTED = 0
    VERY_MILD = 1
    MILD = 2
    MODERATE = 3


class Sex(enum.Enum):
    MALE = "male"
    FEMALE = "female"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, value: str | None) -> "Sex":
        if value is None:
            return cls.UNKNOWN
        v = value.strip().lower()
        if v in ("m", "male"):
            return cls.MALE
        if v in ("f", "female"):
            return cls.FEMALE
        if v in ("", "u", "unknown"):
            return cls.UNKNOWN
        raise ValueError(f"unrecognised sex {value!r}")


_SEVERITY_BY_CDR = {
    CDR.NONE: Severity.NON_DEMENTED,
    CDR.VERY_MILD: Severity.VERY_MILD,
    CDR.MILD: Severity.MILD,
    CDR.MODERATE: Severity.MODERATE,
}


@dataclass(frozen=True)
class DiagnosisLabel:
    value: Diagnosis
    fine_grained: Severity

    def __post_init__(self):
        if (self.value == Diagnosis.NON_DEMENTED) != (self.fine_grained == Severity.NON_DEMENTED):
            raise InvalidLabelError(
                f"inconsistent label: {self.value.name} with {self.fine_grained.name}"
            )


def map_cdr_to_binary(cdr: float | CDR) -> DiagnosisLabel:
    """Collapse a CDR rating to NonDemented (CDR 0) vs Demented (CDR > 0)."""
    rating = CDR.from_value(cdr)
    severity = _SEVERITY_BY_CDR[rating]
    value = Diagnosis.NON_DEMENTED if rating is CDR.NONE else Diagnosis.DEMENTED
    return DiagnosisLabel(value, severity)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    cdr: CDR
    age: float
    mmse: float | None = None
    sex: Sex = Sex.UNKNOWN
    modality_paths: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.subject_id:
            raise ValueError("subject_id must be non-empty")
        object.__setattr__(self, "cdr", CDR.from_value(self.cdr))
        if not isinstance(self.sex, Sex):
            object.__setattr__(self, "sex", Sex.parse(self.sex))
        if not self.age > 0:
            raise ValueError(f"{self.subject_id}: age must be positive, got {self.age}")
        if self.mmse is not None and not 0 <= self.mmse <= 30:
            raise ValueError(f"{self.subject_id}: MMSE {self.mmse} outside [0, 30]")
        unknown = set(self.modality_paths) - set(MODALITIES)
        if unknown:
            raise ValueError(f"{self.subject_id}: unknown modalities {sorted(unknown)}")
        object.__setattr__(self, "modality_paths", dict(self.modality_paths))

    @property
    def label(self) -> DiagnosisLabel:
        return map_cdr_to_binary(self.cdr)

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "cdr": self.cdr.value,
            "age": self.age,
            "mmse": self.mmse,
            "sex": self.sex.value,
            "modality_paths": dict(self.modality_paths),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SubjectRecord":
        return cls(
            subject_id=d["subject_id"],
            cdr=CDR.from_value(d["cdr"]),
            age=float(d["age"]),
            mmse=None if d.get("mmse") is None else float(d["mmse"]),
            sex=Sex(d.get("sex", "unknown")),
            modality_paths=dict(d.get("modality_paths", {})),
        )


def check_unique_ids(records: Iterable[SubjectRecord]) -> None:
    counts = Counter(r.subject_id for r in records)
    dup = sorted(k for k, n in counts.items() if n > 1)
    if dup:
        raise ValueError(f"duplicate subject ids: {dup}")


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """A 3D scalar volume with voxel spacing in millimetres.

    ``data`` is indexed ``[x, y, z]``; ``voxels`` is the x-fastest flat buffer.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume must be 3D with positive dims, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def voxels(self) -> np.ndarray:
        return self.data.ravel(order="F")

    @classmethod
    def from_buffer(cls, buffer, dims, spacing=(1.0, 1.0, 1.0)) -> "VolumeGrid":
        buf = np.asarray(buffer)
        if buf.size != int(np.prod(dims)):
            raise ValueError(f"buffer of {buf.size} voxels does not match dims {tuple(dims)}")
        return cls(buf.reshape(tuple(dims), order="F"), spacing)

    def same_grid(self, other: "VolumeGrid") -> bool:
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing)

    def __eq__(self, other):
        if not isinstance(other, VolumeGrid):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ModalityStack:
    """Four aligned channels in the fixed order T1, GM, WM, CSF."""

    channels: tuple[VolumeGrid, VolumeGrid, VolumeGrid, VolumeGrid]
    subject_id: str

    def __post_init__(self):
        chans = tuple(self.channels)
        if len(chans) != len(MODALITIES):
            raise ValueError(f"expected {len(MODALITIES)} channels, got {len(chans)}")
        ref = chans[0]
        for name, ch in zip(MODALITIES[1:], chans[1:]):
            if not ref.same_grid(ch):
                raise ValueError(f"{name} grid {ch.dims} does not match T1 grid {ref.dims}")
            if ch.data.min() < 0 or ch.data.max() > 1:
                raise ValueError(f"{name} values must lie in [0, 1]")
        object.__setattr__(self, "channels", chans)

    def __getitem__(self, modality: str) -> VolumeGrid:
        return self.channels[MODALITIES.index(modality)]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.channels[0].dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.channels[0].spacing

    def to_array(self, dtype=np.float32) -> np.ndarray:
        """Channel-first array of shape (4, X, Y, Z)."""
        return np.stack([c.data for c in self.channels]).astype(dtype, copy=False)


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def cohort_summary(records: Iterable[SubjectRecord]) -> list[dict]:
    """Per fine-grained class: count, mean age, mean MMSE and sex counts.

    Rows appear in severity order and only for classes present. Absent MMSE
    values are skipped when averaging.
    """
    groups: dict[Severity, list[SubjectRecord]] = {}
    for r in records:
        groups.setdefault(r.label.fine_grained, []).append(r)
    rows = []
    for severity in sorted(groups):
        members = groups[severity]
        sexes = Counter(r.sex for r in members)
        rows.append(
            {
                "class": severity.name,
                "cdr": next(c.value for c, s in _SEVERITY_BY_CDR.items() if s == severity),
                "count": len(members),
                "mean_age": _mean([r.age for r in members]),
                "mean_mmse": _mean([r.mmse for r in members if r.mmse is not None]),
                "male": sexes[Sex.MALE],
                "female": sexes[Sex.FEMALE],
                "unknown": sexes[Sex.UNKNOWN],
            }
        )
    return rows


def format_summary(rows: list[dict]) -> str:
    lines = [f"{'class':<14}{'CDR':>5}{'N':>6}{'age':>8}{'MMSE':>8}{'M':>5}{'F':>5}"]
    for row in rows:
        mmse = "-" if row["mean_mmse"] is None else f"{row['mean_mmse']:.2f}"
        lines.append(
            f"{row['class']:<14}{row['cdr']:>5}{row['count']:>6}{row['mean_age']:>8.2f}"
            f"{mmse:>8}{row['male']:>5}{row['female']:>5}"
        )
    return "\n".join(lines)
