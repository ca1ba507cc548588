"""Leakage-aware multimodal MRI dementia classification with subject-level evaluation."""

from .core_types import MODALITIES, SubjectRecord, VolumeGrid, ModalityStack
from .model import FusionNet, ModelConfig, build_model
from .splits import audit_leakage, stratified_subject_kfold
from .train_eval import EvaluationReport, TrainingConfig, cross_validate

__version__ = "0.1.0"

__all__ = [
    "MODALITIES",
    "SubjectRecord",
    "VolumeGrid",
    "ModalityStack",
    "FusionNet",
    "ModelConfig",
    "build_model",
    "audit_leakage",
    "stratified_subject_kfold",
    "EvaluationReport",
    "TrainingConfig",
    "cross_validate",
]
