"""Per-fold training with best-checkpoint selection, and K-fold orchestration."""

from __future__ import annotations

import contextlib
import copy
import csv
import io
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core_types import SubjectRecord
from .metrics import aggregate_folds, compute_metrics
from .model import FusionNet, ModelConfig, build_model
from .splits import FoldPlan, LeakageReport, audit_leakage, check_test_coverage, stratified_subject_kfold

log = logging.getLogger(__name__)

METRICS = ("accuracy", "roc_auc", "macro_f1")


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    pass


class LeakageError(RuntimeError):
    def __init__(self, report: LeakageReport):
        names = sorted(report.subjects)
        super().__init__(f"leakage audit failed for {len(names)} subject(s): {names[:10]}")
        self.report = report


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 60
    patience: int = 10
    class_weighting: str = "none"
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 < self.patience < self.max_epochs:
            raise ValueError("patience must satisfy 0 < patience < max_epochs")
        if self.class_weighting not in ("none", "inverse_frequency"):
            raise ValueError(f"class_weighting must be 'none' or 'inverse_frequency', got {self.class_weighting!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class EarlyStopping:
    """Tracks the minimum validation loss; ties keep the earlier epoch."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_epoch: int | None = None
        self.best_loss = float("inf")
        self.last_epoch = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; returns True when training should stop."""
        self.last_epoch = epoch
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            return False
        return epoch - self.best_epoch >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.last_epoch


@dataclass
class FoldCurves:
    best_epoch: int
    train_loss: list[float]
    val_loss: list[float]

    @property
    def epochs_trained(self) -> int:
        return len(self.train_loss)


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def _as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def class_weights(y: np.ndarray, n_classes: int, scheme: str) -> torch.Tensor | None:
    if scheme == "none":
        return None
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    w = np.divide(len(y), n_classes * counts, out=np.zeros(n_classes), where=counts > 0)
    return torch.as_tensor(w, dtype=torch.float32)


def _prepare(model: FusionNet, x: torch.Tensor) -> torch.Tensor:
    if model.config.spatial_rank == 3:
        return x.contiguous(memory_format=torch.channels_last_3d)
    return x


@torch.no_grad()
def predict_proba(model: FusionNet, x, batch_size: int = 8) -> np.ndarray:
    model.eval()
    x = _as_tensor(x)
    out = [F.softmax(model(_prepare(model, x[i : i + batch_size])), dim=1) for i in range(0, len(x), batch_size)]
    return torch.cat(out).double().numpy()


@torch.no_grad()
def evaluate_loss(model: FusionNet, x, y, batch_size: int = 8) -> float:
    model.eval()
    x, y = _as_tensor(x), torch.as_tensor(np.asarray(y), dtype=torch.long)
    total = 0.0
    for i in range(0, len(x), batch_size):
        logits = model(_prepare(model, x[i : i + batch_size]))
        total += F.cross_entropy(logits, y[i : i + batch_size], reduction="sum").item()
    return total / len(x)


def train_fold(train_x, train_y, val_x, val_y, model_config: ModelConfig, training_config: TrainingConfig,
               model_seed: int | None = None, on_epoch: Callable | None = None):
    """Train one fresh model and return it loaded with its best checkpoint.

    The checkpoint with the lowest validation loss is retained (earlier epoch on
    ties); training stops after ``patience`` epochs without improvement.
    Returns ``(model, FoldCurves)``.
    """
    cfg = training_config
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    if len(np.unique(train_y)) < 2:
        raise TrainingError(f"training set has a single class {np.unique(train_y).tolist()}")
    if len(val_y) == 0:
        raise TrainingError("validation set is empty")
    if model_config.n_classes == 2 and len(np.unique(val_y)) < 2:
        raise TrainingError("validation set must contain both classes")

    seed = cfg.seed if model_seed is None else model_seed
    with deterministic_mode(cfg.deterministic):
        torch.manual_seed(seed)
        model = build_model(model_config, seed)
        if model_config.spatial_rank == 3:
            model = model.to(memory_format=torch.channels_last_3d)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
        weight = class_weights(train_y, model_config.n_classes, cfg.class_weighting)
        x_all, y_all = _as_tensor(train_x), torch.as_tensor(train_y)
        gen = torch.Generator().manual_seed(seed)
        stopper = EarlyStopping(cfg.patience)
        best_state = None
        train_curve, val_curve = [], []

        for epoch in range(1, cfg.max_epochs + 1):
            model.train()
            order = torch.randperm(len(x_all), generator=gen)
            running = 0.0
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                logits = model(_prepare(model, x_all[idx]))
                loss = F.cross_entropy(logits, y_all[idx], weight=weight)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, batch {i // cfg.batch_size}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                running += loss.item() * len(idx)
            train_loss = running / len(x_all)
            val_loss = evaluate_loss(model, val_x, val_y, cfg.batch_size)
            if not np.isfinite(val_loss):
                raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
            train_curve.append(train_loss)
            val_curve.append(val_loss)
            stop = stopper.update(epoch, val_loss)
            if stopper.improved:
                best_state = copy.deepcopy(model.state_dict())
            log.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
            if on_epoch is not None:
                on_epoch(epoch, train_loss, val_loss)
            if stop:
                break
        model.load_state_dict(best_state)
        model.eval()
    return model, FoldCurves(stopper.best_epoch, train_curve, val_curve)


# -- reports ------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    train_loss: list[float]
    val_loss: list[float]
    metrics: dict
    subject_ids: list[str]
    truth: list[int]
    probabilities: list[list[float]]
    model: FusionNet | None = field(default=None, repr=False, compare=False)

    @property
    def epochs_trained(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "best_epoch": self.best_epoch,
            "epochs_trained": self.epochs_trained,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "metrics": self.metrics,
            "predictions": [
                {"subject_id": s, "truth": t, "probabilities": p}
                for s, t, p in zip(self.subject_ids, self.truth, self.probabilities)
            ],
        }


@dataclass
class EvaluationReport:
    folds: list[FoldResult]
    provenance: dict
    audit: LeakageReport
    expected_folds: int

    @property
    def aggregate(self) -> dict:
        out = {}
        for name in METRICS:
            vals = [f.metrics[name] for f in self.folds if f.metrics.get(name) is not None]
            if vals:
                mean, std = aggregate_folds(vals)
                out[name] = {"mean": mean, "std": std, "n_folds": len(vals)}
        return out

    @property
    def valid(self) -> bool:
        return self.audit.clean and len(self.folds) == self.expected_folds

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "provenance": self.provenance,
            "audit": self.audit.to_dict(),
            "aggregate": self.aggregate,
            "folds": [f.to_dict() for f in self.folds],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def predictions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject_id", "fold", "truth", "p_demented"])
        for f in self.folds:
            for sid, t, p in zip(f.subject_ids, f.truth, f.probabilities):
                w.writerow([sid, f.fold, t, repr(float(1.0 - p[0]))])
        return buf.getvalue()

    def curves_csv(self, fold: int) -> str:
        f = self.folds[fold]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, (tl, vl) in enumerate(zip(f.train_loss, f.val_loss), start=1):
            w.writerow([e, repr(tl), repr(vl)])
        return buf.getvalue()


def evaluate_fold(fold_index, model, curves, test_ids, test_x, test_y, batch_size=8) -> FoldResult:
    probs = predict_proba(model, test_x, batch_size)
    return FoldResult(
        fold=fold_index,
        best_epoch=curves.best_epoch,
        train_loss=curves.train_loss,
        val_loss=curves.val_loss,
        metrics=compute_metrics(test_y, probs),
        subject_ids=list(test_ids),
        truth=[int(t) for t in test_y],
        probabilities=probs.tolist(),
        model=model,
    )


def _run_fold(args):
    i, fold, data, labels, model_config, training_config = args

    def take(ids):
        return np.stack([data[s] for s in ids]), np.array([labels[s] for s in ids])

    tx, ty = take(fold.train)
    vx, vy = take(fold.val)
    sx, sy = take(fold.test)
    cfg = replace(training_config, seed=training_config.seed + i)
    model, curves = train_fold(tx, ty, vx, vy, model_config, cfg)
    log.info("fold %d: best epoch %d of %d", i, curves.best_epoch, curves.epochs_trained)
    return evaluate_fold(i, model, curves, fold.test, sx, sy, training_config.batch_size)


def cross_validate(records: Sequence[SubjectRecord], data: Mapping[str, np.ndarray], k: int, seed: int,
                   model_config: ModelConfig, training_config: TrainingConfig, val_fraction: float = 0.10,
                   plan: FoldPlan | None = None, jobs: int = 1) -> EvaluationReport:
    """Subject-level K-fold cross-validation of the fusion network.

    ``data`` maps subject id to a (channels, X, Y, Z) array. The plan (built
    here unless injected) is audited before anything is trained; a dirty
    audit raises :class:`LeakageError`. Fold i trains with seed
    ``training_config.seed + i``.
    """
    stratify_on = "binary" if model_config.n_classes == 2 else "fine_grained"
    if plan is None:
        plan = stratified_subject_kfold(records, k, seed, val_fraction, stratify_on)
    audit = audit_leakage(plan)
    if not audit.clean:
        raise LeakageError(audit)
    problems = check_test_coverage(plan, [r.subject_id for r in records])
    if problems:
        raise ValueError("fold plan does not cover the cohort: " + "; ".join(problems))

    labels = {
        r.subject_id: int(r.label.value if stratify_on == "binary" else r.label.fine_grained) for r in records
    }
    tasks = [(i, fold, data, labels, model_config, training_config) for i, fold in enumerate(plan.folds)]
    if jobs > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx, initializer=torch.set_num_threads,
                                 initargs=(1,)) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    provenance = {
        "k": plan.k,
        "seed": plan.seed,
        "stratify_on": plan.stratify_on,
        "model_config": model_config.to_dict(),
        "training_config": training_config.to_dict(),
    }
    return EvaluationReport(results, provenance, audit, expected_folds=len(plan.folds))
