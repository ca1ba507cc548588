"""Command-line entry point: ``leakaware phantom-gen | run | gradcam | audit``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error,
3 leakage audit failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_AUDIT = 3

DATA_ROOT_ENV = "LEAKAWARE_DATA_ROOT"
RUN_MODES = ("cv3d", "holdout_slice_subjectlevel", "slice_level_diagnostic")

log = logging.getLogger("leakaware")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# -- run configuration --------------------------------------------------------

@dataclass
class RunConfig:
    experiment: str
    manifest: str
    output_dir: str
    mode: str = "cv3d"
    data_root: str | None = None
    seed: int = 0
    k: int = 5
    val_fraction: float = 0.10
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    slice_axis: int = 2
    n_slices: int | None = None
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    deterministic: bool = True
    jobs: int = 1
    plan: str | None = None
    save_checkpoints: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config", "top level must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, f"unknown field; expected one of {sorted(known)}")
        for key in ("experiment", "manifest", "output_dir"):
            if not d.get(key):
                raise ConfigError(key, "required field is missing")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.mode not in RUN_MODES:
            raise ConfigError("mode", f"{self.mode!r} is not one of {list(RUN_MODES)}")
        if not isinstance(self.experiment, str) or "/" in self.experiment or self.experiment in (".", ".."):
            raise ConfigError("experiment", "must be a plain directory name")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed", "must be an integer")
        if not isinstance(self.k, int) or self.k < 2:
            raise ConfigError("k", "must be an integer >= 2")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction", "must lie in (0, 1)")
        fr = tuple(self.fractions)
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1) > 1e-6:
            raise ConfigError("fractions", "need three non-negative (train, val, test) fractions summing to 1")
        self.fractions = fr
        if self.slice_axis not in (0, 1, 2):
            raise ConfigError("slice_axis", "must be 0, 1 or 2")
        if not isinstance(self.jobs, int) or self.jobs < 1:
            raise ConfigError("jobs", "must be a positive integer")
        for name in ("model", "training"):
            if not isinstance(getattr(self, name), dict):
                raise ConfigError(name, "overrides must be a JSON object")

    def resolved_data_root(self) -> Path:
        env = os.environ.get(DATA_ROOT_ENV)
        if env:
            return Path(env)
        if self.data_root:
            return Path(self.data_root)
        return Path(self.manifest).parent

    def model_config(self):
        from .model import ModelConfig, slice_config

        try:
            if self.mode == "cv3d":
                return ModelConfig.from_dict({**ModelConfig().to_dict(), **self.model})
            return slice_config(**self.model)
        except (TypeError, ValueError) as exc:
            raise ConfigError("model", str(exc)) from None

    def training_config(self):
        from .train_eval import TrainingConfig

        params = {"seed": self.seed, "deterministic": self.deterministic, **self.training}
        try:
            return TrainingConfig(**params)
        except (TypeError, ValueError) as exc:
            raise ConfigError("training", str(exc)) from None


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
    if isinstance(raw, dict):
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(raw)


# -- artifact helpers ---------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_artifact_manifest(out_dir: Path) -> Path:
    """``artifacts.json`` listing every file under ``out_dir`` with its size and SHA-256."""
    target = out_dir / "artifacts.json"
    entries = []
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p != target:
            entries.append({"path": p.relative_to(out_dir).as_posix(), "bytes": p.stat().st_size,
                            "sha256": _sha256(p)})
    target.write_text(json.dumps({"files": entries}, indent=2, sort_keys=True) + "\n")
    return target


def plot_curves(train_loss, val_loss, best_epoch: int, path: Path, title: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = np.arange(1, len(train_loss) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    ax.plot(epochs, train_loss, label="train")
    ax.plot(epochs, val_loss, label="validation")
    ax.axvline(best_epoch, color="gray", linestyle="--", linewidth=1, label=f"best ({best_epoch})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    # no Software tag so the bytes depend only on the data
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_fold_bars(report, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    acc = [f.metrics["accuracy"] for f in report.folds]
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    ax.bar([str(f.fold) for f in report.folds], acc, color="tab:blue")
    ax.set_xlabel("fold")
    ax.set_ylabel("test accuracy (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def _write_report_files(report, out: Path) -> None:
    (out / "report.json").write_text(report.to_json())
    (out / "audit.json").write_text(report.audit.to_json())
    for i, f in enumerate(report.folds):
        (out / f"curves_fold{f.fold}.csv").write_text(report.curves_csv(i))
        plot_curves(f.train_loss, f.val_loss, f.best_epoch, out / f"curves_fold{f.fold}.png", f"fold {f.fold}")


def _load_cohort(cfg: RunConfig):
    from .ingest import load_subject_stack, read_manifest

    manifest = Path(cfg.manifest)
    if not manifest.exists():
        raise ConfigError("manifest", f"{manifest} does not exist")
    records = read_manifest(manifest)
    root = cfg.resolved_data_root()
    data = {r.subject_id: load_subject_stack(r, root).to_array() for r in records}
    return records, data


def execute_run(cfg: RunConfig) -> int:
    """Run one experiment; returns the process exit code."""
    from .checkpoint import save_checkpoint
    from .diagnostic import run_slice_diagnostic
    from .splits import FoldPlan, stratified_subject_kfold
    from .train_eval import LeakageError, cross_validate

    model_config = cfg.model_config()
    training_config = cfg.training_config()
    out = Path(cfg.output_dir) / cfg.experiment
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("output_dir", f"not writable: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError("output_dir", f"{out} is not writable")

    records, data = _load_cohort(cfg)
    (out / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n")

    if cfg.mode == "cv3d":
        plan = None
        if cfg.plan:
            try:
                plan = FoldPlan.from_dict(json.loads(Path(cfg.plan).read_text()))
            except (OSError, ValueError, KeyError, TypeError) as exc:
                raise ConfigError("plan", f"cannot load fold plan: {exc}") from None
        if plan is not None:
            (out / "plan.json").write_text(plan.to_json())
        try:
            report = cross_validate(records, data, cfg.k, cfg.seed, model_config, training_config,
                                    cfg.val_fraction, plan=plan, jobs=cfg.jobs)
        except LeakageError as exc:
            (out / "audit.json").write_text(exc.report.to_json())
            write_artifact_manifest(out)
            log.error("%s", exc)
            return EXIT_AUDIT
        if plan is None:
            plan = stratified_subject_kfold(records, cfg.k, cfg.seed, cfg.val_fraction,
                                            report.provenance["stratify_on"])
            (out / "plan.json").write_text(plan.to_json())
        _write_report_files(report, out)
        (out / "predictions.csv").write_text(report.predictions_csv())
        plot_fold_bars(report, out / "fold_accuracy.png")
        if cfg.save_checkpoints:
            for f in report.folds:
                save_checkpoint(f.model, out / "checkpoints" / f"fold{f.fold}",
                                {"experiment": cfg.experiment, "fold": f.fold, "best_epoch": f.best_epoch})
    else:
        mode = "slice_level" if cfg.mode == "slice_level_diagnostic" else "subject_level"
        try:
            diag = run_slice_diagnostic(records, data, mode, cfg.seed, training_config, model_config,
                                        cfg.fractions, cfg.slice_axis, cfg.n_slices)
        except LeakageError as exc:
            (out / "audit.json").write_text(exc.report.to_json())
            write_artifact_manifest(out)
            log.error("%s", exc)
            return EXIT_AUDIT
        report = diag.report
        assignment = {"mode": diag.assignment.mode,
                      "partitions": {role: [list(key) for key in sorted(diag.assignment.keys_in(role))]
                                     for role in ("train", "val", "test")}}
        (out / "slices.json").write_text(json.dumps(assignment, indent=2, sort_keys=True) + "\n")
        _write_report_files(report, out)
        (out / "slice_predictions.csv").write_text(diag.slice_predictions_csv())
        if cfg.save_checkpoints:
            save_checkpoint(report.folds[0].model, out / "checkpoints" / "fold0",
                            {"experiment": cfg.experiment, "mode": cfg.mode})

    write_artifact_manifest(out)
    summary = ", ".join(f"{k} {v['mean']:.4f} +/- {v['std']:.4f}" for k, v in report.aggregate.items())
    print(f"{cfg.experiment} [{cfg.mode}] {summary}")
    if not report.audit.clean:
        print(f"leakage audit flagged {len(report.audit.subjects)} subject(s); report marked invalid",
              file=sys.stderr)
        return EXIT_AUDIT
    return EXIT_OK


# -- commands -----------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    from .core_types import cohort_summary, format_summary
    from .phantom import generate_phantom_cohort, write_phantom_cohort

    if args.n < 2:
        print(f"error: --n must be at least 2, got {args.n}", file=sys.stderr)
        return EXIT_CONFIG
    if not 0 <= args.demented_frac <= 1:
        print("error: --demented-frac must lie in [0, 1]", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cohort = generate_phantom_cohort(
            args.n, args.demented_frac, args.seed, grid=(args.size,) * 3,
            ventricle_scale=args.ventricle_scale, cortex_thinning=args.cortex_thinning,
            noise_sigma=args.noise_sigma, anatomy_jitter=args.anatomy_jitter,
            contrast_jitter=args.contrast_jitter,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = write_phantom_cohort(cohort, args.out)
    except OSError as exc:
        print(f"error: cannot write cohort to {args.out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(format_summary(cohort_summary(cohort.records)))
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = {"seed": args.seed, "output_dir": args.output_dir, "jobs": args.jobs}
    cfg = load_run_config(args.config, overrides)
    return execute_run(cfg)


def cmd_gradcam(args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .core_types import VolumeGrid
    from .ingest import load_masks, load_subject_stack, read_manifest
    from .nifti import write_nifti_volume
    from .saliency import (MEAN_OF_BRANCHES, PLANES, SaliencyError, export_overlay, gradcam,
                           region_saliency_stats)

    try:
        model, _ = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.branch != MEAN_OF_BRANCHES and args.branch not in model.config.modalities:
        print(f"error: --branch {args.branch!r} is not one of {list(model.config.modalities)} or 'mean'",
              file=sys.stderr)
        return EXIT_CONFIG
    if model.config.spatial_rank != 3:
        print("error: gradcam export needs a volumetric (3D) checkpoint", file=sys.stderr)
        return EXIT_CONFIG
    manifest = Path(args.manifest)
    if not manifest.exists():
        print(f"error: manifest {manifest} does not exist", file=sys.stderr)
        return EXIT_CONFIG
    records = {r.subject_id: r for r in read_manifest(manifest)}
    if args.subject not in records:
        print(f"error: subject {args.subject!r} not in {manifest}", file=sys.stderr)
        return EXIT_CONFIG
    record = records[args.subject]
    root = Path(os.environ.get(DATA_ROOT_ENV) or args.data_root or manifest.parent)
    stack = load_subject_stack(record, root)
    target = args.target_class if args.target_class is not None else int(record.label.value)
    axis = PLANES.get(args.plane)
    if axis is None:
        print(f"error: --plane must be one of {sorted(PLANES)}", file=sys.stderr)
        return EXIT_CONFIG
    index = args.index if args.index is not None else stack.dims[axis] // 2
    try:
        sal = gradcam(model, stack.to_array(), target, args.branch)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{args.subject}_{args.branch}_class{target}"
        write_nifti_volume(VolumeGrid(sal.values.astype(np.float32), stack.spacing), out / f"{stem}_saliency.nii.gz")
        export_overlay(stack["T1"], sal, args.plane, index, out / f"{stem}_{args.plane}{index}.png")
    except SaliencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    masks = load_masks(record, root)
    if masks is not None:
        stats = {
            "subject_id": args.subject,
            "branch": args.branch,
            "target_class": target,
            "source_layer": sal.source_layer,
            "degenerate": sal.degenerate,
            "regions": region_saliency_stats(sal, masks),
        }
        (out / f"{stem}_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(f"wrote saliency for {args.subject} to {out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    from .splits import FoldPlan, audit_leakage

    try:
        plan = FoldPlan.from_dict(json.loads(Path(args.plan).read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: cannot load fold plan {args.plan}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = audit_leakage(plan)
    sys.stdout.write(report.to_json())
    return EXIT_OK if report.clean else EXIT_AUDIT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leakaware", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-fold progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="write a synthetic cohort with ground-truth masks")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--demented-frac", type=float, default=0.43)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--ventricle-scale", type=float, default=1.6)
    p.add_argument("--cortex-thinning", type=int, default=1)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--anatomy-jitter", type=float, default=0.08)
    p.add_argument("--contrast-jitter", type=float, default=0.0)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--output-dir", help="override the config output_dir")
    p.add_argument("--jobs", type=int, help="fold-level worker processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcam", help="saliency volume, overlay and region stats for one subject")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--data-root")
    p.add_argument("--subject", required=True)
    p.add_argument("--branch", default="T1")
    p.add_argument("--class", dest="target_class", type=int, help="defaults to the subject's true class")
    p.add_argument("--plane", default="axial")
    p.add_argument("--index", type=int, help="slice index; defaults to the centre")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("audit", help="check a saved fold plan for subject leakage")
    p.add_argument("--plan", required=True)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .ingest import ManifestError
    from .model import ConfigError as ModelConfigError

    try:
        return args.func(args)
    except (ConfigError, ManifestError, ModelConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
