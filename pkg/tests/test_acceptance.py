"""Acceptance criteria AC-1 to AC-7, each reported as one PASS/FAIL line."""

import json
import time

import numpy as np
import pytest

from leakaware.checkpoint import load_checkpoint
from leakaware.cli import EXIT_AUDIT, EXIT_OK, main
from leakaware.ingest import load_masks, load_subject_stack, read_manifest
from leakaware.metrics import aggregate_folds, roc_auc
from leakaware.model import ModelConfig, build_model, count_parameters
from leakaware.saliency import gradcam, region_saliency_stats
from leakaware.splits import audit_leakage, stratified_subject_kfold

from conftest import make_records
from test_metrics import brute_force_auc
from test_model import closed_form_count, finite_difference_errors
from test_splits import brute_force_violators

# cv3d phantom experiment shared by AC-3, AC-5 and AC-7
CV_TRAINING = {"learning_rate": 1e-4, "batch_size": 4, "max_epochs": 20, "patience": 5}
# slice experiment on a textured cohort with a weak ventricle signal (AC-4)
SLICE_COHORT = ["--ventricle-scale", "1.15", "--cortex-thinning", "0", "--noise-sigma", "0.02",
                "--contrast-jitter", "0.1"]
SLICE_COUNT = None
SLICE_TRAINING = {"learning_rate": 1e-3, "batch_size": 32, "max_epochs": 120, "patience": 25}


def write_json(path, payload):
    path.write_text(json.dumps(payload, indent=2))
    return str(path)


@pytest.fixture(scope="module")
def cv_experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("ac3")
    start = time.perf_counter()
    assert main(["phantom-gen", "--n", "100", "--size", "32", "--seed", "0", "--out", str(root / "cohort")]) == 0
    cfg = write_json(root / "cv3d.json", {"experiment": "phantom_cv", "manifest": str(root / "cohort" / "manifest.csv"),
                                          "output_dir": str(root / "run1"), "mode": "cv3d", "seed": 0,
                                          "training": CV_TRAINING})
    code = main(["run", "--config", cfg])
    return {"root": root, "config": cfg, "code": code, "out": root / "run1" / "phantom_cv",
            "seconds": time.perf_counter() - start}


def test_ac1_fold_aggregation(report_criterion):
    start = time.perf_counter()
    acc = aggregate_folds([76.6, 72.3, 63.8, 76.6, 72.3])
    auc = aggregate_folds([0.7759, 0.7926, 0.7093, 0.8130, 0.8000])
    elapsed = time.perf_counter() - start
    ok = (abs(acc[0] - 72.34) <= 0.05 and abs(acc[1] - 4.66) <= 0.05
          and abs(auc[0] - 0.7781) <= 0.001 and abs(auc[1] - 0.0365) <= 0.001 and elapsed < 1)
    report_criterion("AC-1", ok, f"accuracy {acc[0]:.2f} +/- {acc[1]:.2f}, AUC {auc[0]:.4f} +/- {auc[1]:.4f}")
    assert ok


def test_ac2_split_invariants(report_criterion):
    start = time.perf_counter()
    records = make_records({0.0: 135, 0.5: 70, 1.0: 28, 2.0: 2})
    label = {r.subject_id: int(r.label.value) for r in records}
    plan = stratified_subject_kfold(records, 5, 0)
    per_fold = [(sum(label[s] == 0 for s in f.test), sum(label[s] == 1 for s in f.test)) for f in plan.folds]
    tested = sorted(s for f in plan.folds for s in f.test)
    ok = all(c == (27, 20) for c in per_fold) and tested == sorted(label) and audit_leakage(plan).clean

    rng = np.random.default_rng(2)
    violations = missed = 0
    for trial in range(100):
        counts = {c: int(rng.integers(0, 30)) for c in (0.0, 0.5, 1.0, 2.0)}
        counts[0.0] += 6
        counts[0.5] += 6
        cohort = make_records(counts, seed=trial)
        p = stratified_subject_kfold(cohort, int(rng.integers(2, 6)), trial)
        violations += len(audit_leakage(p).subjects) + len(brute_force_violators(p))
        # plant one test subject of the first fold into its training set
        fold = p.folds[0]
        planted = type(fold)(fold.train + (fold.test[0],), fold.val, fold.test)
        leaky = type(p)(p.k, p.seed, p.stratify_on, (planted,) + p.folds[1:])
        missed += fold.test[0] not in audit_leakage(leaky).subjects
    elapsed = time.perf_counter() - start
    ok = ok and violations == 0 and missed == 0 and elapsed < 10
    report_criterion("AC-2", ok, f"test counts {sorted(set(per_fold))}, {violations} violations over 100 cohorts, "
                                 f"{missed} planted duplicates missed, {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_ac3_phantom_cross_validation(cv_experiment, report_criterion):
    out = cv_experiment["out"]
    report = json.loads((out / "report.json").read_text())
    acc = report["aggregate"]["accuracy"]
    auc = report["aggregate"]["roc_auc"]
    ok = (cv_experiment["code"] == EXIT_OK and len(report["folds"]) == 5 and report["valid"]
          and acc["mean"] >= 90 and auc["mean"] >= 0.95)
    report_criterion("AC-3", ok, f"accuracy {acc['mean']:.2f} +/- {acc['std']:.2f}, AUC {auc['mean']:.4f} "
                                 f"+/- {auc['std']:.4f}, {cv_experiment['seconds']:.0f}s")
    assert ok


def slice_accuracies(work, cohort_seed):
    """Slice-level and subject-level slice accuracy on one textured, weak-signal cohort."""
    cohort = work / f"cohort{cohort_seed}"
    assert main(["phantom-gen", "--n", "60", "--size", "32", "--seed", str(cohort_seed), "--out", str(cohort)]
                + SLICE_COHORT) == 0
    accuracy = {}
    for mode, expected_code in (("slice_level_diagnostic", EXIT_AUDIT), ("holdout_slice_subjectlevel", EXIT_OK)):
        cfg = write_json(work / f"{mode}{cohort_seed}.json", {
            "experiment": f"{mode}_{cohort_seed}", "manifest": str(cohort / "manifest.csv"),
            "output_dir": str(work / "runs"), "mode": mode, "seed": 0, "n_slices": SLICE_COUNT,
            "training": SLICE_TRAINING, "save_checkpoints": False})
        assert main(["run", "--config", cfg]) == expected_code
        report = json.loads((work / "runs" / f"{mode}_{cohort_seed}" / "report.json").read_text())
        accuracy[mode] = report["folds"][0]["metrics"]["accuracy"]
    return accuracy["slice_level_diagnostic"], accuracy["holdout_slice_subjectlevel"]


@pytest.mark.slow
def test_ac4_slice_leakage_gap(tmp_path, report_criterion):
    start = time.perf_counter()
    # a single 9-subject test split is too noisy to read a gap from, so the gap is averaged over cohorts
    pairs = [slice_accuracies(tmp_path, seed) for seed in (1, 2, 3)]
    leaky, clean = (float(np.mean(v)) for v in zip(*pairs))
    gap = leaky - clean
    elapsed = time.perf_counter() - start
    ok = gap >= 10 and elapsed <= 20 * 60
    per_cohort = ", ".join(f"{a:.1f}/{b:.1f}" for a, b in pairs)
    report_criterion("AC-4", ok, f"slice-level {leaky:.1f}% vs subject-level {clean:.1f}%, gap {gap:.1f} points "
                                 f"(per cohort {per_cohort}), {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_ac5_saliency_concentrates_on_ventricles(cv_experiment, report_criterion):
    start = time.perf_counter()
    cohort = cv_experiment["root"] / "cohort"
    records = {r.subject_id: r for r in read_manifest(cohort / "manifest.csv")}
    plan = json.loads((cv_experiment["out"] / "plan.json").read_text())
    # the fused model is scored on the mean of its four branch maps; the T1 branch alone is reported too
    ratios = {}
    for branch in ("mean", "T1"):
        ventricle, outside = [], []
        for i, fold in enumerate(plan["folds"]):
            model, _ = load_checkpoint(cv_experiment["out"] / "checkpoints" / f"fold{i}")
            for sid in fold["test"]:
                record = records[sid]
                if record.label.value != 1:
                    continue
                stack = load_subject_stack(record, cohort)
                sal = gradcam(model, stack.to_array(), 1, branch)
                stats = region_saliency_stats(sal, load_masks(record, cohort))
                ventricle.append(stats["ventricle"]["mean"])
                outside.append(stats["outside_brain"]["mean"])
        ratios[branch] = np.mean(ventricle) / max(np.mean(outside), 1e-12)
    elapsed = time.perf_counter() - start
    ok = len(ventricle) >= 10 and ratios["mean"] >= 2 and elapsed < 120
    report_criterion("AC-5", ok, f"ventricle/outside-brain saliency ratio {ratios['mean']:.2f} (branch mean; "
                                 f"T1 branch alone {ratios['T1']:.2f}) over {len(ventricle)} Demented phantoms, "
                                 f"{elapsed:.0f}s")
    assert ok


def test_ac6_numerical_correctness(report_criterion):
    start = time.perf_counter()
    grad_errors = finite_difference_errors(seed=0)
    worst = max(grad_errors.values())

    rng = np.random.default_rng(11)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(2, 40))
        truth = rng.integers(0, 2, n)
        truth[:2] = (0, 1)
        scores = rng.integers(0, 6, n) / 6.0
        mismatches += roc_auc(truth, scores) != brute_force_auc(truth, scores)

    count = count_parameters(build_model(ModelConfig(), 0))
    oracle = closed_form_count((16, 32, 64), 4, 3, 3, 128, 2)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and mismatches == 0 and count == oracle == 312_706 and elapsed < 60
    report_criterion("AC-6", ok, f"worst gradient relative error {worst:.1e} over {len(grad_errors)} tensors, "
                                 f"{mismatches}/200 AUC mismatches, {count} parameters, {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_ac7_cli_runs_are_byte_identical(cv_experiment, report_criterion):
    root = cv_experiment["root"]
    start = time.perf_counter()
    code = main(["run", "--config", cv_experiment["config"], "--output-dir", str(root / "run2")])
    elapsed = time.perf_counter() - start
    first, second = cv_experiment["out"], root / "run2" / "phantom_cv"
    same = {name: (first / name).read_bytes() == (second / name).read_bytes()
            for name in ("plan.json", "report.json", "predictions.csv")}
    ok = code == cv_experiment["code"] == EXIT_OK and all(same.values())
    report_criterion("AC-7", ok, ", ".join(f"{k} {'identical' if v else 'differs'}" for k, v in same.items())
                     + f", rerun {elapsed:.0f}s")
    assert ok
