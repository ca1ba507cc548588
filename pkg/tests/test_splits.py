import itertools
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from leakaware.core_types import Diagnosis
from leakaware.splits import (
    Fold,
    FoldPlan,
    SplitError,
    StratificationError,
    assign_slices_by_subject,
    audit_leakage,
    check_test_coverage,
    largest_remainder,
    slice_level_split,
    stratified_subject_kfold,
    subject_level_holdout,
)

from conftest import make_records


def brute_force_violators(plan: FoldPlan) -> set[str]:
    """Independent oracle: subjects in two roles of one fold or tested twice."""
    bad = set()
    for fold in plan.folds:
        members = [s for r in ("train", "val", "test") for s in fold.role(r)]
        bad |= {s for s in members if members.count(s) > 1}
    tests = [s for f in plan.folds for s in f.test]
    bad |= {s for s in tests if tests.count(s) > 1}
    return bad


def binary_counts(plan_fold, by_id):
    return [sum(by_id[s] == c for s in plan_fold) for c in (Diagnosis.NON_DEMENTED, Diagnosis.DEMENTED)]


def test_table_cohort_gives_27_plus_20(oasis_like_records):
    plan = stratified_subject_kfold(oasis_like_records, 5, 0)
    by_id = {r.subject_id: r.label.value for r in oasis_like_records}
    for fold in plan.folds:
        assert binary_counts(fold.test, by_id) == [27, 20]
        assert len(fold.train) + len(fold.val) + len(fold.test) == 235
        nd, de = binary_counts(fold.val, by_id)
        assert nd >= 1 and de >= 1
    assert check_test_coverage(plan, by_id) == []
    assert audit_leakage(plan).clean


def test_kfold_preconditions(oasis_like_records):
    with pytest.raises(ValueError):
        stratified_subject_kfold(oasis_like_records, 1, 0)
    with pytest.raises(StratificationError, match="MODERATE"):
        stratified_subject_kfold(oasis_like_records, 5, 0, stratify_on="fine_grained")


def test_kfold_determinism(oasis_like_records):
    a = stratified_subject_kfold(oasis_like_records, 5, 7)
    b = stratified_subject_kfold(oasis_like_records, 5, 7)
    c = stratified_subject_kfold(oasis_like_records, 5, 8)
    assert a.to_json() == b.to_json()
    assert a != c


def test_plan_json_roundtrip(oasis_like_records):
    plan = stratified_subject_kfold(oasis_like_records, 5, 3)
    data = json.loads(plan.to_json())
    assert set(data) == {"k", "seed", "stratify_on", "folds"}
    assert set(data["folds"][0]) == {"train", "val", "test"}
    assert FoldPlan.from_dict(data) == plan


def test_planted_duplicate_detected(oasis_like_records):
    plan = stratified_subject_kfold(oasis_like_records, 5, 0)
    victim = plan.folds[2].test[0]
    bad_fold = replace(plan.folds[2], train=plan.folds[2].train + (victim,))
    bad = replace(plan, folds=plan.folds[:2] + (bad_fold,) + plan.folds[3:])
    report = audit_leakage(bad)
    assert not report.clean
    assert len(report.violations) == 1
    v = report.violations[0]
    assert v.subject_id == victim and v.fold == 2 and set(v.roles) == {"train", "test"}


def test_cross_fold_test_overlap_detected():
    plan = FoldPlan(2, 0, "binary", (Fold(("a",), ("b",), ("c", "d")), Fold(("b",), ("a",), ("d",))))
    report = audit_leakage(plan)
    assert report.subjects == {"d"}
    assert report.violations[0].fold is None


cohort_counts = st.tuples(st.integers(5, 60), st.integers(5, 60))


@settings(max_examples=120, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(counts=cohort_counts, k=st.integers(2, 5), seed=st.integers(0, 2**32 - 1),
       vf=st.sampled_from([0.05, 0.1, 0.2]))
def test_kfold_properties(counts, k, seed, vf):
    records = make_records({0.0: counts[0], 0.5: counts[1]}, seed=seed % 1000)
    plan = stratified_subject_kfold(records, k, seed, vf)
    ids = [r.subject_id for r in records]
    assert audit_leakage(plan).clean
    assert brute_force_violators(plan) == set()
    tested = sorted(s for f in plan.folds for s in f.test)
    assert tested == sorted(ids)
    by_id = {r.subject_id: r.label.value for r in records}
    for fold in plan.folds:
        assert set(fold.train) | set(fold.val) | set(fold.test) == set(ids)
        for c, n in zip((0, 1), counts):
            got = sum(by_id[s] == c for s in fold.test)
            assert abs(got - n / k) <= 1
        assert {by_id[s] for s in fold.val} == {0, 1}


@settings(max_examples=100, deadline=None)
@given(counts=cohort_counts, seed=st.integers(0, 10_000), pick=st.data())
def test_any_planted_defect_is_caught(counts, seed, pick):
    records = make_records({0.0: counts[0], 1.0: counts[1]})
    plan = stratified_subject_kfold(records, 3, seed)
    i = pick.draw(st.integers(0, 2))
    j = pick.draw(st.integers(0, 2))
    src_role, dst_role = pick.draw(st.sampled_from(list(itertools.permutations(("train", "val", "test"), 2))))
    victim = pick.draw(st.sampled_from(plan.folds[i].role(src_role)))
    target = plan.folds[j] if (j != i or dst_role != src_role) else plan.folds[i]
    if j == i:
        new = replace(target, **{dst_role: target.role(dst_role) + (victim,)})
    else:
        new = replace(target, test=target.test + (victim,))
    folds = list(plan.folds)
    folds[j] = new
    bad = replace(plan, folds=tuple(folds))
    expected = brute_force_violators(bad)
    report = audit_leakage(bad)
    assert victim in report.subjects
    assert report.subjects == expected


def test_largest_remainder_rule():
    assert largest_remainder(10, (0.7, 0.15, 0.15)) == [7, 2, 1]
    assert largest_remainder(100, (0.8, 0.1, 0.1)) == [80, 10, 10]
    assert largest_remainder(3, (1 / 3, 1 / 3, 1 / 3)) == [1, 1, 1]


@given(st.integers(0, 500), st.lists(st.integers(1, 20), min_size=3, max_size=3))
def test_largest_remainder_sums(n, weights):
    fr = [w / sum(weights) for w in weights]
    counts = largest_remainder(n, fr)
    assert sum(counts) == n
    assert all(abs(c - n * f) < 1 for c, f in zip(counts, fr))


def test_holdout_single_class_ten():
    records = make_records({0.0: 10})
    plan = subject_level_holdout(records, (0.70, 0.15, 0.15), 0)
    (fold,) = plan.folds
    assert (len(fold.train), len(fold.val), len(fold.test)) == (7, 2, 1)
    assert audit_leakage(plan).clean


def test_holdout_large_cohort_test_size():
    records = make_records({0.0: 210, 0.5: 110, 1.0: 44, 2.0: 2})
    plan = subject_level_holdout(records, (0.70, 0.15, 0.15), 1)
    assert abs(len(plan.folds[0].test) - 366 * 0.15) <= 2
    assert audit_leakage(plan).clean


def test_holdout_errors_and_warnings():
    with pytest.raises(SplitError):
        subject_level_holdout(make_records({0.0: 10}), (0.5, 0.5, 0.5))
    with pytest.raises(SplitError):
        subject_level_holdout([], (0.7, 0.15, 0.15))
    with pytest.warns(UserWarning, match="empty partition"):
        subject_level_holdout(make_records({0.0: 3}), (0.7, 0.15, 0.15))


def test_slice_level_split_leaks():
    keys = [(f"s{i % 2}", 2, i) for i in range(100)]
    a = slice_level_split(keys, (0.8, 0.1, 0.1), 4)
    assert a.counts() == {"train": 80, "val": 10, "test": 10}
    assert audit_leakage(a).subjects == {"s0", "s1"}
    assert a == slice_level_split(keys, (0.8, 0.1, 0.1), 4)
    single = slice_level_split([("only", 2, i) for i in range(10)], (0.8, 0.1, 0.1), 0)
    assert not audit_leakage(single).clean
    with pytest.raises(SplitError):
        slice_level_split([], (0.8, 0.1, 0.1))


def test_slice_level_violations_on_twenty_subjects():
    keys = [(f"s{i:02d}", 2, j) for i in range(20) for j in range(10)]
    report = audit_leakage(slice_level_split(keys, (0.8, 0.1, 0.1), 0))
    # oracle: count subjects whose slices fall in more than one partition
    assignment = slice_level_split(keys, (0.8, 0.1, 0.1), 0)
    spread = {}
    for (sid, _, _), part in assignment.partitions.items():
        spread.setdefault(sid, set()).add(part)
    expected = {s for s, parts in spread.items() if len(parts) > 1}
    assert report.subjects == expected and len(expected) > 10


def test_subject_level_slices_stay_together():
    records = make_records({0.0: 12, 0.5: 8})
    plan = subject_level_holdout(records, (0.7, 0.15, 0.15), 2)
    keys = [(r.subject_id, 2, j) for r in records for j in range(6)]
    a = assign_slices_by_subject(keys, plan)
    assert a.mode == "subject_level" and audit_leakage(a).clean
    with pytest.raises(SplitError):
        assign_slices_by_subject(keys + [("ghost", 2, 0)], plan)
