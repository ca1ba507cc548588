import numpy as np
import pytest

from leakaware.core_types import CDR, Sex, SubjectRecord


def make_records(counts, seed=0, prefix="S"):
    """Records with the given number of subjects per CDR value, in CDR order."""
    rng = np.random.default_rng(seed)
    records = []
    i = 0
    for cdr, n in counts.items():
        for _ in range(n):
            records.append(
                SubjectRecord(
                    subject_id=f"{prefix}{i:04d}",
                    cdr=CDR.from_value(cdr),
                    age=float(rng.integers(55, 95)),
                    mmse=float(rng.integers(15, 31)),
                    sex=Sex.FEMALE if i % 2 else Sex.MALE,
                )
            )
            i += 1
    return records


@pytest.fixture
def oasis_like_records():
    return make_records({0.0: 135, 0.5: 70, 1.0: 28, 2.0: 2})


ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def report_criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(name, passed, detail):
        line = f"{name} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES[name] = line
        with capsys.disabled():
            print(f"\n{line}")
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for name in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[name])
