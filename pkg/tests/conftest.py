import time

import pytest

from mitodetect.data_model import generate_synthetic_dataset, write_manifest


_ACCEPTANCE: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    yield
    item.user_properties.append(("elapsed", time.perf_counter() - start))


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    label = dict(report.user_properties).get("acceptance")
    if label is None:
        return
    elapsed = dict(report.user_properties).get("elapsed", 0.0)
    _ACCEPTANCE.setdefault(label, []).append((report.nodeid, report.outcome, elapsed))


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        item.user_properties.append(("acceptance", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: (int(s.split()[0].strip("AC:")), s)):
        runs = _ACCEPTANCE[label]
        ok = all(outcome == "passed" for _, outcome, _ in runs)
        secs = sum(t for _, _, t in runs)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}  ({len(runs)} checks, {secs:.2f}s)")


@pytest.fixture
def det_manifest():
    return generate_synthetic_dataset(1, 4, 8, "detection", 0.5)


@pytest.fixture
def cls_manifest():
    return generate_synthetic_dataset(7, 10, 10, "classification", 0.2, image_size=64)


@pytest.fixture
def det_manifest_file(tmp_path, det_manifest):
    return write_manifest(det_manifest, tmp_path / "det" / "manifest.jsonl")
