import numpy as np
import pytest

from uflmatch.dictionary import learn_kmeans
from uflmatch.preprocess import (
    apply_whitening,
    extract_random_patches,
    fit_whitening,
    normalize_patches,
)
from uflmatch.synth import texture


def train_dictionary(m, n_patches=20_000, seed=0, patch_width=11):
    rng = np.random.default_rng(seed)
    images = [texture((96, 96), rng) for _ in range(4)]
    patches = normalize_patches(extract_random_patches(images, n_patches, patch_width, seed))
    white = fit_whitening(patches)
    return learn_kmeans(apply_whitening(white, patches), m, 10, seed, white)


@pytest.fixture(scope="session")
def small_dict():
    """32-word K-means dictionary over 11x11 patches."""
    return train_dictionary(32)


@pytest.fixture(scope="session")
def dict100():
    return train_dictionary(100, n_patches=40_000)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    if report.when != "call" and report.passed:
        return
    name = report.nodeid.split("::")[-1]
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    outcome = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    if name not in _acceptance or outcome != "PASS":
        _acceptance[name] = (outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, (outcome, detail) in sorted(_acceptance.items()):
        line = f"{outcome}  {name}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
