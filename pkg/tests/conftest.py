import os

# Every FFT in the test run re-checks Parseval's identity.
os.environ.setdefault("CANFOREST_CHECK_PARSEVAL", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import HealthCheck, settings  # noqa: E402

from canforest.features import LabeledDataset  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

NAMES = ("AttackFree", "DoS", "Fuzzy", "Impersonation")


def blobs(n_per_class=30, n_classes=4, spread=0.05, seed=0, names=NAMES) -> LabeledDataset:
    """Well-separated Gaussian blobs in [0, 1]^9, one per class."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(n_classes, 9))
    X = np.vstack([c + spread * rng.standard_normal((n_per_class, 9)) for c in centers])
    y = np.repeat(np.arange(n_classes), n_per_class)
    return LabeledDataset(np.clip(X, 0, 1), y, names[:n_classes])


@pytest.fixture
def blob_data():
    return blobs()


# One line per acceptance criterion, echoed again at the end of the run.
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
