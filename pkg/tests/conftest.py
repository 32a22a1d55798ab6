import numpy as np
import pytest

from gmmflow.gaussian import Gaussian


def random_spd(rng: np.random.Generator, d: int, lo: float = 0.2, hi: float = 2.0) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    w = rng.uniform(lo, hi, size=d)
    m = (q * w) @ q.T
    return 0.5 * (m + m.T)


def random_gaussian(rng: np.random.Generator, d: int, spread: float = 2.0) -> Gaussian:
    return Gaussian(rng.normal(scale=spread, size=d), random_spd(rng, d))


@pytest.fixture
def rng():
    return np.random.default_rng(42)


# ---------------------------------------------------------------------------
# acceptance-criterion reporting

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class CriterionRecord:
    """Collects named checks for one criterion; the criterion passes when all do."""

    def __init__(self, number: int):
        self.number = number
        self.checks: list[tuple[str, bool, str]] = []

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        self.checks.append((name, bool(ok), detail))
        return bool(ok)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(ok for _, ok, _ in self.checks)

    def summary(self) -> str:
        return "; ".join(f"{name}{'' if ok else ' [FAIL]'}: {detail}" for name, ok, detail in self.checks)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.checks.append(("error", False, f"{exc_type.__name__}: {exc}"))
        ACCEPTANCE[self.number] = (self.passed, self.summary())
        print(f"criterion {self.number}: {'PASS' if self.passed else 'FAIL'} | {self.summary()}")
        return False

    def assert_passed(self):
        failed = [f"{name}: {detail}" for name, ok, detail in self.checks if not ok]
        assert not failed, "; ".join(failed)


@pytest.fixture
def criterion():
    return CriterionRecord


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
