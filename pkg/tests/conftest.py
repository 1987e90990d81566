import numpy as np
import pytest

from helpers import CRITERIA, small_net


@pytest.fixture
def net64():
    return small_net()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------- #
# Desk-scale pipeline, built once per session and shared by the measured tests
# --------------------------------------------------------------------------- #

def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def desk_config(**sections):
    from tlguard.config import from_dict

    data = {"report": {"timing": "off"}}
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return from_dict(data)


class DeskRun:
    """Default-config pipeline: models, attack corpora and the k=5 report."""

    def __init__(self):
        import time

        from tlguard.experiment import Artifacts, attack_corpora, run_experiment

        self.cfg = desk_config()
        t0 = time.perf_counter()
        self.art = Artifacts().ensure(self.cfg, snapshots=True)
        self.corpora = attack_corpora(self.cfg, self.art)
        self.report = run_experiment(self.cfg, self.art, self.corpora)
        self.seconds = time.perf_counter() - t0

    @property
    def test(self):
        return self.art.subset.test

    def evaluator(self, registry=None, corpora=None):
        from tlguard.experiment import Evaluator

        return Evaluator(self.art.student, registry or self.art.registry, self.test, corpora or self.corpora)


@pytest.fixture(scope="session")
def desk():
    return DeskRun()
