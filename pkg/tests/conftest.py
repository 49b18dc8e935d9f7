import pytest
import torch

from retifuse.loss_d2s import FeatureExtractor


@pytest.fixture(scope="session")
def extractor():
    return FeatureExtractor.random(0)


@pytest.fixture(scope="session")
def extractor64():
    return FeatureExtractor.random(0).double()


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


CRITERIA = {
    1: "loss oracles",
    2: "gradients",
    3: "metric oracles",
    4: "fusion layer exactness",
    5: "overfit smoke",
    6: "determinism and resume",
    7: "full-scale recipe (non-gating)",
    8: "sweep plumbing",
}


def pytest_terminal_summary(terminalreporter):
    outcomes: dict[int, list[str]] = {}
    for status in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion" not in nodeid or rep.when not in ("call", "setup"):
                continue
            n = int(nodeid.split("test_criterion", 1)[1].split("_", 1)[0])
            outcomes.setdefault(n, []).append(status)
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        got = outcomes.get(n)
        if not got:
            verdict = "NOT RUN"
        elif all(s == "passed" for s in got):
            verdict = "PASS"
        else:
            verdict = "FAIL"
        terminalreporter.write_line(f"criterion {n} ({name}): {verdict}")
