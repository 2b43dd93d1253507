"""Shared fixtures and the acceptance-criteria summary printer."""

import re
import time
from dataclasses import dataclass

import pytest

from tcap.data import Dataset, SynthSpec, synth_dataset
from tcap.model import GuidanceMode
from tcap.numerics import Transfer
from tcap.training import Checkpoint, TrainConfig, train


@dataclass(frozen=True)
class OverfitRun:
    """The reference training run shared by the overfitting, attention,
    and determinism acceptance checks."""

    dataset: Dataset
    mode: GuidanceMode
    config: TrainConfig
    checkpoint: Checkpoint
    seconds: float


@pytest.fixture(scope="session")
def synthetic_corpus() -> Dataset:
    return synth_dataset(SynthSpec(n_examples=32, seed=0))


@pytest.fixture(scope="session")
def overfit_run(synthetic_corpus) -> OverfitRun:
    mode = GuidanceMode("sentence", transfer=Transfer.TANH)
    config = TrainConfig()
    started = time.monotonic()
    checkpoint = train(synthetic_corpus, mode, config)
    return OverfitRun(dataset=synthetic_corpus, mode=mode, config=config,
                      checkpoint=checkpoint,
                      seconds=time.monotonic() - started)


_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if m and rep.when == "call":
                label = m.group(2).replace("_", " ")
                status = "PASS" if outcome == "passed" else "FAIL"
                lines[int(m.group(1))] = f"criterion {m.group(1)}: {status} — {label}"
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
