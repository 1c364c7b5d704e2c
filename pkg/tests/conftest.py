import os

import pytest
import torch

from mixnet_pad import datamodel, synthdata

torch.set_num_threads(1)

# Filled by test_acceptance.py; printed once at the end of the session.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    """3 videos/class x 4 frames, 64x64, folded k=3."""
    out = tmp_path_factory.mktemp("toy")
    m = synthdata.generate(synthdata.SynthSpec(seed=7), out)
    return datamodel.assign_folds(m, 3, 0)


@pytest.fixture(scope="session")
def small(tmp_path_factory):
    """10 videos/class x 4 frames, folded k=3."""
    out = tmp_path_factory.mktemp("small")
    m = synthdata.generate(synthdata.SynthSpec(seed=11, videos_per_class=10), out)
    return datamodel.assign_folds(m, 3, 0)


@pytest.fixture
def no_cache(monkeypatch):
    monkeypatch.delenv("MIXNET_CACHE", raising=False)
