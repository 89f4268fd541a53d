"""
(©) EDQ Lab

Shared pytest fixtures. The log file is switched off before `config` is imported.
"""

import os

os.environ.setdefault("EDQ_LOG_FILE", "")
os.environ.setdefault("EDQ_JOBS", "1")

from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from database.database import read_json  # noqa: E402
from edq.identifiability import LocalIndependenceGraph  # noqa: E402
from edq.oracle import DiscreteProcess  # noqa: E402

REPO_ROOT = Path(__file__).resolve().parent.parent
PRESETS = REPO_ROOT / "presets"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def fixture_data() -> dict:
    return read_json(PRESETS / "oracle-fixture.json")


@pytest.fixture
def fixture_process(fixture_data) -> DiscreteProcess:
    return DiscreteProcess.from_dict(fixture_data["process"])


@pytest.fixture
def treatment_graph() -> LocalIndependenceGraph:
    return LocalIndependenceGraph.from_dict(read_json(PRESETS / "graph-treatment.json"))


@pytest.fixture
def confounded_graph() -> LocalIndependenceGraph:
    return LocalIndependenceGraph.from_dict(read_json(PRESETS / "graph-confounded.json"))
