import json
from pathlib import Path

import pytest

from engine.meanfield import COParams, NOParams
from engine.objective import SwitchingProblem
from engine.stepper import LegacyStepper

PRESETS = Path(__file__).resolve().parent.parent / 'presets'

# Tabulated steady states of the two reference setups.
NO_STATES = (0.3301, 0.6803, 0.9896)
CO_STATES = ((0.13944, 0.63553), (0.67526, 0.11452), (0.97101, 0.00137))


@pytest.fixture
def no_params():
    return NOParams(alpha=1.0, gamma=0.01, k=4.5)


@pytest.fixture
def co_params():
    return COParams(alpha=1.6, beta=3.5, gamma=0.04, k_r=1.0)


@pytest.fixture
def no_problem(no_params):
    return SwitchingProblem.from_params(no_params, ['k'])


@pytest.fixture
def co_problem(co_params):
    return SwitchingProblem.from_params(co_params, ['beta'])


@pytest.fixture
def no_legacy(no_params):
    return LegacyStepper(no_params, ['k'])


@pytest.fixture
def co_legacy(co_params):
    return LegacyStepper(co_params, ['beta'])


@pytest.fixture
def preset():
    """Load a preset by name as a dict, ready to tweak and write back out."""
    def load(name):
        return json.loads((PRESETS / f"{name}.json").read_text())
    return load


@pytest.fixture
def write_config(tmp_path):
    def write(payload, name='config.json'):
        path = tmp_path / name
        path.write_text(json.dumps(payload, indent=2))
        return str(path)
    return write
