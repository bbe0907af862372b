import numpy as np
import pytest

from rsvpbci.core import DeviceSpec, default_parameters
from rsvpbci.task import run_calibration

QUAD = DeviceSpec("QUAD", 300.0, ("c1", "c2", "c3", "c4"))


@pytest.fixture
def quad_spec():
    """Small 4-channel device keeping model tests fast."""
    return QUAD


@pytest.fixture(scope="session")
def trained_model(tmp_path_factory):
    """One calibration model (snr=10, 4 channels, 60 sequences) shared by
    the closed-loop tests."""
    params = default_parameters()
    params.set("seq_count", 60)
    out = tmp_path_factory.mktemp("calibration")
    result = run_calibration(params, out_dir=out, seed=20240, device=QUAD)
    assert result.auc > 0.9
    return result.model


@pytest.fixture(scope="session")
def chance_model(tmp_path_factory):
    """Model calibrated on a signal-free (snr=0) session, for chance-level
    closed-loop behavior."""
    params = default_parameters()
    params.set("seq_count", 60)
    params.set("snr", 0.0)
    out = tmp_path_factory.mktemp("calibration_chance")
    result = run_calibration(params, out_dir=out, seed=20240, device=QUAD)
    assert 0.4 <= result.auc <= 0.6
    return result.model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
