import numpy as np
import pytest

from gesturefusion.dataset_io import SyntheticSpec, generate_synthetic, scan_dataset
from tests.acceptance_log import LINES as ACCEPTANCE_LINES



@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(n_subjects=3, n_trials=1, frame_len_range=(8, 20), image_size=(24, 32), seed=3)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory, tiny_spec):
    return generate_synthetic(tiny_spec, tmp_path_factory.mktemp("tiny") / "dhg")


@pytest.fixture(scope="session")
def tiny_index(tiny_root):
    return scan_dataset(tiny_root, "c14")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_clips(tiny_index):
    from gesturefusion.training import clips_from_index

    return clips_from_index(tiny_index, timestep=8, image_size=12)
