import numpy as np
import pytest

from brainmae.masking import MaskingConfig
from brainmae.model import desk_preset
from brainmae.rng import substream
from brainmae.synthetic import SyntheticCohortConfig, generate_synthetic_cohort


@pytest.fixture(scope="session")
def desk_cfg():
    return desk_preset()


@pytest.fixture(scope="session")
def mask_cfg():
    return MaskingConfig()


@pytest.fixture()
def rng():
    return substream(1234, "tests")


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory):
    """Small cohort shared by IO-heavy tests (24 subjects, desk shape)."""
    out = tmp_path_factory.mktemp("tiny_cohort")
    cfg = SyntheticCohortConfig(n_subjects=24, seed=7)
    manifest, atlas = generate_synthetic_cohort(cfg, out)
    return manifest, atlas


def random_volume(rng, shape=(16, 16, 16)):
    return rng.uniform(0.0, 1.0, size=shape).astype(np.float32)
