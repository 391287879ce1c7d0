import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from asymct.datasynth import SynthConfig, generate_domain_pair


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pair():
    cfg = SynthConfig(
        n_identities_source=8,
        n_identities_target=8,
        samples_per_identity=8,
        dim=8,
        n_cameras=4,
        shift_scale=0.5,
        corrupt_frac=0.1,
        noise_sigma=0.4,
        seed=7,
    )
    return generate_domain_pair(cfg)
