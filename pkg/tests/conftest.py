import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from skelhead.data import SynthConfig, synth_generate, to_batch

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_synth():
    """A 4-class synthetic set with 16 samples per class, as arrays."""
    manifest, seqs = synth_generate(SynthConfig(samples_per_class=16), seed=3)
    x, y = to_batch(seqs, root_joint=0, T_target=manifest.T_target)
    return manifest, seqs, x, y


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
