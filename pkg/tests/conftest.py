import numpy as np
import pytest

from reademb import dataio


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


@pytest.fixture
def small_corpus():
    """20 sentences x 6 words, well separated, tiny EEG block."""
    return dataio.synth_generate(
        dataio.SynthSpec(n_sentences=20, words_per_sentence=6, delta=6.0, eeg_dim=10, wemb_dim=16, seed=11)
    )
