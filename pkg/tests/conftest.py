"""Shared fixtures: small synthetic datasets reused across test modules."""

import numpy as np
import pytest

from burst2vec.data import SynthConfig, generate_synthetic


@pytest.fixture(scope="session")
def feature_dataset(tmp_path_factory):
    """A small feature-mode dataset: 240 clips, 16-dim frames, biased labels."""
    out = tmp_path_factory.mktemp("feats_ds")
    cfg = SynthConfig(n_clips=240, n_countries=4, age_country_bias=0.6,
                      feature_dim=16, frames_min=5, frames_max=8)
    manifest = generate_synthetic(cfg, seed=11, out_dir=out)
    return manifest


@pytest.fixture(scope="session")
def wav_dataset(tmp_path_factory):
    """A tiny waveform-mode dataset with short clips for conv-mode tests."""
    out = tmp_path_factory.mktemp("wav_ds")
    cfg = SynthConfig(n_clips=24, n_countries=4, age_country_bias=0.0,
                      mode="waveform", duration_min=0.06, duration_max=0.1,
                      sample_rate=16000)
    manifest = generate_synthetic(cfg, seed=5, out_dir=out)
    return manifest


@pytest.fixture
def rng():
    return np.random.default_rng(0)
