"""Shared fixtures: small generator specs, corpora and run configs"""

import numpy as np
import pytest

from tweet_geodensity.config import RunConfig
from tweet_geodensity.corpus import GeneratorSpec, PlaceWord, generate
from tweet_geodensity.mixture import Gmm2D


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_spec():
    """Two single-site words, one two-site word, ten fillers"""
    places = [
        PlaceWord("tokyo", Gmm2D.single([35.68, 139.69], [0.05, 0.05])),
        PlaceWord("osaka", Gmm2D.single([34.69, 135.50], [0.05, 0.05])),
        PlaceWord("sakurajima", Gmm2D(
            pi=np.array([0.6, 0.4]),
            mu=np.array([[31.58, 130.66], [34.66, 135.00]]),
            sigma=np.full((2, 2), 0.05),
            rho=np.zeros(2),
        ), ("kagoshima", "kobe")),
    ]
    prior = Gmm2D.single([35.0, 137.0], [1.5, 2.0])
    fillers = [f"f{i}" for i in range(10)]
    return GeneratorSpec(places, fillers, prior, length_range=(3, 6),
                         mention_probs=(0.3, 0.6, 0.1), seed=7)


@pytest.fixture
def tiny_records(tiny_spec):
    return generate(tiny_spec, 200, seed=3)


@pytest.fixture
def tiny_config(tmp_path):
    """Seconds-scale run settings"""
    return RunConfig(
        model='cmdn', seed=1, data_dir=str(tmp_path / 'data'),
        train_size=300, dev_size=60, test_size=60,
        min_count=1, embed_dim=8, windows=(2, 3), filters=4, hidden=8, mixtures=2,
        dropout=0.0, batch_size=50, learning_rate=1e-2, epochs=2, patience=2,
        enet_steps=50, bootstrap_resamples=200, sweep_points=4, hist_bins=5, workers=1,
    )


@pytest.fixture
def tiny_encoded(tiny_records):
    """(train, dev, vocab) from the tiny corpus; L=6 covers the longest tweet"""
    from tweet_geodensity.pipeline import GeolocationPipeline
    from tweet_geodensity.text import build_vocab, tokenize

    vocab = build_vocab([tokenize(r.text) for r in tiny_records[:150]], 1).with_length(6)
    return (GeolocationPipeline.encode(tiny_records[:150], vocab),
            GeolocationPipeline.encode(tiny_records[150:], vocab), vocab)
