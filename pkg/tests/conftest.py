import numpy as np
import pytest

from saic.dataset import SynthCorpusConfig, generate_synthetic_corpus, make_splits
from saic.features import FeatureConfig
from saic.model import ModelConfig
from saic.training import load_crops, prepare_features


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 speakers x 4 utterances; enough for unit tests, fast to build."""
    root = tmp_path_factory.mktemp("small_corpus")
    cfg = SynthCorpusConfig(num_speakers=4, utterances_per_speaker=4, seed=5)
    m = generate_synthetic_corpus(cfg, root)
    m = make_splits(m, 0.25, seed=3)
    return cfg, m, root


@pytest.fixture(scope="session")
def small_features(small_corpus, tmp_path_factory):
    cfg, m, root = small_corpus
    fcfg = FeatureConfig()
    m.feature_config_fingerprint = fcfg.fingerprint()
    cache = tmp_path_factory.mktemp("small_cache")
    stats = prepare_features(m, fcfg, cache)
    train_crops = load_crops(m, "train", fcfg, stats, cache)
    test_crops = load_crops(m, "test", fcfg, stats, cache)
    return m, fcfg, stats, train_crops, test_crops


@pytest.fixture(scope="session")
def small_stage2(small_features):
    """A briefly trained two-stage checkpoint pair: cheap, deterministic,
    not expected to hit quality thresholds."""
    from saic.losses import Stage1Config, Stage2Config
    from saic.training import train_stage1, train_stage2

    m, fcfg, stats, train_crops, _ = small_features
    mcfg = ModelConfig(mel_bins=80, frames_per_crop=64, d_c=8, d_s=8,
                       width=16, kernel_size=3, n_decoder_blocks=2)
    cfg1 = Stage1Config(epochs=5, batch_size=8, seed=7,
                        lr_latents=1.0, lr_decoder=0.02)
    ck1 = train_stage1(m, train_crops, fcfg, stats, mcfg, cfg1)
    ck2 = train_stage2(m, train_crops, ck1, Stage2Config(epochs=3, seed=11))
    return ck1, ck2, m


@pytest.fixture
def tiny_model_config():
    return ModelConfig(mel_bins=12, frames_per_crop=10, d_c=8, d_s=8,
                       width=16, kernel_size=3, n_decoder_blocks=2)
