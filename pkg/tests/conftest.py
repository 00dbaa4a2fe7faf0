import numpy as np
import pytest

from cmm.config import ExperimentConfig


def tiny_config(seed=0):
    """Small-but-complete experiment config so tests run in seconds."""
    cfg = ExperimentConfig()
    cfg.data.n_ids = 12
    cfg.data.n_test_ids = 4
    cfg.data.images_per_id = 2
    cfg.data.captions_per_image = 1
    cfg.data.n_slots = 3
    cfg.data.n_choices = 4
    cfg.data.n_filler_tokens = 4
    cfg.data.fillers_per_caption = 2
    cfg.data.seed = seed
    cfg.model.visual_hidden = 16
    cfg.model.embed_dim = 8
    cfg.model.gru_hidden = 8
    cfg.model.feature_dim = 16
    cfg.train.epochs = 2
    cfg.train.warmup_epochs = 1
    cfg.train.decay_epochs = (2,)
    cfg.train.p_ids = 4
    cfg.train.k_inst = 2
    cfg.train.queue_capacity = 16
    cfg.train.seed = seed
    cfg.validate()
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def unit_rows(rng, n, d):
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)
