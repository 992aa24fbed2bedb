from __future__ import annotations

import numpy as np
import pytest

from recsys import create_app
from recsys.config import (ALSConfig, CNNConfig, HybridConfig, LocationConfig, MLPConfig,
                           RefreshConfig, Word2VecConfig)
from recsys.models import Ad, Event, SignalKind
from recsys.serve import Snapshot
from recsys.synthgen import SynthConfig, generate


def make_event(user, item, signal="view_ad", ts=0):
    return Event(user, item, SignalKind(signal), ts)


def make_ad(item_id, category="c1", subcategory="c1-s1", postcode="1000", title="title",
            description="description", active=True, created_at=0):
    return Ad(item_id=item_id, title=title, description=description, category=category,
              subcategory=subcategory, postcode=postcode, created_at=created_at, active=active)


def unit_rows(rng, n, dim):
    m = rng.normal(size=(n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


SMALL_SYNTH = dict(n_users=120, n_items=150, n_postcodes=6, vocab_size=90,
                   background_vocab_size=20, image_dim=32, sessions_per_user=6, seed=7)


@pytest.fixture(scope="session")
def small_synth_cfg():
    return SynthConfig(**SMALL_SYNTH)


@pytest.fixture(scope="session")
def synth_data(small_synth_cfg):
    return generate(small_synth_cfg)


@pytest.fixture(scope="session")
def data_dir(synth_data, tmp_path_factory):
    return synth_data.write(tmp_path_factory.mktemp("marketplace"))


@pytest.fixture(scope="session")
def fast_refresh_cfg():
    """Small dimensions so the whole pipeline runs in seconds."""
    return RefreshConfig(
        seed=3,
        als=ALSConfig(rank=8, iters=4),
        location=LocationConfig(rank=3, iters=4),
        word2vec=Word2VecConfig(dim=12, epochs=2),
        cnn=CNNConfig(epochs=2, seq_len=16, filters=6, hidden=12),
        mlp=MLPConfig(epochs=2),
        hybrid=HybridConfig(epochs=2, holdout_fraction=0.2),
    )


@pytest.fixture(scope="session")
def refreshed(data_dir, fast_refresh_cfg, tmp_path_factory):
    """(output dir, snapshot dir) of one refresh over the shared synthetic marketplace."""
    from recsys.pipeline import refresh

    out = tmp_path_factory.mktemp("refresh-out")
    snapshot_dir = refresh(data_dir, out, fast_refresh_cfg)
    return out, snapshot_dir


@pytest.fixture
def toy_snapshot():
    rng = np.random.default_rng(0)
    ids = tuple(f"i{n:03d}" for n in range(40))
    active = np.ones(len(ids), dtype=bool)
    active[5] = False
    return Snapshot("toy-1", ids, unit_rows(rng, len(ids), 8), active)


@pytest.fixture
def app(toy_snapshot):
    return create_app({"TESTING": True, "RECSYS_SNAPSHOT": toy_snapshot})


@pytest.fixture
def client(app):
    return app.test_client()
