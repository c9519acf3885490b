import numpy as np
import pytest

from blockdrop.detector import DetectorModel, ModelConfig, Split, TaskConfig, generate_dataset


def tiny_task(**kw):
    base = dict(num_seq=40, T=32, d_in=6, num_classes=2, max_instances=2, min_len=4, max_len=10)
    base.update(kw)
    return TaskConfig(**base)


def tiny_model(depth=3, width=8, heads=2, head_depth=1, pool=4, seed=0, task=None, **kw):
    task = task or tiny_task()
    cfg = ModelConfig(depth=depth, width=width, heads=heads, head_depth=head_depth, pool=pool, **kw)
    return DetectorModel(task, cfg, np.random.default_rng(seed))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_splits():
    train, val = generate_dataset(tiny_task())
    return Split.from_sequences(train), Split.from_sequences(val)


@pytest.fixture(scope="session")
def trained_tiny(tiny_splits):
    """A small detector trained on the tiny task (a few seconds)."""
    from blockdrop.estimators import TemporalActionDetector

    train, _ = tiny_splits
    est = TemporalActionDetector(depth=3, width=8, heads=2, head_depth=1, pool=4, steps=150,
                                 lr=5e-3, random_state=0)
    return est.fit(train.X, train.instances)
