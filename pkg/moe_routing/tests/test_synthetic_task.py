import numpy as np
import pytest

from ..app.exceptions import InvalidInputError
from ..app.schemas import TaskConfig
from ..app.synthetic_task import SyntheticTask


@pytest.fixture
def task():
    return SyntheticTask(seed=11, seq_len=10, vocab_size=16, hard_fraction=0.5, n_mixture=3)


def test_generation_is_deterministic(task):
    """Same seed and step give the same batch"""
    a = task.batch(3, 4)
    b = SyntheticTask(seed=11, seq_len=10, vocab_size=16).batch(3, 4)
    np.testing.assert_array_equal(a.ids, b.ids)
    np.testing.assert_array_equal(a.targets, b.targets)


def test_steps_draw_different_batches(task):
    """Consecutive steps are distinct draws"""
    assert not np.array_equal(task.batch(0, 4).ids, task.batch(1, 4).ids)


def test_difficulty_is_balanced(task):
    """Every sequence holds exactly round(T * hard_fraction) hard positions"""
    batch = task.batch(0, 8)
    assert (batch.hard.sum(axis=1) == 5).all()


def test_easy_tokens_copy(task):
    """Easy positions predict the token itself"""
    batch = task.batch(0, 8)
    np.testing.assert_array_equal(batch.targets[~batch.hard], batch.ids[~batch.hard])


def test_hard_tokens_use_their_candidates(task):
    """Hard targets come from the token's mixture candidates"""
    batch = task.batch(2, 8)
    candidates = task.tables["candidates"]
    for token, target in zip(batch.ids[batch.hard], batch.targets[batch.hard]):
        assert target in candidates[token]


def test_target_entropy(task):
    """Easy tokens carry zero entropy, hard tokens a positive amount"""
    assert task.target_entropy(int(task.tables["easy"][0])) == 0.0
    assert task.target_entropy(int(task.tables["hard"][0])) > 0.0


def test_eval_stream_independent_of_training(task):
    """The held-out stream differs from training step 0"""
    assert not np.array_equal(task.eval_batch(4).ids, task.batch(0, 4).ids)


def test_to_frame_long_format(task):
    """One row per sequence position with a difficulty label"""
    frame = task.batch(0, 3).to_frame()
    assert len(frame) == 30
    assert set(frame["difficulty"]) == {"easy", "hard"}


def test_from_config():
    """TaskConfig fields carry over"""
    task = SyntheticTask.from_config(TaskConfig(seq_len=12, hard_fraction=0.25), vocab_size=8, seed=1)
    assert task.n_hard == 3


def test_rejects_tiny_vocabulary():
    """Fewer than four tokens cannot split into easy and hard halves"""
    with pytest.raises(InvalidInputError):
        SyntheticTask(seed=0, seq_len=4, vocab_size=3)
