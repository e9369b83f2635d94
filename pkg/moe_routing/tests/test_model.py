import numpy as np
import pytest

from ..app.exceptions import CheckpointError, InvalidInputError
from ..app.model import (
    checkpoint_routing,
    init_model,
    decode_step,
    load_checkpoint,
    model_forward,
    new_decoding_state,
    save_checkpoint,
    summarize_logprob_shift,
    token_logprob_shift,
)
from ..app.schemas import BudgetConfig, ModelConfig, RoutingStrategy


def test_init_is_deterministic(tiny_config):
    """The same seed gives identical parameters"""
    a = init_model(tiny_config, seed=5).named_arrays()
    b = init_model(tiny_config, seed=5).named_arrays()
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_config_reflects_shapes(tiny_model, tiny_config):
    """Model dims are recovered from the parameter shapes"""
    assert tiny_model.config == tiny_config


def test_forward_shapes_and_masks(tiny_model):
    """Logits are (T, V) and every layer reports its mask"""
    ids = np.array([0, 3, 7, 2, 5])
    output = model_forward(tiny_model, ids, RoutingStrategy.SEQTOPK_BOUNDED, BudgetConfig(k_tok=2))
    assert output.logits.shape == (5, 8)
    assert len(output.masks) == 2
    assert output.expert_invocations == 2 * 5 * 2


def test_embed_rejects_out_of_range_ids(tiny_model):
    """Token ids must lie inside the vocabulary"""
    with pytest.raises(InvalidInputError):
        model_forward(tiny_model, np.array([0, 8]), RoutingStrategy.TOPK, BudgetConfig(k_tok=1))


def test_checkpoint_roundtrip(tmp_path, tiny_model):
    """Saved parameters reload exactly"""
    path = tmp_path / "model.npz"
    save_checkpoint(tiny_model, path)
    restored = load_checkpoint(path)
    assert restored.seed == tiny_model.seed
    for name, array in tiny_model.named_arrays().items():
        np.testing.assert_array_equal(restored.named_arrays()[name], array)


def test_missing_checkpoint(tmp_path):
    """A missing checkpoint raises CheckpointError"""
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.npz")


def test_corrupt_checkpoint(tmp_path):
    """Garbage bytes are reported as a corrupt checkpoint"""
    path = tmp_path / "bad.npz"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_decode_step_returns_distribution(tiny_model):
    """Each decoding step yields next-token probabilities and one cache per layer"""
    caches = new_decoding_state(tiny_model)
    for token in (1, 4, 2):
        caches, probs, steps = decode_step(tiny_model, caches, token, BudgetConfig(k_tok=2))
        assert probs.sum() == pytest.approx(1.0)
        assert len(steps) == 2
    assert all(cache.steps == 3 for cache in caches)


def test_shift_is_zero_at_reference(tiny_model):
    """k equal to the reference k gives exactly zero shift"""
    ids = np.array([1, 2, 3, 4])
    frame = token_logprob_shift(tiny_model, ids, ids, [4], reference_k=4)
    assert (frame["shift"] == 0.0).all()


def test_shift_table_seed_13():
    """Seed 13, k in {1, 2, 4}: one row per token and k"""
    model = init_model(ModelConfig(vocab_size=8, d_model=4, d_hidden=6, n_experts=4), seed=13)
    ids = np.array([0, 1, 2, 3, 4, 5])
    targets = np.array([1, 2, 3, 4, 5, 6])
    frame = token_logprob_shift(model, ids, targets, [1, 2, 4])
    assert len(frame) == 18
    assert (frame.loc[frame["k"] == 4, "shift"] == 0.0).all()
    assert frame["prob"].between(0.0, 1.0).all()


def test_shift_rejects_k_out_of_range(tiny_model):
    """k must lie in [1, N]"""
    with pytest.raises(InvalidInputError):
        token_logprob_shift(tiny_model, [0, 1], [1, 2], [5])


def test_summarize_shift_shares(tiny_model):
    """Shares of small and large shifts are fractions per k"""
    ids = np.array([0, 1, 2, 3, 4, 5, 6, 7])
    summary = summarize_logprob_shift(token_logprob_shift(tiny_model, ids, ids, [1, 2, 4]))
    assert list(summary["k"]) == [1, 2, 4]
    assert summary["small_share"].between(0, 1).all()
    assert summary.loc[summary["k"] == 4, "small_share"].iloc[0] == 1.0


def test_checkpoint_records_training_routing(tmp_path, tiny_model):
    """Strategy and budget saved with a checkpoint are read back"""
    path = tmp_path / "routed.npz"
    save_checkpoint(tiny_model, path, strategy="topk", budget=BudgetConfig(k_tok=1, upper_bound=3))
    strategy, budget = checkpoint_routing(path)
    assert strategy is RoutingStrategy.TOPK
    assert budget == BudgetConfig(k_tok=1, upper_bound=3)


def test_checkpoint_without_routing(tmp_path, tiny_model):
    """Checkpoints saved without routing report none"""
    path = tmp_path / "plain.npz"
    save_checkpoint(tiny_model, path)
    assert checkpoint_routing(path) == (None, None)
