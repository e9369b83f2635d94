import numpy as np
import pytest

from ..app.exceptions import InvalidInputError
from ..app.expert_cache import audit_budget, replay_online
from ..app.moe_layer import (
    MoeLayerParams,
    dense_reference_forward,
    expert_forward,
    init_layer_params,
    moe_forward,
    moe_forward_online,
    new_session,
    router_scores,
)
from ..app.schemas import BudgetConfig, RoutingStrategy


def test_zero_expert_is_pure_residual(rng):
    """A single expert mapping to zero leaves inputs unchanged"""
    d_model, d_hidden = 3, 2
    params = MoeLayerParams(
        router=rng.normal(size=(1, d_model)),
        w_in=rng.normal(size=(1, d_model, d_hidden)),
        b_in=np.zeros((1, d_hidden)),
        w_out=np.zeros((1, d_hidden, d_model)),
        b_out=np.zeros((1, d_model)),
    )
    inputs = rng.normal(size=(4, d_model))
    out = moe_forward(params, inputs, RoutingStrategy.TOPK, BudgetConfig(k_tok=1, upper_bound=1))
    np.testing.assert_array_equal(out.hidden.data, inputs)


def test_identical_experts_sum_to_one_gate(rng):
    """Two identical experts with k=2 give E(x) + x"""
    single = init_layer_params(rng, 4, 5, 1)
    params = MoeLayerParams(
        router=rng.normal(size=(2, 4)),
        w_in=np.repeat(single.w_in, 2, axis=0),
        b_in=np.repeat(single.b_in, 2, axis=0),
        w_out=np.repeat(single.w_out, 2, axis=0),
        b_out=np.repeat(single.b_out, 2, axis=0),
    )
    inputs = rng.normal(size=(3, 4))
    out = moe_forward(params, inputs, RoutingStrategy.TOPK, BudgetConfig(k_tok=2, upper_bound=2))
    expected = expert_forward(single, 0, inputs).data + inputs
    np.testing.assert_allclose(out.hidden.data, expected, atol=1e-12)


@pytest.mark.parametrize("strategy", list(RoutingStrategy))
def test_sparse_matches_dense_reference(strategy):
    """Seed 7, T=4, D=8, N=4, k=2 agrees with the all-experts reference"""
    rng = np.random.default_rng(7)
    params = init_layer_params(rng, 8, 6, 4)
    inputs = rng.normal(size=(4, 8))
    out = moe_forward(params, inputs, strategy, BudgetConfig(k_tok=2))
    dense = dense_reference_forward(params, inputs, out.mask)
    assert np.abs(out.hidden.data - dense).max() <= 1e-10


def test_renormalized_sparse_matches_dense(rng):
    """Renormalized gates agree with the reference too"""
    params = init_layer_params(rng, 5, 4, 6)
    inputs = rng.normal(size=(5, 5))
    out = moe_forward(params, inputs, RoutingStrategy.SEQTOPK, BudgetConfig(k_tok=2), renormalize=True)
    assert np.abs(out.hidden.data - dense_reference_forward(params, inputs, out.mask)).max() <= 1e-10


def test_flop_estimate_matches_budget(rng):
    """Expert invocations equal the mask total and the strategy budget"""
    params = init_layer_params(rng, 4, 4, 5)
    inputs = rng.normal(size=(6, 4))
    for strategy in (RoutingStrategy.TOPK, RoutingStrategy.SEQTOPK, RoutingStrategy.SEQTOPK_BOUNDED):
        out = moe_forward(params, inputs, strategy, BudgetConfig(k_tok=2))
        assert out.flop_estimate == out.mask.total == 12


def test_token_without_experts_keeps_input():
    """Unbounded SeqTopK can leave a token on the residual path only"""
    rng = np.random.default_rng(3)
    params = init_layer_params(rng, 4, 3, 4)
    params = MoeLayerParams(**{**params.named_arrays(), "router": params.router * 0.0})
    # Uniform scores: ties go to token 0, so the last token gets nothing
    inputs = rng.normal(size=(3, 4))
    out = moe_forward(params, inputs, RoutingStrategy.SEQTOPK, BudgetConfig(k_tok=1))
    assert out.mask.counts[-1] == 0
    np.testing.assert_array_equal(out.hidden.data[-1], inputs[-1])


def test_rejects_wrong_width(rng):
    """Input width must match the router"""
    params = init_layer_params(rng, 4, 3, 2)
    with pytest.raises(InvalidInputError):
        moe_forward(params, rng.normal(size=(2, 5)), RoutingStrategy.TOPK, BudgetConfig(k_tok=1))


def test_rejects_bad_parameter_shapes(rng):
    """validate() catches inconsistent expert weights"""
    params = init_layer_params(rng, 4, 3, 2)
    broken = MoeLayerParams(**{**params.named_arrays(), "b_out": np.zeros((2, 5))})
    with pytest.raises(InvalidInputError):
        broken.validate()


def test_online_first_step_matches_topk(rng):
    """Step 1 of online decoding equals TopK on a single token"""
    params = init_layer_params(rng, 6, 4, 5)
    x = rng.normal(size=6)
    budget = BudgetConfig(k_tok=2)
    _, output, _ = moe_forward_online(params, new_session(params), x, budget)
    offline = moe_forward(params, x[None, :], RoutingStrategy.TOPK, budget)
    np.testing.assert_allclose(output, offline.hidden.data[0], atol=1e-12)


def test_online_counts_match_replay(rng):
    """Step-wise decoding reproduces replayed online routing on the cached scores"""
    params = init_layer_params(rng, 5, 4, 4)
    budget = BudgetConfig(k_tok=1)
    cache = new_session(params)
    inputs = rng.normal(size=(8, 5))
    for x in inputs:
        cache, _, _ = moe_forward_online(params, cache, x, budget)
    replayed = replay_online(router_scores(params, inputs).data, budget)
    assert cache.activated == replayed.activated


def test_online_cumulative_bound_seed_7():
    """Seed 7, 6 steps, k=1, N=4 stays within m activations"""
    rng = np.random.default_rng(7)
    params = init_layer_params(rng, 8, 6, 4)
    cache = new_session(params)
    for x in rng.normal(size=(6, 8)):
        cache, _, _ = moe_forward_online(params, cache, x, BudgetConfig(k_tok=1))
    assert audit_budget(cache, 1).max_ratio <= 1.0
