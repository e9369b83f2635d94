from itertools import combinations

from hypothesis import given, settings as hypothesis_settings, strategies as st
import numpy as np
import pytest

from ..app.exceptions import BudgetInfeasibleError, InvalidInputError
from ..app.routing import (
    ScoreMatrix,
    batchtopk_route,
    route,
    selection_margin,
    seqtopk_route_bounded,
    seqtopk_route_unbounded,
    softmax_scores,
    strategy_budget,
    topk_route,
)
from ..app.schemas import BudgetConfig, RoutingStrategy


@st.composite
def score_matrices(draw, max_tokens=12, max_experts=8):
    n_tokens = draw(st.integers(1, max_tokens))
    n_experts = draw(st.integers(1, max_experts))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    k = draw(st.integers(1, n_experts))
    values = np.random.default_rng(seed).dirichlet(np.ones(n_experts), size=n_tokens)
    return values, k


def test_softmax_uniform():
    """Equal logits give a uniform row"""
    np.testing.assert_allclose(softmax_scores([[0.0, 0.0, 0.0]]).values, [[1 / 3, 1 / 3, 1 / 3]])


def test_softmax_shift_invariance():
    """Any constant shift gives the 1:2:1 ratio"""
    for c in (-50.0, 0.0, 123.4):
        np.testing.assert_allclose(softmax_scores([[c, c + np.log(2), c]]).values, [[0.25, 0.5, 0.25]])


def test_softmax_large_logits_do_not_overflow():
    """Max subtraction keeps huge logits finite"""
    values = softmax_scores([[1000.0, 0.0, 0.0]]).values
    assert np.isfinite(values).all()
    np.testing.assert_allclose(values, [[1.0, 0.0, 0.0]], atol=1e-300)


def test_softmax_rejects_non_finite():
    """NaN logits are invalid input"""
    with pytest.raises(InvalidInputError):
        softmax_scores([[np.nan, 0.0]])


def test_score_matrix_rejects_bad_row_sum():
    """Row-stochastic validation reports the offending line"""
    with pytest.raises(InvalidInputError) as excinfo:
        ScoreMatrix(np.array([[0.5, 0.5], [0.6, 0.6]]))
    assert excinfo.value.line == 2


def test_score_matrix_is_read_only():
    """Stored values cannot be mutated"""
    scores = ScoreMatrix(np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError):
        scores.values[0, 0] = 1.0


def test_topk_picks_largest_per_row():
    """k=2 over [0.1, 0.6, 0.3] keeps experts 1 and 2"""
    mask = topk_route(np.array([[0.1, 0.6, 0.3]]), 2)
    assert mask.pairs() == {(0, 1), (0, 2)}
    np.testing.assert_array_equal(mask.gate_weights, [[0.0, 0.6, 0.3]])


def test_topk_full_budget_selects_everything(random_scores):
    """k=N gives an all-ones mask"""
    mask = topk_route(random_scores(5, 4), 4)
    assert mask.selected.all()


def test_topk_tie_goes_to_lower_expert():
    """Equal scores resolve to the lower expert index"""
    assert topk_route(np.array([[0.4, 0.4, 0.2]]), 1).pairs() == {(0, 0)}


def test_topk_rejects_k_above_n():
    """k > N is infeasible"""
    with pytest.raises(BudgetInfeasibleError):
        topk_route(np.array([[0.5, 0.5]]), 3)


def test_seqtopk_unbounded_example(example_scores):
    """Two largest of six entries both belong to token 0"""
    mask = seqtopk_route_unbounded(example_scores, 1)
    np.testing.assert_array_equal(mask.selected, [[True, True, False], [False, False, False]])
    assert list(mask.counts) == [2, 0]


def test_seqtopk_single_token_matches_topk(random_scores):
    """T=1 degenerates to TopK"""
    scores = random_scores(1, 6)
    for k in range(1, 7):
        np.testing.assert_array_equal(seqtopk_route_unbounded(scores, k).selected, topk_route(scores, k).selected)


def test_seqtopk_budget_convention(random_scores):
    """T=3, K=2 selects 6 entries"""
    assert seqtopk_route_unbounded(random_scores(3, 4), 2).total == 6


def test_bounded_lower_bound_forces_best_expert(example_scores):
    """Token 1 keeps its best expert instead of token 0's runner-up"""
    mask = seqtopk_route_bounded(example_scores, BudgetConfig(k_tok=1, upper_bound=3))
    assert mask.pairs() == {(0, 0), (1, 0)}


def test_bounded_uniform_scores_give_k_each():
    """Uniform scores spread the budget evenly over experts 0..K-1"""
    scores = np.full((5, 6), 1 / 6)
    mask = seqtopk_route_bounded(scores, BudgetConfig(k_tok=2))
    np.testing.assert_array_equal(mask.counts, [2] * 5)
    assert mask.selected[:, :2].all()


def test_bounded_collapsed_bounds_equal_topk(random_scores):
    """lower = upper = k reproduces TopK"""
    scores = random_scores(6, 5)
    mask = seqtopk_route_bounded(scores, BudgetConfig(k_tok=2, lower_bound=2, upper_bound=2))
    np.testing.assert_array_equal(mask.selected, topk_route(scores, 2).selected)


def test_bounded_rejects_upper_above_n():
    """upper_bound larger than N is infeasible"""
    with pytest.raises(BudgetInfeasibleError):
        seqtopk_route_bounded(np.array([[0.5, 0.5]]), BudgetConfig(k_tok=1, upper_bound=3))


def _brute_force(values, n_select, lower, upper):
    n_tokens, n_experts = values.shape
    best = -np.inf
    for subset in combinations(range(values.size), n_select):
        counts = np.bincount(np.array(subset) // n_experts, minlength=n_tokens)
        if counts.min() >= lower and counts.max() <= upper:
            best = max(best, values.ravel()[list(subset)].sum())
    return best


def test_bounded_matches_brute_force_oracle():
    """Greedy fill equals exhaustive search on small instances"""
    rng = np.random.default_rng(2024)
    for _ in range(40):
        for n_tokens in range(1, 4):
            for n_experts in range(1, 5):
                for k in range(1, min(2, n_experts) + 1):
                    values = rng.dirichlet(np.ones(n_experts), size=n_tokens)
                    budget = BudgetConfig(k_tok=k)
                    lower, upper = budget.resolve(n_experts)
                    mask = seqtopk_route_bounded(values, budget)
                    assert values[mask.selected].sum() == pytest.approx(
                        _brute_force(values, n_tokens * k, lower, upper), abs=1e-12
                    )


def test_batchtopk_single_sequence_matches_seqtopk(random_scores):
    """B=1 is unbounded SeqTopK"""
    scores = random_scores(7, 5)
    np.testing.assert_array_equal(batchtopk_route([scores], 2)[0].selected,
                                  seqtopk_route_unbounded(scores, 2).selected)


def test_batchtopk_identical_sequences_split_evenly(random_scores):
    """Two copies of a sequence each get T*k entries"""
    scores = random_scores(4, 5)
    first, second = batchtopk_route([scores, scores.copy()], 2)
    assert first.total == second.total == 8
    np.testing.assert_array_equal(first.selected, second.selected)


def test_batchtopk_dominant_sequence_takes_everything():
    """A sequence with much larger scores absorbs the whole batch budget"""
    dominant = np.array([[0.5, 0.49, 0.01], [0.5, 0.49, 0.01]])
    weak = np.array([[0.34, 0.33, 0.33], [0.34, 0.33, 0.33]])
    a, b = batchtopk_route([dominant, weak], 1)
    assert a.total == 4
    assert b.total == 0


def test_batchtopk_rejects_mixed_expert_counts():
    """All sequences in a batch must share N"""
    with pytest.raises(InvalidInputError):
        batchtopk_route([np.array([[0.5, 0.5]]), np.array([[0.2, 0.3, 0.5]])], 1)


def test_renormalized_gates_sum_to_one(random_scores):
    """Renormalization rescales each routed row to unit mass"""
    mask = topk_route(random_scores(4, 6), 2, renormalize=True)
    np.testing.assert_allclose(mask.gate_weights.sum(axis=1), 1.0)


def test_route_dispatch_accepts_underscore_names(example_scores):
    """seqtopk_bounded and seqtopk-bounded are the same strategy"""
    budget = BudgetConfig(k_tok=1)
    a = route(example_scores, "seqtopk_bounded", budget)
    b = route(example_scores, RoutingStrategy.SEQTOPK_BOUNDED, budget)
    np.testing.assert_array_equal(a.selected, b.selected)


def test_route_online_first_token_is_topk(random_scores):
    """The online strategy routes token 0 like TopK"""
    scores = random_scores(5, 6)
    mask = route(scores, RoutingStrategy.ONLINE_SEQTOPK, BudgetConfig(k_tok=2))
    np.testing.assert_array_equal(mask.selected[0], topk_route(scores[:1], 2).selected[0])


def test_selection_margin():
    """Margin is the smallest selected/unselected score gap"""
    scores = np.array([[0.5, 0.3, 0.2]])
    assert selection_margin(scores, topk_route(scores, 1)) == pytest.approx(0.2)


@hypothesis_settings(max_examples=200, deadline=None)
@given(score_matrices())
def test_budget_conservation_property(instance):
    """Every strategy selects exactly its stated budget"""
    values, k = instance
    n_tokens, n_experts = values.shape
    budget = BudgetConfig(k_tok=k)
    for strategy in (RoutingStrategy.TOPK, RoutingStrategy.SEQTOPK, RoutingStrategy.SEQTOPK_BOUNDED,
                     RoutingStrategy.BATCHTOPK):
        assert route(values, strategy, budget).total == strategy_budget(strategy, n_tokens, n_experts, k)


@hypothesis_settings(max_examples=200, deadline=None)
@given(score_matrices())
def test_bound_compliance_property(instance):
    """Bounded SeqTopK keeps every token within [lower, upper]"""
    values, k = instance
    budget = BudgetConfig(k_tok=k)
    lower, upper = budget.resolve(values.shape[1])
    counts = seqtopk_route_bounded(values, budget).counts
    assert counts.min() >= lower
    assert counts.max() <= upper


@hypothesis_settings(max_examples=100, deadline=None)
@given(score_matrices(), st.integers(0, 2 ** 32 - 1))
def test_permutation_equivariance_property(instance, seed):
    """Permuting expert columns permutes the mask identically"""
    values, k = instance
    permutation = np.random.default_rng(seed).permutation(values.shape[1])
    budget = BudgetConfig(k_tok=k)
    for strategy in (RoutingStrategy.TOPK, RoutingStrategy.SEQTOPK, RoutingStrategy.SEQTOPK_BOUNDED):
        original = route(values, strategy, budget).selected
        permuted = route(values[:, permutation], strategy, budget).selected
        np.testing.assert_array_equal(permuted, original[:, permutation])


def test_monotonicity_raising_unselected_score():
    """Lifting an unselected entry above the threshold evicts exactly the previous minimum"""
    values = np.array([[0.40, 0.30, 0.20, 0.10], [0.35, 0.25, 0.22, 0.18]])
    assert seqtopk_route_unbounded(values, 1).pairs() == {(0, 0), (1, 0)}

    raised = values.copy()
    raised[0, 1], raised[0, 3] = 0.38, 0.02
    assert seqtopk_route_unbounded(raised, 1).pairs() == {(0, 0), (0, 1)}
