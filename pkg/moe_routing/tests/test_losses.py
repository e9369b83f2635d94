import numpy as np
import pytest

from ..app.autograd import Tensor
from ..app.losses import load_balance_loss
from ..app.routing import RoutingMask, topk_route


def test_uniform_traffic_gives_one():
    """Uniform scores and selection over N experts give exactly 1.0"""
    scores = np.full((4, 4), 0.25)
    mask = RoutingMask.from_selection(scores, np.eye(4, dtype=bool))
    assert load_balance_loss(mask, scores) == pytest.approx(1.0)


def test_collapsed_traffic_gives_n():
    """All traffic and probability on one expert gives N"""
    scores = np.zeros((3, 5))
    scores[:, 0] = 1.0
    mask = RoutingMask.from_selection(scores, scores > 0)
    assert load_balance_loss(mask, scores) == pytest.approx(5.0)


def test_single_expert_is_always_one(rng):
    """N=1 gives 1.0"""
    scores = np.ones((6, 1))
    assert load_balance_loss(topk_route(scores, 1), scores) == pytest.approx(1.0)


def test_tensor_scores_return_differentiable_scalar(rng):
    """Tensor scores produce a Tensor whose gradient is N * f_i / T"""
    values = rng.dirichlet(np.ones(4), size=5)
    mask = topk_route(values, 2)
    scores = Tensor(values, requires_grad=True)
    loss = load_balance_loss(mask, scores)
    loss.backward()
    fractions = mask.selected.sum(axis=0) / mask.total
    assert float(loss.data) == pytest.approx(load_balance_loss(mask, values))
    np.testing.assert_allclose(scores.grad, np.tile(4 * fractions / 5, (5, 1)))
