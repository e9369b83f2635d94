"""
Central finite-difference checks of the reverse-mode gradients.

Routing is piecewise constant in the parameters, so a check is only meaningful away from
selection ties: points whose selection margin is below the tie threshold are rejected, and
so is any coordinate whose perturbation changes a routing decision.
"""
from dataclasses import dataclass
import logging

import numpy as np
import pandas as pd

from .exceptions import InvalidInputError
from .model import ToyMoeModel, init_model, model_forward
from .routing import selection_margin
from .schemas import BudgetConfig, ModelConfig, RoutingStrategy
from .train import backward, sequence_loss

logger = logging.getLogger(__name__)

STEP_SIZE = 1e-4
TIE_THRESHOLD = 1e-3
# Gradients below this magnitude are compared on an absolute scale
RELATIVE_ERROR_FLOOR = 1e-2

GRADCHECK_MODEL = ModelConfig(vocab_size=8, d_model=4, d_hidden=6, n_experts=4, n_layers=1)


@dataclass
class PointCheck:
    max_relative_error: float
    coordinates: int
    rejected_coordinates: int
    margin: float


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), RELATIVE_ERROR_FLOOR)


def routing_margin(model, ids, strategy, budget):
    """Smallest selection margin over every layer's routing decision."""
    output = model_forward(model, ids, strategy, budget)
    return min(selection_margin(out.scores.data, out.mask) for out in output.layer_outputs), output.masks


def _perturbed(model, name, index, delta):
    arrays = {key: value.copy() for key, value in model.named_arrays().items()}
    arrays[name][index] += delta
    return ToyMoeModel.from_named_arrays(arrays, seed=model.seed)


def finite_difference_check(model, ids, targets, strategy, budget, aux_coefficient=0.01, n_coordinates=24,
                            rng=None, h=STEP_SIZE):
    """
    Compare analytic gradients with central differences at randomly drawn parameter coordinates.

    Returns a PointCheck, or None when the point sits within TIE_THRESHOLD of a selection tie.
    """
    strategy = RoutingStrategy(strategy)
    rng = rng if rng is not None else np.random.default_rng(0)
    margin, masks = routing_margin(model, ids, strategy, budget)
    if margin < TIE_THRESHOLD:
        return None

    grads, _ = backward(model, ids, targets, strategy, budget, aux_coefficient, masks=masks)
    names = list(grads)
    sizes = np.array([grads[name].size for name in names])
    picks = rng.choice(int(sizes.sum()), size=min(n_coordinates, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    rejected = 0
    for flat in np.sort(picks):
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[slot]
        index = np.unravel_index(int(flat - offsets[slot]), grads[name].shape)
        losses = []
        for delta in (h, -h):
            total, _, _, output = sequence_loss(_perturbed(model, name, index, delta), ids, targets,
                                                strategy, budget, aux_coefficient)
            if any(not np.array_equal(a.selected, b.selected) for a, b in zip(output.masks, masks)):
                break
            losses.append(float(total.data))
        if len(losses) < 2:
            rejected += 1
            continue
        numeric = (losses[0] - losses[1]) / (2 * h)
        worst = max(worst, relative_error(float(grads[name][index]), numeric))
    return PointCheck(max_relative_error=worst, coordinates=len(picks) - rejected,
                      rejected_coordinates=rejected, margin=margin)


@dataclass
class GradientCheckReport:
    strategy: str
    seed: int
    points: pd.DataFrame
    rejected_points: int

    @property
    def max_relative_error(self):
        return float(self.points["max_relative_error"].max()) if len(self.points) else 0.0

    def passed(self, tolerance=1e-4):
        return len(self.points) > 0 and self.max_relative_error < tolerance


def gradient_check(strategy, seed, n_points=20, budget=None, model_config=GRADCHECK_MODEL, seq_len=6,
                   aux_coefficient=0.01, max_attempts=None):
    """Finite-difference check at n_points tie-safe random (model, sequence) points."""
    budget = budget or BudgetConfig(k_tok=2)
    rng = np.random.default_rng(seed)
    max_attempts = max_attempts or 20 * n_points
    rows = []
    rejected = 0
    for _ in range(max_attempts):
        if len(rows) == n_points:
            break
        model = init_model(model_config, int(rng.integers(0, 2 ** 63)))
        ids = rng.integers(0, model_config.vocab_size, size=seq_len)
        targets = rng.integers(0, model_config.vocab_size, size=seq_len)
        point = finite_difference_check(model, ids, targets, strategy, budget, aux_coefficient, rng=rng)
        if point is None:
            rejected += 1
            continue
        rows.append({"point": len(rows), **point.__dict__})
    if len(rows) < n_points:
        raise InvalidInputError(f"Found only {len(rows)} tie-safe points in {max_attempts} attempts")
    report = GradientCheckReport(strategy=RoutingStrategy(strategy).value, seed=seed,
                                 points=pd.DataFrame(rows), rejected_points=rejected)
    logger.info(f"Gradient check {report.strategy} seed={seed}: max relative error "
                f"{report.max_relative_error:.2e} ({rejected} tie-adjacent points rejected)")
    return report
