"""
Expert selection algorithms for a single MoE layer.

Every strategy works on a row-stochastic score matrix (tokens x experts) and returns a
RoutingMask. Ties are broken by the lower token index, then the lower expert index,
which is the order of a row-major flattening of the matrix. Bounded SeqTopK first
compares the rank of each entry within its own row.
"""
from dataclasses import dataclass
import logging

import numpy as np
from scipy.special import softmax

from .config import settings
from .exceptions import BudgetInfeasibleError, InvalidInputError
from .schemas import RoutingStrategy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreMatrix:
    """Router probabilities for one sequence, shape (T, N), float64."""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise InvalidInputError(f"Score matrix must be 2-D with T>=1 and N>=1, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise InvalidInputError("Score matrix contains non-finite values")
        tolerance = settings.SCORE_TOLERANCE
        if (values < -tolerance).any() or (values > 1 + tolerance).any():
            raise InvalidInputError("Score values must lie in [0, 1]")
        row_sums = values.sum(axis=1)
        bad_rows = np.flatnonzero(np.abs(row_sums - 1.0) > settings.SCORE_TOLERANCE)
        if bad_rows.size:
            row = int(bad_rows[0])
            raise InvalidInputError(f"Row {row} sums to {row_sums[row]:.6f}, expected 1", line=row + 1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_tokens(self):
        return self.values.shape[0]

    @property
    def n_experts(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class RoutingMask:
    """Binary (T, N) selection plus the gate weights applied to selected experts."""
    selected: np.ndarray
    gate_weights: np.ndarray

    @classmethod
    def from_selection(cls, scores, selected, renormalize=False):
        values = scores.values if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=np.float64)
        selected = np.array(selected, dtype=bool)
        gates = np.where(selected, values, 0.0)
        if renormalize:
            totals = gates.sum(axis=1, keepdims=True)
            gates = np.divide(gates, totals, out=np.zeros_like(gates), where=totals > 0)
        selected.setflags(write=False)
        gates.setflags(write=False)
        return cls(selected=selected, gate_weights=gates)

    @property
    def counts(self):
        """Selected experts per token."""
        return self.selected.sum(axis=1)

    @property
    def total(self):
        return int(self.selected.sum())

    @property
    def shape(self):
        return self.selected.shape

    def pairs(self):
        """Selected (token, expert) pairs, zero-based, in row-major order."""
        return {(int(t), int(i)) for t, i in zip(*np.nonzero(self.selected))}


def _as_scores(scores):
    return scores if isinstance(scores, ScoreMatrix) else ScoreMatrix(scores)


def descending_order(values):
    """Indices of values sorted by descending score; equal scores keep ascending index order."""
    return np.argsort(-np.asarray(values), axis=-1, kind="stable")


def softmax_scores(logits):
    """Row-wise softmax of router logits (max-subtraction keeps large logits finite)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise InvalidInputError(f"Logits must be a 2-D matrix, got shape {logits.shape}")
    if not np.isfinite(logits).all():
        raise InvalidInputError("Logits contain non-finite values")
    return ScoreMatrix(softmax(logits, axis=1))


def _check_k(k, n_experts):
    if k < 1:
        raise BudgetInfeasibleError(f"k must be at least 1, got {k}")
    if k > n_experts:
        raise BudgetInfeasibleError(f"k={k} exceeds the number of experts N={n_experts}")


def topk_route(scores, k, renormalize=False):
    """Each token independently keeps its k highest-scoring experts."""
    scores = _as_scores(scores)
    _check_k(k, scores.n_experts)
    chosen = descending_order(scores.values)[:, :k]
    selected = np.zeros(scores.values.shape, dtype=bool)
    np.put_along_axis(selected, chosen, True, axis=1)
    return RoutingMask.from_selection(scores, selected, renormalize)


def seqtopk_route_unbounded(scores, k, renormalize=False):
    """Keep the T*k largest entries of the whole (T, N) matrix; a token may receive zero experts."""
    scores = _as_scores(scores)
    _check_k(k, scores.n_experts)
    n_tokens, n_experts = scores.values.shape
    budget = min(n_tokens * k, n_tokens * n_experts)
    flat_order = descending_order(scores.values.ravel())[:budget]
    selected = np.zeros(n_tokens * n_experts, dtype=bool)
    selected[flat_order] = True
    return RoutingMask.from_selection(scores, selected.reshape(n_tokens, n_experts), renormalize)


def seqtopk_route_bounded(scores, budget, renormalize=False):
    """
    Sequence-level selection of T*k_tok entries with lower_bound <= experts per token <= upper_bound.

    Every token first receives its lower_bound best experts; the remaining budget is then filled
    greedily from the globally largest unselected scores whose token is still below upper_bound.
    Greedy under per-token caps maximizes the total selected score. Equal scores are taken in
    order of their rank within the token's own row, then lower token, then lower expert, so
    uniform scores give every token exactly k_tok experts.
    """
    scores = _as_scores(scores)
    n_tokens, n_experts = scores.values.shape
    lower, upper = budget.resolve(n_experts)
    total_budget = budget.sequence_budget(n_tokens)
    if upper * n_tokens < total_budget or lower * n_tokens > total_budget:
        raise BudgetInfeasibleError(
            f"Cannot place {total_budget} selections with per-token bounds [{lower}, {upper}] over {n_tokens} tokens"
        )

    selected = np.zeros((n_tokens, n_experts), dtype=bool)
    np.put_along_axis(selected, descending_order(scores.values)[:, :lower], True, axis=1)
    counts = np.full(n_tokens, lower)
    remaining = total_budget - lower * n_tokens

    for flat_index in _fill_order(scores.values):
        if remaining == 0:
            break
        token, expert = divmod(int(flat_index), n_experts)
        if selected[token, expert] or counts[token] >= upper:
            continue
        selected[token, expert] = True
        counts[token] += 1
        remaining -= 1

    return RoutingMask.from_selection(scores, selected, renormalize)


def _fill_order(values):
    """Flat indices by descending score, then in-row rank, then row-major position."""
    n_tokens, n_experts = values.shape
    ranks = np.empty((n_tokens, n_experts), dtype=np.int64)
    np.put_along_axis(ranks, descending_order(values), np.arange(n_experts)[None, :].repeat(n_tokens, 0), axis=1)
    return np.lexsort((np.arange(values.size), ranks.ravel(), -values.ravel()))


def batchtopk_route(batch_scores, k, renormalize=False):
    """Select sum(T_b) * k entries across every token of every sequence in the batch."""
    batch = [_as_scores(s) for s in batch_scores]
    if not batch:
        raise InvalidInputError("BatchTopK needs at least one sequence")
    n_experts = batch[0].n_experts
    if any(s.n_experts != n_experts for s in batch):
        raise InvalidInputError("All sequences in a batch must share the same number of experts")
    _check_k(k, n_experts)

    flat = np.concatenate([s.values.ravel() for s in batch])
    n_select = sum(s.n_tokens for s in batch) * k
    selected = np.zeros(flat.size, dtype=bool)
    selected[descending_order(flat)[:n_select]] = True

    masks = []
    offset = 0
    for s in batch:
        size = s.values.size
        masks.append(RoutingMask.from_selection(s, selected[offset:offset + size].reshape(s.values.shape), renormalize))
        offset += size
    return masks


def strategy_budget(strategy, n_tokens, n_experts, k):
    """Total selections a strategy promises for one sequence (BatchTopK: per-batch only)."""
    strategy = RoutingStrategy(strategy)
    if strategy in (RoutingStrategy.SEQTOPK, RoutingStrategy.BATCHTOPK):
        return min(n_tokens * k, n_tokens * n_experts)
    return n_tokens * k


def route(scores, strategy, budget, renormalize=False):
    """Dispatch one sequence to the configured strategy."""
    # Imported here: the online path builds on this module
    from .expert_cache import replay_online

    scores = _as_scores(scores)
    strategy = RoutingStrategy(strategy)
    if strategy == RoutingStrategy.TOPK:
        return topk_route(scores, budget.k_tok, renormalize)
    if strategy == RoutingStrategy.SEQTOPK:
        return seqtopk_route_unbounded(scores, budget.k_tok, renormalize)
    if strategy == RoutingStrategy.SEQTOPK_BOUNDED:
        return seqtopk_route_bounded(scores, budget, renormalize)
    if strategy == RoutingStrategy.BATCHTOPK:
        return batchtopk_route([scores], budget.k_tok, renormalize)[0]
    cache = replay_online(scores.values, budget)
    return RoutingMask.from_selection(scores, cache.activation_matrix(), renormalize)


def selection_margin(scores, mask):
    """Smallest gap between any selected score and any unselected score (inf if either side is empty)."""
    values = _as_scores(scores).values
    chosen = values[mask.selected]
    others = values[~mask.selected]
    if chosen.size == 0 or others.size == 0:
        return float("inf")
    gaps = np.abs(chosen[:, None] - others[None, :])
    return float(gaps.min())
