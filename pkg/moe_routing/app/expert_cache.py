"""Expert Cache and causal (online) SeqTopK routing for step-wise decoding."""
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from .config import settings
from .exceptions import CheckpointError, InvalidInputError
from .routing import descending_order

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ExpertCache:
    """
    Append-only history of routing score rows and realized activations for one decoding session.

    score_rows holds S_m one row per decoded token; activated holds the experts each token was
    routed to. A row appended by cache_append is pending until online_route_step records its set.
    """
    n_experts: int
    score_rows: tuple = ()
    activated: tuple = ()

    @property
    def steps(self):
        return len(self.score_rows)

    @property
    def pending(self):
        return len(self.score_rows) - len(self.activated)

    @property
    def cumulative_count(self):
        return sum(len(experts) for experts in self.activated)

    def score_matrix(self):
        if not self.score_rows:
            return np.zeros((0, self.n_experts))
        return np.vstack(self.score_rows)

    def activation_matrix(self):
        """Realized activations as a boolean (steps, N) matrix."""
        matrix = np.zeros((len(self.activated), self.n_experts), dtype=bool)
        for token, experts in enumerate(self.activated):
            matrix[token, list(experts)] = True
        return matrix

    def memory_footprint(self):
        """Number of cached values (steps x N), versus steps x H for a KV cache."""
        return self.steps * self.n_experts

    def to_snapshot(self):
        return CacheSnapshot(
            format_version=SNAPSHOT_FORMAT_VERSION,
            n_experts=self.n_experts,
            rows=[[float(v) for v in row] for row in self.score_rows],
            activated=[list(experts) for experts in self.activated],
        )

    @classmethod
    def from_snapshot(cls, snapshot):
        if snapshot.format_version != SNAPSHOT_FORMAT_VERSION:
            raise CheckpointError(f"Unsupported cache snapshot version {snapshot.format_version}")
        cache = cls(n_experts=snapshot.n_experts)
        for row in snapshot.rows:
            cache = cache_append(cache, row)
        if len(snapshot.activated) > len(snapshot.rows):
            raise CheckpointError("Snapshot records more activations than score rows")
        activated = tuple(tuple(int(i) for i in experts) for experts in snapshot.activated)
        if any(not 0 <= i < cache.n_experts for experts in activated for i in experts):
            raise CheckpointError(f"Snapshot activates an expert outside [0, {cache.n_experts})")
        return ExpertCache(n_experts=cache.n_experts, score_rows=cache.score_rows, activated=activated)


class CacheSnapshot(BaseModel):
    format_version: int = Field(SNAPSHOT_FORMAT_VERSION, ge=1)
    n_experts: int = Field(..., ge=1)
    rows: List[List[float]] = []
    activated: List[List[int]] = []


def save_cache(cache, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cache.to_snapshot().model_dump_json())
    logger.info(f"Saved expert cache with {cache.steps} steps to {path}")


def load_cache(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Cache snapshot not found: {path}")
    try:
        snapshot = CacheSnapshot.model_validate_json(path.read_text())
    except ValidationError as e:
        raise CheckpointError(f"Corrupt cache snapshot {path}: {e}") from e
    return ExpertCache.from_snapshot(snapshot)


@dataclass(frozen=True)
class OnlineStepResult:
    selected_experts: tuple
    gate_weights: tuple
    cumulative_count: int
    remaining_budget_used: int
    forced_by_lower_bound: bool = False


def _validate_row(row, n_experts):
    row = np.array(row, dtype=np.float64)
    if row.ndim != 1 or row.shape[0] != n_experts:
        raise InvalidInputError(f"Score row must have length {n_experts}, got shape {row.shape}")
    if not np.isfinite(row).all() or (row < 0).any():
        raise InvalidInputError("Score row must contain finite non-negative probabilities")
    if abs(row.sum() - 1.0) > settings.SCORE_TOLERANCE:
        raise InvalidInputError(f"Score row sums to {row.sum():.6f}, expected 1")
    row.setflags(write=False)
    return row


def cache_append(cache, score_row):
    """Append the latest token's score row; earlier rows are shared unchanged."""
    row = _validate_row(score_row, cache.n_experts)
    return ExpertCache(n_experts=cache.n_experts, score_rows=cache.score_rows + (row,), activated=cache.activated)


def _record(cache, experts):
    if cache.pending != 1:
        raise InvalidInputError(f"Expected exactly one pending row, found {cache.pending}")
    return ExpertCache(
        n_experts=cache.n_experts, score_rows=cache.score_rows, activated=cache.activated + (tuple(experts),)
    )


def online_route_step(cache, new_row, budget):
    """
    Route the newest token against the whole cached history S_m.

    Candidates are the new token's entries inside the top m*k entries of S_m. The token may
    activate at most b = m*k - (activations so far) of them, capped by upper_bound. If that
    leaves fewer than lower_bound experts, the token's best lower_bound experts are used instead.
    """
    if cache.pending:
        raise InvalidInputError("Cache has an unrouted row; route it before appending another")
    lower, upper = budget.resolve(cache.n_experts)
    cache = cache_append(cache, new_row)
    m = cache.steps
    k = budget.k_tok
    n_experts = cache.n_experts

    top = descending_order(cache.score_matrix().ravel())[: m * k]
    own_offset = (m - 1) * n_experts
    candidates = [int(i) - own_offset for i in top if i >= own_offset]

    previous = cache.cumulative_count
    remaining = m * k - previous
    n_take = max(0, min(len(candidates), remaining, upper))
    chosen = candidates[:n_take]
    forced = False
    if len(chosen) < lower:
        chosen = [int(i) for i in descending_order(cache.score_rows[-1])[:lower]]
        forced = True
        if len(chosen) > remaining:
            logger.warning(f"Lower bound forced {len(chosen)} experts at step {m} with only {remaining} budget left")

    experts = tuple(sorted(chosen))
    cache = _record(cache, experts)
    row = cache.score_rows[-1]
    result = OnlineStepResult(
        selected_experts=experts,
        gate_weights=tuple(float(row[i]) for i in experts),
        cumulative_count=cache.cumulative_count,
        remaining_budget_used=len(experts),
        forced_by_lower_bound=forced,
    )
    return cache, result


def replay_online(rows, budget):
    """Rebuild a cache from a stream of score rows by routing each step in order."""
    rows = np.asarray(rows, dtype=np.float64)
    cache = ExpertCache(n_experts=rows.shape[1])
    for row in rows:
        cache, _ = online_route_step(cache, row, budget)
    return cache


def selection_set_at_horizon(cache, k):
    """Zero-based (token, expert) pairs of the top m*k entries of the cached S_m."""
    if cache.steps < 1:
        raise InvalidInputError("Horizon selection needs at least one cached step")
    n_experts = cache.n_experts
    budget = min(cache.steps * k, cache.steps * n_experts)
    top = descending_order(cache.score_matrix().ravel())[:budget]
    return {divmod(int(i), n_experts) for i in top}


@dataclass
class BudgetAudit:
    k: int
    cumulative: list = field(default_factory=list)
    ratios: list = field(default_factory=list)

    @property
    def max_ratio(self):
        return max(self.ratios) if self.ratios else 0.0

    @property
    def within_budget(self):
        return self.max_ratio <= 1.0

    def to_frame(self):
        return pd.DataFrame({
            "step": np.arange(1, len(self.cumulative) + 1),
            "cumulative": self.cumulative,
            "budget": [m * self.k for m in range(1, len(self.cumulative) + 1)],
            "ratio": self.ratios,
        })


def audit_budget(cache, k):
    """Cumulative activations per step and their ratio to m*k."""
    if not cache.activated:
        raise InvalidInputError("Budget audit needs at least one routed step")
    cumulative = np.cumsum([len(experts) for experts in cache.activated]).tolist()
    ratios = [c / (m * k) for m, c in enumerate(cumulative, start=1)]
    audit = BudgetAudit(k=k, cumulative=cumulative, ratios=ratios)
    if not audit.within_budget:
        logger.warning(f"Cumulative activations exceeded m*k (max ratio {audit.max_ratio:.3f})")
    return audit


def snapshot_json(cache):
    """Canonical JSON text of a cache snapshot (used for replay comparisons)."""
    return json.dumps(cache.to_snapshot().model_dump(), sort_keys=True)
