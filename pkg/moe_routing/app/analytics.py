"""
Routing analyses at toy scale: normalized routing entropy, expert load, activation-count
histograms, token entropy versus activated experts, batch-size sensitivity and the
upper-bound ablation.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
import pandas as pd
from scipy.stats import entropy, pearsonr

from .config import settings
from .exceptions import CorrelationUndefinedError, InvalidInputError
from .routing import ScoreMatrix, batchtopk_route, route
from .schemas import BudgetConfig, RoutingStrategy

logger = logging.getLogger(__name__)


@dataclass
class RoutingStats:
    per_expert_load: np.ndarray
    normalized_entropy: float
    activation_histogram: dict = field(default_factory=dict)
    layer_index: int = 0

    def to_dict(self):
        return {
            "layer": self.layer_index,
            "normalized_entropy": self.normalized_entropy,
            "per_expert_load": [float(p) for p in self.per_expert_load],
            "activation_histogram": {int(c): int(n) for c, n in self.activation_histogram.items()},
        }


def normalized_entropy(distribution):
    """H(p) / log E in natural log, with 0 log 0 = 0; a single expert counts as balanced."""
    p = np.asarray(distribution, dtype=np.float64)
    if p.size == 1:
        return 1.0
    value = float(entropy(p) / np.log(p.size))
    return min(max(value, 0.0), 1.0)


def mask_assignment_probs(mask):
    """Per-token assignment distribution over experts from a mask's gate weights."""
    gates = np.asarray(mask.gate_weights, dtype=np.float64)
    totals = gates.sum(axis=1, keepdims=True)
    keep = totals[:, 0] > 0
    return gates[keep] / totals[keep]


def routing_entropy(assignment_probs, masks=None, layer_index=0):
    """
    Overall routing distribution p_e (mean of per-token assignment rows) and its normalized entropy.

    assignment_probs is a (tokens, E) matrix or a list of them; masks, when given, feed the
    activation histogram, otherwise nonzero entries per row are counted.
    """
    if isinstance(assignment_probs, (list, tuple)):
        if not assignment_probs:
            raise InvalidInputError("Routing entropy needs at least one token")
        probs = np.vstack([np.asarray(p, dtype=np.float64) for p in assignment_probs])
    else:
        probs = np.asarray(assignment_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise InvalidInputError("Routing entropy needs at least one token")
    if (np.abs(probs.sum(axis=1) - 1.0) > settings.SCORE_TOLERANCE).any() or (probs < 0).any():
        raise InvalidInputError("Every assignment row must be a probability distribution")

    load = probs.mean(axis=0)
    if masks is not None:
        histogram = activation_distribution(masks)
    else:
        histogram = _histogram(np.count_nonzero(probs, axis=1))
    return RoutingStats(
        per_expert_load=load,
        normalized_entropy=normalized_entropy(load),
        activation_histogram=histogram,
        layer_index=layer_index,
    )


def _histogram(counts):
    values, frequencies = np.unique(np.asarray(counts, dtype=np.int64), return_counts=True)
    return {int(v): int(n) for v, n in zip(values, frequencies)}


def activation_distribution(masks):
    """Exact histogram {experts per token: tokens} over a list of masks."""
    if not isinstance(masks, (list, tuple)):
        masks = [masks]
    if not masks:
        return {}
    return _histogram(np.concatenate([m.counts for m in masks]))


def expert_load_frame(masks, layer_index=0):
    """Selections per expert (the expert-load histogram) as a frame."""
    selected = np.vstack([m.selected for m in masks])
    counts = selected.sum(axis=0)
    return pd.DataFrame({
        "layer": layer_index,
        "expert": np.arange(counts.size),
        "selections": counts,
        "share": counts / max(int(counts.sum()), 1),
    })


@dataclass
class TokenEntropyReport:
    records: pd.DataFrame
    correlation: float
    binned: pd.DataFrame


def token_entropy(probs):
    """H_t = -sum_j p_tj log p_tj per row (nats)."""
    return entropy(np.asarray(probs, dtype=np.float64), axis=-1)


def token_entropy_vs_experts(lm_probs, masks, difficulty=None, n_bins=10):
    """
    Pearson correlation between token entropy and activated experts, plus decile-binned means.

    lm_probs: list of (T, V) LM-head distributions; masks: matching RoutingMasks, or a list of
    per-layer mask lists, in which case counts are averaged over layers.
    """
    entropies = []
    counts = []
    for probs, mask in zip(lm_probs, masks):
        entropies.append(token_entropy(probs))
        if isinstance(mask, (list, tuple)):
            counts.append(np.mean([m.counts for m in mask], axis=0))
        else:
            counts.append(mask.counts.astype(np.float64))
    records = pd.DataFrame({
        "token": np.concatenate([np.arange(len(e)) for e in entropies]) if entropies else [],
        "entropy": np.concatenate(entropies) if entropies else [],
        "activated_experts": np.concatenate(counts) if counts else [],
    })
    if difficulty is not None:
        records["difficulty"] = np.concatenate([np.asarray(d).ravel() for d in difficulty])
    return correlate_records(records, n_bins)


def correlate_records(records, n_bins=10):
    """Pearson r and entropy-binned means over records with entropy and activated_experts columns."""
    if len(records) < 2 or records["entropy"].nunique() < 2 or records["activated_experts"].nunique() < 2:
        raise CorrelationUndefinedError("Correlation needs variation in both entropy and activated experts")
    correlation = float(pearsonr(records["entropy"], records["activated_experts"])[0])

    bins = pd.qcut(records["entropy"], q=min(n_bins, records["entropy"].nunique()), duplicates="drop")
    binned = (
        records.groupby(bins, observed=True)
        .agg(mean_entropy=("entropy", "mean"), mean_experts=("activated_experts", "mean"), tokens=("entropy", "size"))
        .reset_index(drop=True)
    )
    logger.info(f"Token entropy vs activated experts: r={correlation:.3f} over {len(records)} tokens")
    return TokenEntropyReport(records=records, correlation=correlation, binned=binned)


def difficulty_summary(records):
    """Mean activated experts per difficulty label."""
    if "difficulty" not in records:
        raise InvalidInputError("Records carry no difficulty labels")
    return records.groupby("difficulty")["activated_experts"].mean().to_dict()


@dataclass
class BatchSweepResult:
    summary: pd.DataFrame
    masks: dict

    def invariant(self):
        """True when every sequence's mask is identical across all batch sizes."""
        sizes = list(self.masks)
        reference = self.masks[sizes[0]]
        for size in sizes[1:]:
            for a, b in zip(reference, self.masks[size]):
                if not np.array_equal(a.selected, b.selected):
                    return False
        return True


def batch_sensitivity_sweep(strategy, batch_sizes, corpus, budget):
    """
    Route a fixed corpus of score matrices in consecutive batches of each size.

    Sequence-local strategies route each sequence alone, so their masks cannot depend on the
    batch; BatchTopK competes across the batch and its per-sequence totals drift.
    """
    strategy = RoutingStrategy(strategy)
    corpus = [s if isinstance(s, ScoreMatrix) else ScoreMatrix(s) for s in corpus]
    rows = []
    all_masks = {}
    for size in batch_sizes:
        if size < 1 or len(corpus) % size:
            raise InvalidInputError(f"Corpus of {len(corpus)} sequences cannot be split into batches of {size}")
        masks = []
        for start in range(0, len(corpus), size):
            chunk = corpus[start:start + size]
            if strategy == RoutingStrategy.BATCHTOPK:
                masks.extend(batchtopk_route(chunk, budget.k_tok))
            else:
                masks.extend(route(s, strategy, budget) for s in chunk)
        all_masks[size] = masks
        deviation = [abs(m.total - s.n_tokens * budget.k_tok) for m, s in zip(masks, corpus)]
        rows.append({
            "strategy": strategy.value,
            "batch_size": size,
            "mean_selected_score": float(np.mean([m.gate_weights.sum() / s.n_tokens for m, s in zip(masks, corpus)])),
            "mean_budget_deviation": float(np.mean(deviation)),
            "sequences_changed": 0,
        })
    reference = all_masks[batch_sizes[0]]
    for row, size in zip(rows, batch_sizes):
        row["sequences_changed"] = int(sum(
            not np.array_equal(a.selected, b.selected) for a, b in zip(reference, all_masks[size])
        ))
    return BatchSweepResult(summary=pd.DataFrame(rows), masks=all_masks)


def upper_bound_ablation(corpus, k, offsets=(1, 2, 3, 4), include_unbounded=True):
    """Bounded SeqTopK with upper bounds K+offset (and N for the unbounded setting) over a score corpus."""
    corpus = [s if isinstance(s, ScoreMatrix) else ScoreMatrix(s) for s in corpus]
    n_experts = corpus[0].n_experts
    settings_to_run = [(f"K+{o}", min(k + o, n_experts)) for o in offsets]
    if include_unbounded:
        settings_to_run.append(("unbounded", n_experts))
    rows = []
    for label, upper in settings_to_run:
        budget = BudgetConfig(k_tok=k, lower_bound=1, upper_bound=upper)
        masks = [route(s, RoutingStrategy.SEQTOPK_BOUNDED, budget) for s in corpus]
        counts = np.concatenate([m.counts for m in masks])
        stats = routing_entropy([mask_assignment_probs(m) for m in masks], masks=masks)
        rows.append({
            "setting": label,
            "upper_bound": upper,
            "mean_selected_score": float(np.mean([m.gate_weights.sum() / s.n_tokens for m, s in zip(masks, corpus)])),
            "min_experts": int(counts.min()),
            "max_experts": int(counts.max()),
            "std_experts": float(counts.std()),
            "normalized_entropy": stats.normalized_entropy,
        })
    return pd.DataFrame(rows)


def layer_entropy_table(layer_scores, layer_masks, strategy):
    """Normalized routing entropy per layer from soft scores and from realized selections."""
    rows = []
    for layer, (scores, masks) in enumerate(zip(layer_scores, layer_masks)):
        soft = routing_entropy(scores, masks=masks, layer_index=layer)
        hard = routing_entropy([mask_assignment_probs(m) for m in masks], masks=masks, layer_index=layer)
        rows.append({
            "strategy": RoutingStrategy(strategy).value,
            "layer": layer,
            "score_entropy": soft.normalized_entropy,
            "selection_entropy": hard.normalized_entropy,
        })
    return pd.DataFrame(rows)
