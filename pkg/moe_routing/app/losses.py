import numpy as np

from .autograd import Tensor


def load_balance_loss(mask, scores):
    """
    Switch-style auxiliary loss N * sum_i f_i * P_i.

    f_i is the fraction of selected entries that went to expert i (a constant of the mask) and
    P_i the mean router score of expert i. Returns a Tensor when scores is a Tensor, else a float.
    """
    selected = mask.selected
    n_experts = selected.shape[1]
    total = selected.sum()
    fractions = selected.sum(axis=0) / total if total > 0 else np.zeros(n_experts)
    if isinstance(scores, Tensor):
        return (scores.mean(axis=0) * fractions).sum() * float(n_experts)
    values = scores.values if hasattr(scores, "values") else np.asarray(scores, dtype=np.float64)
    return float(n_experts * (fractions * values.mean(axis=0)).sum())
