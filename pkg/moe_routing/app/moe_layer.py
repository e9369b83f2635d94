"""
Toy MoE feed-forward layer: router projection, N two-layer SiLU experts and the sparse
combination h_t = sum_i gate[t, i] * E_i(x_t) + x_t over the selected experts only.
"""
from dataclasses import dataclass, fields, replace
import logging

import numpy as np

from .autograd import Tensor, as_tensor, scatter_rows
from .exceptions import InvalidInputError
from .expert_cache import ExpertCache, online_route_step
from .routing import RoutingMask, ScoreMatrix, route
from .schemas import RoutingStrategy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MoeLayerParams:
    """
    Router weights W (N, D) and expert FFN weights D -> F -> D for N experts.

    Fields hold numpy arrays for storage and Tensors once bound for a gradient-recording pass.
    """
    router: object
    w_in: object
    b_in: object
    w_out: object
    b_out: object

    @property
    def n_experts(self):
        return _data(self.router).shape[0]

    @property
    def d_model(self):
        return _data(self.router).shape[1]

    @property
    def d_hidden(self):
        return _data(self.w_in).shape[2]

    def named_arrays(self):
        return {f.name: _data(getattr(self, f.name)) for f in fields(self)}

    def bind(self):
        """Leaf tensors over copies of the weights, ready to record gradients."""
        return replace(self, **{name: Tensor(array.copy(), requires_grad=True)
                                for name, array in self.named_arrays().items()})

    def validate(self):
        n, d, f = self.n_experts, self.d_model, self.d_hidden
        expected = {"router": (n, d), "w_in": (n, d, f), "b_in": (n, f), "w_out": (n, f, d), "b_out": (n, d)}
        for name, array in self.named_arrays().items():
            if array.shape != expected[name]:
                raise InvalidInputError(f"Parameter {name} has shape {array.shape}, expected {expected[name]}")
            if not np.isfinite(array).all():
                raise InvalidInputError(f"Parameter {name} contains non-finite values")
        return self


def _data(value):
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def init_layer_params(rng, d_model, d_hidden, n_experts):
    """Scaled-normal initialization drawn from the supplied numpy Generator."""
    return MoeLayerParams(
        router=rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(n_experts, d_model)),
        w_in=rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(n_experts, d_model, d_hidden)),
        b_in=np.zeros((n_experts, d_hidden)),
        w_out=rng.normal(0.0, 1.0 / np.sqrt(d_hidden), size=(n_experts, d_hidden, d_model)),
        b_out=np.zeros((n_experts, d_model)),
    )


def router_scores(params, inputs):
    """s_t = softmax(W x_t) for every row of inputs, as a Tensor (T, N)."""
    return (as_tensor(inputs) @ as_tensor(params.router).T).softmax(axis=-1)


@dataclass
class LayerOutput:
    hidden: Tensor
    mask: RoutingMask
    scores: Tensor
    flop_estimate: int


def expert_forward(params, expert, x):
    """E_i(x) = SiLU(x W_in + b_in) W_out + b_out for a block of rows x."""
    hidden = (as_tensor(x) @ as_tensor(params.w_in)[expert] + as_tensor(params.b_in)[expert]).silu()
    return hidden @ as_tensor(params.w_out)[expert] + as_tensor(params.b_out)[expert]


def _check_inputs(params, inputs):
    data = _data(inputs)
    if data.ndim != 2 or data.shape[1] != params.d_model:
        raise InvalidInputError(f"Inputs must have shape (T, {params.d_model}), got {data.shape}")
    if data.shape[0] < 1:
        raise InvalidInputError("Inputs must contain at least one token")


def moe_forward(params, inputs, strategy, budget, renormalize=False, mask=None):
    """
    One MoE layer over a full sequence.

    When mask is given (BatchTopK across a batch, or a replayed decision) routing is skipped
    and the supplied selection is combined with the current scores.
    """
    _check_inputs(params, inputs)
    strategy = RoutingStrategy(strategy)
    scores = router_scores(params, inputs)
    score_matrix = ScoreMatrix(scores.data)
    if mask is None:
        mask = route(score_matrix, strategy, budget, renormalize)
    elif mask.shape != score_matrix.values.shape:
        raise InvalidInputError(f"Mask shape {mask.shape} does not match scores {score_matrix.values.shape}")

    gates = _gate_tensor(scores, mask, renormalize)
    hidden = _combine(params, inputs, mask, gates)
    return LayerOutput(hidden=hidden, mask=mask, scores=scores, flop_estimate=mask.total)


def _gate_tensor(scores, mask, renormalize):
    """Gate weights as a differentiable function of the scores, zero outside the mask."""
    gates = scores * mask.selected.astype(np.float64)
    if renormalize:
        safe = np.where(mask.selected.any(axis=1, keepdims=True), 1.0, 0.0)
        denom = gates.sum(axis=1, keepdims=True) + (1.0 - safe)
        gates = gates / denom
    return gates


def _combine(params, inputs, mask, gates):
    inputs = as_tensor(inputs)
    n_tokens = inputs.shape[0]
    out = inputs
    for expert in range(params.n_experts):
        rows = np.flatnonzero(mask.selected[:, expert])
        if rows.size == 0:
            continue
        weight = gates[(rows, np.full(rows.size, expert))]
        contribution = expert_forward(params, expert, inputs[rows]) * weight.reshape(rows.size, 1)
        out = out + scatter_rows(contribution, rows, n_tokens)
    return out


def dense_reference_forward(params, inputs, mask):
    """Evaluate every expert on every token, then zero unselected contributions (test oracle)."""
    params = MoeLayerParams(**params.named_arrays())
    x = np.asarray(_data(inputs), dtype=np.float64)
    out = x.copy()
    for expert in range(params.n_experts):
        hidden = x @ params.w_in[expert] + params.b_in[expert]
        hidden = hidden * 0.5 * (1.0 + np.tanh(0.5 * hidden))
        y = hidden @ params.w_out[expert] + params.b_out[expert]
        out += mask.gate_weights[:, expert][:, None] * y
    return out


def moe_forward_online(params, cache, new_input, budget):
    """
    One decoding step: score the new token, route it against the Expert Cache and combine.

    Returns the updated cache, the output vector and the step result.
    """
    x = np.asarray(_data(new_input), dtype=np.float64).reshape(1, -1)
    _check_inputs(params, x)
    if cache.n_experts != params.n_experts:
        raise InvalidInputError(f"Cache tracks {cache.n_experts} experts, layer has {params.n_experts}")
    scores = router_scores(params, x)
    cache, step = online_route_step(cache, scores.data[0], budget)
    selected = np.zeros((1, params.n_experts), dtype=bool)
    selected[0, list(step.selected_experts)] = True
    mask = RoutingMask.from_selection(scores.data, selected)
    hidden = _combine(params, x, mask, _gate_tensor(scores, mask, False))
    return cache, hidden.data[0], step


def new_session(params):
    return ExpertCache(n_experts=params.n_experts)
