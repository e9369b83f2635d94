"""Stacked toy language model: token embedding, L MoE layers and a linear LM head."""
from dataclasses import dataclass, field, replace
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import softmax

from .autograd import Tensor, as_tensor
from .exceptions import CheckpointError, InvalidInputError
from .expert_cache import ExpertCache
from .moe_layer import MoeLayerParams, init_layer_params, moe_forward, moe_forward_online
from .schemas import BudgetConfig, ModelConfig, RoutingStrategy

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ToyMoeModel:
    embedding: object
    layers: tuple
    head: object
    seed: int = 0

    @property
    def vocab_size(self):
        return np.asarray(_data(self.embedding)).shape[0]

    @property
    def d_model(self):
        return np.asarray(_data(self.embedding)).shape[1]

    @property
    def n_experts(self):
        return self.layers[0].n_experts

    @property
    def config(self):
        return ModelConfig(
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            d_hidden=self.layers[0].d_hidden,
            n_experts=self.n_experts,
            n_layers=len(self.layers),
        )

    def named_arrays(self):
        """Flat name -> array record, the checkpoint layout."""
        arrays = {"embedding": _data(self.embedding)}
        for index, layer in enumerate(self.layers):
            for name, array in layer.named_arrays().items():
                arrays[f"layers.{index}.{name}"] = array
        arrays["head"] = _data(self.head)
        return arrays

    @classmethod
    def from_named_arrays(cls, arrays, seed=0):
        n_layers = len({key.split(".")[1] for key in arrays if key.startswith("layers.")})
        layers = tuple(
            MoeLayerParams(**{name: np.asarray(arrays[f"layers.{i}.{name}"], dtype=np.float64)
                              for name in ("router", "w_in", "b_in", "w_out", "b_out")}).validate()
            for i in range(n_layers)
        )
        return cls(
            embedding=np.asarray(arrays["embedding"], dtype=np.float64),
            layers=layers,
            head=np.asarray(arrays["head"], dtype=np.float64),
            seed=seed,
        )

    def bind(self):
        """Copy of the model whose parameters are gradient-recording leaf tensors."""
        return replace(
            self,
            embedding=Tensor(_data(self.embedding).copy(), requires_grad=True),
            layers=tuple(layer.bind() for layer in self.layers),
            head=Tensor(_data(self.head).copy(), requires_grad=True),
        )

    def gradients(self):
        """Gradients of a bound model, keyed like named_arrays (zeros where nothing flowed)."""
        grads = {}
        for name, tensor in self._named_tensors().items():
            grads[name] = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        return grads

    def _named_tensors(self):
        tensors = {"embedding": self.embedding}
        for index, layer in enumerate(self.layers):
            for name in ("router", "w_in", "b_in", "w_out", "b_out"):
                tensors[f"layers.{index}.{name}"] = getattr(layer, name)
        tensors["head"] = self.head
        return tensors

    def apply_update(self, grads, learning_rate):
        """Plain SGD step returning a new model of numpy arrays."""
        arrays = {name: array - learning_rate * grads[name] for name, array in self.named_arrays().items()}
        return ToyMoeModel.from_named_arrays(arrays, seed=self.seed)

    def embed(self, ids):
        ids = np.asarray(ids)
        if ids.ndim != 1 or ids.size == 0:
            raise InvalidInputError("Token ids must be a non-empty 1-D sequence")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise InvalidInputError(f"Token ids must lie in [0, {self.vocab_size})")
        return as_tensor(self.embedding)[ids]


def _data(value):
    return value.data if isinstance(value, Tensor) else value


def init_model(config, seed):
    """Deterministic initialization: every draw comes from numpy's PCG64 seeded with seed."""
    rng = np.random.default_rng(seed)
    embedding = rng.normal(0.0, 1.0, size=(config.vocab_size, config.d_model))
    layers = tuple(
        init_layer_params(rng, config.d_model, config.d_hidden, config.n_experts) for _ in range(config.n_layers)
    )
    head = rng.normal(0.0, 1.0 / np.sqrt(config.d_model), size=(config.d_model, config.vocab_size))
    return ToyMoeModel(embedding=embedding, layers=layers, head=head, seed=seed)


@dataclass
class ModelOutput:
    logits: Tensor
    layer_outputs: list = field(default_factory=list)

    @property
    def masks(self):
        return [out.mask for out in self.layer_outputs]

    @property
    def expert_invocations(self):
        return sum(out.flop_estimate for out in self.layer_outputs)


def model_forward(model, ids, strategy, budget, renormalize=False, masks=None):
    """Embedding -> MoE layers -> LM head logits; masks (one per layer) bypass routing."""
    hidden = model.embed(ids)
    outputs = []
    for index, layer in enumerate(model.layers):
        layer_mask = masks[index] if masks is not None else None
        out = moe_forward(layer, hidden, strategy, budget, renormalize=renormalize, mask=layer_mask)
        outputs.append(out)
        hidden = out.hidden
    logits = hidden @ as_tensor(model.head)
    return ModelOutput(logits=logits, layer_outputs=outputs)


def predict_proba(model, ids, strategy, budget, renormalize=False):
    """LM head distribution per position, shape (T, V)."""
    output = model_forward(model, ids, strategy, budget, renormalize)
    return softmax(output.logits.data, axis=-1), output


def new_decoding_state(model):
    return tuple(ExpertCache(n_experts=layer.n_experts) for layer in model.layers)


def decode_step(model, caches, token_id, budget):
    """One online step through every layer; returns (caches, next-token probabilities, step results)."""
    hidden = model.embed([token_id]).data[0]
    new_caches = []
    steps = []
    for layer, cache in zip(model.layers, caches):
        cache, hidden, step = moe_forward_online(layer, cache, hidden, budget)
        new_caches.append(cache)
        steps.append(step)
    logits = hidden @ _data(model.head)
    return tuple(new_caches), softmax(logits), steps


def save_checkpoint(model, path, strategy=None, budget=None):
    """
    Versioned flat record of named float64 tensors plus JSON metadata (.npz).

    strategy and budget record the routing the model was trained with; analyze uses them as defaults.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "seed": int(model.seed),
        "init": "numpy.random.default_rng(seed), PCG64",
        "model": model.config.model_dump(),
        "shapes": {name: list(array.shape) for name, array in model.named_arrays().items()},
    }
    if strategy is not None:
        meta["routing"] = {
            "strategy": RoutingStrategy(strategy).value,
            "budget": budget.model_dump() if budget is not None else None,
        }
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta, sort_keys=True)), **model.named_arrays())
    logger.info(f"Saved checkpoint to {path}")


def _read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["__meta__"]))
            arrays = {name: archive[name] for name in archive.files if name != "__meta__"}
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}") from e
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {meta.get('format_version')}")
    return meta, arrays


def load_checkpoint(path):
    meta, arrays = _read_checkpoint(path)
    for name, shape in meta["shapes"].items():
        if name not in arrays or list(arrays[name].shape) != shape:
            raise CheckpointError(f"Tensor {name} is missing or not of shape {shape}")
    logger.info(f"Loaded checkpoint from {path}")
    return ToyMoeModel.from_named_arrays(arrays, seed=meta["seed"])


def checkpoint_routing(path):
    """(strategy, BudgetConfig) recorded at save time; either is None when absent."""
    meta, _ = _read_checkpoint(path)
    routing = meta.get("routing") or {}
    strategy = RoutingStrategy(routing["strategy"]) if routing.get("strategy") else None
    budget = BudgetConfig(**routing["budget"]) if routing.get("budget") else None
    return strategy, budget


def token_logprob_shift(model, ids, targets, k_values, reference_k=None):
    """
    P_k(y_t | x) - P_ref(y_t | x) per token under TopK routing with each budget k.

    reference_k defaults to the largest value in k_values.
    """
    k_values = sorted(set(int(k) for k in k_values))
    reference_k = max(k_values) if reference_k is None else int(reference_k)
    for k in k_values + [reference_k]:
        if not 1 <= k <= model.n_experts:
            raise InvalidInputError(f"k={k} outside [1, {model.n_experts}]")
    targets = np.asarray(targets)
    positions = np.arange(targets.size)

    def target_probs(k):
        probs, _ = predict_proba(model, ids, RoutingStrategy.TOPK, BudgetConfig(k_tok=k, upper_bound=k))
        return probs[positions, targets]

    reference = target_probs(reference_k)
    rows = []
    for k in k_values:
        probs = reference if k == reference_k else target_probs(k)
        for t in positions:
            rows.append({
                "token": int(t),
                "target": int(targets[t]),
                "k": k,
                "reference_k": reference_k,
                "prob": float(probs[t]),
                "reference_prob": float(reference[t]),
                "shift": float(probs[t] - reference[t]),
            })
    return pd.DataFrame(rows)


def summarize_logprob_shift(shift_frame, small=0.01, large=0.5):
    """Share of tokens with |shift| below small and above large, per k."""
    magnitude = shift_frame.assign(abs_shift=shift_frame["shift"].abs())
    summary = magnitude.groupby("k").agg(
        tokens=("abs_shift", "size"),
        small_share=("abs_shift", lambda s: float((s < small).mean())),
        large_share=("abs_shift", lambda s: float((s > large).mean())),
        mean_shift=("shift", "mean"),
    )
    return summary.reset_index()
