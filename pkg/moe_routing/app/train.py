from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
from pathlib import Path

import mlflow
import numpy as np
import pandas as pd
from scipy.special import softmax

from .analytics import routing_entropy
from .autograd import cross_entropy
from .config import settings
from .exceptions import InvalidInputError, TrainingDivergenceError
from .losses import load_balance_loss
from .model import init_model, model_forward, save_checkpoint
from .moe_layer import moe_forward
from .routing import batchtopk_route
from .schemas import ModelConfig, RoutingStrategy, TrainConfig
from .synthetic_task import SyntheticTask

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["step", "task_loss", "aux_loss", "total_loss", "mean_experts_per_token", "entropy_normalized"]


@dataclass
class LossBreakdown:
    task_loss: float
    aux_loss: float
    total_loss: float
    expert_invocations: int
    tokens: int
    layer_scores: list
    layer_masks: list


def sequence_loss(model, ids, targets, strategy, budget, aux_coefficient, renormalize=False, masks=None):
    """Task cross-entropy plus aux_coefficient times the summed per-layer load-balance loss."""
    output = model_forward(model, ids, strategy, budget, renormalize=renormalize, masks=masks)
    task = cross_entropy(output.logits, targets)
    aux = None
    for layer_out in output.layer_outputs:
        term = load_balance_loss(layer_out.mask, layer_out.scores)
        aux = term if aux is None else aux + term
    total = task + aux * aux_coefficient if aux_coefficient > 0 else task
    return total, task, aux, output


def backward(model, ids, targets, strategy, budget, aux_coefficient=0.01, renormalize=False, masks=None):
    """
    Exact reverse-mode gradients of one sequence's loss with the routing mask held constant.

    Returns (gradients keyed like model.named_arrays(), LossBreakdown).
    """
    bound = model.bind()
    total, task, aux, output = sequence_loss(
        bound, ids, targets, strategy, budget, aux_coefficient, renormalize, masks
    )
    loss_value = float(total.data)
    if not np.isfinite(loss_value):
        raise TrainingDivergenceError(step=None, loss=loss_value)
    total.backward()
    breakdown = LossBreakdown(
        task_loss=float(task.data),
        aux_loss=float(aux.data) if aux is not None else 0.0,
        total_loss=loss_value,
        expert_invocations=output.expert_invocations,
        tokens=len(ids),
        layer_scores=[out.scores.data for out in output.layer_outputs],
        layer_masks=output.masks,
    )
    return bound.gradients(), breakdown


def batch_masks(model, batch, budget, renormalize=False):
    """BatchTopK routing decisions for every sequence and layer of a batch (no gradients)."""
    hidden = [model.embed(ids) for ids in batch.ids]
    per_sequence = [[] for _ in range(len(batch))]
    for layer in model.layers:
        scores = [(h.data @ np.asarray(layer.router).T) for h in hidden]
        masks = batchtopk_route([softmax(s, axis=-1) for s in scores], budget.k_tok, renormalize)
        for b, mask in enumerate(masks):
            per_sequence[b].append(mask)
            hidden[b] = moe_forward(layer, hidden[b], RoutingStrategy.BATCHTOPK, budget, renormalize, mask=mask).hidden
    return per_sequence


@dataclass
class TrainResult:
    model: object
    initial_model: object
    trace: pd.DataFrame
    evaluation: pd.DataFrame


class MoeTrainer:
    def __init__(self, config, num_workers=None, experiment_name=None):
        self.config = config
        self.num_workers = num_workers if num_workers is not None else settings.NUM_WORKERS
        self.experiment_name = experiment_name or settings.MLFLOW_EXPERIMENT_NAME
        self.tracking = bool(settings.MLFLOW_TRACKING_URI)

    def _sequence_gradients(self, model, batch, strategy, masks):
        cfg = self.config
        jobs = [
            (ids, targets, masks[b] if masks is not None else None)
            for b, (ids, targets, _) in enumerate(batch.sequences())
        ]

        def run(job):
            ids, targets, seq_masks = job
            return backward(model, ids, targets, strategy, cfg.budget, cfg.aux_loss_coefficient,
                            cfg.renormalize_gates, seq_masks)

        if self.num_workers > 1:
            with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
                return list(pool.map(run, jobs))
        return [run(job) for job in jobs]

    def step(self, model, batch, step_index):
        """One SGD step on the mean per-sequence loss; returns (model, trace row)."""
        cfg = self.config
        strategy = RoutingStrategy(cfg.strategy)
        masks = batch_masks(model, batch, cfg.budget, cfg.renormalize_gates) if strategy == RoutingStrategy.BATCHTOPK else None
        try:
            results = self._sequence_gradients(model, batch, strategy, masks)
        except TrainingDivergenceError as e:
            raise TrainingDivergenceError(step=step_index, loss=e.loss) from e
        except InvalidInputError as e:
            # Overflowing router logits surface as non-finite scores
            raise TrainingDivergenceError(step=step_index, loss=float("nan")) from e

        # Fixed reduction order keeps traces bit-identical regardless of worker count
        grads = {name: np.zeros_like(array) for name, array in model.named_arrays().items()}
        for sequence_grads, _ in results:
            for name, grad in sequence_grads.items():
                grads[name] += grad
        scale = 1.0 / len(results)
        grads = {name: grad * scale for name, grad in grads.items()}

        row = self._trace_row(step_index, [breakdown for _, breakdown in results], len(model.layers))
        if not np.isfinite(row["total_loss"]):
            raise TrainingDivergenceError(step=step_index, loss=row["total_loss"])
        updated = model.apply_update(grads, cfg.learning_rate)
        if not all(np.isfinite(array).all() for array in updated.named_arrays().values()):
            raise TrainingDivergenceError(step=step_index, loss=row["total_loss"])
        return updated, row

    @staticmethod
    def _trace_row(step_index, breakdowns, n_layers):
        tokens = sum(b.tokens for b in breakdowns)
        entropies = []
        for layer in range(n_layers):
            scores = [b.layer_scores[layer] for b in breakdowns]
            masks = [b.layer_masks[layer] for b in breakdowns]
            entropies.append(routing_entropy(scores, masks=masks, layer_index=layer).normalized_entropy)
        return {
            "step": step_index,
            "task_loss": float(np.mean([b.task_loss for b in breakdowns])),
            "aux_loss": float(np.mean([b.aux_loss for b in breakdowns])),
            "total_loss": float(np.mean([b.total_loss for b in breakdowns])),
            "mean_experts_per_token": sum(b.expert_invocations for b in breakdowns) / (tokens * n_layers),
            "entropy_normalized": float(np.mean(entropies)),
        }

    def evaluate(self, model, task, strategy=None, n_sequences=64):
        """Held-out loss and routing metrics without parameter updates."""
        cfg = self.config
        strategy = RoutingStrategy(strategy or cfg.eval_strategy or cfg.strategy)
        batch = task.eval_batch(n_sequences)
        masks = None
        if strategy == RoutingStrategy.BATCHTOPK:
            masks = []
            for start in range(0, len(batch), cfg.batch_size):
                masks.extend(batch_masks(model, batch[start:start + cfg.batch_size], cfg.budget, cfg.renormalize_gates))
        breakdowns = []
        correct = 0
        for b, (ids, targets, _) in enumerate(batch.sequences()):
            total, task_loss, aux, output = sequence_loss(
                model, ids, targets, strategy, cfg.budget, cfg.aux_loss_coefficient, cfg.renormalize_gates,
                masks[b] if masks is not None else None,
            )
            correct += int((output.logits.data.argmax(axis=-1) == targets).sum())
            breakdowns.append(LossBreakdown(
                task_loss=float(task_loss.data), aux_loss=float(aux.data), total_loss=float(total.data),
                expert_invocations=output.expert_invocations, tokens=len(ids),
                layer_scores=[o.scores.data for o in output.layer_outputs], layer_masks=output.masks,
            ))
        row = self._trace_row(-1, breakdowns, len(model.layers))
        row.pop("step")
        row["strategy"] = strategy.value
        row["accuracy"] = correct / batch.ids.size
        return row

    def train(self, task, model=None, model_config=None, artifact_dir=None, n_eval_sequences=64):
        """Run config.steps SGD steps on the task stream; returns TrainResult."""
        cfg = self.config
        if model is None:
            model = init_model(model_config or ModelConfig(), cfg.seed)
        initial_model = model
        logger.info(
            f"Training with strategy={RoutingStrategy(cfg.strategy).value} k={cfg.budget.k_tok} "
            f"steps={cfg.steps} seed={cfg.seed}"
        )

        if self.tracking:
            mlflow.set_tracking_uri(settings.MLFLOW_TRACKING_URI)
            mlflow.set_experiment(self.experiment_name)
            with mlflow.start_run(run_name=RoutingStrategy(cfg.strategy).value):
                mlflow.log_params({
                    "strategy": RoutingStrategy(cfg.strategy).value,
                    "k_tok": cfg.budget.k_tok,
                    "lower_bound": cfg.budget.lower_bound,
                    "upper_bound": cfg.budget.upper_bound,
                    "learning_rate": cfg.learning_rate,
                    "batch_size": cfg.batch_size,
                    "aux_loss_coefficient": cfg.aux_loss_coefficient,
                    "seed": cfg.seed,
                    **model.config.model_dump(),
                })
                result = self._run(task, model, initial_model, artifact_dir, n_eval_sequences)
                for row in result.trace.to_dict("records"):
                    mlflow.log_metrics({k: v for k, v in row.items() if k != "step"}, step=int(row["step"]))
                if artifact_dir is not None:
                    mlflow.log_artifacts(str(artifact_dir))
                return result
        return self._run(task, model, initial_model, artifact_dir, n_eval_sequences)

    def _run(self, task, model, initial_model, artifact_dir, n_eval_sequences):
        cfg = self.config
        rows = []
        for step_index in range(cfg.steps):
            batch = task.batch(step_index, cfg.batch_size)
            model, row = self.step(model, batch, step_index)
            rows.append(row)
            if step_index % 100 == 0 or step_index == cfg.steps - 1:
                logger.info(f"Step {step_index}: task_loss={row['task_loss']:.4f} "
                            f"experts/token={row['mean_experts_per_token']:.3f}")
            if cfg.eval_every and (step_index + 1) % cfg.eval_every == 0:
                metrics = self.evaluate(model, task, n_sequences=n_eval_sequences)
                logger.info(f"Eval after step {step_index}: task_loss={metrics['task_loss']:.4f}")
        trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)

        strategies = [RoutingStrategy(cfg.strategy)]
        if cfg.eval_strategy is not None and RoutingStrategy(cfg.eval_strategy) not in strategies:
            strategies.append(RoutingStrategy(cfg.eval_strategy))
        evaluation = pd.DataFrame([self.evaluate(model, task, s, n_eval_sequences) for s in strategies])

        if artifact_dir is not None:
            write_artifacts(artifact_dir, model, trace, evaluation, cfg.strategy, cfg.budget)
        return TrainResult(model=model, initial_model=initial_model, trace=trace, evaluation=evaluation)


SWEEP_STRATEGIES = (
    RoutingStrategy.TOPK,
    RoutingStrategy.SEQTOPK,
    RoutingStrategy.SEQTOPK_BOUNDED,
    RoutingStrategy.BATCHTOPK,
)


def evaluation_batch_sweep(model, task, budget, batch_sizes, n_sequences=64, strategies=SWEEP_STRATEGIES,
                           aux_coefficient=0.01):
    """
    Held-out task loss and accuracy per (strategy, evaluation batch size).

    Only BatchTopK routes across the sequences of a batch; sequence-local strategies are
    evaluated once and repeated for every batch size.
    """
    rows = []
    for strategy in (RoutingStrategy(s) for s in strategies):
        cached = None
        for size in batch_sizes:
            if cached is None or strategy == RoutingStrategy.BATCHTOPK:
                config = TrainConfig(strategy=strategy, budget=budget, batch_size=size,
                                     aux_loss_coefficient=aux_coefficient)
                cached = MoeTrainer(config, num_workers=1).evaluate(model, task, strategy, n_sequences)
            rows.append({
                "strategy": strategy.value,
                "batch_size": size,
                "task_loss": cached["task_loss"],
                "accuracy": cached["accuracy"],
                "mean_experts_per_token": cached["mean_experts_per_token"],
            })
    frame = pd.DataFrame(rows)
    logger.info(f"Evaluated {len(frame)} (strategy, batch size) settings on {n_sequences} sequences")
    return frame


def write_artifacts(artifact_dir, model, trace, evaluation, strategy=None, budget=None):
    artifact_dir = Path(artifact_dir)
    artifact_dir.mkdir(parents=True, exist_ok=True)
    trace.to_csv(artifact_dir / "metrics.csv", index=False)
    evaluation.to_csv(artifact_dir / "evaluation.csv", index=False)
    save_checkpoint(model, artifact_dir / "checkpoint.npz", strategy=strategy, budget=budget)
    logger.info(f"Artifacts written to {artifact_dir}")


def train(task, config, model_config=None, model=None, artifact_dir=None):
    """Functional entry: train a toy MoE LM on the synthetic task with config."""
    return MoeTrainer(config).train(task, model=model, model_config=model_config, artifact_dir=artifact_dir)


def run_experiment(experiment, out_dir=None):
    """
    Train one ExperimentConfig end to end and write its artifacts.

    The task stream depends only on task_seed, so paired runs that differ in strategy see
    bit-identical batches.
    """
    out_dir = Path(out_dir or experiment.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(experiment.to_json())
    task = SyntheticTask.from_config(experiment.task, experiment.model.vocab_size, experiment.task_seed)
    trainer = MoeTrainer(experiment.training_config())
    return trainer.train(
        task,
        model_config=experiment.model,
        artifact_dir=out_dir,
        n_eval_sequences=experiment.task.eval_sequences,
    )
