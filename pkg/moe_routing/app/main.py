"""
Command-line front end: route, train, analyze and verify.

Results are printed to stdout as key=value lines; logging goes to stderr.
Exit codes: 0 success, 1 verification failure, 2 parse/validation/missing file,
3 infeasible budget, 4 training divergence.
"""
import argparse
import logging
from pathlib import Path
import sys

import numpy as np
import pandas as pd
from pydantic import ValidationError

from .analytics import (
    activation_distribution,
    batch_sensitivity_sweep,
    expert_load_frame,
    layer_entropy_table,
    mask_assignment_probs,
    routing_entropy,
    token_entropy_vs_experts,
    upper_bound_ablation,
)
from .config import settings
from .exceptions import (
    BudgetInfeasibleError,
    CheckpointError,
    CorrelationUndefinedError,
    InvalidInputError,
    TrainingDivergenceError,
)
from .expert_cache import audit_budget, replay_online
from .model import checkpoint_routing, load_checkpoint, predict_proba, summarize_logprob_shift, token_logprob_shift
from .reports import Report, frame_report, histogram_frame, write_report
from .routing import ScoreMatrix, route, strategy_budget
from .schemas import BudgetConfig, ExperimentConfig, RoutingStrategy
from .synthetic_task import SyntheticTask
from .train import evaluation_batch_sweep, run_experiment
from .verify import CHECKS, SOFT_CHECKS, run_checks

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_INVALID_INPUT = 2
EXIT_INFEASIBLE_BUDGET = 3
EXIT_DIVERGED = 4

ALL_REPORTS = ("entropy", "activation", "token-entropy", "batch", "shift", "ablation")


def emit(**values):
    for key, value in values.items():
        print(f"{key}={value}")


def read_score_file(path):
    """Parse a headerless CSV of T rows by N scores; errors carry the 1-based line and column."""
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"Scores file not found: {path}")
    try:
        raw = pd.read_csv(path, header=None, dtype=str, skipinitialspace=True, skip_blank_lines=False)
    except pd.errors.EmptyDataError as e:
        raise InvalidInputError(f"Scores file {path} is empty") from e
    except pd.errors.ParserError as e:
        raise InvalidInputError(f"Scores file {path} has ragged rows: {e}") from e
    # Trailing blank lines are not rows
    while len(raw) and raw.iloc[-1].isna().all():
        raw = raw.iloc[:-1]
    if raw.empty:
        raise InvalidInputError(f"Scores file {path} is empty")
    empty_rows = np.flatnonzero(raw.isna().all(axis=1).to_numpy())
    if empty_rows.size:
        raise InvalidInputError("Empty row in scores file", line=int(empty_rows[0]) + 1)
    values = raw.apply(lambda column: pd.to_numeric(column.str.strip(), errors="coerce"))
    bad = np.argwhere(values.isna().to_numpy())
    if bad.size:
        row, column = (int(v) for v in bad[0])
        cell = raw.iat[row, column]
        raise InvalidInputError(f"Cannot parse score {cell!r}", line=row + 1, column=column + 1)
    return ScoreMatrix(values.to_numpy(dtype=np.float64))


def budget_from_args(args):
    return BudgetConfig(k_tok=args.k, lower_bound=args.lower_bound, upper_bound=args.upper_bound)


def cmd_route(args):
    scores = read_score_file(args.scores)
    strategy = RoutingStrategy(args.strategy)
    budget = budget_from_args(args)
    mask = route(scores, strategy, budget, renormalize=args.renormalize)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(mask.selected.astype(int)).to_csv(out_dir / "mask.csv", index=False, header=False)
    pd.DataFrame(mask.gate_weights).to_csv(out_dir / "gates.csv", index=False, header=False)

    selected_scores = scores.values[mask.selected]
    threshold = float(selected_scores.min()) if selected_scores.size else float("nan")
    tied = int((scores.values[~mask.selected] == threshold).sum())
    emit(
        strategy=strategy.value,
        budget=strategy_budget(strategy, scores.n_tokens, scores.n_experts, budget.k_tok),
        total_selected=mask.total,
        per_token_counts=",".join(str(int(c)) for c in mask.counts),
        tied_at_threshold=tied,
        tie_break="lower_token_then_lower_expert",
        mask=out_dir / "mask.csv",
    )
    if strategy == RoutingStrategy.ONLINE_SEQTOPK:
        audit = audit_budget(replay_online(scores.values, budget), budget.k_tok)
        audit.to_frame().to_csv(out_dir / "budget_audit.csv", index=False)
        emit(max_budget_ratio=f"{audit.max_ratio:.6f}", budget_audit=out_dir / "budget_audit.csv")
    return EXIT_OK


def load_experiment(args):
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise InvalidInputError(f"Config file not found: {path}")
        experiment = ExperimentConfig.from_json(path.read_text())
    else:
        experiment = ExperimentConfig()
    updates = {}
    if args.strategy:
        updates["strategy"] = RoutingStrategy(args.strategy)
    if args.k is not None:
        updates["budget"] = BudgetConfig(k_tok=args.k, lower_bound=args.lower_bound, upper_bound=args.upper_bound)
    if args.seed is not None:
        updates["task_seed"] = args.seed
        updates["train"] = experiment.train.model_copy(update={"seed": args.seed})
    if args.out:
        updates["output_dir"] = args.out
    if updates:
        experiment = ExperimentConfig.model_validate({**experiment.model_dump(), **updates})
    return experiment


def cmd_train(args):
    experiment = load_experiment(args)
    out_dir = Path(experiment.output_dir)
    result = run_experiment(experiment, out_dir)
    final = result.trace.iloc[-1] if len(result.trace) else None
    emit(
        strategy=RoutingStrategy(experiment.strategy).value,
        steps=len(result.trace),
        final_task_loss=f"{final['task_loss']:.6f}" if final is not None else "nan",
        metrics=out_dir / "metrics.csv",
        checkpoint=out_dir / "checkpoint.npz",
    )
    return EXIT_OK


def _route_corpus(model, batch, strategy, budget):
    lm_probs, masks, scores = [], [], []
    for ids in batch.ids:
        probs, output = predict_proba(model, ids, strategy, budget)
        lm_probs.append(probs)
        masks.append(output.masks)
        scores.append([out.scores.data for out in output.layer_outputs])
    return lm_probs, masks, scores


def analysis_routing(args):
    """Strategy and budget for analyze: explicit flags first, then the checkpoint's training routing."""
    stored_strategy, stored_budget = checkpoint_routing(args.checkpoint)
    if args.strategy:
        strategy = RoutingStrategy(args.strategy)
    else:
        strategy = stored_strategy or RoutingStrategy.SEQTOPK_BOUNDED
    if args.k is not None:
        budget = budget_from_args(args)
    else:
        budget = stored_budget or BudgetConfig(k_tok=2)
    logger.info(f"Analyzing with strategy={strategy.value} k={budget.k_tok}")
    return strategy, budget


def cmd_analyze(args):
    model = load_checkpoint(args.checkpoint)
    strategy, budget = analysis_routing(args)
    budget.resolve(model.n_experts)
    reports = args.reports or list(ALL_REPORTS)
    unknown = set(reports) - set(ALL_REPORTS)
    if unknown:
        raise InvalidInputError(f"Unknown reports: {', '.join(sorted(unknown))}")

    task = SyntheticTask(seed=args.seed, seq_len=args.seq_len, vocab_size=model.vocab_size)
    batch = task.eval_batch(args.n_sequences)
    lm_probs, masks, scores = _route_corpus(model, batch, strategy, budget)
    n_layers = len(model.layers)
    layer_masks = [[seq[layer] for seq in masks] for layer in range(n_layers)]
    layer_scores = [[seq[layer] for seq in scores] for layer in range(n_layers)]
    out_dir = Path(args.out)
    written = []

    if "entropy" in reports:
        table = layer_entropy_table(layer_scores, layer_masks, strategy)
        for layer in range(n_layers):
            stats = routing_entropy([mask_assignment_probs(m) for m in layer_masks[layer]],
                                    masks=layer_masks[layer], layer_index=layer)
            report = Report(metric="routing_entropy", layer=layer, strategy=strategy.value,
                            values=[stats.to_dict()])
            written += write_report(report, out_dir)
        written += write_report(frame_report("layer_entropy", table, strategy=strategy.value), out_dir, table)
    if "activation" in reports:
        for layer in range(n_layers):
            histogram = histogram_frame(activation_distribution(layer_masks[layer]), layer)
            written += write_report(
                frame_report("activation_distribution", histogram, layer, strategy.value), out_dir, histogram
            )
            load = expert_load_frame(layer_masks[layer], layer)
            written += write_report(frame_report("expert_load", load, layer, strategy.value), out_dir, load)
    if "token-entropy" in reports:
        try:
            result = token_entropy_vs_experts(lm_probs, masks, difficulty=list(batch.difficulty_labels()))
            report = frame_report("token_entropy_vs_experts", result.binned, strategy=strategy.value)
            report.values.append({"pearson_r": result.correlation})
            written += write_report(report, out_dir, result.records)
            emit(token_entropy_correlation=f"{result.correlation:.6f}")
        except CorrelationUndefinedError as e:
            logger.warning(f"Skipping token-entropy report: {e}")
    if "batch" in reports:
        corpus = layer_scores[0]
        sizes = [s for s in args.batch_sizes if len(corpus) % s == 0]
        frames = [batch_sensitivity_sweep(s, sizes, corpus, budget).summary
                  for s in (strategy, RoutingStrategy.BATCHTOPK) if s != RoutingStrategy.ONLINE_SEQTOPK]
        sweep = pd.concat(frames, ignore_index=True).drop_duplicates()
        written += write_report(frame_report("batch_sensitivity", sweep, layer=0), out_dir, sweep)
        quality = evaluation_batch_sweep(model, task, budget, sizes, args.n_sequences)
        written += write_report(frame_report("batch_quality", quality), out_dir, quality)
    if "shift" in reports:
        frames = []
        k_values = range(1, model.n_experts + 1)
        for index, (ids, targets, _) in enumerate(batch.sequences()):
            frames.append(token_logprob_shift(model, ids, targets, k_values).assign(sequence=index))
        shift = pd.concat(frames, ignore_index=True)
        summary = summarize_logprob_shift(shift)
        written += write_report(frame_report("logprob_shift", summary), out_dir, shift)
    if "ablation" in reports:
        ablation = upper_bound_ablation(layer_scores[0], budget.k_tok)
        written += write_report(frame_report("upper_bound_ablation", ablation, layer=0), out_dir, ablation)

    emit(reports=len(written), out=out_dir)
    return EXIT_OK


def cmd_verify(args):
    results = run_checks(seed=args.seed, soft=args.soft, inject_fault=args.inject_fault, names=args.checks)
    for result in results:
        print(result.to_line())
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([r.__dict__ for r in results]).to_csv(out_dir / "verify.csv", index=False)
    failed = [r.name for r in results if not r.passed]
    emit(checks=len(results), failed=len(failed))
    return EXIT_VERIFY_FAILED if failed else EXIT_OK


def _add_budget_flags(parser, strategy_default, k_default=2):
    parser.add_argument("--strategy", default=strategy_default, type=str.lower,
                        help="topk | seqtopk | seqtopk-bounded | batchtopk | online-seqtopk")
    parser.add_argument("--k", type=int, default=k_default)
    parser.add_argument("--lower-bound", type=int, default=1)
    parser.add_argument("--upper-bound", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="moe_routing", description="Sequence-level TopK routing lab")
    sub = parser.add_subparsers(dest="command", required=True)

    route_parser = sub.add_parser("route", help="Route a score matrix and write the mask")
    route_parser.add_argument("--scores", required=True, help="Headerless CSV, one row per token")
    _add_budget_flags(route_parser, "seqtopk-bounded")
    route_parser.add_argument("--renormalize", action="store_true")
    route_parser.add_argument("--out", default=settings.OUTPUT_DIR)
    route_parser.set_defaults(handler=cmd_route)

    train_parser = sub.add_parser("train", help="Train the toy MoE model")
    train_parser.add_argument("--config", help="ExperimentConfig JSON")
    train_parser.add_argument("--strategy", type=str.lower)
    train_parser.add_argument("--k", type=int)
    train_parser.add_argument("--lower-bound", type=int, default=1)
    train_parser.add_argument("--upper-bound", type=int, default=None)
    train_parser.add_argument("--seed", type=int)
    train_parser.add_argument("--out")
    train_parser.set_defaults(handler=cmd_train)

    analyze_parser = sub.add_parser("analyze", help="Routing analytics on a checkpoint")
    analyze_parser.add_argument("--checkpoint", required=True)
    # Unset strategy and k fall back to the routing recorded in the checkpoint
    _add_budget_flags(analyze_parser, None, k_default=None)
    analyze_parser.add_argument("--seed", type=int, default=settings.DEFAULT_SEED, help="Corpus seed")
    analyze_parser.add_argument("--reports", nargs="+", choices=ALL_REPORTS)
    analyze_parser.add_argument("--n-sequences", type=int, default=16)
    analyze_parser.add_argument("--seq-len", type=int, default=16)
    analyze_parser.add_argument("--batch-sizes", type=int, nargs="+", default=[1, 4, 16])
    analyze_parser.add_argument("--out", default=settings.OUTPUT_DIR)
    analyze_parser.set_defaults(handler=cmd_analyze)

    verify_parser = sub.add_parser("verify", help="Run the acceptance suite")
    verify_parser.add_argument("--soft", action="store_true", help="Include the end-to-end training checks")
    verify_parser.add_argument("--inject-fault", choices=list(CHECKS) + list(SOFT_CHECKS))
    verify_parser.add_argument("--checks", nargs="+", choices=list(CHECKS) + list(SOFT_CHECKS),
                               help="Run only these checks")
    verify_parser.add_argument("--seed", type=int, default=0)
    verify_parser.add_argument("--out")
    verify_parser.set_defaults(handler=cmd_verify)
    return parser


def _validation_exit_code(error):
    for detail in error.errors():
        if isinstance(detail.get("ctx", {}).get("error"), BudgetInfeasibleError):
            return EXIT_INFEASIBLE_BUDGET
    return EXIT_INVALID_INPUT


def main(argv=None):
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except BudgetInfeasibleError as e:
        logger.error(f"Infeasible budget: {e}")
        emit(error="infeasible_budget")
        return EXIT_INFEASIBLE_BUDGET
    except TrainingDivergenceError as e:
        logger.error(str(e))
        emit(error="training_diverged", step=e.step)
        return EXIT_DIVERGED
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        emit(error="invalid_config")
        return _validation_exit_code(e)
    except (InvalidInputError, CheckpointError) as e:
        logger.error(str(e))
        emit(error="invalid_input", line=getattr(e, "line", None), column=getattr(e, "column", None))
        return EXIT_INVALID_INPUT
    except ValueError as e:
        # Unknown strategy names and similar enum lookups
        logger.error(str(e))
        emit(error="invalid_input")
        return EXIT_INVALID_INPUT


if __name__ == "__main__":
    sys.exit(main())
