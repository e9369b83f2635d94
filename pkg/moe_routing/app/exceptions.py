class RoutingLabError(Exception):
    """Base error for the routing lab."""


class InvalidInputError(RoutingLabError, ValueError):
    """Malformed scores, shapes or files."""

    def __init__(self, message, line=None, column=None):
        if line is not None:
            location = f"line {line}" + (f", column {column}" if column is not None else "")
            message = f"{message} ({location})"
        super().__init__(message)
        self.line = line
        self.column = column


class BudgetInfeasibleError(RoutingLabError, ValueError):
    """The requested expert budget cannot be met."""


class TrainingDivergenceError(RoutingLabError):
    """Loss became non-finite during training."""

    def __init__(self, step, loss):
        super().__init__(f"Training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class CorrelationUndefinedError(RoutingLabError):
    """Correlation requested over a degenerate sample."""


class CheckpointError(RoutingLabError):
    """Checkpoint or snapshot is missing, corrupt or of an unknown version."""
