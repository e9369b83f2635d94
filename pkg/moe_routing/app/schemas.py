from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .exceptions import BudgetInfeasibleError

MAX_SEED = 2 ** 64


class RoutingStrategy(str, Enum):
    TOPK = "topk"
    SEQTOPK = "seqtopk"
    SEQTOPK_BOUNDED = "seqtopk-bounded"
    BATCHTOPK = "batchtopk"
    ONLINE_SEQTOPK = "online-seqtopk"

    @classmethod
    def _missing_(cls, value):
        # Accept the underscore spelling used in configs and code
        if isinstance(value, str):
            normalized = value.strip().lower().replace("_", "-")
            for member in cls:
                if member.value == normalized:
                    return member
        return None


class BudgetConfig(BaseModel):
    """Per-token budget K plus the token-level bounds used by bounded routing."""
    model_config = ConfigDict(frozen=True)

    k_tok: int = Field(..., ge=1, description="Per-token budget K")
    lower_bound: int = Field(1, ge=1, description="Minimum experts per token")
    upper_bound: Optional[int] = Field(
        None, ge=1, description="Maximum experts per token (defaults to K+2, capped at N)"
    )

    @model_validator(mode="after")
    def check_bounds(self):
        upper = self.upper_bound if self.upper_bound is not None else self.k_tok + 2
        if not self.lower_bound <= self.k_tok <= upper:
            raise BudgetInfeasibleError(
                f"bounds must satisfy lower_bound <= k_tok <= upper_bound, "
                f"got {self.lower_bound} <= {self.k_tok} <= {upper}"
            )
        return self

    def resolve(self, n_experts):
        """Return (lower, upper) bounds for a layer with n_experts experts."""
        if self.k_tok > n_experts:
            raise BudgetInfeasibleError(f"k_tok={self.k_tok} exceeds the number of experts N={n_experts}")
        if self.upper_bound is None:
            upper = min(self.k_tok + 2, n_experts)
        else:
            upper = self.upper_bound
        if upper > n_experts:
            raise BudgetInfeasibleError(f"upper_bound={upper} exceeds the number of experts N={n_experts}")
        if self.lower_bound > upper:
            raise BudgetInfeasibleError(f"lower_bound={self.lower_bound} exceeds upper_bound={upper}")
        return self.lower_bound, upper

    def sequence_budget(self, seq_len):
        """K_seq = T * K; derived, never stored."""
        return seq_len * self.k_tok


class ModelConfig(BaseModel):
    vocab_size: int = Field(16, ge=2, description="Vocabulary size V")
    d_model: int = Field(16, ge=1, le=256, description="Model width D")
    d_hidden: int = Field(32, ge=1, le=512, description="Expert hidden width F")
    n_experts: int = Field(8, ge=1, le=256, description="Number of experts N")
    n_layers: int = Field(1, ge=1, le=16, description="Number of stacked MoE layers L")


class TaskConfig(BaseModel):
    seq_len: int = Field(16, ge=2, description="Tokens per sequence T")
    hard_fraction: float = Field(0.5, gt=0.0, lt=1.0, description="Share of hard positions per sequence")
    n_mixture: int = Field(3, ge=2, description="Candidate targets per hard token")
    eval_sequences: int = Field(64, ge=1, description="Held-out sequences for evaluation")


class TrainConfig(BaseModel):
    steps: int = Field(200, ge=0, description="SGD steps (0 returns the initialization)")
    learning_rate: float = Field(0.1, gt=0.0)
    batch_size: int = Field(8, ge=1)
    aux_loss_coefficient: float = Field(0.01, ge=0.0)
    strategy: RoutingStrategy = RoutingStrategy.SEQTOPK_BOUNDED
    budget: BudgetConfig = BudgetConfig(k_tok=2)
    eval_strategy: Optional[RoutingStrategy] = Field(
        None, description="Routing used for evaluation; differs from strategy in training-free mode"
    )
    renormalize_gates: bool = False
    seed: int = Field(42, ge=0, lt=MAX_SEED)
    eval_every: int = Field(0, ge=0, description="Evaluate on held-out data every n steps (0 = never)")


class ExperimentConfig(BaseModel):
    strategy: RoutingStrategy = RoutingStrategy.SEQTOPK_BOUNDED
    budget: BudgetConfig = BudgetConfig(k_tok=2)
    model: ModelConfig = ModelConfig()
    task: TaskConfig = TaskConfig()
    train: TrainConfig = TrainConfig()
    task_seed: int = Field(42, ge=0, lt=MAX_SEED)
    output_dir: str = "results"

    @model_validator(mode="after")
    def check_budget_fits_model(self):
        self.budget.resolve(self.model.n_experts)
        return self

    def training_config(self):
        """TrainConfig with the experiment-level strategy and budget applied."""
        return self.train.model_copy(update={"strategy": self.strategy, "budget": self.budget})

    def to_json(self):
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.model_validate_json(text)
