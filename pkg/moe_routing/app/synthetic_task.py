import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd

from .exceptions import InvalidInputError

logger = logging.getLogger(__name__)

TRAIN_STREAM = 0
EVAL_STREAM = 1


@dataclass
class SequenceBatch:
    ids: np.ndarray
    targets: np.ndarray
    hard: np.ndarray

    def __len__(self):
        return self.ids.shape[0]

    def __getitem__(self, index):
        return SequenceBatch(self.ids[index], self.targets[index], self.hard[index])

    def sequences(self):
        for b in range(len(self)):
            yield self.ids[b], self.targets[b], self.hard[b]

    def difficulty_labels(self):
        return np.where(self.hard, "hard", "easy")

    def to_frame(self):
        """Long format: one row per (sequence, position)."""
        n_seq, seq_len = self.ids.shape
        return pd.DataFrame({
            "sequence": np.repeat(np.arange(n_seq), seq_len),
            "position": np.tile(np.arange(seq_len), n_seq),
            "token": self.ids.ravel(),
            "target": self.targets.ravel(),
            "difficulty": self.difficulty_labels().ravel(),
        })


@dataclass(frozen=True)
class SyntheticTask:
    """
    Token-to-token task with a controllable difficulty axis.

    The vocabulary is split into easy and hard tokens. An easy token's target is the token
    itself (linear copy). A hard token's target is drawn from a fixed mixture over a few
    scrambled candidate tokens, so it carries irreducible uncertainty and a nonlinear lookup.
    Every sequence holds exactly round(T * hard_fraction) hard positions.
    """
    seed: int
    seq_len: int
    vocab_size: int
    hard_fraction: float = 0.5
    n_mixture: int = 3

    def __post_init__(self):
        if self.vocab_size < 4:
            raise InvalidInputError("Synthetic task needs a vocabulary of at least 4 tokens")
        if self.seq_len < 2:
            raise InvalidInputError("Synthetic task needs sequences of at least 2 tokens")
        if self.n_mixture > self.vocab_size:
            raise InvalidInputError("Mixture size cannot exceed the vocabulary")

    @classmethod
    def from_config(cls, task_config, vocab_size, seed):
        return cls(
            seed=seed,
            seq_len=task_config.seq_len,
            vocab_size=vocab_size,
            hard_fraction=task_config.hard_fraction,
            n_mixture=task_config.n_mixture,
        )

    @cached_property
    def tables(self):
        rng = np.random.default_rng([self.seed, 2])
        order = rng.permutation(self.vocab_size)
        n_easy = self.vocab_size // 2
        easy_tokens = np.sort(order[:n_easy])
        hard_tokens = np.sort(order[n_easy:])
        candidates = np.stack([
            rng.choice(self.vocab_size, size=self.n_mixture, replace=False) for _ in range(self.vocab_size)
        ])
        weights = np.sort(rng.dirichlet(np.ones(self.n_mixture), size=self.vocab_size), axis=1)[:, ::-1]
        return {"easy": easy_tokens, "hard": hard_tokens, "candidates": candidates, "weights": weights}

    @property
    def n_hard(self):
        return int(round(self.seq_len * self.hard_fraction))

    def _generate(self, rng, n_sequences):
        tables = self.tables
        ids = np.empty((n_sequences, self.seq_len), dtype=np.int64)
        targets = np.empty_like(ids)
        hard = np.zeros((n_sequences, self.seq_len), dtype=bool)
        for b in range(n_sequences):
            hard_positions = rng.permutation(self.seq_len)[: self.n_hard]
            hard[b, hard_positions] = True
            ids[b] = np.where(
                hard[b],
                rng.choice(tables["hard"], size=self.seq_len),
                rng.choice(tables["easy"], size=self.seq_len),
            )
            picks = np.array([rng.choice(self.n_mixture, p=tables["weights"][token]) for token in ids[b]])
            targets[b] = np.where(hard[b], tables["candidates"][ids[b], picks], ids[b])
        return SequenceBatch(ids=ids, targets=targets, hard=hard)

    def batch(self, step, batch_size):
        """Training batch for a given step; independent of any model randomness."""
        return self._generate(np.random.default_rng([self.seed, TRAIN_STREAM, step]), batch_size)

    def eval_batch(self, n_sequences):
        return self._generate(np.random.default_rng([self.seed, EVAL_STREAM]), n_sequences)

    def target_entropy(self, token):
        """Entropy (nats) of the true target distribution of a token."""
        if token in set(self.tables["easy"].tolist()):
            return 0.0
        weights = self.tables["weights"][token]
        return float(-(weights * np.log(weights)).sum())
