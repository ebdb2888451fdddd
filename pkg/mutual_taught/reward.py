"""Tabular reward model and its Bradley-Terry trainer."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_expit

from mutual_taught.errors import EmptyDataError, TrainingDivergedError
from mutual_taught.schemas import BtConfig, PreferencePair, RewardModelRecord

logger = logging.getLogger(__name__)


def _frozen_table(values: np.ndarray, name: str) -> np.ndarray:
    table = np.array(values, dtype=np.float64, copy=True)
    if table.ndim != 2:
        raise ValueError(f"{name} must be a 2-D table, got shape {table.shape}")
    if not np.all(np.isfinite(table)):
        raise ValueError(f"{name} contains non-finite entries")
    table.setflags(write=False)
    return table


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Score table r(y; x) of shape [P x R] with its L2 strength."""

    scores: np.ndarray
    l2_lambda: float = 1e-3

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores", _frozen_table(self.scores, "scores"))
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be nonnegative")

    @classmethod
    def zeros(
        cls, num_prompts: int, num_responses: int, l2_lambda: float = 1e-3
    ) -> "RewardModel":
        """The all-zero model, the fixed point of the regularizer."""
        return cls(np.zeros((num_prompts, num_responses)), l2_lambda)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.scores.shape  # type: ignore[return-value]

    def score(self, prompt: int, response: int) -> float:
        return float(self.scores[prompt, response])

    def equals(self, other: "RewardModel") -> bool:
        """Bit-identical score tables."""
        return bool(np.array_equal(self.scores, other.scores))

    def to_record(self) -> RewardModelRecord:
        return RewardModelRecord(scores=self.scores.tolist(), l2_lambda=self.l2_lambda)

    @classmethod
    def from_record(cls, record: RewardModelRecord) -> "RewardModel":
        return cls(np.asarray(record.scores), record.l2_lambda)


def pair_index(
    pairs: Sequence[PreferencePair],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(prompt, chosen, rejected) index arrays for vectorized evaluation."""
    if not pairs:
        raise EmptyDataError("at least one preference pair is required")
    x = np.fromiter((p.prompt for p in pairs), dtype=np.int64, count=len(pairs))
    w = np.fromiter((p.chosen for p in pairs), dtype=np.int64, count=len(pairs))
    l = np.fromiter((p.rejected for p in pairs), dtype=np.int64, count=len(pairs))
    return x, w, l


def bt_prob(r_w: float, r_l: float) -> float:
    """Bradley-Terry probability that the first response is preferred."""
    return float(expit(r_w - r_l))


class PairBatch:
    """Pairs flattened against a [P x R] table."""

    def __init__(self, shape: Tuple[int, int], pairs: Sequence[PreferencePair]):
        x, w, l = pair_index(pairs)
        self.shape = shape
        self.size = len(pairs)
        self.chosen = x * shape[1] + w
        self.rejected = x * shape[1] + l

    def margins(self, table: np.ndarray) -> np.ndarray:
        flat = table.ravel()
        return flat[self.chosen] - flat[self.rejected]

    def scatter(self, coef: np.ndarray) -> np.ndarray:
        """Sum ``+coef`` into chosen cells and ``-coef`` into rejected cells."""
        size = self.shape[0] * self.shape[1]
        grad = np.bincount(self.chosen, weights=coef, minlength=size)
        grad -= np.bincount(self.rejected, weights=coef, minlength=size)
        return grad.reshape(self.shape)


def _objective(
    scores: np.ndarray, batch: PairBatch, l2_lambda: float
) -> Tuple[float, np.ndarray]:
    margins = batch.margins(scores)
    n = margins.size
    cells = scores.size
    loss = float(np.mean(-log_expit(margins)) + l2_lambda * np.sum(scores**2) / cells)
    # d/dm of -log sigma(m) is -(1 - sigma(m)) = -sigma(-m)
    grad = batch.scatter(-expit(-margins) / n) + 2.0 * l2_lambda * scores / cells
    return loss, grad


def bt_nll(rm: RewardModel, pairs: Sequence[PreferencePair]) -> float:
    """Mean Bradley-Terry negative log-likelihood plus the L2 term."""
    return _objective(rm.scores, PairBatch(rm.shape, pairs), rm.l2_lambda)[0]


def bt_grad(rm: RewardModel, pairs: Sequence[PreferencePair]) -> np.ndarray:
    """Exact gradient of :func:`bt_nll` with respect to every score."""
    return _objective(rm.scores, PairBatch(rm.shape, pairs), rm.l2_lambda)[1]


def train_bt(
    init: RewardModel,
    pairs: Sequence[PreferencePair],
    cfg: BtConfig,
    trace: Optional[List[float]] = None,
) -> RewardModel:
    """Full-batch gradient descent on the regularized BT objective.

    Args:
        init: Starting reward model; its scores are not modified
        pairs: Training comparisons
        cfg: Step size, step count and L2 strength of the returned model
        trace: If given, receives the objective before every step and at the end

    Returns:
        The trained reward model

    Raises:
        TrainingDivergedError: If the objective becomes non-finite
    """
    batch = PairBatch(init.shape, pairs)
    scores = np.array(init.scores, copy=True)
    for step in range(cfg.steps):
        loss, grad = _objective(scores, batch, cfg.l2_lambda)
        if not np.isfinite(loss):
            raise TrainingDivergedError("bt", step, loss)
        if trace is not None:
            trace.append(loss)
        scores -= cfg.learning_rate * grad
    final_loss = _objective(scores, batch, cfg.l2_lambda)[0]
    if not np.isfinite(final_loss):
        raise TrainingDivergedError("bt", cfg.steps, final_loss)
    if trace is not None:
        trace.append(final_loss)
    logger.debug(f"BT training on {len(pairs)} pairs finished at nll={final_loss:.6f}")
    return RewardModel(scores, cfg.l2_lambda)


def reward_std(rm: RewardModel, samples: Sequence[Tuple[int, int]]) -> float:
    """Population standard deviation of the model's scores over ``samples``."""
    if not samples:
        raise ValueError("reward_std needs at least one (prompt, response) sample")
    idx = np.asarray(samples, dtype=np.int64)
    return float(np.std(rm.scores[idx[:, 0], idx[:, 1]]))
