"""Tabular softmax policy, DPO objective and the E-step pair builder."""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_expit, log_softmax, softmax

from mutual_taught.errors import EmptyDataError, TrainingDivergedError
from mutual_taught.reward import PairBatch, RewardModel, _frozen_table
from mutual_taught.schemas import (
    CheckpointRecord,
    DpoConfig,
    PairSelection,
    PolicyRecord,
    PreferencePair,
)

if TYPE_CHECKING:
    from mutual_taught.env import Environment

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Policy:
    """Logit table of shape [P x R]; row x softmaxes to pi(. | x)."""

    logits: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "logits", _frozen_table(self.logits, "logits"))

    @classmethod
    def uniform(cls, num_prompts: int, num_responses: int) -> "Policy":
        return cls(np.zeros((num_prompts, num_responses)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.logits.shape  # type: ignore[return-value]

    def probs(self, temperature: float = 1.0) -> np.ndarray:
        """Full [P x R] probability table at ``temperature``."""
        return softmax(self.logits / temperature, axis=1)

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)

    def equals(self, other: "Policy") -> bool:
        """Bit-identical logit tables."""
        return bool(np.array_equal(self.logits, other.logits))

    def to_record(self) -> PolicyRecord:
        return PolicyRecord(logits=self.logits.tolist())

    @classmethod
    def from_record(cls, record: PolicyRecord) -> "Policy":
        return cls(np.asarray(record.logits))


@dataclass(frozen=True)
class Checkpoint:
    """A policy saved during DPO training."""

    policy: Policy
    step: int
    loss: float

    def to_record(self) -> CheckpointRecord:
        return CheckpointRecord(
            step=self.step, loss=self.loss, policy=self.policy.to_record()
        )

    @classmethod
    def from_record(cls, record: CheckpointRecord) -> "Checkpoint":
        return cls(Policy.from_record(record.policy), record.step, record.loss)


def sample_responses(
    policy: Policy,
    prompts: Sequence[int],
    temperature: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw one response per entry of ``prompts`` from softmax(logits / temperature).

    Exact categorical sampling by inverse CDF over each row.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rows = np.asarray(prompts, dtype=np.int64)
    cdf = np.cumsum(softmax(policy.logits[rows] / temperature, axis=1), axis=1)
    u = rng.random(rows.size)
    draws = np.sum(cdf < u[:, None], axis=1)
    return np.minimum(draws, policy.shape[1] - 1)


def sample_response(
    policy: Policy, prompt: int, temperature: float, rng: np.random.Generator
) -> int:
    return int(sample_responses(policy, [prompt], temperature, rng)[0])


def log_prob(policy: Policy, prompt: int, response: int) -> float:
    """ln pi(response | prompt)."""
    return float(log_softmax(policy.logits[prompt])[response])


def dpo_loss(
    policy: Policy, reference: Policy, pair: PreferencePair, beta: float
) -> float:
    """DPO loss of a single pair, -ln sigma(beta * log-ratio margin)."""
    x, w, l = pair.prompt, pair.chosen, pair.rejected
    margin = (log_prob(policy, x, w) - log_prob(reference, x, w)) - (
        log_prob(policy, x, l) - log_prob(reference, x, l)
    )
    return float(-log_expit(beta * margin))


class _DpoObjective:
    """Mean DPO loss over a fixed pair set, as a function of the logit table."""

    def __init__(self, reference: Policy, pairs: Sequence[PreferencePair], beta: float):
        self.batch = PairBatch(reference.shape, pairs)
        self.beta = beta
        self.ref_margins = self.batch.margins(reference.log_probs())

    def __call__(self, logits: np.ndarray) -> Tuple[float, np.ndarray]:
        logp = log_softmax(logits, axis=1)
        z = self.beta * (self.batch.margins(logp) - self.ref_margins)
        loss = float(np.mean(-log_expit(z)))
        # The softmax normalizer enters chosen and rejected log-probs equally, so
        # dz/dlogits is beta * (e_w - e_l) within the prompt row.
        grad = self.batch.scatter(-self.beta * expit(-z) / z.size)
        return loss, grad


def dpo_grad(
    policy: Policy,
    reference: Policy,
    pairs: Sequence[PreferencePair],
    beta: float,
) -> np.ndarray:
    """Gradient of the mean DPO loss over ``pairs`` with respect to every logit."""
    return _DpoObjective(reference, pairs, beta)(policy.logits)[1]


def mean_dpo_loss(
    policy: Policy,
    reference: Policy,
    pairs: Sequence[PreferencePair],
    beta: float,
) -> float:
    return _DpoObjective(reference, pairs, beta)(policy.logits)[0]


def select_pair(
    responses: Sequence[int],
    scores: Sequence[float],
    lengths: Sequence[int],
    mode: PairSelection,
) -> Optional[Tuple[int, int]]:
    """Pick (chosen, rejected) among sampled candidates, or None if degenerate.

    Args:
        responses: Sampled response ids (duplicates allowed)
        scores: Reward of each sample
        lengths: Length of each sample
        mode: ``best-vs-worst`` or ``length-controlled``

    Returns:
        The chosen and rejected response ids. Ties prefer the smaller response id.
    """
    ys = np.asarray(responses, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    lens = np.asarray(lengths, dtype=np.int64)
    if np.all(ys == ys[0]):
        return None

    low = s == s.min()
    rejected = int(ys[low].min())
    if mode == "best-vs-worst":
        chosen = int(ys[s == s.max()].min())
    else:
        above = s > s.mean()
        if not np.any(above):
            return None
        candidates = sorted(zip(lens[above].tolist(), ys[above].tolist()))
        chosen = int(candidates[0][1])
    if chosen == rejected:
        return None
    return chosen, rejected


def build_estep_pairs(
    policy: Policy,
    rm: RewardModel,
    prompts: Sequence[int],
    cfg: DpoConfig,
    env: "Environment",
    rng: np.random.Generator,
) -> List[PreferencePair]:
    """Sample M candidates per prompt from ``policy`` and rank them with ``rm``.

    Prompts whose candidates are all identical, or whose rule picks the same
    response twice, contribute no pair.
    """
    m = cfg.samples_per_prompt
    if m < 2:
        raise ValueError("samples_per_prompt must be at least 2 to form pairs")
    rows = np.asarray(prompts, dtype=np.int64)
    draws = sample_responses(
        policy, np.repeat(rows, m), cfg.sample_temperature, rng
    ).reshape(rows.size, m)

    pairs: List[PreferencePair] = []
    for x, ys in zip(rows.tolist(), draws):
        picked = select_pair(
            ys, rm.scores[x, ys], env.lengths[x, ys], cfg.pair_selection
        )
        if picked is None:
            continue
        pairs.append(
            PreferencePair(
                prompt=x, chosen=picked[0], rejected=picked[1], source="e-step"
            )
        )
    skipped = rows.size - len(pairs)
    if skipped:
        logger.debug(f"E-step pair builder skipped {skipped} degenerate prompts")
    return pairs


def train_dpo(
    reference: Policy, pairs: Sequence[PreferencePair], cfg: DpoConfig
) -> List[Checkpoint]:
    """Full-batch DPO from ``reference``, checkpointing on a fixed cadence.

    Args:
        reference: Initial and reference policy
        pairs: Training preference pairs
        cfg: Trainer settings

    Returns:
        Checkpoints every ``checkpoint_every`` steps plus the final step

    Raises:
        EmptyDataError: If ``pairs`` is empty
        TrainingDivergedError: If the loss becomes non-finite
    """
    if not pairs:
        raise EmptyDataError("DPO needs at least one preference pair")
    objective = _DpoObjective(reference, pairs, cfg.beta)
    logits = np.array(reference.logits, copy=True)
    checkpoints: List[Checkpoint] = []

    loss, grad = objective(logits)
    for step in range(1, cfg.steps + 1):
        logits -= cfg.learning_rate * grad
        loss, grad = objective(logits)
        if not np.isfinite(loss) or not np.all(np.isfinite(logits)):
            raise TrainingDivergedError("dpo", step, loss)
        if step % cfg.checkpoint_every == 0 or step == cfg.steps:
            checkpoints.append(Checkpoint(Policy(logits), step, loss))
            logger.debug(f"DPO checkpoint at step {step}: loss={loss:.6f}")
    return checkpoints
