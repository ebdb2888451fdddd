"""Exact and sampled evaluation oracles.

The true judge is the ground-truth reward table, so win rates, expected reward and
KL to pi* are computed exactly by enumeration. Reward-model accuracy is available
both sampled and exact.
"""
import logging
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax
from scipy.stats import binomtest

from mutual_taught.env import Environment
from mutual_taught.policy import (
    Policy,
    build_estep_pairs,
    sample_responses,
    train_dpo,
)
from mutual_taught.reward import RewardModel
from mutual_taught.schemas import (
    DpoConfig,
    EvalConfig,
    IterationMetrics,
    TransferRecord,
)
from mutual_taught.seeding import child_seed, derive_rng

logger = logging.getLogger(__name__)

Distribution = Literal["policy", "uniform"]
RewardTable = Union[np.ndarray, RewardModel]


def _rows(prompts: Sequence[int]) -> np.ndarray:
    rows = np.asarray(prompts, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("at least one prompt is required")
    return rows


def _table(reward: RewardTable) -> np.ndarray:
    return reward.scores if isinstance(reward, RewardModel) else np.asarray(reward)


def expected_reward(
    policy: Policy, reward: RewardTable, prompts: Sequence[int]
) -> float:
    """Mean over ``prompts`` of E_{y ~ pi(.|x)} r(x, y), computed exactly."""
    rows = _rows(prompts)
    probs = policy.probs()[rows]
    return float(np.mean(np.sum(probs * _table(reward)[rows], axis=1)))


def _judged(
    pi_a: Policy, pi_b: Policy, env: Environment, rows: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Joint draw weights and true-judge outcomes, each of shape [n x R x R]."""
    pa = pi_a.probs()[rows]
    pb = pi_b.probs()[rows]
    r = env.rstar[rows]
    outcome = (r[:, :, None] > r[:, None, :]) + 0.5 * (r[:, :, None] == r[:, None, :])
    return pa[:, :, None] * pb[:, None, :], outcome


def true_win_rate_exact(
    pi_a: Policy, pi_b: Policy, env: Environment, prompts: Sequence[int]
) -> float:
    """Probability the true judge prefers a draw of ``pi_a`` over one of ``pi_b``.

    Averaged over ``prompts``; ties in r* count one half.
    """
    weight, outcome = _judged(pi_a, pi_b, env, _rows(prompts))
    return float(np.mean(np.sum(weight * outcome, axis=(1, 2))))


def length_controlled_win_rate(
    pi_a: Policy,
    pi_b: Policy,
    env: Environment,
    prompts: Sequence[int],
    bucket_width: int,
) -> Optional[float]:
    """Win rate conditional on both draws falling in the same length bucket.

    Returns None when no same-bucket pair has positive probability.
    """
    rows = _rows(prompts)
    weight, outcome = _judged(pi_a, pi_b, env, rows)
    buckets = env.length_buckets(bucket_width)[rows]
    weight = weight * (buckets[:, :, None] == buckets[:, None, :])
    total = float(np.sum(weight))
    if total <= 0.0:
        return None
    return float(np.sum(weight * outcome) / total)


def kl_to_pistar(policy: Policy, env: Environment, prompts: Sequence[int]) -> float:
    """Mean over prompts of KL(pi(.|x) || pi*(.|x))."""
    rows = _rows(prompts)
    logp = policy.log_probs()[rows]
    logq = log_softmax(env.rstar[rows] / env.config.pistar_temperature, axis=1)
    kl = np.sum(np.exp(logp) * (logp - logq), axis=1)
    return float(max(np.mean(kl), 0.0))


def _agreement(
    rm_margin: np.ndarray, true_margin: np.ndarray, tie_credit: float
) -> np.ndarray:
    hit = np.sign(rm_margin) == np.sign(true_margin)
    return np.where(rm_margin == 0, tie_credit, hit.astype(np.float64))


def rm_accuracy(
    rm: RewardModel,
    env: Environment,
    prompts: Sequence[int],
    distribution: Distribution,
    rng: np.random.Generator,
    num_pairs: int,
    policy: Optional[Policy] = None,
    temperature: float = 1.0,
    tie_credit: float = 0.0,
) -> Optional[float]:
    """Sampled pairwise accuracy of ``rm`` against r*.

    Args:
        rm: Reward model under test
        env: World holding r*
        prompts: Prompts to draw from uniformly
        distribution: ``policy`` draws both responses from ``policy`` (ID);
            ``uniform`` draws them uniformly over all responses (OOD)
        rng: Sampling stream
        num_pairs: Number of sampled pairs before discarding r* ties
        policy: Required for ``policy``
        temperature: Sampling temperature for ``policy``
        tie_credit: Credit for a pair the model scores equally

    Returns:
        Fraction of informative pairs ordered like r*, or None if none was informative
    """
    if num_pairs < 1:
        raise ValueError("num_pairs must be at least 1")
    rows = _rows(prompts)
    xs = rows[rng.integers(0, rows.size, size=num_pairs)]
    if distribution == "policy":
        if policy is None:
            raise ValueError("in-distribution accuracy needs a policy")
        ya = sample_responses(policy, xs, temperature, rng)
        yb = sample_responses(policy, xs, temperature, rng)
    else:
        ya = rng.integers(0, env.num_responses, size=num_pairs)
        yb = rng.integers(0, env.num_responses, size=num_pairs)

    true_margin = env.rstar[xs, ya] - env.rstar[xs, yb]
    informative = true_margin != 0
    if not np.any(informative):
        logger.warning("No informative pairs for reward model accuracy")
        return None
    rm_margin = rm.scores[xs, ya] - rm.scores[xs, yb]
    credit = _agreement(rm_margin[informative], true_margin[informative], tie_credit)
    return float(np.mean(credit))


def rm_accuracy_exact(
    rm: RewardModel,
    env: Environment,
    prompts: Sequence[int],
    policy: Optional[Policy] = None,
    temperature: float = 1.0,
    tie_credit: float = 0.0,
) -> Optional[float]:
    """Exact expectation of :func:`rm_accuracy` by enumerating response pairs.

    Pairs are weighted by pi(y) pi(y') when ``policy`` is given, uniformly otherwise.
    """
    rows = _rows(prompts)
    if policy is None:
        probs = np.full((rows.size, env.num_responses), 1.0 / env.num_responses)
    else:
        probs = policy.probs(temperature)[rows]
    weight = probs[:, :, None] * probs[:, None, :]
    r = env.rstar[rows]
    s = rm.scores[rows]
    true_margin = r[:, :, None] - r[:, None, :]
    rm_margin = s[:, :, None] - s[:, None, :]
    weight = weight * (true_margin != 0)
    total = float(np.sum(weight))
    if total <= 0.0:
        return None
    credit = _agreement(rm_margin, true_margin, tie_credit)
    return float(np.sum(weight * credit) / total)


def evaluate_models(
    iteration: int,
    policy: Policy,
    rm: RewardModel,
    env: Environment,
    eval_cfg: EvalConfig,
    temperature: float,
    rng: np.random.Generator,
) -> IterationMetrics:
    """Metrics of the models in force after ``iteration``.

    The in-distribution accuracies of ``rm`` and of the base reward model are measured
    on the same sampled pairs.
    """
    prompts = env.all_prompts
    id_seed = child_seed(rng)
    ood_seed = child_seed(rng)
    n = eval_cfg.rm_accuracy_pairs

    def id_accuracy(model: RewardModel) -> Optional[float]:
        return rm_accuracy(
            model, env, prompts, "policy", derive_rng(id_seed), n, policy, temperature
        )

    return IterationMetrics(
        iteration=iteration,
        expected_true_reward=expected_reward(policy, env.rstar, prompts),
        expected_rm_reward=expected_reward(policy, rm, prompts),
        kl_to_pistar=kl_to_pistar(policy, env, prompts),
        true_win_vs_base=true_win_rate_exact(policy, env.base_policy, env, prompts),
        true_win_vs_base_lc=length_controlled_win_rate(
            policy, env.base_policy, env, prompts, eval_cfg.length_bucket_width
        ),
        rm_accuracy_id=id_accuracy(rm),
        rm_accuracy_ood=rm_accuracy(
            rm, env, prompts, "uniform", derive_rng(ood_seed), n
        ),
        base_rm_accuracy_id=id_accuracy(env.base_rm),
    )


def transfer_eval(
    rm_iterated: RewardModel,
    rm_base: RewardModel,
    env: Environment,
    dpo_cfg: DpoConfig,
    rng: np.random.Generator,
) -> TransferRecord:
    """Train a fresh policy once with each reward model and compare the results.

    Both passes share the fresh initialization and the sampling stream, so equal
    reward models give identical policies.
    """
    fresh = env.fresh_policy(rng)
    pass_seed = child_seed(rng)
    prompts = env.all_prompts

    def trained_with(rm: RewardModel) -> Policy:
        rng_pass = derive_rng(pass_seed)
        pairs = build_estep_pairs(fresh, rm, prompts, dpo_cfg, env, rng_pass)
        return train_dpo(fresh, pairs, dpo_cfg)[-1].policy

    with_base = trained_with(rm_base)
    with_iterated = trained_with(rm_iterated)
    base_reward = expected_reward(with_base, env.rstar, prompts)
    iterated_reward = expected_reward(with_iterated, env.rstar, prompts)
    base_win = true_win_rate_exact(with_base, fresh, env, prompts)
    iterated_win = true_win_rate_exact(with_iterated, fresh, env, prompts)
    record = TransferRecord(
        fresh_base_reward=expected_reward(fresh, env.rstar, prompts),
        base_rm_reward=base_reward,
        iterated_rm_reward=iterated_reward,
        reward_delta=iterated_reward - base_reward,
        base_rm_win=base_win,
        iterated_rm_win=iterated_win,
        win_delta=iterated_win - base_win,
    )
    logger.info(f"Transfer: reward delta {record.reward_delta:+.4f}")
    return record


@dataclass(frozen=True)
class SignTest:
    """Paired sign test of ``a`` against ``b``."""

    wins: int
    losses: int
    ties: int
    p_value: float


def paired_sign_test(a: Sequence[float], b: Sequence[float]) -> SignTest:
    """Two-sided sign test on paired observations; ties are dropped."""
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    wins = int(np.sum(diff > 0))
    losses = int(np.sum(diff < 0))
    ties = int(diff.size - wins - losses)
    if wins + losses == 0:
        return SignTest(wins, losses, ties, 1.0)
    p_value = binomtest(wins, wins + losses, 0.5, alternative="two-sided").pvalue
    return SignTest(wins, losses, ties, float(p_value))
