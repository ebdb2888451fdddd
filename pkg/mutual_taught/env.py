"""The synthetic alignment world.

Builds the ground-truth reward table, response lengths, prompt partitions, the
weakly aligned base policy and the base reward model. The base reward model only
ever sees comparisons drawn from the base policy, so its scores for responses the
base policy rarely produces stay near zero.
"""
import hashlib
import logging
from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.special import expit, softmax

from mutual_taught.errors import ConfigError
from mutual_taught.policy import Policy, sample_responses
from mutual_taught.reward import RewardModel, train_bt
from mutual_taught.schemas import (
    Annotation,
    EnvConfig,
    EnvironmentRecord,
    PreferencePair,
    largest_remainder,
)
from mutual_taught.seeding import stage_rng

logger = logging.getLogger(__name__)

Partition = Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Environment:
    """An immutable synthetic world; safe to share between readers."""

    config: EnvConfig
    rstar: np.ndarray
    lengths: np.ndarray
    policy_split_1: Partition
    policy_split_2: Partition
    rm_split: Partition
    validation_split: Partition
    base_policy: Policy
    base_rm: RewardModel

    def __post_init__(self) -> None:
        for name in ("rstar", "lengths"):
            table = np.array(getattr(self, name), copy=True)
            table.setflags(write=False)
            object.__setattr__(self, name, table)

    @property
    def num_prompts(self) -> int:
        return self.config.num_prompts

    @property
    def num_responses(self) -> int:
        return self.config.num_responses

    @property
    def partitions(self) -> Tuple[Partition, Partition, Partition, Partition]:
        return (
            self.policy_split_1,
            self.policy_split_2,
            self.rm_split,
            self.validation_split,
        )

    @property
    def policy_splits(self) -> Tuple[Partition, Partition]:
        return self.policy_split_1, self.policy_split_2

    @property
    def all_prompts(self) -> Partition:
        return tuple(range(self.num_prompts))

    def pistar_table(self) -> np.ndarray:
        """pi* for every prompt, shape [P x R]."""
        return softmax(self.rstar / self.config.pistar_temperature, axis=1)

    def length_buckets(self, width: int) -> np.ndarray:
        """Bucket id of every (prompt, response) for length-controlled comparisons."""
        if width < 1:
            raise ValueError("bucket width must be positive")
        return (self.lengths - self.config.length_min) // width

    def fresh_policy(self, rng: np.random.Generator) -> Policy:
        """A new policy from the base-policy recipe with fresh noise."""
        return Policy(_base_logits(self.rstar, self.config, rng))

    def to_record(self) -> EnvironmentRecord:
        return EnvironmentRecord(
            config=self.config,
            rstar=self.rstar.tolist(),
            lengths=self.lengths.tolist(),
            policy_split_1=list(self.policy_split_1),
            policy_split_2=list(self.policy_split_2),
            rm_split=list(self.rm_split),
            validation_split=list(self.validation_split),
            base_policy=self.base_policy.to_record(),
            base_rm=self.base_rm.to_record(),
        )

    @classmethod
    def from_record(cls, record: EnvironmentRecord) -> "Environment":
        return cls(
            config=record.config,
            rstar=np.asarray(record.rstar, dtype=np.float64),
            lengths=np.asarray(record.lengths, dtype=np.int64),
            policy_split_1=tuple(record.policy_split_1),
            policy_split_2=tuple(record.policy_split_2),
            rm_split=tuple(record.rm_split),
            validation_split=tuple(record.validation_split),
            base_policy=Policy.from_record(record.base_policy),
            base_rm=RewardModel.from_record(record.base_rm),
        )

    def fingerprint(self) -> str:
        """SHA-256 of the serialized environment."""
        return hashlib.sha256(self.to_record().model_dump_json().encode()).hexdigest()


def _draw_lengths(
    rstar: np.ndarray, cfg: EnvConfig, rng: np.random.Generator
) -> np.ndarray:
    """Lengths whose per-prompt rank order tracks r* with the configured correlation.

    Each row's uniform length draws are sorted and handed out by the rank of a
    latent score mixing standardized r* with independent noise.
    """
    num_prompts, num_responses = rstar.shape
    rho = cfg.length_reward_correlation
    draws = np.sort(
        rng.integers(
            cfg.length_min, cfg.length_max + 1, size=(num_prompts, num_responses)
        ),
        axis=1,
    )
    centered = rstar - rstar.mean(axis=1, keepdims=True)
    spread = rstar.std(axis=1, keepdims=True)
    standardized = np.divide(
        centered, spread, out=np.zeros_like(centered), where=spread > 0
    )
    latent = rho * standardized + np.sqrt(1.0 - rho**2) * rng.standard_normal(
        rstar.shape
    )
    ranks = np.argsort(np.argsort(latent, axis=1, kind="stable"), axis=1)
    return np.take_along_axis(draws, ranks, axis=1)


def _base_logits(
    rstar: np.ndarray, cfg: EnvConfig, rng: np.random.Generator
) -> np.ndarray:
    noise = rng.normal(0.0, cfg.base_noise_std, size=rstar.shape)
    return cfg.base_alignment * rstar + noise


def _partition(
    cfg: EnvConfig, rng: np.random.Generator
) -> Tuple[Partition, Partition, Partition, Partition]:
    everything = tuple(range(cfg.num_prompts))
    if cfg.partition_scope == "shared":
        return everything, everything, everything, everything

    sizes = largest_remainder(cfg.num_prompts, cfg.partition_fractions)
    if min(sizes) < 1:
        raise ConfigError(f"partition sizes {sizes} include an empty partition")
    order = rng.permutation(cfg.num_prompts)
    bounds = np.cumsum([0] + sizes)
    parts = [
        tuple(sorted(int(x) for x in order[lo:hi]))
        for lo, hi in zip(bounds[:-1], bounds[1:])
    ]
    return parts[0], parts[1], parts[2], parts[3]


def label_pair(
    rstar: np.ndarray,
    annotation: Annotation,
    prompt: int,
    y_a: int,
    y_b: int,
    rng: np.random.Generator,
) -> PreferencePair:
    """Annotate a comparison against a raw reward table."""
    if y_a == y_b:
        raise ValueError("cannot annotate a response against itself")
    gap = float(rstar[prompt, y_a] - rstar[prompt, y_b])
    if annotation == "bt-noise":
        a_wins = bool(rng.random() < expit(gap))
    else:
        a_wins = gap > 0 or (gap == 0 and y_a < y_b)
    chosen, rejected = (y_a, y_b) if a_wins else (y_b, y_a)
    return PreferencePair(
        prompt=prompt, chosen=chosen, rejected=rejected, source="annotation"
    )


def annotate(
    env: Environment, prompt: int, y_a: int, y_b: int, rng: np.random.Generator
) -> PreferencePair:
    """The human-annotator stand-in.

    Under ``bt-noise`` ``y_a`` wins with probability sigma(r*(y_a) - r*(y_b)); under
    ``noise-free`` the higher r* wins and ties go to the smaller response id.

    Raises:
        ValueError: If ``y_a == y_b``
    """
    return label_pair(env.rstar, env.config.annotation, prompt, y_a, y_b, rng)


def pistar(env: Environment, prompt: int) -> np.ndarray:
    """softmax(r*[prompt] / pistar_temperature)."""
    if not 0 <= prompt < env.num_prompts:
        raise IndexError(f"prompt {prompt} outside 0..{env.num_prompts - 1}")
    return softmax(env.rstar[prompt] / env.config.pistar_temperature)


def pretrain_base_rm(
    rstar: np.ndarray,
    base_policy: Policy,
    cfg: EnvConfig,
    rng: np.random.Generator,
) -> RewardModel:
    """Fit the base reward model on annotated base-policy comparisons.

    Args:
        rstar: Ground-truth reward table
        base_policy: Policy the comparisons are drawn from (temperature 1)
        cfg: World configuration; ``init_rm_pairs_per_prompt`` and ``rm_pretrain``
        rng: Stream for sampling and annotation noise

    Returns:
        The trained model, or the all-zero model when no comparison is available
    """
    num_prompts, num_responses = rstar.shape
    n0 = cfg.init_rm_pairs_per_prompt
    l2 = cfg.rm_pretrain.l2_lambda
    if n0 == 0:
        return RewardModel.zeros(num_prompts, num_responses, l2)

    prompts = np.repeat(np.arange(num_prompts), 2 * n0)
    draws = sample_responses(base_policy, prompts, 1.0, rng).reshape(
        num_prompts, n0, 2
    )
    pairs: List[PreferencePair] = []
    for x in range(num_prompts):
        for y_a, y_b in draws[x].tolist():
            if y_a != y_b:
                pairs.append(label_pair(rstar, cfg.annotation, x, y_a, y_b, rng))
    if not pairs:
        logger.warning("Base policy produced no distinct pairs; base RM is all zero")
        return RewardModel.zeros(num_prompts, num_responses, l2)
    init = RewardModel.zeros(num_prompts, num_responses, l2)
    return train_bt(init, pairs, cfg.rm_pretrain)


def build_environment(cfg: Union[EnvConfig, dict]) -> Environment:
    """Build the world for ``cfg``; fully determined by ``cfg.seed``.

    Raises:
        ConfigError: If the configuration is invalid or a partition would be empty
    """
    if not isinstance(cfg, EnvConfig):
        try:
            cfg = EnvConfig.model_validate(cfg)
        except ValidationError as e:
            raise ConfigError(str(e)) from e
    shape = (cfg.num_prompts, cfg.num_responses)
    rstar = stage_rng(cfg.seed, "rstar").normal(0.0, cfg.reward_scale, size=shape)
    lengths = _draw_lengths(rstar, cfg, stage_rng(cfg.seed, "lengths"))
    base_policy = Policy(_base_logits(rstar, cfg, stage_rng(cfg.seed, "base_policy")))
    splits = _partition(cfg, stage_rng(cfg.seed, "partitions"))
    base_rm = pretrain_base_rm(rstar, base_policy, cfg, stage_rng(cfg.seed, "pretrain"))

    env = Environment(
        config=cfg,
        rstar=rstar,
        lengths=lengths,
        policy_split_1=splits[0],
        policy_split_2=splits[1],
        rm_split=splits[2],
        validation_split=splits[3],
        base_policy=base_policy,
        base_rm=base_rm,
    )
    logger.info(
        f"Built environment P={cfg.num_prompts} R={cfg.num_responses} "
        f"seed={cfg.seed} partitions={[len(p) for p in splits]}"
    )
    return env
