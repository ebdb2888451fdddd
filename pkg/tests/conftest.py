"""Shared fixtures: hand-built worlds with known reward tables."""
from typing import Callable, Optional

import numpy as np
import pytest

from mutual_taught.env import Environment, build_environment
from mutual_taught.policy import Policy
from mutual_taught.reward import RewardModel
from mutual_taught.schemas import EnvConfig, ExperimentConfig, PreferencePair


def world(
    rstar: np.ndarray,
    lengths: Optional[np.ndarray] = None,
    base_logits: Optional[np.ndarray] = None,
    base_scores: Optional[np.ndarray] = None,
    **config: object,
) -> Environment:
    """An Environment around an explicit r* table; every split holds every prompt."""
    rstar = np.asarray(rstar, dtype=np.float64)
    num_prompts, num_responses = rstar.shape
    cfg = EnvConfig(
        num_prompts=num_prompts,
        num_responses=num_responses,
        partition_scope="shared",
        **config,
    )
    if lengths is None:
        lengths = np.full(rstar.shape, cfg.length_min)
    prompts = tuple(range(num_prompts))
    return Environment(
        config=cfg,
        rstar=rstar,
        lengths=np.asarray(lengths),
        policy_split_1=prompts,
        policy_split_2=prompts,
        rm_split=prompts,
        validation_split=prompts,
        base_policy=Policy(
            np.zeros(rstar.shape) if base_logits is None else base_logits
        ),
        base_rm=RewardModel(
            np.zeros(rstar.shape) if base_scores is None else base_scores
        ),
    )


def pair(prompt: int, chosen: int, rejected: int, **kw: object) -> PreferencePair:
    kw.setdefault("source", "annotation")
    return PreferencePair(prompt=prompt, chosen=chosen, rejected=rejected, **kw)


def point_mass(num_prompts: int, num_responses: int, response: int) -> Policy:
    logits = np.full((num_prompts, num_responses), -100.0)
    logits[:, response] = 100.0
    return Policy(logits)


@pytest.fixture
def make_world() -> Callable[..., Environment]:
    return world


@pytest.fixture(scope="session")
def small_env() -> Environment:
    """A 16-prompt, 8-response world with a pretrained base reward model."""
    return build_environment(
        EnvConfig(num_prompts=16, num_responses=8, init_rm_pairs_per_prompt=8, seed=7)
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def tiny_config(**updates: object) -> ExperimentConfig:
    """A seconds-scale experiment: small world, short trainers."""
    data = {
        "env": {
            "num_prompts": 12,
            "num_responses": 6,
            "init_rm_pairs_per_prompt": 4,
            "rm_pretrain": {"learning_rate": 5.0, "steps": 200},
        },
        "loop": {
            "dpo": {"learning_rate": 5.0, "steps": 20, "checkpoint_every": 10},
            "bt": {"steps": 100},
        },
        "eval": {"rm_accuracy_pairs": 200},
        "seeds": [0, 1],
    }
    data.update(updates)
    return ExperimentConfig.model_validate(data)
