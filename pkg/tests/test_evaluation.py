import math

import numpy as np
import pytest

from mutual_taught.env import build_environment
from mutual_taught.evaluation import (
    evaluate_models,
    expected_reward,
    kl_to_pistar,
    length_controlled_win_rate,
    paired_sign_test,
    rm_accuracy,
    rm_accuracy_exact,
    transfer_eval,
    true_win_rate_exact,
)
from mutual_taught.policy import Policy, sample_responses
from mutual_taught.reward import RewardModel
from mutual_taught.schemas import DpoConfig, EnvConfig, EvalConfig

from .conftest import point_mass


def test_expected_reward_exact_values(make_world):
    env = make_world(np.array([[1.0, 3.0]]))
    assert expected_reward(Policy.uniform(1, 2), env.rstar, [0]) == pytest.approx(2.0)
    best = point_mass(1, 2, 1)
    assert expected_reward(best, env.rstar, [0]) == pytest.approx(3.0)


def test_expected_reward_matches_sampling(rng):
    rstar = rng.normal(size=(1, 6))
    policy = Policy(rng.normal(size=(1, 6)))
    draws = sample_responses(policy, [0] * 20_000, 1.0, rng)
    values = rstar[0, draws]
    se = values.std() / math.sqrt(values.size)
    assert abs(values.mean() - expected_reward(policy, rstar, [0])) <= 3 * se


def test_expected_reward_is_linear_in_reward(rng):
    policy = Policy(rng.normal(size=(3, 4)))
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    combined = expected_reward(policy, 2.0 * a - b, [0, 1, 2])
    separate = 2.0 * expected_reward(policy, a, [0, 1, 2]) - expected_reward(
        policy, b, [0, 1, 2]
    )
    assert combined == pytest.approx(separate, abs=1e-12)


def test_expected_reward_accepts_reward_model(rng):
    scores = rng.normal(size=(2, 3))
    policy = Policy(rng.normal(size=(2, 3)))
    assert expected_reward(policy, RewardModel(scores), [1]) == pytest.approx(
        expected_reward(policy, scores, [1])
    )


def test_expected_reward_needs_prompts(rng):
    with pytest.raises(ValueError):
        expected_reward(Policy.uniform(1, 2), np.zeros((1, 2)), [])


def test_true_win_rate_against_itself(small_env, rng):
    policy = Policy(rng.normal(size=small_env.rstar.shape))
    win = true_win_rate_exact(policy, policy, small_env, small_env.all_prompts)
    assert win == pytest.approx(0.5, abs=1e-12)


def test_true_win_rate_point_mass_example(make_world):
    env = make_world(np.array([[0.0, 1.0]]))
    win = true_win_rate_exact(point_mass(1, 2, 1), Policy.uniform(1, 2), env, [0])
    assert win == pytest.approx(0.75, abs=1e-12)


def test_true_win_rate_antisymmetric(small_env, rng):
    a = Policy(rng.normal(size=small_env.rstar.shape))
    b = Policy(rng.normal(size=small_env.rstar.shape))
    prompts = small_env.all_prompts
    total = true_win_rate_exact(a, b, small_env, prompts) + true_win_rate_exact(
        b, a, small_env, prompts
    )
    assert total == pytest.approx(1.0, abs=1e-12)


def test_length_controlled_win_rate(make_world, rng):
    env = make_world(
        np.array([[0.0, 1.0, 2.0]]), lengths=np.array([[10, 20, 300]])
    )
    a = Policy(rng.normal(size=(1, 3)))
    assert length_controlled_win_rate(a, a, env, [0], 50) == pytest.approx(0.5)
    wide = length_controlled_win_rate(a, Policy.uniform(1, 3), env, [0], 1000)
    raw = true_win_rate_exact(a, Policy.uniform(1, 3), env, [0])
    assert wide == pytest.approx(raw, abs=1e-12)
    apart = length_controlled_win_rate(
        Policy(np.array([[0.0, 0.0, -800.0]])),
        Policy(np.array([[-800.0, -800.0, 0.0]])),
        env,
        [0],
        50,
    )
    assert apart is None


def test_kl_to_pistar_values(make_world):
    env = make_world(
        np.array([[0.0, 0.5 * math.log(3.0)]]), pistar_temperature=0.5
    )
    assert kl_to_pistar(Policy.uniform(1, 2), env, [0]) == pytest.approx(
        0.1438410362, abs=1e-9
    )
    matched = Policy(env.rstar / env.config.pistar_temperature)
    assert kl_to_pistar(matched, env, [0]) == pytest.approx(0.0, abs=1e-12)


def test_kl_to_pistar_nonnegative(small_env, rng):
    for _ in range(5):
        policy = Policy(rng.normal(0, 3, size=small_env.rstar.shape))
        assert kl_to_pistar(policy, small_env, small_env.all_prompts) >= 0.0


def _accuracy(rm, env, distribution, seed=0, **kw):
    policy = env.base_policy if distribution == "policy" else None
    return rm_accuracy(
        rm,
        env,
        env.all_prompts,
        distribution,
        np.random.default_rng(seed),
        2000,
        policy=policy,
        **kw,
    )


@pytest.mark.parametrize("distribution", ["policy", "uniform"])
def test_rm_accuracy_extremes(small_env, distribution):
    rstar = small_env.rstar
    assert _accuracy(RewardModel(2.0 * rstar), small_env, distribution) == 1.0
    assert _accuracy(RewardModel(np.exp(rstar)), small_env, distribution) == 1.0
    assert _accuracy(RewardModel(-rstar), small_env, distribution) == 0.0


def test_rm_accuracy_ties_use_tie_credit(small_env):
    zero = RewardModel(np.zeros_like(small_env.rstar))
    assert _accuracy(zero, small_env, "uniform") == 0.0
    assert _accuracy(zero, small_env, "uniform", tie_credit=0.5) == 0.5


def test_rm_accuracy_policy_distribution_needs_policy(small_env, rng):
    with pytest.raises(ValueError):
        rm_accuracy(small_env.base_rm, small_env, [0], "policy", rng, 10)


def test_rm_accuracy_without_informative_pairs(make_world, rng):
    env = make_world(np.zeros((2, 3)))
    assert rm_accuracy(env.base_rm, env, [0, 1], "uniform", rng, 100) is None
    assert rm_accuracy_exact(env.base_rm, env, [0, 1]) is None


def test_sampled_accuracy_agrees_with_exact(small_env):
    exact = rm_accuracy_exact(small_env.base_rm, small_env, small_env.all_prompts)
    sampled = rm_accuracy(
        small_env.base_rm,
        small_env,
        small_env.all_prompts,
        "uniform",
        np.random.default_rng(3),
        20_000,
    )
    assert sampled == pytest.approx(exact, abs=0.03)


def test_evaluate_models_at_base(small_env):
    cfg = EvalConfig(rm_accuracy_pairs=500)
    args = (0, small_env.base_policy, small_env.base_rm, small_env, cfg, 0.8)
    metrics = evaluate_models(*args, np.random.default_rng(1))
    assert metrics.iteration == 0
    assert metrics.true_win_vs_base == pytest.approx(0.5, abs=1e-12)
    assert metrics.rm_accuracy_id == metrics.base_rm_accuracy_id
    assert metrics.expected_rm_reward == pytest.approx(
        expected_reward(small_env.base_policy, small_env.base_rm, small_env.all_prompts)
    )
    again = evaluate_models(*args, np.random.default_rng(1))
    assert again.model_dump() == metrics.model_dump()


def test_transfer_with_equal_models_is_neutral(small_env):
    cfg = DpoConfig(steps=50, checkpoint_every=50)
    record = transfer_eval(
        small_env.base_rm, small_env.base_rm, small_env, cfg, np.random.default_rng(5)
    )
    assert record.reward_delta == 0.0
    assert record.win_delta == 0.0
    again = transfer_eval(
        small_env.base_rm, small_env.base_rm, small_env, cfg, np.random.default_rng(5)
    )
    assert again == record


@pytest.mark.slow
def test_oracle_reward_model_transfers_better_than_base():
    better = 0
    for seed in range(10):
        env = build_environment(EnvConfig(num_prompts=16, num_responses=8, seed=seed))
        oracle = RewardModel(env.rstar)
        record = transfer_eval(
            oracle, env.base_rm, env, DpoConfig(), np.random.default_rng(seed)
        )
        better += record.reward_delta > 0
    assert better >= 6


def test_paired_sign_test():
    result = paired_sign_test([2.0] * 10, [1.0] * 10)
    assert (result.wins, result.losses, result.ties) == (10, 0, 0)
    assert result.p_value == pytest.approx(0.001953125)

    mixed = paired_sign_test([1.0, 2.0, 3.0], [1.0, 1.0, 4.0])
    assert (mixed.wins, mixed.losses, mixed.ties) == (1, 1, 1)
    assert mixed.p_value == pytest.approx(1.0)

    assert paired_sign_test([1.0], [1.0]).p_value == 1.0
    with pytest.raises(ValueError):
        paired_sign_test([1.0, 2.0], [1.0])
