"""Central finite-difference verification of the DPO and BT gradients."""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np

from mutual_taught.errors import VerificationError
from mutual_taught.policy import Policy, dpo_grad, mean_dpo_loss
from mutual_taught.reward import RewardModel, bt_grad, bt_nll
from mutual_taught.schemas import PreferencePair
from mutual_taught.seeding import derive_rng

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-6


def finite_difference(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_STEP
) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``x``, one coordinate at a time."""
    grad = np.zeros_like(x, dtype=np.float64)
    point = np.array(x, dtype=np.float64, copy=True)
    for idx in np.ndindex(x.shape):
        orig = point[idx]
        point[idx] = orig + h
        up = f(point)
        point[idx] = orig - h
        down = f(point)
        point[idx] = orig
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| scaled by the larger infinity norm (floored at 1e-8)."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _random_pairs(
    rng: np.random.Generator, num_prompts: int, num_responses: int
) -> List[PreferencePair]:
    pairs = []
    for _ in range(int(rng.integers(1, 9))):
        chosen, rejected = rng.choice(num_responses, size=2, replace=False)
        pairs.append(
            PreferencePair(
                prompt=int(rng.integers(0, num_prompts)),
                chosen=int(chosen),
                rejected=int(rejected),
                source="annotation",
            )
        )
    return pairs


def _shape(rng: np.random.Generator) -> Tuple[int, int]:
    return int(rng.integers(1, 6)), int(rng.integers(2, 7))


def check_dpo_instance(rng: np.random.Generator, perturbation: float = 0.0) -> float:
    """Relative error of :func:`dpo_grad` on one random instance."""
    shape = _shape(rng)
    reference = Policy(rng.normal(0.0, 1.0, size=shape))
    policy = Policy(rng.normal(0.0, 1.0, size=shape))
    pairs = _random_pairs(rng, *shape)
    beta = float(rng.uniform(0.1, 2.0))

    analytic = dpo_grad(policy, reference, pairs, beta)
    analytic.flat[0] += perturbation
    numeric = finite_difference(
        lambda z: mean_dpo_loss(Policy(z), reference, pairs, beta), policy.logits
    )
    return relative_error(analytic, numeric)


def check_bt_instance(rng: np.random.Generator, perturbation: float = 0.0) -> float:
    """Relative error of :func:`bt_grad` on one random instance."""
    shape = _shape(rng)
    l2 = float(rng.choice([0.0, 1e-3, 0.1]))
    rm = RewardModel(rng.normal(0.0, 1.0, size=shape), l2)
    pairs = _random_pairs(rng, *shape)

    analytic = bt_grad(rm, pairs)
    analytic.flat[0] += perturbation
    numeric = finite_difference(lambda z: bt_nll(RewardModel(z, l2), pairs), rm.scores)
    return relative_error(analytic, numeric)


@dataclass
class GradCheckReport:
    """Per-instance relative errors of both gradient checks."""

    tolerance: float
    dpo_errors: List[float] = field(default_factory=list)
    bt_errors: List[float] = field(default_factory=list)

    @property
    def max_dpo_error(self) -> float:
        return max(self.dpo_errors, default=0.0)

    @property
    def max_bt_error(self) -> float:
        return max(self.bt_errors, default=0.0)

    @property
    def passed(self) -> bool:
        return max(self.max_dpo_error, self.max_bt_error) <= self.tolerance

    def summary(self) -> str:
        return (
            f"dpo_grad: {len(self.dpo_errors)} instances, max relative error "
            f"{self.max_dpo_error:.3e}\n"
            f"bt_grad: {len(self.bt_errors)} instances, max relative error "
            f"{self.max_bt_error:.3e}\n"
            f"tolerance {self.tolerance:.1e}: {'PASS' if self.passed else 'FAIL'}"
        )

    def raise_for_failure(self) -> None:
        if not self.passed:
            raise VerificationError(self.summary())


def run_gradcheck(
    seed: int = 0,
    instances: int = 20,
    tolerance: float = DEFAULT_TOLERANCE,
    perturbation: float = 0.0,
) -> GradCheckReport:
    """Check both gradients on ``instances`` random problems each.

    Args:
        seed: Seed of the instance generator
        instances: Problems per gradient
        tolerance: Largest accepted relative error
        perturbation: Added to one analytic gradient entry; nonzero values exercise
            the failure path

    Returns:
        The report; call ``raise_for_failure`` to turn a failure into an exception
    """
    report = GradCheckReport(tolerance=tolerance)
    for i in range(instances):
        dpo_rng = derive_rng(seed, 0, i)
        bt_rng = derive_rng(seed, 1, i)
        report.dpo_errors.append(check_dpo_instance(dpo_rng, perturbation))
        report.bt_errors.append(check_bt_instance(bt_rng, perturbation))
    logger.info(
        f"Gradient check: dpo max {report.max_dpo_error:.3e}, "
        f"bt max {report.max_bt_error:.3e}"
    )
    return report
