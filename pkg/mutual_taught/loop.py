"""The Mutual-Taught EM loop.

Each policy iteration trains the policy with DPO on pairs ranked by the current
reward model (E-step), keeps the best validation checkpoint or halts, and at the
configured points retrains the reward model from the base model on pseudo-pairs
that prefer the new policy's response over the previous policy's (M-step).
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mutual_taught.env import Environment
from mutual_taught.errors import EmptyDataError
from mutual_taught.evaluation import evaluate_models, transfer_eval
from mutual_taught.policy import (
    Checkpoint,
    Policy,
    build_estep_pairs,
    sample_responses,
    train_dpo,
)
from mutual_taught.reward import RewardModel, bt_nll, reward_std, train_bt
from mutual_taught.schemas import (
    BtConfig,
    DpoConfig,
    EvalConfig,
    FilterStrategy,
    IterationReport,
    LoopConfig,
    PreferencePair,
    RmDataMode,
    RunMetrics,
)
from mutual_taught.seeding import child_seed, derive_rng, stage_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EStepResult:
    """Checkpoints of one E-step and the pairs they were trained on."""

    checkpoints: List[Checkpoint]
    pairs: List[PreferencePair]


@dataclass(frozen=True)
class Selection:
    """Outcome of validation-based model selection."""

    selected: Policy
    halted: bool
    win: float
    win_rates: List[float]
    checkpoint: Optional[Checkpoint] = None

    @property
    def step(self) -> Optional[int]:
        return None if self.checkpoint is None else self.checkpoint.step


@dataclass
class RunResult:
    """Everything a run produces."""

    policy: Policy
    rm: RewardModel
    reports: List[IterationReport] = field(default_factory=list)
    metrics: RunMetrics = field(default_factory=RunMetrics)
    checkpoints: List[Checkpoint] = field(default_factory=list)
    reward_models: List[RewardModel] = field(default_factory=list)
    rm_rounds: List[int] = field(default_factory=list)
    m_step_inits: List[RewardModel] = field(default_factory=list)
    rm_datasets: List[List[PreferencePair]] = field(default_factory=list)

    @property
    def halted(self) -> bool:
        return any(r.halted for r in self.reports)

    @property
    def selected_policies(self) -> List[Policy]:
        return [c.policy for c in self.checkpoints]

    def round_rm(self, round_no: int) -> Optional[RewardModel]:
        """Last reward model trained in round ``round_no``, if any."""
        trained = [
            rm for rm, r in zip(self.reward_models, self.rm_rounds) if r == round_no
        ]
        return trained[-1] if trained else None


def e_step(
    pi_prev: Policy,
    rm_prev: RewardModel,
    prompts: Sequence[int],
    cfg: DpoConfig,
    env: Environment,
    rng: np.random.Generator,
    init: Optional[Policy] = None,
    invert_labels: bool = False,
) -> EStepResult:
    """Rank samples of ``pi_prev`` with ``rm_prev`` and train with DPO.

    Args:
        pi_prev: Policy that generates the candidates
        rm_prev: Reward model that ranks them
        prompts: E-step prompt set
        cfg: DPO settings
        env: World (for response lengths)
        rng: Sampling stream
        init: Initialization and reference of the DPO run; defaults to ``pi_prev``
        invert_labels: Train on the pairs with chosen and rejected swapped

    Returns:
        The checkpoints and the pairs as built (before any inversion)

    Raises:
        EmptyDataError: If every prompt was degenerate
    """
    if len(prompts) == 0:
        raise ValueError("E-step needs at least one prompt")
    pairs = build_estep_pairs(pi_prev, rm_prev, prompts, cfg, env, rng)
    if not pairs:
        raise EmptyDataError("E-step produced no preference pairs")
    train_pairs = [p.swapped() for p in pairs] if invert_labels else pairs
    checkpoints = train_dpo(init if init is not None else pi_prev, train_pairs, cfg)
    return EStepResult(checkpoints=checkpoints, pairs=pairs)


def checkpoint_win_rate(
    candidate: Policy,
    pi_prev: Policy,
    rm_prev: RewardModel,
    validation: Sequence[int],
    rng: np.random.Generator,
    temperature: float = 0.8,
) -> float:
    """Fraction of validation prompts where the candidate's draw strictly outscores
    the previous policy's draw under ``rm_prev``."""
    rows = np.asarray(validation, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("validation set is empty")
    y_k = sample_responses(candidate, rows, temperature, rng)
    y_prev = sample_responses(pi_prev, rows, temperature, rng)
    wins = rm_prev.scores[rows, y_k] > rm_prev.scores[rows, y_prev]
    return float(np.mean(wins))


def choose_checkpoint(
    checkpoints: Sequence[Checkpoint],
    win_rates: Sequence[float],
    pi_prev: Policy,
    tau: float,
) -> Selection:
    """Argmax checkpoint (ties to the latest step), or ``pi_prev`` if below ``tau``."""
    if not checkpoints:
        raise ValueError("model selection needs at least one checkpoint")
    best = 0
    for k, w in enumerate(win_rates):
        if w >= win_rates[best]:
            best = k
    win = float(win_rates[best])
    if win < tau:
        return Selection(pi_prev, True, win, list(win_rates))
    chosen = checkpoints[best]
    return Selection(chosen.policy, False, win, list(win_rates), chosen)


def select_model(
    checkpoints: Sequence[Checkpoint],
    pi_prev: Policy,
    rm_prev: RewardModel,
    validation: Sequence[int],
    tau: float,
    rng: np.random.Generator,
    temperature: float = 0.8,
) -> Selection:
    """Validation-based selection with the tau early stop.

    Every checkpoint is scored on the same random stream so their win rates are
    directly comparable.
    """
    seed = child_seed(rng)
    win_rates = [
        checkpoint_win_rate(
            c.policy, pi_prev, rm_prev, validation, derive_rng(seed), temperature
        )
        for c in checkpoints
    ]
    for c, w in zip(checkpoints, win_rates):
        logger.debug(f"Checkpoint step {c.step}: validation win rate {w:.3f}")
    return choose_checkpoint(checkpoints, win_rates, pi_prev, tau)


@dataclass(frozen=True)
class PseudoDraws:
    """One draw from the new and the previous policy per reward-split prompt."""

    prompts: np.ndarray
    current: np.ndarray
    previous: np.ndarray

    def pairs(self) -> List[PreferencePair]:
        """Pairs preferring the new policy's response; collisions dropped."""
        return [
            PreferencePair(
                prompt=x, chosen=y_t, rejected=y_prev, source="policy-comparison"
            )
            for x, y_t, y_prev in zip(
                self.prompts.tolist(), self.current.tolist(), self.previous.tolist()
            )
            if y_t != y_prev
        ]

    def previous_samples(self) -> List[Tuple[int, int]]:
        return list(zip(self.prompts.tolist(), self.previous.tolist()))


def draw_pseudo_samples(
    pi_t: Policy,
    pi_prev: Policy,
    prompts_r: Sequence[int],
    temperature: float,
    rng: np.random.Generator,
) -> PseudoDraws:
    rows = np.asarray(prompts_r, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("reward split is empty")
    current = sample_responses(pi_t, rows, temperature, rng)
    previous = sample_responses(pi_prev, rows, temperature, rng)
    return PseudoDraws(rows, current, previous)


def build_pseudo_pairs(
    pi_t: Policy,
    pi_prev: Policy,
    prompts_r: Sequence[int],
    temperature: float,
    rng: np.random.Generator,
) -> List[PreferencePair]:
    """Pseudo-preference pairs (y_t chosen, y_{t-1} rejected) on the reward split."""
    return draw_pseudo_samples(pi_t, pi_prev, prompts_r, temperature, rng).pairs()


def compute_margins(
    pairs: Sequence[PreferencePair], rm_prev: RewardModel
) -> List[PreferencePair]:
    """Annotate each pair with r(chosen) - r(rejected) under ``rm_prev``."""
    out = []
    for p in pairs:
        if p.margin is not None:
            raise ValueError("pair margins are already set")
        margin = rm_prev.score(p.prompt, p.chosen) - rm_prev.score(p.prompt, p.rejected)
        out.append(p.model_copy(update={"margin": margin}))
    return out


def filter_pairs(
    pairs: Sequence[PreferencePair], epsilon: float, strategy: FilterStrategy
) -> List[PreferencePair]:
    """Curate pseudo-pairs by reward margin.

    Args:
        pairs: Pairs with margins set
        epsilon: Variance-aware threshold, nonnegative
        strategy: ``lqf`` drops margins <= -epsilon; ``hqs`` keeps margins
            >= epsilon that ``lqf`` also keeps (so a zero epsilon needs a positive
            margin); ``dst`` relabels so the higher-scored response is chosen and
            drops ties; ``none`` keeps everything

    Returns:
        The kept pairs, in input order
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if any(p.margin is None for p in pairs):
        raise ValueError("filter_pairs needs margins; call compute_margins first")
    if strategy == "none":
        return list(pairs)
    if strategy == "lqf":
        return [p for p in pairs if p.margin > -epsilon]  # type: ignore[operator]
    if strategy == "hqs":
        return [
            p
            for p in pairs
            if p.margin >= epsilon and p.margin > -epsilon  # type: ignore[operator]
        ]
    kept = []
    for p in pairs:
        if p.margin > 0:  # type: ignore[operator]
            kept.append(p)
        elif p.margin < 0:  # type: ignore[operator]
            kept.append(p.swapped())
    return kept


def assemble_rm_data(
    policy_comparison_pairs: Sequence[PreferencePair],
    self_training_pairs: Sequence[PreferencePair],
    mode: RmDataMode,
) -> List[PreferencePair]:
    """Reward model training data for ``mode``; mixed concatenates both sources.

    Raises:
        EmptyDataError: If the selected data is empty
    """
    if mode == "policy-comparison":
        data = list(policy_comparison_pairs)
    elif mode == "self-training":
        data = list(self_training_pairs)
    else:
        data = list(policy_comparison_pairs) + list(self_training_pairs)
    if not data:
        raise EmptyDataError(f"no reward model training pairs for mode {mode}")
    return data


def m_step(
    base_rm: RewardModel, rm_data: Sequence[PreferencePair], bt_cfg: BtConfig
) -> RewardModel:
    """Retrain the reward model, always starting from ``base_rm``."""
    return train_bt(base_rm, rm_data, bt_cfg)


def relabel_self_training(
    pairs: Sequence[PreferencePair], base_rm: RewardModel
) -> List[PreferencePair]:
    """E-step pairs labeled by the base reward model.

    Pairs ranked by a later reward model are reoriented so the base model's
    preferred response is chosen; pairs it scores equally are dropped.
    """
    labeled = filter_pairs(compute_margins(pairs, base_rm), 0.0, "dst")
    return [
        p.model_copy(update={"source": "self-training", "margin": None})
        for p in labeled
    ]


class _Run:
    """State of one run; ``execute`` walks rounds and iterations."""

    def __init__(
        self,
        env: Environment,
        cfg: LoopConfig,
        seed: int,
        eval_cfg: EvalConfig,
        prompt_sets: Optional[Sequence[Sequence[int]]],
    ):
        self.env = env
        self.cfg = cfg
        self.seed = seed
        self.eval_cfg = eval_cfg
        self.prompt_sets = (
            [list(s) for s in prompt_sets]
            if prompt_sets
            else [list(s) for s in env.policy_splits]
        )
        self.result = RunResult(policy=env.base_policy, rm=env.base_rm)
        self.iteration = 0

    def _record_metrics(self) -> None:
        metrics = evaluate_models(
            self.iteration,
            self.result.policy,
            self.result.rm,
            self.env,
            self.eval_cfg,
            self.cfg.dpo.sample_temperature,
            stage_rng(self.seed, "metrics"),
        )
        self.result.metrics.series.append(metrics)

    def _dpo_cfg(self) -> Tuple[DpoConfig, bool]:
        harness = self.cfg.degradation
        if harness is None or harness.iteration != self.iteration:
            return self.cfg.dpo, False
        logger.warning(
            f"Degrading iteration {self.iteration}: lr={harness.learning_rate}, "
            f"inverted labels={harness.invert_labels}"
        )
        return (
            self.cfg.dpo.model_copy(update={"learning_rate": harness.learning_rate}),
            harness.invert_labels,
        )

    def _m_step(
        self,
        report: IterationReport,
        pi_t: Policy,
        pi_prev: Policy,
        self_training: List[PreferencePair],
        keys: Tuple[int, int],
    ) -> None:
        cfg = self.cfg
        rm_prev = self.result.rm
        draws = draw_pseudo_samples(
            pi_t,
            pi_prev,
            self.env.rm_split,
            cfg.dpo.sample_temperature,
            stage_rng(self.seed, "pseudo", *keys),
        )
        built = compute_margins(draws.pairs(), rm_prev)
        epsilon = reward_std(rm_prev, draws.previous_samples())
        kept = filter_pairs(built, epsilon, cfg.filter)
        data = assemble_rm_data(kept, self_training, cfg.rm_data)

        base_rm = self.env.base_rm
        self.result.m_step_inits.append(base_rm)
        self.result.rm_datasets.append(data)
        new_rm = m_step(base_rm, data, cfg.bt)
        report.rm_updated = True
        report.pseudo_pairs_built = len(built)
        report.pseudo_pairs_kept = len(kept)
        report.rm_data_size = len(data)
        report.epsilon = epsilon
        report.rm_nll_before = bt_nll(base_rm, data)
        report.rm_nll_after = bt_nll(new_rm, data)
        logger.info(
            f"M-step after iteration {self.iteration}: kept {len(kept)}/{len(built)} "
            f"pseudo-pairs (eps={epsilon:.4f}), nll {report.rm_nll_before:.4f} -> "
            f"{report.rm_nll_after:.4f}"
        )
        self.result.rm = new_rm
        self.result.reward_models.append(new_rm)
        self.result.rm_rounds.append(keys[0])

    def execute(self) -> RunResult:
        cfg = self.cfg
        env = self.env
        self._record_metrics()
        for round_no in range(1, cfg.rounds + 1):
            self_training: List[PreferencePair] = []
            for t in range(1, cfg.iterations_per_round + 1):
                self.iteration += 1
                pi_prev = self.result.policy
                restart = (
                    round_no > 1 and t == 1 and cfg.round_init == "restart-from-base"
                )
                init = env.base_policy if restart else pi_prev
                prompts = self.prompt_sets[(t - 1) % len(self.prompt_sets)]
                dpo_cfg, invert = self._dpo_cfg()

                keys = (round_no, t)
                estep = e_step(
                    pi_prev,
                    self.result.rm,
                    prompts,
                    dpo_cfg,
                    env,
                    stage_rng(self.seed, "estep", *keys),
                    init=init,
                    invert_labels=invert,
                )
                if t == 1:
                    self_training = relabel_self_training(estep.pairs, env.base_rm)

                selection = self._select(estep.checkpoints, pi_prev, keys)
                report = IterationReport(
                    round=round_no,
                    iteration=self.iteration,
                    round_iteration=t,
                    estep_pairs=len(estep.pairs),
                    checkpoint_steps=[c.step for c in estep.checkpoints],
                    checkpoint_win_rates=selection.win_rates,
                    max_win_rate=max(selection.win_rates),
                    selected_step=selection.step,
                    halted=selection.halted,
                )
                self.result.reports.append(report)
                if selection.halted:
                    logger.info(
                        f"Iteration {self.iteration} halted: best win rate "
                        f"{selection.win:.3f} < tau {cfg.tau}"
                    )
                    return self.result

                logger.info(
                    f"Iteration {self.iteration}: selected step {selection.step} "
                    f"with win rate {selection.win:.3f}"
                )
                self.result.policy = selection.selected
                if selection.checkpoint is not None:
                    self.result.checkpoints.append(selection.checkpoint)
                if t in cfg.rm_update_after:
                    self._m_step(
                        report, selection.selected, pi_prev, self_training, keys
                    )
                self._record_metrics()
        return self.result

    def _select(
        self, checkpoints: List[Checkpoint], pi_prev: Policy, keys: Tuple[int, int]
    ) -> Selection:
        cfg = self.cfg
        rng = stage_rng(self.seed, "select", *keys)
        selection = select_model(
            checkpoints,
            pi_prev,
            self.result.rm,
            self.env.validation_split,
            cfg.tau,
            rng,
            cfg.dpo.sample_temperature,
        )
        if cfg.model_selection:
            return selection
        final = checkpoints[-1]
        win_rates = selection.win_rates
        return Selection(final.policy, False, win_rates[-1], win_rates, final)


def run(
    env: Environment,
    cfg: LoopConfig,
    seed: int,
    eval_cfg: Optional[EvalConfig] = None,
    prompt_sets: Optional[Sequence[Sequence[int]]] = None,
) -> RunResult:
    """Execute the full schedule.

    Args:
        env: World to train in
        cfg: Schedule and trainer settings
        seed: Run seed; every random draw derives from it
        eval_cfg: Evaluation settings; when transfer is enabled the round-1
            iterated reward model is compared with the base one
        prompt_sets: E-step prompt sets cycled through by within-round iteration;
            defaults to the two policy splits

    Returns:
        Final models, one report per policy iteration and the metric series
    """
    eval_cfg = eval_cfg or EvalConfig()
    result = _Run(env, cfg, seed, eval_cfg, prompt_sets).execute()
    if eval_cfg.transfer:
        iterated = result.round_rm(1)
        if iterated is None:
            logger.warning("Transfer evaluation skipped: round 1 never updated the RM")
        else:
            result.metrics.transfer = transfer_eval(
                iterated, env.base_rm, env, cfg.dpo, stage_rng(seed, "transfer")
            )
    return result
