"""Multi-seed experiment runner: methods, baselines and ablations."""
import logging
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from mutual_taught import storage
from mutual_taught.config import settings
from mutual_taught.env import Environment, build_environment
from mutual_taught.errors import (
    EXIT_OK,
    EXIT_VERIFICATION,
    MutualTaughtError,
    exit_code_for,
)
from mutual_taught.evaluation import paired_sign_test
from mutual_taught.loop import RunResult, run
from mutual_taught.schemas import (
    CheckpointRecord,
    EnvironmentRecord,
    ExperimentConfig,
    IterationRecord,
    LoopConfig,
    PreferencePair,
    SeedStatus,
)

logger = logging.getLogger(__name__)

ABLATION_AXES: Dict[str, List[str]] = {
    "filter": ["lqf", "hqs", "dst", "none"],
    "rm_data": ["mixed", "policy-comparison", "self-training"],
}
TREND_METRIC = "expected_true_reward"

Job = Tuple[ExperimentConfig, int, Optional[str]]


@dataclass
class SeedOutcome:
    """Results of one (seed, variant) run, ready to be merged."""

    status: SeedStatus
    records: List[IterationRecord] = field(default_factory=list)
    rows: List[Dict[str, Any]] = field(default_factory=list)
    env_record: Optional[EnvironmentRecord] = None
    checkpoints: List[CheckpointRecord] = field(default_factory=list)
    pairs: List[PreferencePair] = field(default_factory=list)

    def final_metric(self, name: str = TREND_METRIC) -> Optional[float]:
        values = [r for r in self.rows if r["metric"] == name]
        if not values:
            return None
        return float(max(values, key=lambda r: r["iteration"])["value"])


def method_schedule(
    cfg: ExperimentConfig, env: Environment
) -> Tuple[LoopConfig, Optional[List[List[int]]]]:
    """Loop settings and E-step prompt sets for ``cfg.method``.

    ``iter-dpo-fixed-rm`` spends the reward split on an extra policy iteration and
    never updates the reward model; ``offline-dpo`` is one unselected E-step over all
    policy prompts.
    """
    loop = cfg.loop
    if cfg.method == "mutual-taught":
        return loop, None
    if cfg.method == "iter-dpo-fixed-rm":
        schedule = loop.model_copy(
            update={
                "iterations_per_round": loop.iterations_per_round + 1,
                "rm_update_after": [],
            }
        )
        splits = [env.policy_split_1, env.policy_split_2, env.rm_split]
        return schedule, [list(s) for s in splits]
    policy_prompts = sorted(set(env.policy_split_1) | set(env.policy_split_2))
    schedule = loop.model_copy(
        update={
            "iterations_per_round": 1,
            "rounds": 1,
            "rm_update_after": [],
            "model_selection": False,
        }
    )
    return schedule, [policy_prompts]


def run_method(env: Environment, cfg: ExperimentConfig, seed: int) -> RunResult:
    schedule, prompt_sets = method_schedule(cfg, env)
    return run(env, schedule, seed, cfg.eval, prompt_sets)


def _records(
    result: RunResult, seed: int, cfg: ExperimentConfig, variant: Optional[str]
) -> List[IterationRecord]:
    metrics = {m.iteration: m for m in result.metrics.series}
    reports = {r.iteration: r for r in result.reports}
    return [
        IterationRecord(
            seed=seed,
            method=cfg.method,
            variant=variant,
            iteration=i,
            report=reports.get(i),
            metrics=metrics.get(i),
        )
        for i in sorted(set(metrics) | set(reports))
    ]


def run_seed(
    cfg: ExperimentConfig, seed: int, variant: Optional[str] = None
) -> SeedOutcome:
    """Build the seed's environment and run the configured method on it.

    Library errors are caught and reported in the outcome's status.
    """
    status = SeedStatus(seed=seed, variant=variant, ok=True)
    outcome = SeedOutcome(status=status)
    try:
        env = build_environment(cfg.env.model_copy(update={"seed": seed}))
        status.env_fingerprint = env.fingerprint()
        result = run_method(env, cfg, seed)
    except (MutualTaughtError, ValueError) as e:
        logger.error(f"Seed {seed} ({cfg.method}) failed: {e}", exc_info=True)
        status.ok = False
        status.exit_code = exit_code_for(e)
        status.error = str(e)
        return outcome

    outcome.records = _records(result, seed, cfg, variant)
    for row in result.metrics.as_rows():
        row.update({"seed": seed, "method": cfg.method})
        if variant is not None:
            row["variant"] = variant
        outcome.rows.append(row)
    if cfg.save_env:
        outcome.env_record = env.to_record()
        outcome.checkpoints = [c.to_record() for c in result.checkpoints]
    outcome.pairs = [p for data in result.rm_datasets for p in data]
    return outcome


def _run_job(job: Job) -> SeedOutcome:
    return run_seed(*job)


def run_jobs(jobs: Sequence[Job], workers: Optional[int] = None) -> List[SeedOutcome]:
    """Run every job, in a process pool when ``workers > 1``; input order kept."""
    workers = workers or settings.WORKERS
    progress = dict(total=len(jobs), desc="seeds", disable=not settings.SHOW_PROGRESS)
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(job) for job in tqdm(jobs, **progress)]
    with Pool(min(workers, len(jobs))) as pool:
        return list(tqdm(pool.imap(_run_job, jobs), **progress))


def _write_outcomes(
    out: Path, outcomes: Sequence[SeedOutcome], save_pairs: bool
) -> None:
    storage.write_iterations(out, [r for o in outcomes for r in o.records])
    storage.write_summary(out, [row for o in outcomes for row in o.rows])
    storage.write_status(out, [o.status for o in outcomes])
    written = set()
    for o in outcomes:
        if o.env_record is None:
            continue
        storage.write_checkpoints(out, o.checkpoints, o.status.seed, o.status.variant)
        if o.status.seed not in written:
            storage.write_environment(out, o.env_record, o.status.seed)
            written.add(o.status.seed)
    if save_pairs:
        storage.write_pairs(out, [p for o in outcomes for p in o.pairs])


def _exit_code(outcomes: Sequence[SeedOutcome]) -> int:
    failed = [o.status for o in outcomes if not o.status.ok]
    if not failed:
        return EXIT_OK
    logger.error(f"{len(failed)} of {len(outcomes)} runs failed; outputs are partial")
    return min(s.exit_code for s in failed)


def _output_dir(cfg: ExperimentConfig, out_dir: Optional[Path]) -> Path:
    return Path(out_dir or cfg.output_dir or settings.OUTPUT_DIR)


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: Optional[Path] = None,
    workers: Optional[int] = None,
    save_pairs: bool = False,
) -> int:
    """Run ``cfg.method`` for every seed and write the artifacts.

    Returns:
        Process exit code: 0 on success, else the code of the first failure kind
    """
    out = storage.prepare_output_dir(_output_dir(cfg, out_dir))
    storage.write_config_echo(out, cfg)
    outcomes = run_jobs([(cfg, seed, None) for seed in cfg.seeds], workers)
    _write_outcomes(out, outcomes, save_pairs)
    logger.info(f"Wrote {cfg.method} results for {len(cfg.seeds)} seeds to {out}")
    return _exit_code(outcomes)


def ablation_variants(
    cfg: ExperimentConfig, axis: str
) -> List[Tuple[str, ExperimentConfig]]:
    """One config per value of ``axis``, everything else held fixed."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis}")
    variants = []
    for value in ABLATION_AXES[axis]:
        loop = cfg.loop.model_copy(update={axis: value})
        variants.append((value, cfg.model_copy(update={"loop": loop})))
    return variants


def sign_test_rows(
    outcomes: Sequence[SeedOutcome], axis: str, metric: str = TREND_METRIC
) -> List[Dict[str, Any]]:
    """Paired sign tests of every variant against the axis reference variant."""
    reference = ABLATION_AXES[axis][0]
    finals: Dict[str, Dict[int, float]] = {}
    for o in outcomes:
        value = o.final_metric(metric)
        if o.status.ok and value is not None and o.status.variant is not None:
            finals.setdefault(o.status.variant, {})[o.status.seed] = value
    base = finals.get(reference, {})
    rows = []
    for variant in ABLATION_AXES[axis][1:]:
        other = finals.get(variant, {})
        seeds = sorted(set(base) & set(other))
        test = paired_sign_test([base[s] for s in seeds], [other[s] for s in seeds])
        rows.append(
            {
                "axis": axis,
                "reference": reference,
                "variant": variant,
                "metric": metric,
                "seeds": len(seeds),
                "reference_wins": test.wins,
                "reference_losses": test.losses,
                "ties": test.ties,
                "p_value": test.p_value,
            }
        )
    return rows


def _check_shared_environments(outcomes: Sequence[SeedOutcome]) -> bool:
    prints: Dict[int, set] = {}
    for o in outcomes:
        if o.status.env_fingerprint is not None:
            prints.setdefault(o.status.seed, set()).add(o.status.env_fingerprint)
    mismatched = [seed for seed, found in prints.items() if len(found) > 1]
    if mismatched:
        logger.error(f"Variants saw different environments for seeds {mismatched}")
    return not mismatched


def run_ablation(
    cfg: ExperimentConfig,
    axis: str,
    out_dir: Optional[Path] = None,
    workers: Optional[int] = None,
) -> int:
    """Run every variant of ``axis`` on every seed and write paired results."""
    if len(cfg.seeds) < settings.MIN_ABLATION_SEEDS:
        logger.warning(
            f"Ablation with {len(cfg.seeds)} seeds; at least "
            f"{settings.MIN_ABLATION_SEEDS} are recommended for sign tests"
        )
    out = storage.prepare_output_dir(_output_dir(cfg, out_dir))
    storage.write_config_echo(out, cfg)
    jobs: List[Job] = [
        (variant_cfg, seed, value)
        for seed in cfg.seeds
        for value, variant_cfg in ablation_variants(cfg, axis)
    ]
    outcomes = run_jobs(jobs, workers)
    _write_outcomes(out, outcomes, save_pairs=False)
    storage.write_sign_tests(out, sign_test_rows(outcomes, axis))
    if not _check_shared_environments(outcomes):
        return EXIT_VERIFICATION
    return _exit_code(outcomes)
