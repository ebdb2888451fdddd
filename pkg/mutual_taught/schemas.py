"""Pydantic models for the Mutual-Taught lab: configurations and records."""
import math
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Annotation = Literal["bt-noise", "noise-free"]
PartitionScope = Literal["disjoint", "shared"]
PairSelection = Literal["length-controlled", "best-vs-worst"]
FilterStrategy = Literal["lqf", "hqs", "dst", "none"]
RmDataMode = Literal["policy-comparison", "self-training", "mixed"]
RoundInit = Literal["continue", "restart-from-base"]
Method = Literal["mutual-taught", "offline-dpo", "iter-dpo-fixed-rm"]
PairSource = Literal["annotation", "e-step", "self-training", "policy-comparison"]

MAX_SEED = 2**64


def largest_remainder(total: int, fractions: List[float]) -> List[int]:
    """Split ``total`` into integer parts proportional to ``fractions``.

    Floors every share, then hands the leftover units to the largest fractional
    remainders; equal remainders go to the lower index.
    """
    raw = [total * f for f in fractions]
    sizes = [int(math.floor(r)) for r in raw]
    leftover = total - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BtConfig(_Config):
    """Full-batch Bradley-Terry trainer settings."""

    learning_rate: float = Field(2.0, ge=0.0, description="Gradient step size")
    steps: int = Field(500, ge=1, description="Number of full-batch steps")
    l2_lambda: float = Field(
        1e-3, ge=0.0, description="L2 strength on the score table, scaled by 1/(P*R)"
    )


class DpoConfig(_Config):
    """DPO trainer and E-step sampling settings."""

    beta: float = Field(0.1, gt=0.0, description="DPO inverse temperature")
    learning_rate: float = Field(50.0, ge=0.0, description="Gradient step size")
    steps: int = Field(200, ge=1, description="Full-batch steps per E-step")
    checkpoint_every: int = Field(50, ge=1, description="Checkpoint cadence in steps")
    sample_temperature: float = Field(0.8, gt=0.0, description="Sampling temperature")
    samples_per_prompt: int = Field(16, ge=1, description="Candidates per prompt (M)")
    pair_selection: PairSelection = Field(
        "best-vs-worst", description="How chosen/rejected are picked"
    )

    @model_validator(mode="after")
    def check_cadence(self) -> "DpoConfig":
        """Checkpoints must fall inside the training run."""
        if self.checkpoint_every > self.steps:
            raise ValueError("checkpoint_every must not exceed steps")
        return self


class EnvConfig(_Config):
    """Synthetic alignment world."""

    num_prompts: int = Field(64, ge=1, description="Number of prompts (P)")
    num_responses: int = Field(32, ge=1, description="Responses per prompt (R)")
    reward_scale: float = Field(1.0, gt=0.0, description="Std of r* entries")
    pistar_temperature: float = Field(0.5, gt=0.0, description="Temperature of pi*")
    base_alignment: float = Field(
        0.5, ge=0.0, description="Weight of r* in the base policy logits"
    )
    base_noise_std: float = Field(0.5, ge=0.0, description="Base logit noise std")
    length_min: int = Field(10, ge=1, description="Shortest response length")
    length_max: int = Field(400, ge=1, description="Longest response length")
    length_reward_correlation: float = Field(
        0.0, ge=-1.0, le=1.0, description="Target rank correlation of length and r*"
    )
    init_rm_pairs_per_prompt: int = Field(
        8, ge=0, description="Annotated base-policy pairs per prompt (N0)"
    )
    annotation: Annotation = Field("bt-noise", description="Annotator model")
    partition_fractions: List[float] = Field(
        default_factory=lambda: [0.3, 0.3, 0.2, 0.2],
        description="Shares of D_1, D_2, D_R, D_MS",
    )
    partition_scope: PartitionScope = Field(
        "shared", description="Disjoint prompt splits or every role on every prompt"
    )
    rm_pretrain: BtConfig = Field(
        default_factory=lambda: BtConfig(learning_rate=20.0, steps=1000),
        description="Trainer used for the base reward model",
    )
    seed: int = Field(0, ge=0, lt=MAX_SEED, description="World seed")

    @field_validator("partition_fractions")
    @classmethod
    def check_fractions(cls, v: List[float]) -> List[float]:
        """Four nonnegative shares summing to one."""
        if len(v) != 4:
            raise ValueError("partition_fractions needs exactly four entries")
        if any(f < 0 for f in v):
            raise ValueError("partition fractions must be nonnegative")
        if abs(math.fsum(v) - 1.0) > 1e-12:
            raise ValueError("partition fractions must sum to 1")
        return v

    @model_validator(mode="after")
    def check_ranges(self) -> "EnvConfig":
        """Length bounds ordered; disjoint partitions all nonempty."""
        if self.length_min > self.length_max:
            raise ValueError("length_min must not exceed length_max")
        if self.partition_scope == "disjoint":
            sizes = largest_remainder(self.num_prompts, self.partition_fractions)
            if min(sizes) < 1:
                raise ValueError(f"empty partition with sizes {sizes}")
        return self


class DegradationConfig(_Config):
    """Induced-degradation harness for one policy iteration."""

    iteration: int = Field(..., ge=1, description="Global iteration to sabotage")
    learning_rate: float = Field(1e3, gt=0.0, description="Destructive step size")
    invert_labels: bool = Field(True, description="Swap chosen/rejected in the E-step")


class LoopConfig(_Config):
    """Mutual-Taught schedule."""

    iterations_per_round: int = Field(2, ge=1, description="Policy iterations (T)")
    rounds: int = Field(1, ge=1, description="Number of rounds")
    tau: float = Field(0.6, description="Validation win-rate threshold")
    filter: FilterStrategy = Field("lqf", description="Pseudo-pair curation")
    rm_data: RmDataMode = Field("mixed", description="Reward model training data")
    round_init: RoundInit = Field(
        "restart-from-base", description="How rounds after the first start"
    )
    rm_update_after: List[int] = Field(
        default_factory=lambda: [1],
        description="Within-round iterations followed by an M-step",
    )
    model_selection: bool = Field(True, description="Validation-based selection")
    degradation: Optional[DegradationConfig] = Field(
        None, description="Optional induced-degradation harness"
    )
    dpo: DpoConfig = Field(default_factory=DpoConfig)
    bt: BtConfig = Field(default_factory=BtConfig)

    @model_validator(mode="after")
    def check_schedule(self) -> "LoopConfig":
        """tau in [0.5, 1); M-step points inside the round."""
        if not 0.5 <= self.tau < 1.0:
            raise ValueError("tau must lie in [0.5, 1)")
        for t in self.rm_update_after:
            if not 1 <= t <= self.iterations_per_round:
                raise ValueError(f"rm_update_after entry {t} outside 1..T")
        return self


class EvalConfig(_Config):
    """Evaluation settings."""

    rm_accuracy_pairs: int = Field(2000, ge=1, description="Sampled pairs per RM check")
    length_bucket_width: int = Field(
        50, ge=1, description="Bucket width of the length-controlled win rate"
    )
    transfer: bool = Field(False, description="Run the RM transfer experiment")


class ExperimentConfig(_Config):
    """Everything one invocation needs; its dump is the config echo."""

    env: EnvConfig = Field(default_factory=EnvConfig)
    loop: LoopConfig = Field(default_factory=LoopConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    method: Method = Field("mutual-taught", description="Algorithm to run")
    seeds: List[int] = Field(default_factory=lambda: [0], description="Run seeds")
    output_dir: Optional[str] = Field(
        None, description="Artifact directory; OUTPUT_DIR when unset"
    )
    save_env: bool = Field(False, description="Also write env.json per seed")

    @field_validator("seeds")
    @classmethod
    def check_seeds(cls, v: List[int]) -> List[int]:
        """At least one 64-bit unsigned seed, no duplicates."""
        if not v:
            raise ValueError("at least one seed is required")
        if any(s < 0 or s >= MAX_SEED for s in v):
            raise ValueError("seeds must be 64-bit unsigned integers")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be unique")
        return v

    @model_validator(mode="after")
    def check_method(self) -> "ExperimentConfig":
        """Method-specific constraints."""
        if self.method != "mutual-taught" and self.eval.transfer:
            raise ValueError("transfer evaluation needs an iterated reward model")
        if self.method == "offline-dpo" and self.loop.degradation is not None:
            raise ValueError("offline-dpo has a single iteration to degrade")
        return self


class PreferencePair(BaseModel):
    """One preference comparison; the unit of all training data."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    prompt: int = Field(..., ge=0, description="Prompt id")
    chosen: int = Field(..., ge=0, description="Preferred response id")
    rejected: int = Field(..., ge=0, description="Dispreferred response id")
    source: PairSource = Field(..., description="Where the pair came from")
    margin: Optional[float] = Field(None, description="Reward margin, once computed")

    @model_validator(mode="after")
    def check_distinct(self) -> "PreferencePair":
        """A response is never compared with itself."""
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected must differ")
        return self

    def swapped(self) -> "PreferencePair":
        """Same pair with the labels exchanged (margin negated)."""
        margin = None if self.margin is None else -self.margin
        return self.model_copy(
            update={"chosen": self.rejected, "rejected": self.chosen, "margin": margin}
        )


class IterationReport(BaseModel):
    """Audit record of one policy iteration."""

    model_config = ConfigDict(extra="forbid")

    round: int = Field(..., ge=1)
    iteration: int = Field(..., ge=1, description="Global policy iteration index")
    round_iteration: int = Field(..., ge=1, description="Index inside the round")
    estep_pairs: int = Field(..., ge=0)
    checkpoint_steps: List[int] = Field(default_factory=list)
    checkpoint_win_rates: List[float] = Field(default_factory=list)
    max_win_rate: float = Field(..., ge=0.0, le=1.0)
    selected_step: Optional[int] = Field(None, description="None when halted")
    halted: bool = False
    rm_updated: bool = False
    pseudo_pairs_built: int = Field(0, ge=0)
    pseudo_pairs_kept: int = Field(0, ge=0)
    rm_data_size: int = Field(0, ge=0)
    epsilon: Optional[float] = Field(None, ge=0.0)
    rm_nll_before: Optional[float] = None
    rm_nll_after: Optional[float] = None

    @model_validator(mode="after")
    def check_counts(self) -> "IterationReport":
        """The filter never adds pairs."""
        if self.pseudo_pairs_kept > self.pseudo_pairs_built:
            raise ValueError("kept pairs exceed built pairs")
        return self


class IterationMetrics(BaseModel):
    """Evaluation of the models in force after an iteration (0 = base)."""

    model_config = ConfigDict(extra="forbid")

    iteration: int = Field(..., ge=0)
    expected_true_reward: float
    expected_rm_reward: float
    kl_to_pistar: float = Field(..., ge=0.0)
    true_win_vs_base: float = Field(..., ge=0.0, le=1.0)
    true_win_vs_base_lc: Optional[float] = Field(None, ge=0.0, le=1.0)
    rm_accuracy_id: Optional[float] = Field(None, ge=0.0, le=1.0)
    rm_accuracy_ood: Optional[float] = Field(None, ge=0.0, le=1.0)
    base_rm_accuracy_id: Optional[float] = Field(None, ge=0.0, le=1.0)


class TransferRecord(BaseModel):
    """A fresh policy trained once with each reward model."""

    model_config = ConfigDict(extra="forbid")

    fresh_base_reward: float
    base_rm_reward: float
    iterated_rm_reward: float
    reward_delta: float
    base_rm_win: float = Field(..., ge=0.0, le=1.0)
    iterated_rm_win: float = Field(..., ge=0.0, le=1.0)
    win_delta: float


class RunMetrics(BaseModel):
    """Per-iteration metric series plus optional transfer results."""

    model_config = ConfigDict(extra="forbid")

    series: List[IterationMetrics] = Field(default_factory=list)
    transfer: Optional[TransferRecord] = None

    def as_rows(self) -> List[Dict[str, object]]:
        """Long-format (iteration, metric, value) rows, undefined values skipped."""
        rows: List[Dict[str, object]] = []
        for point in self.series:
            for name, value in point.model_dump(exclude={"iteration"}).items():
                if value is not None:
                    rows.append(
                        {"iteration": point.iteration, "metric": name, "value": value}
                    )
        if self.transfer is not None and self.series:
            last = self.series[-1].iteration
            for name, value in self.transfer.model_dump().items():
                rows.append(
                    {"iteration": last, "metric": f"transfer_{name}", "value": value}
                )
        return rows


class PolicyRecord(BaseModel):
    """Serialized policy."""

    model_config = ConfigDict(extra="forbid")

    logits: List[List[float]]


class RewardModelRecord(BaseModel):
    """Serialized reward model."""

    model_config = ConfigDict(extra="forbid")

    scores: List[List[float]]
    l2_lambda: float


class CheckpointRecord(BaseModel):
    """Serialized checkpoint."""

    model_config = ConfigDict(extra="forbid")

    step: int
    loss: float
    policy: PolicyRecord


class EnvironmentRecord(BaseModel):
    """Serialized environment."""

    model_config = ConfigDict(extra="forbid")

    config: EnvConfig
    rstar: List[List[float]]
    lengths: List[List[int]]
    policy_split_1: List[int]
    policy_split_2: List[int]
    rm_split: List[int]
    validation_split: List[int]
    base_policy: PolicyRecord
    base_rm: RewardModelRecord


class IterationRecord(BaseModel):
    """One line of ``iterations.jsonl``."""

    model_config = ConfigDict(extra="forbid")

    seed: int
    method: Method
    variant: Optional[str] = Field(None, description="Ablation variant, if any")
    iteration: int = Field(..., ge=0)
    report: Optional[IterationReport] = None
    metrics: Optional[IterationMetrics] = None


class SeedStatus(BaseModel):
    """Completion flag of one seed, written to ``status.json``."""

    model_config = ConfigDict(extra="forbid")

    seed: int
    variant: Optional[str] = None
    ok: bool
    exit_code: int = 0
    error: Optional[str] = None
    env_fingerprint: Optional[str] = None
