"""Reading experiment files and writing run artifacts."""
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import pandas as pd
from pydantic import ValidationError

from mutual_taught.errors import ConfigError
from mutual_taught.schemas import (
    CheckpointRecord,
    EnvironmentRecord,
    ExperimentConfig,
    IterationRecord,
    PreferencePair,
    SeedStatus,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["seed", "method", "iteration", "metric", "value"]

CONFIG_ECHO = "config.echo.json"
ITERATIONS = "iterations.jsonl"
SUMMARY = "summary.csv"
STATUS = "status.json"
PAIRS = "pairs.jsonl"
SIGN_TESTS = "sign_tests.csv"


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Parse and validate a JSON or TOML experiment file.

    Raises:
        ConfigError: If the file is unreadable, malformed or fails validation
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    try:
        if path.suffix.lower() == ".toml":
            data: Dict[str, Any] = tomllib.loads(text)
        else:
            data = json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Malformed config {path}: {e}") from e
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}:\n{e}") from e


def prepare_output_dir(path: Union[str, Path]) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_config_echo(out: Path, cfg: ExperimentConfig) -> Path:
    """Fully defaulted config; re-running from it reproduces the run."""
    target = out / CONFIG_ECHO
    target.write_text(cfg.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return target


def write_jsonl(target: Path, records: Iterable[Any]) -> Path:
    with target.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.model_dump_json() + "\n")
    return target


def write_iterations(out: Path, records: Sequence[IterationRecord]) -> Path:
    return write_jsonl(out / ITERATIONS, records)


def write_pairs(out: Path, pairs: Sequence[PreferencePair]) -> Path:
    return write_jsonl(out / PAIRS, pairs)


def summary_frame(rows: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """Long-format summary, sorted so that equal runs give equal files."""
    frame = pd.DataFrame(list(rows))
    extra = [c for c in frame.columns if c not in SUMMARY_COLUMNS]
    frame = frame.reindex(columns=SUMMARY_COLUMNS[:2] + extra + SUMMARY_COLUMNS[2:])
    keys = [c for c in frame.columns if c != "value"]
    return frame.sort_values(keys, kind="mergesort").reset_index(drop=True)


def write_summary(out: Path, rows: Sequence[Dict[str, Any]]) -> Path:
    target = out / SUMMARY
    summary_frame(rows).to_csv(target, index=False, float_format="%.17g")
    return target


def write_sign_tests(out: Path, rows: List[Dict[str, Any]]) -> Path:
    target = out / SIGN_TESTS
    pd.DataFrame(rows).to_csv(target, index=False, float_format="%.17g")
    return target


def write_environment(out: Path, record: EnvironmentRecord, seed: int) -> Path:
    target = out / f"env-{seed}.json"
    target.write_text(record.model_dump_json(), encoding="utf-8")
    return target


def write_checkpoints(
    out: Path,
    records: Sequence[CheckpointRecord],
    seed: int,
    variant: Optional[str] = None,
) -> Path:
    """Selected checkpoints of one run, one line per accepted iteration."""
    name = str(seed) if variant is None else f"{seed}-{variant}"
    return write_jsonl(out / f"checkpoints-{name}.jsonl", records)


def write_status(out: Path, statuses: Sequence[SeedStatus]) -> Path:
    target = out / STATUS
    payload = {
        "complete": all(s.ok for s in statuses),
        "seeds": [s.model_dump() for s in statuses],
    }
    target.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return target
