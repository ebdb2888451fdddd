"""Exception hierarchy for the Mutual-Taught lab.

The CLI maps each class to a process exit code through :func:`exit_code_for`.
"""


class MutualTaughtError(Exception):
    """Base class for all lab errors."""


class ConfigError(MutualTaughtError):
    """Invalid configuration or environment construction."""


class TrainingDivergedError(MutualTaughtError):
    """A trainer produced a non-finite loss."""

    def __init__(self, trainer: str, step: int, loss: float):
        super().__init__(f"{trainer} diverged at step {step} (loss={loss})")
        self.trainer = trainer
        self.step = step
        self.loss = loss


class EmptyDataError(MutualTaughtError):
    """No usable preference pairs where at least one is required."""


class VerificationError(MutualTaughtError):
    """A numerical verification (gradient check) failed."""


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VERIFICATION = 3


def exit_code_for(exc: BaseException) -> int:
    """Process exit code for an error raised while running an experiment."""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, VerificationError):
        return EXIT_VERIFICATION
    return EXIT_RUNTIME
