"""
🚦 ERROR TAXONOMY
Exception classes raised across the toolkit and the exit codes the CLI maps them to
"""

from typing import Optional


class TaanpError(Exception):
    """Base class for every error raised by the toolkit"""


class ConfigError(TaanpError, ValueError):
    """Invalid configuration, schedule or rate"""


class ContractError(TaanpError, ValueError):
    """A caller violated an operation precondition"""


class DimensionError(ContractError):
    """Tensor shapes do not agree"""


class DomainError(TaanpError, ValueError):
    """Argument outside the mathematical domain of a function"""


class NumericError(TaanpError, RuntimeError):
    """NaN propagation or diverging optimization"""


class UndefinedMetricError(TaanpError, ValueError):
    """Metric is undefined on the given series (no valid entries, zero variance, ...)"""


class SkipEpisode(TaanpError):
    """Episode is unusable, e.g. every context observation is missing"""


class DatasetParseError(TaanpError, ValueError):
    """Dataset file does not conform to the schema"""

    def __init__(self, message: str, file: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[str] = None):
        self.file = file
        self.line = line
        self.column = column
        location = []
        if file:
            location.append(file)
        if line is not None:
            location.append(f"line {line}")
        if column:
            location.append(f"column '{column}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")


class IntegrityError(TaanpError, ValueError):
    """Dataset files disagree with each other (unknown ids, duplicates)"""


EXIT_OK = 0
EXIT_UNKNOWN = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def exit_code_for(exc: BaseException) -> int:
    """Map an exception onto the CLI exit-code classes"""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (OSError, DatasetParseError, IntegrityError)):
        return EXIT_IO
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_UNKNOWN
