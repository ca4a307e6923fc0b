"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
machine-parsable prefix of its one-line error message.
"""


class DistilError(Exception):
    category = "error"


class DimensionError(DistilError, ValueError):
    category = "dimension-error"


class ParameterError(DistilError, ValueError):
    category = "parameter-error"


class ContractError(DistilError, ValueError):
    category = "contract-error"


class NonFiniteError(DistilError, FloatingPointError):
    category = "non-finite"


class InputError(DistilError, ValueError):
    category = "input-error"


class SelectorError(DistilError, ValueError):
    category = "selector-error"


class StrategyError(DistilError, ValueError):
    category = "strategy-error"


class SourceError(DistilError, FileNotFoundError):
    category = "source-error"


class CheckpointError(DistilError, ValueError):
    category = "checkpoint-error"


class ConfigParseError(DistilError, ValueError):
    category = "config-error"

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


class ConfigValidationError(DistilError, ValueError):
    category = "config-error"

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class CompositionError(DistilError, KeyError):
    category = "composition-error"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class PlanError(DistilError, ValueError):
    category = "plan-error"


class CatalogError(DistilError, KeyError):
    category = "catalog-error"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CombinationError(DistilError, ValueError):
    category = "combination-error"


class ChainError(DistilError, ValueError):
    category = "chain-error"


class PolicyError(DistilError, ValueError):
    category = "policy-error"


class SplitError(DistilError, ValueError):
    category = "split-error"


class CorrelationError(DistilError, ValueError):
    category = "undefined-correlation"


class DataError(DistilError, ValueError):
    category = "data-error"


class TrainingAborted(DistilError, RuntimeError):
    category = "training-aborted"
