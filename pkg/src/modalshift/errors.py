"""Exception hierarchy. CLI exit codes hang off these classes."""


class ModalShiftError(Exception):
    exit_code = 1


class ConfigError(ModalShiftError, ValueError):
    exit_code = 2


class DimensionError(ModalShiftError, ValueError):
    exit_code = 2


class ContractError(ModalShiftError, ValueError):
    exit_code = 2


class BudgetError(ModalShiftError, ValueError):
    exit_code = 2


class DegenerateInputError(ModalShiftError, ValueError):
    exit_code = 3


class IntegrityError(ModalShiftError):
    exit_code = 3


class NumericalError(ModalShiftError, ArithmeticError):
    exit_code = 4


class LengthError(ContractError):
    """Sequence longer than the model's positional table."""
