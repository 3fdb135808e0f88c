"""Shared exception types.

Every module raises from this small taxonomy so callers (and the CLI exit-code
mapping) can distinguish bad input data from internal numeric failures.
"""


class NregError(Exception):
    """Base class for all package errors."""


class DimensionError(NregError):
    """Operand shapes are incompatible for the requested operation."""


class VocabularyError(NregError):
    """A token or entity is outside the vocabulary where that is not allowed."""


class ConfigurationError(NregError):
    """An option value violates its documented domain."""


class ContractError(NregError):
    """A caller violated an operation precondition."""


class AlignmentError(NregError):
    """Original and template token sequences cannot be aligned.

    Carries both token lists so corpus problems can be reported per text.
    """

    def __init__(self, message, template_tokens=None, original_tokens=None):
        super().__init__(message)
        self.template_tokens = list(template_tokens) if template_tokens else []
        self.original_tokens = list(original_tokens) if original_tokens else []


class NumericError(NregError):
    """A non-finite value appeared where the computation requires finite ones."""
