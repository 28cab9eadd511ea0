"""Exception hierarchy shared by all nerlab modules.

The CLI maps these onto exit codes: configuration problems exit 4, data and
parse problems exit 3, I/O problems exit 2, anything else exits 1.
"""


class NerlabError(Exception):
    """Base class for all nerlab errors."""


class ShapeMismatchError(NerlabError):
    """Tensor operands do not conform; the message names both shapes."""


class ConfigurationError(NerlabError):
    """A config object violates one of its invariants."""


class ContractError(NerlabError):
    """A caller violated an operation precondition."""


class DegenerateInputError(NerlabError):
    """Mathematically degenerate input, e.g. a zero-norm vector."""


class OracleError(NerlabError):
    """A verification oracle could not be evaluated (non-finite function)."""


class LengthError(NerlabError):
    """A token sequence exceeds the model's maximum length."""


class DataFormatError(NerlabError):
    """Malformed corpus, record, or checkpoint data."""


class MarkerParseError(DataFormatError):
    """Unbalanced or malformed entity markers in generated text."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class SamplingError(DataFormatError):
    """An episode cannot be sampled from the given corpus."""
