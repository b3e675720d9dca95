"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage problems exit 1, data and format
problems exit 2, numerical failures exit 3.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""


class VocabularyError(ValueError):
    """An attribute or value index falls outside the vocabulary."""


class SamplingError(ValueError):
    """The dataset cannot support the requested triplet sampling."""


class FormatError(ValueError):
    """A file does not conform to its expected on-disk format."""


class ConfigError(ValueError):
    """A configuration or synthetic-data spec is internally inconsistent."""


class DegenerateVectorError(ArithmeticError):
    """Cosine similarity was asked for a vector with (near-)zero norm."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


class ExcludedQueryError(Exception):
    """A retrieval query has no relevant candidate; average precision is
    undefined for it.  Callers count these rather than treating them as 0."""


def dimension_error(op: str, *shapes) -> DimensionError:
    """Build a DimensionError naming the operation and every operand shape."""
    described = ", ".join(str(tuple(s)) for s in shapes)
    return DimensionError(f"{op}: incompatible shapes {described}")
