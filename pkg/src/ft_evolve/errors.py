"""Exception hierarchy shared by every stage of the pipeline.

Each class name doubles as the rejection tag recorded in run reports, so
renaming a class changes the report vocabulary.
"""


class FTEvolveError(Exception):
    """Base class for all package errors."""

    @property
    def tag(self) -> str:
        return type(self).__name__


# -- postfix DSL -------------------------------------------------------------


class ExprError(FTEvolveError):
    pass


class UnknownToken(ExprError):
    pass


class FeatureOutOfRange(ExprError):
    pass


class StackUnderflow(ExprError):
    pass


class LeftoverOperands(ExprError):
    pass


class EmptySequence(ExprError):
    pass


class SequenceTooLong(ExprError):
    pass


class CombinationTooLong(ExprError):
    pass


# -- tables and execution ----------------------------------------------------


class TableError(FTEvolveError):
    pass


class MissingTarget(TableError):
    pass


class NonNumericCell(TableError):
    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"non-numeric cell {value!r} at row {row}, column {column!r}")
        self.row = row
        self.column = column
        self.value = value


class TooFewRows(TableError):
    pass


class InvalidDataset(TableError):
    pass


class ArityMismatch(TableError):
    pass


class LengthMismatch(FTEvolveError):
    pass


class DegenerateColumn(TableError):
    def __init__(self, message: str, combination_index: int):
        super().__init__(message)
        self.combination_index = combination_index


# -- evaluation --------------------------------------------------------------


class EvaluationError(FTEvolveError):
    pass


class EmptyInput(EvaluationError):
    pass


class ConstantActuals(EvaluationError):
    pass


class TooFewClassSamples(EvaluationError):
    pass


class EvaluationFailure(EvaluationError):
    pass


# -- library / refinement ----------------------------------------------------


class LibraryError(FTEvolveError):
    pass


class EmptySelection(LibraryError):
    pass


class InsufficientExperiences(LibraryError):
    pass


class UnverifiedExperience(LibraryError):
    pass


class PolicyUnavailable(FTEvolveError):
    pass


# -- generation policy -------------------------------------------------------


class PolicyError(FTEvolveError):
    pass


class NoSequenceFound(PolicyError):
    pass


class DisallowedOperator(PolicyError):
    pass


class EndpointUnreachable(PolicyError):
    pass


class AuthFailure(PolicyError):
    pass


class MalformedEndpointResponse(PolicyError):
    pass


class EmptyReport(FTEvolveError):
    pass
